import os
import sys
from pathlib import Path

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("pktseg", max_examples=60, deadline=None)
settings.load_profile("pktseg")


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """Ten 32^3 phantoms for four patients."""
    from pktseg.phantom import PhantomSpec, generate_cohort

    out = tmp_path_factory.mktemp("cohort")
    spec = PhantomSpec(dims=(32, 32, 32), cavity_radius=(4.0, 6.0), rim_thickness=(1.5, 2.5),
                       edema_extent=(2.0, 3.0), ventricle_radius=(3.0, 4.0))
    manifest = generate_cohort(spec, 10, 4, out, seed=7)
    return out / "manifest.json", manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
