import filecmp
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pktseg.errors import GeometryOverflow, ValidationError
from pktseg.phantom import PhantomSpec, TISSUES, default_intensities, generate_cohort, generate_phantom, phantom_regions
from pktseg.preprocess import SeededRng
from pktseg.volume_io import SEQUENCES, load_manifest


def tiny_spec(**kw):
    base = dict(dims=(12, 12, 12), cavity_radius=(1.5, 2.0), rim_thickness=(1.0, 1.0),
                edema_extent=(1.0, 1.5), ventricle_radius=(1.0, 1.5), ventricle_probability=0.0)
    base.update(kw)
    return PhantomSpec(**base)


def small_spec(**kw):
    base = dict(dims=(32, 32, 32), cavity_radius=(4.0, 6.0), rim_thickness=(1.5, 2.5),
                edema_extent=(2.0, 3.0), ventricle_radius=(3.0, 4.0))
    base.update(kw)
    return PhantomSpec(**base)


def test_same_seed_bitwise_identical():
    a = generate_phantom(small_spec(), SeededRng(5))
    b = generate_phantom(small_spec(), SeededRng(5))
    for s in SEQUENCES:
        assert a.sequences[s].values.tobytes() == b.sequences[s].values.tobytes()
    assert np.array_equal(a.gtv.values, b.gtv.values)


def test_noise_free_values_equal_table():
    spec = small_spec(noise_sigma=0.0, edema_probability=0.0, ventricle_probability=0.0)
    regions = phantom_regions(spec, SeededRng(3))
    study = generate_phantom(spec, SeededRng(3))
    table = default_intensities()
    background = ~(regions["cavity"] | regions["rim"])
    for seq in SEQUENCES:
        v = study.sequences[seq].values
        assert np.all(v[regions["cavity"]] == np.float32(table["cavity"][seq]))
        assert np.all(v[regions["rim"]] == np.float32(table["rim"][seq]))
        assert np.all(v[background] == np.float32(table["background"][seq]))
    assert not regions["edema"].any() and not regions["ventricle"].any()


def test_edema_contrast_exact_without_noise():
    spec = small_spec(noise_sigma=0.0, edema_probability=1.0, ventricle_probability=0.0)
    regions = phantom_regions(spec, SeededRng(11))
    study = generate_phantom(spec, SeededRng(11))
    edema = regions["edema"]
    normal = ~(edema | regions["cavity"] | regions["rim"])
    assert edema.any()
    t2, fl, t1c = (study.sequences[s].values.astype(np.float64) for s in ("T2", "FL", "T1C"))
    # every voxel holds the stored table value, so float64 sums of them are exact
    contrast = float(np.float32(1.7)) - 1.0
    assert t2[edema].mean() - t2[normal].mean() == contrast
    assert fl[edema].mean() - fl[normal].mean() == contrast
    assert np.all(t1c[edema] == t1c[normal].mean())


@settings(max_examples=15)
@given(seed=st.integers(0, 10 ** 6), edema=st.sampled_from([0.0, 0.5, 1.0]))
def test_region_invariants(seed, edema):
    spec = small_spec(edema_probability=edema)
    regions = phantom_regions(spec, SeededRng(seed))
    gtv = regions["cavity"] | regions["rim"]
    assert gtv.any()
    assert not (regions["edema"] & gtv).any()
    assert not (regions["ventricle"] & (gtv | regions["edema"])).any()
    lo, hi = spec.gtv_fraction_bounds
    assert lo <= gtv.mean() <= hi
    study = generate_phantom(spec, SeededRng(seed))
    assert np.array_equal(study.gtv.values.astype(bool), gtv)


def test_geometry_overflow():
    with pytest.raises(GeometryOverflow):
        generate_phantom(small_spec(dims=(8, 8, 8)), SeededRng(0))


def test_spec_validation():
    with pytest.raises(ValidationError):
        small_spec(cavity_radius=(5.0, 2.0))
    table = default_intensities()
    del table["rim"]["T1C"]
    with pytest.raises(ValidationError):
        small_spec(intensities=table)


def test_spec_round_trip():
    spec = small_spec()
    assert PhantomSpec.from_dict(spec.to_dict()) == spec
    assert list(TISSUES) == ["background", "edema", "ventricle", "rim", "cavity"]


def test_cohort_82_studies_23_patients(tmp_path):
    manifest = generate_cohort(tiny_spec(), 82, 23, tmp_path, seed=18)
    assert len(manifest.entries) == 82
    patients = Counter(e.patient_id for e in manifest.entries)
    assert len(patients) == 23
    assert load_manifest(tmp_path / "manifest.json").study_ids == manifest.study_ids


def test_cohort_one_study_per_patient(tmp_path):
    manifest = generate_cohort(tiny_spec(), 5, 5, tmp_path, seed=1)
    assert sorted(Counter(e.patient_id for e in manifest.entries).values()) == [1] * 5


def test_cohort_rerun_byte_identical(tmp_path):
    generate_cohort(tiny_spec(), 6, 3, tmp_path / "a", seed=9)
    generate_cohort(tiny_spec(), 6, 3, tmp_path / "b", seed=9)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert cmp.left_list == cmp.right_list
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", cmp.left_list, shallow=False)
    assert not mismatch and not errors
    assert len(match) == 6 * 5 * 2 + 1  # json+raw per volume, plus the manifest


def test_cohort_needs_patients(tmp_path):
    with pytest.raises(ValidationError):
        generate_cohort(tiny_spec(), 3, 4, tmp_path)
