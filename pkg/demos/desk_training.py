"""
Training at desk scale
======================

A small cohort, two baselines and their ensemble, scored on the held-out
fold and summarised the same way as the full ablation grid. Takes a few
minutes on one core; the acceptance tests run the real desk preset.
"""

import tempfile
from pathlib import Path

from pktseg.harness import desk_preset
from pktseg.harness.ablation import grid_configs, run_ablation_grid
from pktseg.phantom import PhantomSpec, generate_cohort

work = Path(tempfile.mkdtemp(prefix="pktseg_demo_"))
spec = PhantomSpec(dims=(32, 32, 32), cavity_radius=(4.0, 6.0), rim_thickness=(1.5, 2.5),
                   edema_extent=(2.0, 3.0), ventricle_radius=(3.0, 4.0), edema_probability=1.0)
generate_cohort(spec, 24, 8, work / "cohort", seed=18)

base = desk_preset(
    manifest=str(work / "cohort" / "manifest.json"), output_dir=str(work / "runs"),
    target_dims=[32, 32, 32], inference_patch_size=32, epochs=6, channels=4,
    grid=["BM[T1,T2,T1C,FL]", "BM[T1C]", "BM[T1C,FL]", "EM[T1C,FL + T1C]"],
)
report = run_ablation_grid(grid_configs(base), "BM[T1,T2,T1C,FL]", work / "runs")
print(report.markdown)
print(f"per-case rows: {report.per_case_csv}")
