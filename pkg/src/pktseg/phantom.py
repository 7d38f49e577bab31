"""Synthetic post-operative studies with analytically known tissue regions.

Each phantom has a resection cavity (ellipsoid) wrapped in an enhancing rim
(the GTV is their union), optionally a shell of edema around the GTV and a
ventricle-like decoy elsewhere. Intensities come from a tissue x sequence table,
then additive Gaussian noise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import GeometryOverflow, IoFailure, ValidationError
from .preprocess import SeededRng
from .volume_io import (
    SEQUENCES,
    DatasetManifest,
    LabelMask,
    ManifestEntry,
    Study,
    Volume3D,
    save_manifest,
    save_volume,
)

TISSUES = ("background", "edema", "ventricle", "rim", "cavity")


def default_intensities():
    return {
        "background": {"T1": 1.0, "T2": 1.0, "T1C": 1.0, "FL": 1.0},
        "cavity": {"T1": 0.4, "T2": 1.8, "T1C": 0.3, "FL": 1.6},
        "rim": {"T1": 1.2, "T2": 1.2, "T1C": 2.0, "FL": 1.2},
        "edema": {"T1": 1.0, "T2": 1.7, "T1C": 1.0, "FL": 1.7},
        "ventricle": {"T1": 1.0, "T2": 1.9, "T1C": 1.0, "FL": 1.4},
    }


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    spacing_mm: float = 1.0
    cavity_radius: tuple = (5.0, 9.0)  # voxels, per-axis semi-axis range
    rim_thickness: tuple = (1.5, 3.0)
    edema_probability: float = 0.5
    edema_extent: tuple = (3.0, 7.0)  # shell thickness beyond the rim
    ventricle_probability: float = 0.5
    ventricle_radius: tuple = (4.0, 7.0)
    noise_sigma: float = 0.1
    gtv_fraction_bounds: tuple = (0.001, 0.20)
    intensities: dict = field(default_factory=default_intensities)
    seed: int = 18

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        for name in ("cavity_radius", "rim_thickness", "edema_extent", "ventricle_radius",
                     "gtv_fraction_bounds"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValidationError(f"{name} must be an increasing nonnegative range")
            setattr(self, name, (float(lo), float(hi)))
        for tissue in TISSUES:
            if tissue not in self.intensities:
                raise ValidationError(f"intensity table lacks tissue {tissue!r}")
            missing = set(SEQUENCES) - set(self.intensities[tissue])
            if missing:
                raise ValidationError(f"intensity table for {tissue} lacks {sorted(missing)}")

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        for k in ("cavity_radius", "rim_thickness", "edema_extent", "ventricle_radius",
                  "gtv_fraction_bounds"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _ellipsoid_radius(grid, center, semi_axes, rotation):
    """Normalized ellipsoidal radius (<= 1 inside) at every voxel."""
    rel = np.stack([g - c for g, c in zip(grid, center)], axis=-1)
    local = rel @ rotation
    return np.sqrt(((local / np.asarray(semi_axes)) ** 2).sum(axis=-1))


def _random_rotation(rng: SeededRng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def phantom_regions(spec: PhantomSpec, rng: SeededRng, max_tries: int = 50):
    """Boolean region maps {cavity, rim, edema, ventricle}, all pairwise disjoint."""
    dims = np.array(spec.dims)
    grid = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    margin_max = spec.cavity_radius[1] + spec.rim_thickness[1] + 1
    if np.any(dims < 2 * margin_max + 2):
        raise GeometryOverflow(f"cavity+rim of radius up to {margin_max} does not fit {tuple(dims)}")
    n_vox = int(np.prod(dims))
    for _ in range(max_tries):
        axes = rng.uniform(*spec.cavity_radius, size=3)
        rim = rng.uniform(*spec.rim_thickness)
        outer = axes.max() + rim + 1
        center = np.array([rng.uniform(outer, d - 1 - outer) for d in dims])
        rot = _random_rotation(rng)
        r_cav = _ellipsoid_radius(grid, center, axes, rot)
        cavity = r_cav <= 1.0
        rim_map = (_ellipsoid_radius(grid, center, axes + rim, rot) <= 1.0) & ~cavity
        gtv = cavity | rim_map
        frac = gtv.sum() / n_vox
        if not spec.gtv_fraction_bounds[0] <= frac <= spec.gtv_fraction_bounds[1]:
            continue
        edema = np.zeros_like(gtv)
        if rng.random() < spec.edema_probability:
            ext = rng.uniform(*spec.edema_extent, size=3)
            shift = rng.normal(scale=1.0, size=3)
            edema = (_ellipsoid_radius(grid, center + shift, axes + rim + ext, rot) <= 1.0) & ~gtv
        ventricle = np.zeros_like(gtv)
        if rng.random() < spec.ventricle_probability:
            placed = False
            for _ in range(max_tries):
                vax = rng.uniform(*spec.ventricle_radius, size=3)
                vr = vax.max() + 1
                vc = np.array([rng.uniform(vr, d - 1 - vr) for d in dims])
                cand = _ellipsoid_radius(grid, vc, vax, _random_rotation(rng)) <= 1.0
                if not (cand & (gtv | edema)).any() and cand.any():
                    ventricle = cand
                    placed = True
                    break
            if not placed:
                continue
        return {"cavity": cavity, "rim": rim_map, "edema": edema, "ventricle": ventricle}
    raise GeometryOverflow("could not place phantom regions within the configured bounds")


def generate_phantom(spec: PhantomSpec, rng: SeededRng, study_id="S00", patient_id="P00") -> Study:
    regions = phantom_regions(spec, rng)
    table = spec.intensities
    labels = np.zeros(spec.dims, dtype=np.int8)  # index into TISSUES
    for i, tissue in enumerate(TISSUES[1:], start=1):
        labels[regions[tissue]] = i
    sp = (spec.spacing_mm,) * 3
    sequences = {}
    for seq in SEQUENCES:
        lut = np.array([table[t][seq] for t in TISSUES], dtype=np.float64)
        vals = lut[labels]
        if spec.noise_sigma > 0:
            vals = vals + rng.normal(scale=spec.noise_sigma, size=vals.shape)
        sequences[seq] = Volume3D(spec.dims, sp, vals.astype(np.float32))
    gtv = LabelMask(spec.dims, sp, (regions["cavity"] | regions["rim"]).astype(np.uint8))
    return Study(study_id, patient_id, sequences, gtv)


def generate_cohort(spec: PhantomSpec, n_studies: int, n_patients: int, out_dir,
                    seed: int | None = None) -> DatasetManifest:
    """Write ``n_studies`` phantoms for ``n_patients`` patients plus ``manifest.json``.

    Each patient gets at least one study; the rest are spread randomly. Study
    ``i`` uses the stream derived from (cohort seed, i).
    """
    if not n_studies >= n_patients >= 1:
        raise ValidationError("need n_studies >= n_patients >= 1")
    cohort = SeededRng(spec.seed if seed is None else seed)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    assign_rng = cohort.derive(0xC0407)
    patients = list(range(n_patients)) + [int(p) for p in assign_rng.integers(0, n_patients, n_studies - n_patients)]
    patients = sorted(patients)
    sw = max(2, len(str(n_studies)))
    pw = max(2, len(str(n_patients)))
    entries = []
    for i, p in enumerate(patients):
        sid, pid = f"S{i + 1:0{sw}d}", f"P{p + 1:0{pw}d}"
        study = generate_phantom(spec, cohort.derive(i), sid, pid)
        paths = {}
        for seq, vol in study.sequences.items():
            stem = out / f"{sid}_{seq}"
            save_volume(vol, stem)
            paths[seq] = stem.with_suffix(".json")
        gtv_stem = out / f"{sid}_GTV"
        save_volume(study.gtv, gtv_stem)
        entries.append(ManifestEntry(sid, pid, paths, gtv_stem.with_suffix(".json")))
    manifest = DatasetManifest(entries, out.resolve())
    save_manifest(manifest, out / "manifest.json")
    return manifest
