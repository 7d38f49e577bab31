"""Volumes, masks, studies and dataset manifests, plus the raw+sidecar format.

A volume on disk is a pair ``<name>.json`` / ``<name>.raw``. The JSON sidecar
holds ``dims``, ``spacing_mm``, ``dtype`` ("f32le" or "u8") and ``order``
(always "x-fastest"); the raw file holds exactly nx*ny*nz little-endian samples
with x varying fastest and z slowest.

In memory, ``values`` is an ``(nx, ny, nz)`` array, so ``values[x, y, z]`` is
the voxel at that index and the x-fastest byte stream is ``values.ravel("F")``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateStudyId,
    HeaderMismatch,
    IoFailure,
    MissingFile,
    MissingSequenceFile,
    NonFiniteVoxel,
    ParseError,
    ValidationError,
)

SEQUENCES = ("T1", "T2", "T1C", "FL")
_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


def _triple(v, kind, name):
    t = tuple(kind(a) for a in v)
    if len(t) != 3:
        raise ValidationError(f"{name} must have 3 components, got {len(t)}")
    return t


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar grid with physical spacing. Values are read-only once built."""

    dims: tuple
    spacing_mm: tuple
    values: np.ndarray

    def __post_init__(self):
        dims = _triple(self.dims, int, "dims")
        spacing = _triple(self.spacing_mm, float, "spacing_mm")
        if min(dims) < 1:
            raise ValidationError(f"dims must be positive, got {dims}")
        if min(spacing) <= 0:
            raise ValidationError(f"spacing_mm must be positive, got {spacing}")
        values = np.array(self.values, dtype=self._dtype)
        if values.size != dims[0] * dims[1] * dims[2]:
            raise HeaderMismatch(
                f"{values.size} values do not fill a {dims} grid")
        values = values.reshape(dims)
        values.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "values", values)

    # NaN/Inf may exist in memory; load_volume and save_volume refuse them.
    _dtype = np.float32

    @property
    def shape(self):
        return self.dims

    def same_grid(self, other):
        return self.dims == other.dims and self.spacing_mm == other.spacing_mm

    def with_values(self, values):
        return type(self)(self.dims, self.spacing_mm, values)


class LabelMask(Volume3D):
    """Binary volume, 1 = GTV. Stored as uint8.

    Out-of-range labels are representable so that :func:`validate_study` can
    report them; every loader that hands a study downstream validates first.
    """

    _dtype = np.uint8

    @classmethod
    def from_bool(cls, mask, spacing_mm=(1.0, 1.0, 1.0)):
        mask = np.asarray(mask, dtype=bool)
        return cls(mask.shape, spacing_mm, mask.astype(np.uint8))

    @property
    def voxels(self):
        return self.values.astype(bool)


@dataclass(frozen=True, eq=False)
class Study:
    """One imaging timepoint: named sequences on a shared grid, optional GTV."""

    study_id: str
    patient_id: str
    sequences: dict
    gtv: LabelMask | None = None

    @property
    def dims(self):
        return self.sequences["T1C"].dims

    @property
    def spacing_mm(self):
        return self.sequences["T1C"].spacing_mm


def validate_study(study: Study) -> list[str]:
    """Return a list of invariant violations; empty means the study is usable."""
    problems = []
    for name in study.sequences:
        if name not in SEQUENCES:
            problems.append(f"unknown-sequence: {name!r} is not one of {SEQUENCES}")
    ref = study.sequences.get("T1C")
    if ref is None:
        problems.append("missing-T1C: T1C must always be present")
    for name, vol in study.sequences.items():
        if not isinstance(vol, Volume3D) or isinstance(vol, LabelMask):
            problems.append(f"bad-type: sequence {name} is not a Volume3D")
            continue
        if not np.all(np.isfinite(vol.values)):
            problems.append(f"non-finite: sequence {name} has NaN/Inf voxels")
        if ref is not None and name != "T1C" and not vol.same_grid(ref):
            problems.append(
                f"grid-mismatch: sequence {name} grid {vol.dims}@{vol.spacing_mm} "
                f"differs from T1C {ref.dims}@{ref.spacing_mm}")
    if study.gtv is not None:
        gtv = study.gtv
        vals = np.asarray(gtv.values)
        if vals.size and (vals.min() < 0 or vals.max() > 1):
            problems.append(
                f"label-range: gtv has values outside {{0,1}} "
                f"(found {sorted(set(np.unique(vals).tolist()) - {0, 1})})")
        if ref is not None and not gtv.same_grid(ref):
            problems.append(
                f"grid-mismatch: gtv grid {gtv.dims}@{gtv.spacing_mm} "
                f"differs from T1C {ref.dims}@{ref.spacing_mm}")
    return problems


# ---------------------------------------------------------------------------
# raw + sidecar files

def _stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def load_volume(path) -> Volume3D:
    """Read ``<stem>.json`` + ``<stem>.raw``.

    Returns a :class:`LabelMask` when the sidecar dtype is ``u8``.
    """
    stem = _stem(path)
    header_path, raw_path = stem.with_suffix(".json"), stem.with_suffix(".raw")
    for p in (header_path, raw_path):
        if not p.is_file():
            raise MissingFile(f"missing volume file {p}")
    try:
        header = json.loads(header_path.read_text())
        dims = _triple(header["dims"], int, "dims")
        spacing = _triple(header["spacing_mm"], float, "spacing_mm")
        dtype = _DTYPES[header.get("dtype", "f32le")]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad volume header {header_path}: {exc}") from exc
    if header.get("order", "x-fastest") != "x-fastest":
        raise ParseError(f"unsupported voxel order {header['order']!r}")
    payload = raw_path.read_bytes()
    n = dims[0] * dims[1] * dims[2]
    if len(payload) != n * dtype.itemsize:
        raise HeaderMismatch(
            f"{raw_path}: {len(payload)} bytes, header dims {dims} "
            f"need {n * dtype.itemsize}")
    flat = np.frombuffer(payload, dtype=dtype)
    values = flat.reshape(dims, order="F")
    if dtype == np.uint8:
        return LabelMask(dims, spacing, values)
    if not np.all(np.isfinite(values)):
        raise NonFiniteVoxel(f"{raw_path} contains NaN or Inf voxels")
    return Volume3D(dims, spacing, values.astype(np.float32))


def load_mask(path) -> LabelMask:
    vol = load_volume(path)
    if not isinstance(vol, LabelMask):
        vol = LabelMask(vol.dims, vol.spacing_mm, vol.values)
    return vol


def save_volume(vol: Volume3D, path) -> None:
    """Write ``vol`` as a sidecar + raw pair; ``load_volume`` inverts it bitwise."""
    if not np.all(np.isfinite(vol.values)):
        raise NonFiniteVoxel("refusing to save a volume with NaN/Inf voxels")
    stem = _stem(path)
    is_mask = isinstance(vol, LabelMask)
    dtype_name = "u8" if is_mask else "f32le"
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing_mm),
        "dtype": dtype_name,
        "order": "x-fastest",
    }
    data = np.asarray(vol.values, dtype=_DTYPES[dtype_name]).ravel(order="F")
    try:
        stem.with_suffix(".json").write_text(json.dumps(header) + "\n")
        stem.with_suffix(".raw").write_bytes(data.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write volume {stem}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifests

_MANIFEST_KEYS = {"T1": "t1", "T2": "t2", "T1C": "t1c", "FL": "fl"}


@dataclass(frozen=True)
class ManifestEntry:
    study_id: str
    patient_id: str
    sequences: dict  # sequence name -> absolute Path (absent when null)
    gtv: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: Path | None = None

    def __len__(self):
        return len(self.entries)

    @property
    def study_ids(self):
        return [e.study_id for e in self.entries]

    def entry(self, study_id):
        for e in self.entries:
            if e.study_id == study_id:
                return e
        raise KeyError(study_id)


def _volume_exists(path: Path) -> bool:
    stem = _stem(path)
    return stem.with_suffix(".json").is_file() and stem.with_suffix(".raw").is_file()


def load_manifest(path, require_gtv: bool = True) -> DatasetManifest:
    """Parse and validate a manifest; relative paths resolve against its folder."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise MissingFile(f"manifest {path} not found") from exc
    except (OSError, ValueError) as exc:
        raise ParseError(f"cannot parse manifest {path}: {exc}") from exc
    if not isinstance(doc, list):
        raise ParseError("manifest must be a JSON array of study objects")
    root = path.parent.resolve()
    entries, seen = [], set()
    for i, item in enumerate(doc):
        if not isinstance(item, dict) or "study_id" not in item:
            raise ParseError(f"manifest entry {i} is not a study object")
        sid = str(item["study_id"])
        if sid in seen:
            raise DuplicateStudyId(f"study_id {sid!r} appears more than once")
        seen.add(sid)
        seqs = {}
        for name, key in _MANIFEST_KEYS.items():
            rel = item.get(key)
            if rel is None:
                if name == "T1C":
                    raise MissingSequenceFile(f"{sid}: the t1c path is mandatory")
                continue
            p = (root / rel) if not os.path.isabs(rel) else Path(rel)
            if not _volume_exists(p):
                raise MissingSequenceFile(f"{sid}: {key} file {p} does not exist")
            seqs[name] = p
        gtv = item.get("gtv")
        if gtv is None:
            if require_gtv:
                raise MissingSequenceFile(f"{sid}: gtv path is required")
            gtv_path = None
        else:
            gtv_path = (root / gtv) if not os.path.isabs(gtv) else Path(gtv)
            if not _volume_exists(gtv_path):
                raise MissingSequenceFile(f"{sid}: gtv file {gtv_path} does not exist")
        entries.append(ManifestEntry(sid, str(item.get("patient_id", sid)), seqs, gtv_path))
    return DatasetManifest(entries, root)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        if p is None:
            return None
        try:
            return Path(p).resolve().relative_to(base).as_posix()
        except ValueError:
            return str(p)

    doc = []
    for e in manifest.entries:
        item = {"study_id": e.study_id, "patient_id": e.patient_id}
        for name, key in _MANIFEST_KEYS.items():
            item[key] = rel(e.sequences.get(name))
        item["gtv"] = rel(e.gtv)
        doc.append(item)
    try:
        path.write_text(json.dumps(doc, indent=1) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def load_study(entry: ManifestEntry) -> Study:
    seqs = {name: load_volume(p) for name, p in entry.sequences.items()}
    gtv = load_mask(entry.gtv) if entry.gtv is not None else None
    study = Study(entry.study_id, entry.patient_id, seqs, gtv)
    problems = validate_study(study)
    if problems:
        raise ValidationError(f"study {entry.study_id}: " + "; ".join(problems))
    return study
