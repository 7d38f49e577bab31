"""Everything between stored volumes and network tensors.

Normalization, isotropic resampling, random patch extraction and sliding-window
reassembly of patch predictions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ChannelMismatch, MissingSequence, PatchLargerThanVolume, ValidationError, ZeroVariance
from .volume_io import LabelMask, Study, Volume3D


class SeededRng:
    """Deterministic random stream: NumPy's PCG64 bit generator seeded with a
    64-bit integer. PCG64 output is platform independent, so the same seed gives
    the same draws everywhere.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, *keys: int) -> "SeededRng":
        """Child stream for (seed, *keys); independent of draws made so far."""
        ss = np.random.SeedSequence([self.seed, *[int(k) for k in keys]])
        return SeededRng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)


def zscore_normalize(vol: Volume3D) -> Volume3D:
    """(v - mean) / std with the population (divisor N) standard deviation."""
    v = np.asarray(vol.values, dtype=np.float64)
    if v.size < 2:
        raise ValidationError("z-scoring needs at least 2 voxels")
    mean = v.mean()
    std = np.sqrt(np.mean((v - mean) ** 2))
    if not std > 0:
        raise ZeroVariance("constant volume has zero variance")
    return vol.with_values(((v - mean) / std).astype(np.float32))


def _interp_axis(a: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``a`` along ``axis`` at fractional ``coords``
    (in source index units, clamped to the valid range)."""
    n = a.shape[axis]
    c = np.clip(coords, 0.0, n - 1)
    lo = np.floor(c).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = c - lo
    shape = [1] * a.ndim
    shape[axis] = -1
    frac = frac.reshape(shape)
    a_lo = np.take(a, lo, axis=axis)
    a_hi = np.take(a, hi, axis=axis)
    return a_lo * (1.0 - frac) + a_hi * frac


def resample_isotropic(vol: Volume3D, target_spacing_mm: float, target_dims) -> Volume3D:
    """Trilinear resampling onto an isotropic grid.

    Voxel ``i`` of either grid has its center at ``i * spacing`` on each axis
    (shared physical origin at voxel 0). Samples beyond the source extent take
    the nearest edge value.
    """
    t = float(target_spacing_mm)
    dims = tuple(int(d) for d in target_dims)
    if t <= 0 or len(dims) != 3 or min(dims) < 1:
        raise ValidationError("target spacing and dims must be positive")
    if dims == vol.dims and all(s == t for s in vol.spacing_mm):
        return Volume3D(dims, (t, t, t), vol.values)
    out = np.asarray(vol.values, dtype=np.float64)
    # trilinear interpolation is separable: one linear pass per axis
    for axis in range(3):
        coords = np.arange(dims[axis], dtype=np.float64) * t / vol.spacing_mm[axis]
        out = _interp_axis(out, axis, coords)
    return Volume3D(dims, (t, t, t), out.astype(np.float32))


def preprocess_study(study: Study, target_spacing_mm=None, target_dims=None) -> Study:
    """Resample (when a target grid is given), then z-score every sequence.

    The GTV is resampled with nearest-neighbour lookup so it stays binary.
    """
    seqs = {}
    gtv = study.gtv
    for name, vol in study.sequences.items():
        if target_spacing_mm is not None:
            vol = resample_isotropic(vol, target_spacing_mm, target_dims)
        seqs[name] = zscore_normalize(vol)
    if gtv is not None and target_spacing_mm is not None:
        t = float(target_spacing_mm)
        dims = tuple(int(d) for d in target_dims)
        if not (dims == gtv.dims and all(s == t for s in gtv.spacing_mm)):
            idx = [np.clip(np.rint(np.arange(dims[a]) * t / gtv.spacing_mm[a]), 0,
                           gtv.dims[a] - 1).astype(np.intp) for a in range(3)]
            vals = gtv.values[np.ix_(*idx)]
            gtv = LabelMask(dims, (t, t, t), vals)
        else:
            gtv = LabelMask(dims, (t, t, t), gtv.values)
    return Study(study.study_id, study.patient_id, seqs, gtv)


# ---------------------------------------------------------------------------
# patches

@dataclass(frozen=True)
class Patch:
    origin: tuple
    size: int
    channels: np.ndarray  # (len(subsets), size, size, size) float32
    label: np.ndarray | None = None  # (size, size, size) uint8


def stack_sequences(study: Study, subsets) -> np.ndarray:
    missing = [s for s in subsets if s not in study.sequences]
    if missing:
        raise MissingSequence(f"study {study.study_id} lacks {missing}")
    return np.stack([np.asarray(study.sequences[s].values, dtype=np.float32)
                     for s in subsets])


def sample_patches(study: Study, subsets, n: int, size: int, rng: SeededRng,
                   foreground_fraction: float = 0.0) -> list[Patch]:
    """Draw ``n`` cubic patches with origins uniform over all valid corners.

    With ``foreground_fraction > 0`` that share of patches is instead centred
    (up to a uniform jitter) on a random GTV voxel; the default keeps the
    sampler unbiased.
    """
    data = stack_sequences(study, subsets)
    dims = np.array(study.dims)
    if np.any(dims < size):
        raise PatchLargerThanVolume(f"patch {size} exceeds volume dims {tuple(dims)}")
    hi = dims - size
    label = None if study.gtv is None else np.asarray(study.gtv.values)
    fg = None
    patches = []
    for _ in range(n):
        if foreground_fraction > 0 and label is not None and rng.random() < foreground_fraction:
            if fg is None:
                fg = np.argwhere(label > 0)
            if len(fg):
                v = fg[rng.integers(0, len(fg))]
                lo = np.maximum(v - size + 1, 0)
                up = np.minimum(v, hi)
                origin = np.array([rng.integers(lo[a], up[a] + 1) for a in range(3)])
            else:
                origin = np.array([rng.integers(0, hi[a] + 1) for a in range(3)])
        else:
            origin = np.array([rng.integers(0, hi[a] + 1) for a in range(3)])
        x, y, z = (int(o) for o in origin)
        sl = (slice(x, x + size), slice(y, y + size), slice(z, z + size))
        patches.append(Patch(
            origin=(x, y, z),
            size=size,
            channels=np.ascontiguousarray(data[(slice(None),) + sl]),
            label=None if label is None else np.ascontiguousarray(label[sl]),
        ))
    return patches


# ---------------------------------------------------------------------------
# sliding-window inference

def window_origins(n: int, patch_size: int, stride: int) -> list[int]:
    """Window starts along one axis: every multiple of ``stride`` below ``n``.

    Windows that would run past the end are clamped to the boundary (their
    out-of-volume part is padded for the forward pass and discarded).
    """
    return list(range(0, n, stride)) if n > patch_size else [0]


def window_lattice(dims, patch_size: int, stride: int) -> list[tuple]:
    axes = [window_origins(d, patch_size, stride) for d in dims]
    return [(x, y, z) for x in axes[0] for y in axes[1] for z in axes[2]]


def _group_subsets(model, subsets):
    groups = [list(g) for g in model.input_groups]
    if subsets is None:
        return groups
    subsets = list(subsets)
    if subsets and isinstance(subsets[0], str):
        subsets = [subsets]
    subsets = [list(g) for g in subsets]
    if len(subsets) != len(groups) or any(len(a) != len(b) for a, b in zip(subsets, groups)):
        raise ChannelMismatch(
            f"model expects input channels {[len(g) for g in groups]}, "
            f"got subsets {subsets}")
    return subsets


def sliding_window_predict(model, study: Study, subsets=None, patch_size: int = 64,
                           stride: int | None = None, batch_size: int = 4) -> np.ndarray:
    """Whole-volume class probabilities, shape ``(num_classes, nx, ny, nz)``.

    ``model`` needs ``input_groups`` (one sequence list per network input) and
    ``predict(list_of_arrays) -> (B, K, p, p, p)`` softmax. Every voxel gets the
    uniform average of all windows covering it.
    """
    if stride is None:
        stride = max(1, patch_size // 2)
    if not 1 <= stride <= patch_size:
        raise ValidationError(f"stride must lie in [1, {patch_size}], got {stride}")
    groups = _group_subsets(model, subsets)
    arrays = [stack_sequences(study, g) for g in groups]
    dims = study.dims
    if any(d < patch_size for d in dims):
        raise PatchLargerThanVolume(f"patch {patch_size} exceeds volume dims {dims}")
    origins = window_lattice(dims, patch_size, stride)
    need = [max(o + patch_size for o in window_origins(d, patch_size, stride)) for d in dims]
    pad = [(0, 0)] + [(0, need[a] - dims[a]) for a in range(3)]
    if any(p[1] for p in pad):
        arrays = [np.pad(a, pad, mode="edge") for a in arrays]

    acc = None
    count = np.zeros(dims, dtype=np.float32)
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        batch = [np.stack([a[:, x:x + patch_size, y:y + patch_size, z:z + patch_size]
                           for (x, y, z) in chunk]) for a in arrays]
        probs = np.asarray(model.predict(batch))
        if acc is None:
            acc = np.zeros((probs.shape[1],) + tuple(dims), dtype=np.float64)
        for (x, y, z), p in zip(chunk, probs):
            ex, ey, ez = (min(patch_size, d - o) for d, o in zip(dims, (x, y, z)))
            acc[:, x:x + ex, y:y + ey, z:z + ez] += p[:, :ex, :ey, :ez]
            count[x:x + ex, y:y + ey, z:z + ez] += 1
    return (acc / count).astype(np.float32)


def coverage_counts(dims, patch_size: int, stride: int) -> np.ndarray:
    """Number of windows covering each voxel (diagnostic for the lattice)."""
    count = np.zeros(dims, dtype=np.int64)
    for x, y, z in window_lattice(dims, patch_size, stride):
        count[x:x + patch_size, y:y + patch_size, z:z + patch_size] += 1
    return count
