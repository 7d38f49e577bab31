"""Segmentation metrics (Dice, HD95, FPE, FNE), Wilcoxon signed-rank test and
Table-2 style summaries."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import CaseSetMismatch, EmptyDenominator, EmptyMask, GridMismatch, TooFewPairs

_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def _masks(S, T):
    s = np.asarray(getattr(S, "values", S)).astype(bool)
    t = np.asarray(getattr(T, "values", T)).astype(bool)
    if s.shape != t.shape:
        raise GridMismatch(f"mask grids differ: {s.shape} vs {t.shape}")
    if hasattr(S, "spacing_mm") and hasattr(T, "spacing_mm") and S.spacing_mm != T.spacing_mm:
        raise GridMismatch(f"mask spacings differ: {S.spacing_mm} vs {T.spacing_mm}")
    return s, t


def dice(S, T) -> float:
    """2|S n T| / (|S| + |T|); 1.0 when both masks are empty."""
    s, t = _masks(S, T)
    ns, nt = int(s.sum()), int(t.sum())
    if ns + nt == 0:
        return 1.0
    return 2 * int(np.logical_and(s, t).sum()) / (ns + nt)


def fpe(S, T) -> float:
    """|S \\ T| / |S|: share of predicted voxels that are false positives."""
    s, t = _masks(S, T)
    ns = int(s.sum())
    if ns == 0:
        raise EmptyDenominator("FPE is undefined for an empty prediction")
    return int(np.logical_and(s, ~t).sum()) / ns


def fne(S, T) -> float:
    """|T \\ S| / |T|: share of ground-truth voxels that were missed."""
    s, t = _masks(S, T)
    nt = int(t.sum())
    if nt == 0:
        raise EmptyDenominator("FNE is undefined for an empty ground truth")
    return int(np.logical_and(t, ~s).sum()) / nt


def surface_voxels(mask) -> np.ndarray:
    """Boolean map of foreground voxels with a background (or off-grid) face neighbour."""
    m = np.asarray(getattr(mask, "values", mask)).astype(bool)
    if not m.any():
        return np.zeros_like(m)
    interior = ndimage.binary_erosion(m, structure=_FACE_NEIGHBOURS, border_value=0)
    return m & ~interior


def directed_surface_distances(A, B, spacing_mm) -> np.ndarray:
    """Distance (mm) from each surface voxel of A to the nearest surface voxel of B."""
    sa, sb = surface_voxels(A), surface_voxels(B)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing_mm)
    return dist_to_b[sa]


def hd95(S, T, spacing_mm=None) -> float:
    """Symmetric 95th-percentile surface distance in mm.

    max(P95(d(S->T)), P95(d(T->S))) with linear interpolation between order
    statistics; distances run between surface voxel centres.
    """
    s, t = _masks(S, T)
    if spacing_mm is None:
        spacing_mm = getattr(S, "spacing_mm", (1.0, 1.0, 1.0))
    if not s.any() or not t.any():
        raise EmptyMask("HD95 needs two nonempty masks")
    d_st = directed_surface_distances(s, t, spacing_mm)
    d_ts = directed_surface_distances(t, s, spacing_mm)
    return float(max(np.percentile(d_st, 95), np.percentile(d_ts, 95)))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank

def _signed_ranks(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError("paired samples must be 1-D")
    d = d[d != 0]
    ranks = rankdata(np.abs(d))  # average ranks for ties
    return d, ranks


def _null_counts(ranks):
    """Number of sign patterns giving each value of 2*W+ (ranks are multiples of 1/2)."""
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts, doubled


def wilcoxon_signed_rank(paired_a, paired_b, exact_max_n=12):
    """Two-sided Wilcoxon signed-rank test.

    Zero differences are dropped and tied |differences| share average ranks.
    Returns (statistic, p) with statistic = min(W+, W-). For n <= 12 the p-value
    is exact over all 2^n sign patterns (via the counting distribution of W+);
    above that a normal approximation with tie and continuity corrections.
    """
    if len(paired_a) != len(paired_b):
        raise ValueError("paired samples must have equal length")
    d, ranks = _signed_ranks(paired_a, paired_b)
    n = len(d)
    if n < 5:
        raise TooFewPairs(f"{n} nonzero differences; at least 5 are needed")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= exact_max_n:
        counts, doubled = _null_counts(ranks)
        total = int(doubled.sum())
        w2 = int(round(2 * stat))
        values = np.arange(total + 1)
        extreme = np.minimum(values, total - values) <= w2
        p = int(counts[extreme].sum()) / 2 ** n
        return stat, min(1.0, p)
    mu = n * (n + 1) / 4
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - float(((tie_sizes ** 3) - tie_sizes).sum()) / 48
    if var <= 0:
        return stat, 1.0
    z = max(abs(w_plus - mu) - 0.5, 0.0) / math.sqrt(var)
    return stat, min(1.0, math.erfc(z / math.sqrt(2)))


def significance_label(p) -> str:
    if p is None:
        return "-"
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "NS"


# ---------------------------------------------------------------------------
# per-case rows and summaries

@dataclass
class MetricsRow:
    study_id: str
    dice: float
    hd95_mm: float | None
    fpe: float | None
    fne: float | None
    model: str = ""


def evaluate_case(study_id, pred, truth, spacing_mm, model="") -> MetricsRow:
    """All four metrics; undefined ones (empty denominators/masks) become None."""
    s, t = _masks(pred, truth)

    def guarded(fn, *args):
        try:
            return fn(*args)
        except (EmptyDenominator, EmptyMask):
            return None

    return MetricsRow(study_id, dice(s, t), guarded(hd95, s, t, spacing_mm),
                      guarded(fpe, s, t), guarded(fne, s, t), model)


@dataclass
class SummaryRow:
    model_name: str
    dice_mean: float
    dice_std: float
    dice_median: float
    hd95_mean: float
    hd95_std: float
    hd95_median: float
    dice_p: float | None = None
    hd95_p: float | None = None

    @property
    def dice_label(self):
        return significance_label(self.dice_p)

    @property
    def hd95_label(self):
        return significance_label(self.hd95_p)


def _stats(values):
    v = np.array([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan, math.nan
    return float(v.mean()), float(v.std()), float(np.median(v))


def _paired_p(rows, ref_rows, attr):
    a, b = [], []
    for r in rows:
        x, y = getattr(r, attr), getattr(ref_rows[r.study_id], attr)
        if x is not None and y is not None:
            a.append(x)
            b.append(y)
    try:
        return wilcoxon_signed_rank(a, b)[1]
    except TooFewPairs:
        return 1.0


def summarize(rows_by_model: dict, reference_model: str) -> list[SummaryRow]:
    """Mean/std (population)/median of Dice and HD95 per model plus Wilcoxon
    p-values against the reference model's paired cases."""
    if reference_model not in rows_by_model:
        raise CaseSetMismatch(f"reference model {reference_model!r} has no rows")
    ref = {r.study_id: r for r in rows_by_model[reference_model]}
    out = []
    for name, rows in rows_by_model.items():
        ids = [r.study_id for r in rows]
        if len(set(ids)) != len(ids) or set(ids) != set(ref):
            raise CaseSetMismatch(f"{name} was not evaluated on the reference case set")
        dm, ds, dmed = _stats(r.dice for r in rows)
        hm, hs, hmed = _stats(r.hd95_mm for r in rows)
        row = SummaryRow(name, dm, ds, dmed, hm, hs, hmed)
        if name != reference_model:
            row.dice_p = _paired_p(rows, ref, "dice")
            row.hd95_p = _paired_p(rows, ref, "hd95_mm")
        out.append(row)
    return out


def _fmt(x):
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{round(x, 4):g}"


GROUP_TITLES = {
    "BM": "A) Baseline models",
    "DM": "B) Double U-Net models",
    "EM": "C) Ensemble models",
}


def format_summary_markdown(summary: list[SummaryRow], reference_model: str | None = None) -> str:
    """Markdown summary tables, one per model family (A baseline, B double, C ensemble)."""
    groups: dict[str, list[SummaryRow]] = {}
    for row in summary:
        fam = row.model_name[:2] if row.model_name[:2] in GROUP_TITLES else "other"
        groups.setdefault(fam, []).append(row)
    lines = []
    for fam in [*GROUP_TITLES, "other"]:
        if fam not in groups:
            continue
        title = GROUP_TITLES.get(fam, "Other models")
        lines.append(f"### {title}")
        lines.append("")
        lines.append("| Model input | Dice Mean (Std) | Dice Median | Dice p-value "
                     "| HD95 Mean (Std) | HD95 Median | HD95 p-value |")
        lines.append("|---|---|---|---|---|---|---|")
        for r in groups[fam]:
            name = r.model_name + ("†" if r.model_name == reference_model else "")
            lines.append(
                f"| {name} | {_fmt(r.dice_mean)} ({_fmt(r.dice_std)}) | {_fmt(r.dice_median)} "
                f"| {r.dice_label} | {_fmt(r.hd95_mean)} ({_fmt(r.hd95_std)}) "
                f"| {_fmt(r.hd95_median)} | {r.hd95_label} |")
        lines.append("")
    lines.append("NS: not significant, p-value > 0.05; *, p-value < 0.05; "
                 "**, p-value < 0.01; ***, p-value < 0.001.")
    return "\n".join(lines) + "\n"


CSV_HEADER = ["study_id", "model", "dice", "hd95_mm", "fpe", "fne"]


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.study_id, r.model] + ["" if v is None else repr(float(v))
                                            for v in (r.dice, r.hd95_mm, r.fpe, r.fne)])
    return buf.getvalue()


def rows_from_csv(text) -> list[MetricsRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        def num(k):
            return float(rec[k]) if rec[k] != "" else None
        rows.append(MetricsRow(rec["study_id"], num("dice"), num("hd95_mm"),
                               num("fpe"), num("fne"), rec["model"]))
    return rows
