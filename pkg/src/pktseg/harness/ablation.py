"""BM / DM / EM ablation grid with pooled per-case rows and a Table-2 style report."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from ..architectures import ensemble_members, parse_model_name
from ..errors import MissingDependency, ValidationError
from ..metrics import format_summary_markdown, rows_from_csv, rows_to_csv, summarize
from .config import ExperimentConfig
from .training import CHECKPOINT_NAME, StudyCache, evaluate, train

PER_CASE_NAME = "per_case.csv"
SUMMARY_NAME = "summary.md"
_FAMILY_ORDER = {"BM": 0, "DM": 1, "EM": 2}


def grid_configs(base: ExperimentConfig, names=None) -> list:
    """One config per model name (``base.grid`` by default, else ``base`` alone)."""
    names = list(names if names is not None else base.grid) or [base.name]
    return [base.for_model(n) for n in names]


def fold_list(config: ExperimentConfig):
    return list(config.fold_indices) if config.fold_indices is not None else list(range(config.folds))


@dataclass
class AblationReport:
    rows_by_model: dict = field(default_factory=dict)
    summary: list = field(default_factory=list)
    markdown: str = ""
    per_case_csv: Path | None = None
    summary_path: Path | None = None


def _shared(configs):
    keys = ("manifest", "folds", "split_ratios", "seed", "group_by_patient", "fold_indices",
            "target_spacing_mm", "target_dims")
    first = configs[0]
    for c in configs[1:]:
        for k in keys:
            if getattr(c, k) != getattr(first, k):
                raise ValidationError(f"grid configs disagree on {k}: {getattr(first, k)} vs {getattr(c, k)}")


def run_ablation_grid(configs, reference: str = "BM[T1,T2,T1C,FL]", out_dir=None,
                      cache: StudyCache | None = None, retrain: bool = False,
                      progress=None) -> AblationReport:
    """Train and evaluate every config over its folds, then summarize.

    BM and DM configs are trained (or reused when a checkpoint exists and
    ``retrain`` is false) before EM configs, which only combine their BM
    members' checkpoints. Rows are pooled over folds per model.
    """
    configs = list(configs)
    if not configs:
        raise ValidationError("empty ablation grid")
    _shared(configs)
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate model names in grid")
    if reference not in names:
        raise ValidationError(f"reference model {reference} is not in the grid")
    cache = cache or StudyCache.for_config(configs[0])
    out = Path(out_dir) if out_dir is not None else Path(configs[0].output_dir)
    out.mkdir(parents=True, exist_ok=True)

    ordered = sorted(configs, key=lambda c: _FAMILY_ORDER[c.family])
    rows_by_model = {}
    for cfg in ordered:
        rows = []
        for fold in fold_list(cfg):
            if cfg.family == "EM":
                for member in ensemble_members(cfg.name):
                    if not (cfg.for_model(member).run_dir(fold) / CHECKPOINT_NAME).is_file():
                        raise MissingDependency(
                            f"{cfg.name} needs {member} trained on fold {fold} before it can be evaluated")
            else:
                ckpt = cfg.run_dir(fold) / CHECKPOINT_NAME
                if retrain or not ckpt.is_file():
                    if progress:
                        progress(f"train {cfg.name} fold {fold}")
                    train(cfg, fold, cache)
            if progress:
                progress(f"evaluate {cfg.name} fold {fold}")
            rows += evaluate(None, fold, cfg, cache)
        rows_by_model[cfg.name] = rows

    # report rows in the grid's own order
    rows_by_model = {n: rows_by_model[n] for n in names}
    return write_report(rows_by_model, reference, out)


def write_report(rows_by_model: dict, reference: str, out_dir) -> AblationReport:
    out = Path(out_dir)
    summary = summarize(rows_by_model, reference)
    md = format_summary_markdown(summary, reference)
    all_rows = [r for rows in rows_by_model.values() for r in rows]
    csv_path, md_path = out / PER_CASE_NAME, out / SUMMARY_NAME
    csv_path.write_text(rows_to_csv(all_rows))
    md_path.write_text(md)
    return AblationReport(rows_by_model, summary, md, csv_path, md_path)


def report_from_csv(csv_path, reference: str, out_dir=None) -> AblationReport:
    """Re-render the summary from a per-case CSV written by an earlier run."""
    rows = rows_from_csv(Path(csv_path).read_text())
    rows_by_model = {}
    for r in rows:
        parse_model_name(r.model)
        rows_by_model.setdefault(r.model, []).append(r)
    out = Path(out_dir) if out_dir is not None else Path(csv_path).parent
    out.mkdir(parents=True, exist_ok=True)
    return write_report(rows_by_model, reference, out)
