"""``pktseg`` command line: phantoms, preprocessing, splits, training, evaluation,
the ablation grid, reports and the gradient suite.

Exit codes: 0 success, 1 invalid input (bad config, flags, unknown subcommand),
2 runtime failure (including a failed gradient check).
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..errors import PktsegError, UnknownSubcommand, ValidationError
from ..metrics import rows_to_csv
from ..phantom import PhantomSpec, generate_cohort
from ..preprocess import preprocess_study
from ..volume_io import DatasetManifest, ManifestEntry, load_manifest, load_study, save_manifest, save_volume
from .ablation import PER_CASE_NAME, fold_list, grid_configs, report_from_csv, run_ablation_grid
from .config import desk_preset, load_config
from .training import StudyCache, evaluate, fold_assignment, train

SUBCOMMANDS = ("generate-phantoms", "preprocess", "split", "train", "evaluate", "ablate",
               "report", "gradcheck")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def build_parser():
    parser = _Parser(prog="pktseg", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="experiment config JSON (desk preset when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output location")
        return p

    command("generate-phantoms", "write a synthetic cohort and its manifest (into --out or the manifest's folder)")
    command("preprocess", "resample and z-score every study into <out>/preprocessed")
    command("split", "write the fold assignment to <out>/folds.json")
    p = command("train", "train one fold (or the configured folds)")
    p.add_argument("--fold", type=int)
    p = command("evaluate", "score a trained model on held-out test studies")
    p.add_argument("--fold", type=int)
    p.add_argument("--checkpoint", help="checkpoint file (default: the run directory's)")
    command("ablate", "train/evaluate the configured grid and write per_case.csv + summary.md")
    p = command("report", "re-render summary.md from a per-case CSV")
    p.add_argument("--input", help="per-case CSV (default <out>/per_case.csv)")
    p = command("gradcheck", "finite-difference check of every differentiable op and both networks")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32",
                   help="float32 (default) compares float32 analytic gradients with float64 "
                        "differences; float64 checks every coordinate at full precision")
    return parser


def _config(args):
    cfg = load_config(args.config) if args.config else desk_preset()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None and args.command not in ("generate-phantoms",):
        cfg = replace(cfg, output_dir=args.out)
    if getattr(args, "fold", None) is not None:
        if not 0 <= args.fold < cfg.folds:
            raise ValidationError(f"--fold {args.fold} outside 0..{cfg.folds - 1}")
        cfg = replace(cfg, fold_indices=[args.fold])
    return cfg


def cmd_generate_phantoms(args, cfg, say):
    spec = PhantomSpec.from_dict(cfg.phantom) if cfg.phantom else PhantomSpec()
    out = Path(args.out) if args.out else Path(cfg.manifest).parent
    manifest = generate_cohort(spec, cfg.n_studies, cfg.n_patients, out, seed=cfg.seed)
    say(f"wrote {len(manifest)} studies to {out / 'manifest.json'}")


def cmd_preprocess(args, cfg, say):
    manifest = load_manifest(cfg.manifest)
    out = Path(cfg.output_dir) / "preprocessed"
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for entry in manifest.entries:
        study = preprocess_study(load_study(entry), cfg.target_spacing_mm, cfg.target_dims)
        paths = {}
        for seq, vol in study.sequences.items():
            save_volume(vol, out / f"{study.study_id}_{seq}")
            paths[seq] = out / f"{study.study_id}_{seq}.json"
        gtv = None
        if study.gtv is not None:
            save_volume(study.gtv, out / f"{study.study_id}_GTV")
            gtv = out / f"{study.study_id}_GTV.json"
        entries.append(ManifestEntry(study.study_id, study.patient_id, paths, gtv))
    save_manifest(DatasetManifest(entries, out.resolve()), out / "manifest.json")
    say(f"preprocessed {len(entries)} studies into {out}")


def cmd_split(args, cfg, say):
    folds = fold_assignment(cfg, load_manifest(cfg.manifest))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    folds.save(out / "folds.json")
    sizes = [len(f["test"]) for f in folds.folds]
    say(f"wrote {out / 'folds.json'} (test sizes {sizes})")


def cmd_train(args, cfg, say):
    cache = StudyCache.for_config(cfg)
    for fold in fold_list(cfg):
        res = train(cfg, fold, cache)
        say(f"{cfg.name} fold {fold}: {res.steps} steps, best epoch {res.best_epoch}, "
            f"val Dice {res.best_val_dice:.4f} -> {res.checkpoint}")


def cmd_evaluate(args, cfg, say):
    cache = StudyCache.for_config(cfg)
    for fold in fold_list(cfg):
        rows = evaluate(args.checkpoint, fold, cfg, cache)
        path = cfg.run_dir(fold) / "metrics.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(rows_to_csv(rows))
        say(f"{cfg.name} fold {fold}: mean Dice {np.mean([r.dice for r in rows]):.4f} "
            f"over {len(rows)} studies -> {path}")


def cmd_ablate(args, cfg, say):
    report = run_ablation_grid(grid_configs(cfg), cfg.reference_model, cfg.output_dir, progress=say)
    say(report.markdown)
    say(f"wrote {report.per_case_csv} and {report.summary_path}")


def cmd_report(args, cfg, say):
    src = Path(args.input) if args.input else Path(cfg.output_dir) / PER_CASE_NAME
    if not src.is_file():
        raise ValidationError(f"per-case CSV {src} not found")
    report = report_from_csv(src, cfg.reference_model, cfg.output_dir)
    say(report.markdown)


def cmd_gradcheck(args, cfg, say):
    from .gradsuite import TOLERANCE, run_suite

    if args.seeds < 1:
        raise ValidationError("--seeds must be >= 1")
    start = args.seed if args.seed is not None else 0
    dtype, ref = (np.float64, None) if args.dtype == "float64" else (np.float32, np.float64)
    results = run_suite(range(start, start + args.seeds), dtype, reference_dtype=ref)
    worst = {}
    for r in results:
        w = worst.setdefault(r.op, [0.0, True, 0])
        w[0] = max(w[0], r.error)
        w[1] = w[1] and r.passed
        w[2] += r.nonsmooth
    for op, (err, ok, kinks) in worst.items():
        note = f"  ({kinks} kink coordinates skipped)" if kinks else ""
        say(f"{'PASS' if ok else 'FAIL'}  {op:<26} max rel err {err:.2e}{note}")
    failed = [op for op, (_, ok, _) in worst.items() if not ok]
    if failed:
        raise PktsegError(f"gradient check above {TOLERANCE:g} for: {', '.join(failed)}")
    say(f"all {len(worst)} checks passed over {args.seeds} seeds")


HANDLERS = {
    "generate-phantoms": cmd_generate_phantoms, "preprocess": cmd_preprocess, "split": cmd_split,
    "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate, "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    say = print
    try:
        if not argv or argv[0] in ("-h", "--help"):
            parser.print_help()
            return 0 if argv else 1
        if argv[0] not in SUBCOMMANDS:
            raise UnknownSubcommand(f"unknown subcommand {argv[0]!r}")
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help inside a subcommand
            return int(exc.code or 0)
        cfg = _config(args)
        HANDLERS[args.command](args, cfg, say)
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, UnknownSubcommand):
            parser.print_usage(sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
