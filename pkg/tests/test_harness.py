import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pktseg.errors import CheckpointMismatch, ConfigParseError, DatasetTooSmall, MissingDependency, ValidationError
from pktseg.harness import FULL_GRID, ExperimentConfig, desk_preset, load_config, make_folds, train
from pktseg.harness.ablation import grid_configs, report_from_csv, run_ablation_grid, write_report
from pktseg.harness.cli import main
from pktseg.harness.config import safe_name
from pktseg.harness.folds import FoldAssignment
from pktseg.harness.training import (
    StudyCache,
    epoch_batches,
    evaluate,
    load_model,
    read_log,
    validation_dice,
)
from pktseg.metrics import MetricsRow
from pktseg.volume_io import DatasetManifest, ManifestEntry


def fake_manifest(n, n_patients=None):
    n_patients = n_patients or n
    return DatasetManifest([ManifestEntry(f"S{i:03d}", f"P{i % n_patients:02d}", {}, None) for i in range(n)])


def tiny_config(manifest_path, out, **kw):
    base = dict(manifest=str(manifest_path), family="BM", subsets=[["T1C"]], channels=2, depth=1,
                epochs=1, batch_size=16, patch_size=8, patches_per_image=16, foreground_fraction=0.5,
                target_spacing_mm=None, target_dims=None, inference_patch_size=32, folds=5,
                split_ratios=[0.7, 0.1, 0.2], fold_indices=[0], seed=18, output_dir=str(out))
    base.update(kw)
    return ExperimentConfig(**base)


# ------------------------------------------------------------------ config

def test_full_scale_defaults():
    cfg = ExperimentConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.epochs, cfg.patch_size, cfg.patches_per_image) == \
        (0.02, 16, 200, 64, 16)
    assert (cfg.folds, cfg.split_ratios, cfg.seed) == (5, [0.70, 0.10, 0.20], 18)


def test_config_invariants():
    with pytest.raises(ValidationError):
        ExperimentConfig(split_ratios=[0.7, 0.2, 0.2])
    with pytest.raises(ValidationError):
        ExperimentConfig(subsets=[["T1", "FL"]])
    with pytest.raises(ValidationError):
        ExperimentConfig(family="DM", subsets=[["T1C"]])


def test_config_file_round_trip(tmp_path):
    cfg = desk_preset(grid=["BM[T1C]"])
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    back = load_config(path)
    assert back.manifest == str(tmp_path / "manifest.json")
    assert replace(back, manifest=cfg.manifest, output_dir=cfg.output_dir) == cfg


def test_config_parse_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    (tmp_path / "extra.json").write_text(json.dumps({"epochz": 3}))
    for name in ("bad.json", "extra.json", "missing.json"):
        with pytest.raises(ConfigParseError):
            load_config(tmp_path / name)


def test_safe_name():
    assert safe_name("DM[T1,T1C + T2,T1C]") == "DM_T1-T1C+T2-T1C"


# ------------------------------------------------------------------- folds

def test_folds_82_test_sizes():
    folds = make_folds(fake_manifest(82), 5, (0.7, 0.1, 0.2), 18)
    assert sorted(len(f["test"]) for f in folds.folds) == [16, 16, 16, 17, 17]
    for f in folds.folds:
        n_rest = 82 - len(f["test"])
        assert len(f["val"]) == math.floor(n_rest / 8 + 0.5)
        assert len(f["train"]) == n_rest - len(f["val"])


def test_folds_deterministic_bytes():
    a = make_folds(fake_manifest(82), seed=18).to_json()
    b = make_folds(fake_manifest(82), seed=18).to_json()
    assert a == b
    assert a != make_folds(fake_manifest(82), seed=19).to_json()


@given(n=st.integers(5, 60), k=st.integers(2, 5), seed=st.integers(0, 1000))
def test_folds_partition(n, k, seed):
    m = fake_manifest(n)
    folds = make_folds(m, k, (0.7, 0.1, 0.2), seed)
    tests = [t for f in folds.folds for t in f["test"]]
    assert sorted(tests) == sorted(m.study_ids)
    sizes = [len(f["test"]) for f in folds.folds]
    assert max(sizes) - min(sizes) <= 1
    for f in folds.folds:
        parts = [set(f["train"]), set(f["val"]), set(f["test"])]
        assert sum(map(len, parts)) == n == len(set().union(*parts))


def test_folds_patient_grouped():
    m = fake_manifest(40, 11)
    patient = {e.study_id: e.patient_id for e in m.entries}
    for f in make_folds(m, 5, group_by_patient=True).folds:
        owners = [{patient[s] for s in f[p]} for p in ("train", "val", "test")]
        assert not (owners[0] & owners[1] or owners[0] & owners[2] or owners[1] & owners[2])


def test_folds_too_small():
    with pytest.raises(DatasetTooSmall):
        make_folds(fake_manifest(4), 5)


def test_fold_file_round_trip(tmp_path):
    folds = make_folds(fake_manifest(12), 3)
    folds.save(tmp_path / "f.json")
    assert FoldAssignment.load(tmp_path / "f.json") == folds
    assert set(json.loads((tmp_path / "f.json").read_text())) == {"0", "1", "2"}


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def trained(small_cohort, tmp_path_factory):
    manifest_path, _ = small_cohort
    cfg = tiny_config(manifest_path, tmp_path_factory.mktemp("runs"), epochs=3)
    cache = StudyCache.for_config(cfg)
    return cfg, cache, train(cfg, 0, cache)


def test_two_training_studies_two_steps(small_cohort, tmp_path):
    _, manifest = small_cohort
    five = DatasetManifest(manifest.entries[:5], manifest.root)
    cfg = tiny_config("unused", tmp_path, split_ratios=[0.4, 0.4, 0.2])
    folds = make_folds(five, 5, (0.4, 0.4, 0.2), 18)
    assert len(folds[0]["train"]) == 2
    result = train(cfg, 0, StudyCache(five))
    assert result.steps == math.ceil(2 * 16 / 16) == 2


def test_identical_epoch_one_loss(small_cohort, tmp_path):
    manifest_path, _ = small_cohort
    cfg = tiny_config(manifest_path, tmp_path)
    a = train(cfg, 0, out_dir=tmp_path / "a")
    b = train(cfg, 0, out_dir=tmp_path / "b")
    assert a.log[0][1] == b.log[0][1]
    assert (tmp_path / "a" / "checkpoint.pkt").read_bytes() == (tmp_path / "b" / "checkpoint.pkt").read_bytes()


def test_training_log_and_best_epoch(trained):
    cfg, _, result = trained
    log = read_log(cfg.run_dir(0) / "train_log.csv")
    assert [r[0] for r in log] == [1, 2, 3]
    assert log == result.log
    vals = [r[2] for r in log]
    assert result.best_epoch == 1 + int(np.argmax(vals))
    assert result.best_val_dice == max(vals)


def test_checkpoint_reproduces_logged_val_dice(trained):
    cfg, cache, result = trained
    net = load_model(cfg, 0)
    folds = make_folds(cache.manifest, cfg.folds, tuple(cfg.split_ratios), cfg.seed)
    again = validation_dice(net, [cache[s] for s in folds[0]["val"]], cfg)
    assert abs(again - result.best_val_dice) < 1e-6


def test_no_test_study_in_batches(trained):
    cfg, cache, _ = trained
    folds = make_folds(cache.manifest, cfg.folds, tuple(cfg.split_ratios), cfg.seed)
    test = [cache[s] for s in folds[0]["test"]]
    train_studies = [cache[s] for s in folds[0]["train"]]
    test_bytes = {s.sequences["T1C"].values.tobytes() for s in test}
    assert not test_bytes & {s.sequences["T1C"].values.tobytes() for s in train_studies}
    n = sum(len(x[0]) for x, _ in epoch_batches(cfg, train_studies, 1, 0, [["T1C"]]))
    assert n == len(train_studies) * cfg.patches_per_image


def test_training_fold_out_of_range(trained):
    cfg, cache, _ = trained
    with pytest.raises(ValidationError):
        train(cfg, 7, cache)


# -------------------------------------------------------------- evaluation

class OracleModel:
    """Returns the ground truth of whichever study it is shown (one window per study)."""

    input_groups = [["T1C"]]

    def __init__(self, cache, ids, flip=False):
        self.truth = {cache[s].sequences["T1C"].values.tobytes(): cache[s].gtv.values for s in ids}
        self.flip = flip

    def predict(self, inputs):
        x = inputs[0]
        fg = np.stack([self.truth[x[b, 0].tobytes()] for b in range(len(x))]).astype(np.float32)
        if self.flip:
            fg = np.zeros_like(fg)
        return np.stack([1 - fg, fg], axis=1)


def test_evaluate_oracle_and_background(trained):
    cfg, cache, _ = trained
    ids = cache.manifest.study_ids
    test = make_folds(cache.manifest, cfg.folds, tuple(cfg.split_ratios), cfg.seed)[0]["test"]
    rows = evaluate(OracleModel(cache, ids), 0, cfg, cache)
    assert [r.study_id for r in rows] == test
    assert all(r.dice == 1.0 and r.hd95_mm == 0.0 and r.fpe == 0.0 and r.fne == 0.0 for r in rows)
    rows = evaluate(OracleModel(cache, ids, flip=True), 0, cfg, cache)
    assert len(rows) == len(test)
    assert all(r.dice == 0.0 and r.fne == 1.0 and r.fpe is None and r.hd95_mm is None for r in rows)


def test_evaluate_checkpoint_mismatch(trained, tmp_path):
    cfg, cache, result = trained
    other = replace(cfg, channels=3)
    with pytest.raises(CheckpointMismatch):
        evaluate(result.checkpoint, 0, other, cache)
    with pytest.raises(CheckpointMismatch):
        evaluate(OracleModel(cache, []), 0, cfg.for_model("BM[T1C,FL]"), cache)


def test_ensemble_needs_trained_members(trained, tmp_path):
    cfg, cache, _ = trained
    em = replace(cfg, output_dir=str(tmp_path)).for_model("EM[T1C,FL + T1C]")
    with pytest.raises(MissingDependency):
        load_model(em, 0)
    with pytest.raises(MissingDependency):
        run_ablation_grid([em.for_model("BM[T1C]"), em], "BM[T1C]", cache=cache)


# ----------------------------------------------------------------- ablation

def test_ablation_grid_small_and_byte_stable(small_cohort, tmp_path):
    manifest_path, _ = small_cohort
    names = ["BM[T1,T2,T1C,FL]", "BM[T1C]", "EM[T1,T2,T1C,FL + T1C]"]
    reports = []
    for run in ("a", "b"):
        base = tiny_config(manifest_path, tmp_path / run, grid=names)
        reports.append(run_ablation_grid(grid_configs(base), "BM[T1,T2,T1C,FL]", tmp_path / run))
    a, b = reports
    assert list(a.rows_by_model) == names
    assert a.summary_path.read_bytes() == b.summary_path.read_bytes()
    assert a.per_case_csv.read_bytes() == b.per_case_csv.read_bytes()
    # the ensemble trained nothing of its own
    assert not (tmp_path / "a" / safe_name(names[2])).exists()
    ref_line = next(line for line in a.markdown.splitlines() if line.startswith("| BM[T1,T2,T1C,FL]"))
    assert [c.strip() for c in ref_line.strip("|").split("|")][3] == "-"


def test_ablation_rejects_mixed_configs(small_cohort, tmp_path):
    manifest_path, _ = small_cohort
    a = tiny_config(manifest_path, tmp_path)
    b = replace(a, seed=19).for_model("BM[T1C,FL]")
    with pytest.raises(ValidationError):
        run_ablation_grid([a, b], "BM[T1C]")


def _fake_rows(names, n=6):
    r = np.random.default_rng(3)
    return {name: [MetricsRow(f"S{i:02d}", float(r.uniform(0.6, 0.9)), float(r.uniform(1, 8)),
                              0.1, 0.1, name) for i in range(n)] for name in names}


def test_full_grid_report_26_rows(tmp_path):
    assert len(FULL_GRID) == 26
    report = write_report(_fake_rows(FULL_GRID), "BM[T1,T2,T1C,FL]", tmp_path)
    lines = report.markdown.splitlines()
    rows = [line for line in lines if line.startswith("| ") and not line.startswith("| Model input")]
    assert len(rows) == 26
    heads = [i for i, line in enumerate(lines) if line.startswith("### ")]
    assert [lines[i] for i in heads] == ["### A) Baseline models", "### B) Double U-Net models",
                                        "### C) Ensemble models"]
    counts = [sum(1 for line in lines[h:e] if line.startswith("| ") and "Model input" not in line)
              for h, e in zip(heads, heads[1:] + [len(lines)])]
    assert counts == [8, 9, 9]
    again = report_from_csv(report.per_case_csv, "BM[T1,T2,T1C,FL]", tmp_path / "again")
    assert again.summary_path.read_bytes() == report.summary_path.read_bytes()


# ---------------------------------------------------------------------- CLI

def test_cli_split_and_exit_codes(small_cohort, tmp_path, capsys):
    manifest_path, _ = small_cohort
    cfg = tiny_config(manifest_path, tmp_path / "out")
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert main(["split", "--config", str(tmp_path / "c.json")]) == 0
    first = (tmp_path / "out" / "folds.json").read_bytes()
    assert main(["split", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o2")]) == 0
    assert (tmp_path / "o2" / "folds.json").read_bytes() == first
    assert main(["bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["split", "--nope"]) == 1
    assert main(["train", "--config", str(tmp_path / "c.json"), "--fold", "9"]) == 1
    assert main(["split", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["report", "--config", str(tmp_path / "c.json"), "--input", str(tmp_path / "nope.csv")]) == 1


def test_cli_runtime_failure_exit_2(small_cohort, tmp_path):
    manifest_path, _ = small_cohort
    cfg = tiny_config(manifest_path, tmp_path / "out").for_model("EM[T1C,FL + T1C]")
    (tmp_path / "c.json").write_text(cfg.to_json())
    # members were never trained: MissingDependency is a runtime failure
    assert main(["evaluate", "--config", str(tmp_path / "c.json")]) == 2


def test_cli_gradcheck(monkeypatch, capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    assert "PASS" in capsys.readouterr().out

    from pktseg.harness import gradsuite

    def failing(*a, **k):
        return [gradsuite.GradResult("conv3d", 0, 0.5, 10, 0)]
    monkeypatch.setattr(gradsuite, "run_suite", failing)
    assert main(["gradcheck", "--seeds", "1"]) == 2
    assert "FAIL" in capsys.readouterr().out
