"""Training and evaluation loops for one fold of one model configuration."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..architectures import (
    DoubleUNet,
    Ensemble,
    PocketUNet,
    ensemble_members,
    load_checkpoint,
    save_checkpoint,
)
from ..errors import CheckpointMismatch, MissingDependency, NonFiniteLoss, ValidationError
from ..metrics import dice, evaluate_case
from ..nn import dice_ce_loss, one_hot, sgd_momentum_step
from ..nn.tensor import DiffTensor
from ..preprocess import SeededRng, preprocess_study, sample_patches, sliding_window_predict
from ..volume_io import load_manifest, load_study
from .config import ExperimentConfig
from .folds import FoldAssignment, make_folds

CHECKPOINT_NAME = "checkpoint.pkt"
LOG_NAME = "train_log.csv"


class StudyCache:
    """Preprocessed studies of one manifest, loaded on first use."""

    def __init__(self, manifest, target_spacing_mm=None, target_dims=None):
        self.manifest = manifest if not isinstance(manifest, (str, Path)) else load_manifest(manifest)
        self.spacing = target_spacing_mm
        self.dims = None if target_dims is None else tuple(target_dims)
        self._studies = {}

    @classmethod
    def for_config(cls, config: ExperimentConfig, manifest=None):
        return cls(manifest if manifest is not None else config.manifest,
                   config.target_spacing_mm, config.target_dims)

    def __getitem__(self, study_id):
        if study_id not in self._studies:
            raw = load_study(self.manifest.entry(study_id))
            self._studies[study_id] = preprocess_study(raw, self.spacing, self.dims)
        return self._studies[study_id]


def fold_assignment(config: ExperimentConfig, manifest) -> FoldAssignment:
    return make_folds(manifest, config.folds, tuple(config.split_ratios), config.seed,
                      config.group_by_patient)


def build_network(config: ExperimentConfig):
    """Fresh BM or DM network for ``config`` (initialization seeded by config.seed)."""
    if config.family == "BM":
        subset = config.subsets[0]
        return PocketUNet(config.pocket_config(len(subset)), subset, head=True, seed=config.seed)
    if config.family == "DM":
        return DoubleUNet(config.double_config(), seed=config.seed)
    raise ValidationError("ensembles are assembled from trained baselines, not trained")


def _union(groups):
    out = []
    for g in groups:
        out += [s for s in g if s not in out]
    return out


def epoch_batches(config, studies, epoch, fold, groups):
    """Patches for one epoch, shuffled and cut into minibatches.

    Each training study contributes ``patches_per_image`` patches taken from the
    union of the model's sequences, so both DM branches see the same location.
    Yields (list of per-input arrays, integer label array).
    """
    rng = SeededRng(config.seed).derive(fold, epoch)
    union = _union(groups)
    index = [[union.index(s) for s in g] for g in groups]
    patches = []
    for study in studies:
        patches += sample_patches(study, union, config.patches_per_image, config.patch_size,
                                  rng, config.foreground_fraction)
    order = rng.permutation(len(patches))
    bs = config.batch_size
    for start in range(0, len(order), bs):
        chunk = [patches[i] for i in order[start:start + bs]]
        channels = np.stack([p.channels for p in chunk])
        labels = np.stack([p.label for p in chunk]).astype(np.int64)
        yield [channels[:, idx] for idx in index], labels


def validation_dice(net, studies, config) -> float:
    if not studies:
        return math.nan
    scores = []
    for study in studies:
        probs = sliding_window_predict(net, study, None, config.eval_patch_size, config.eval_stride)
        scores.append(dice(probs.argmax(axis=0), study.gtv.values))
    return float(np.mean(scores))


@dataclass
class TrainResult:
    checkpoint: Path
    log: list = field(default_factory=list)  # (epoch, train_loss, val_dice)
    steps: int = 0
    best_epoch: int = 0
    best_val_dice: float = math.nan
    network: object = None


def _snapshot(net):
    return ([t.values.copy() for t in net.parameters()],
            [b.copy() for _, b in net.named_buffers()])


def _restore(net, snap):
    params, buffers = snap
    for t, v in zip(net.parameters(), params):
        t.values = v
    for (_, b), v in zip(net.named_buffers(), buffers):
        b[...] = v


def train(config: ExperimentConfig, fold: int, cache: StudyCache | None = None,
          out_dir=None) -> TrainResult:
    """Train one fold; keep the epoch with the best validation Dice.

    Writes ``checkpoint.pkt`` and ``train_log.csv`` (epoch,train_loss,val_dice)
    into ``out_dir`` (default ``config.run_dir(fold)``).
    """
    cache = cache or StudyCache.for_config(config)
    folds = fold_assignment(config, cache.manifest)
    if not 0 <= fold < len(folds):
        raise ValidationError(f"fold {fold} out of range for {len(folds)} folds")
    part = folds[fold]
    test_ids = set(part["test"])
    if test_ids & (set(part["train"]) | set(part["val"])):
        raise ValidationError(f"fold {fold}: test studies leak into training or validation")
    out = Path(out_dir) if out_dir is not None else config.run_dir(fold)
    out.mkdir(parents=True, exist_ok=True)

    net = build_network(config)
    groups = net.input_groups
    layers = [lp for _, lp in net.named_layers()]
    opt = config.optimizer
    train_studies = [cache[s] for s in part["train"]]
    val_studies = [cache[s] for s in part["val"]]

    result = TrainResult(out / CHECKPOINT_NAME, network=net)
    best = None
    for epoch in range(1, config.epochs + 1):
        net.train()
        losses = []
        for inputs, labels in epoch_batches(config, train_studies, epoch, fold, groups):
            target = one_hot(labels, config.num_classes, np.float32)
            probs = net.forward([DiffTensor(x) for x in inputs])
            loss = dice_ce_loss(probs, target)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(f"{config.name} fold {fold}: loss {value} at epoch {epoch}, "
                                    f"step {result.steps + 1}")
            loss.backward()
            sgd_momentum_step(layers, opt)
            losses.append(value)
            result.steps += 1
        val = validation_dice(net, val_studies, config)
        result.log.append((epoch, float(np.mean(losses)) if losses else math.nan, val))
        if best is None or val > result.best_val_dice or (math.isnan(result.best_val_dice) and not math.isnan(val)):
            best = _snapshot(net)
            result.best_epoch, result.best_val_dice = epoch, val
    if best is not None:
        _restore(net, best)
    net.eval()
    save_checkpoint(net, result.checkpoint, {
        "model": config.name, "fold": fold, "seed": config.seed,
        "best_epoch": result.best_epoch, "val_dice": result.best_val_dice,
    })
    write_log(result.log, out / LOG_NAME)
    return result


def write_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_dice"])
        for epoch, loss, val in rows:
            w.writerow([epoch, repr(float(loss)), repr(float(val))])


def read_log(path):
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), float(r["train_loss"]), float(r["val_dice"]))
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# evaluation

def _load_for_config(checkpoint, config: ExperimentConfig):
    expected = build_network(config).config_dict()
    net, _ = load_checkpoint(checkpoint, expected)
    return net


def load_model(config: ExperimentConfig, fold: int, checkpoint=None):
    """Trained network for ``config``; ensembles load their two BM members."""
    if config.family == "EM":
        members = []
        for member in ensemble_members(config.name):
            mcfg = config.for_model(member)
            path = mcfg.run_dir(fold) / CHECKPOINT_NAME
            if not path.is_file():
                raise MissingDependency(f"{config.name} needs {member} trained on fold {fold} ({path})")
            members.append(_load_for_config(path, mcfg))
        return Ensemble(members[0], members[1])
    path = Path(checkpoint) if checkpoint is not None else config.run_dir(fold) / CHECKPOINT_NAME
    if not path.is_file():
        raise MissingDependency(f"no checkpoint at {path}")
    return _load_for_config(path, config)


def _check_groups(model, config):
    if [list(g) for g in model.input_groups] != [list(g) for g in config.subsets]:
        raise CheckpointMismatch(f"model inputs {model.input_groups} do not match {config.subsets}")


def predict_probabilities(model, study, config) -> np.ndarray:
    if isinstance(model, Ensemble):
        a, b = model.members
        pa = sliding_window_predict(a, study, None, config.eval_patch_size, config.eval_stride)
        pb = pa if b is a else sliding_window_predict(b, study, None, config.eval_patch_size,
                                                      config.eval_stride)
        return model.combine(pa, pb).astype(np.float32)
    return sliding_window_predict(model, study, None, config.eval_patch_size, config.eval_stride)


def evaluate(model_or_checkpoint, fold: int, config: ExperimentConfig,
             cache: StudyCache | None = None) -> list:
    """MetricsRow per test study of ``fold``: sliding-window probabilities,
    argmax mask, metrics against the ground truth.

    ``model_or_checkpoint`` is a checkpoint path, a loaded network/ensemble, or
    any object with ``input_groups`` and ``predict``; None loads from the run dir.
    """
    cache = cache or StudyCache.for_config(config)
    if model_or_checkpoint is None:
        model = load_model(config, fold)
    elif isinstance(model_or_checkpoint, (str, Path)):
        model = load_model(config, fold, model_or_checkpoint)
    else:
        model = model_or_checkpoint
    _check_groups(model, config)
    folds = fold_assignment(config, cache.manifest)
    rows = []
    for sid in folds[fold]["test"]:
        study = cache[sid]
        mask = predict_probabilities(model, study, config).argmax(axis=0)
        rows.append(evaluate_case(sid, mask, study.gtv.values, study.gtv.spacing_mm, config.name))
    return rows
