"""Experiment configuration (one JSON document, field names as below)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..architectures import DoubleUNetConfig, PocketUNetConfig, format_model_name, parse_model_name
from ..errors import ConfigParseError, ValidationError
from ..nn.optim import OptimizerConfig


@dataclass
class ExperimentConfig:
    manifest: str = "manifest.json"
    family: str = "BM"
    subsets: list = field(default_factory=lambda: [["T1", "T2", "T1C", "FL"]])
    # Pocket U-Net
    channels: int = 16
    depth: int = 3
    kernel: int = 3
    num_classes: int = 2
    # optimizer
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 200
    # data / patches
    patch_size: int = 64
    patches_per_image: int = 16
    foreground_fraction: float = 0.0
    target_spacing_mm: float | None = 0.86
    target_dims: list | None = field(default_factory=lambda: [256, 256, 208])
    inference_patch_size: int | None = None
    inference_stride: int | None = None
    # cross-validation
    folds: int = 5
    split_ratios: list = field(default_factory=lambda: [0.70, 0.10, 0.20])
    group_by_patient: bool = False
    fold_indices: list | None = None
    seed: int = 18
    output_dir: str = "runs"
    # ablation / reporting
    grid: list = field(default_factory=list)
    reference_model: str = "BM[T1,T2,T1C,FL]"
    # phantom generation
    phantom: dict | None = None
    n_studies: int = 82
    n_patients: int = 23

    def __post_init__(self):
        self.family = self.family.upper()
        if self.family not in ("BM", "DM", "EM"):
            raise ValidationError(f"family must be BM, DM or EM, got {self.family!r}")
        if self.subsets and isinstance(self.subsets[0], str):
            self.subsets = [list(self.subsets)]
        self.subsets = [list(s) for s in self.subsets]
        want = 1 if self.family == "BM" else 2
        if len(self.subsets) != want:
            raise ValidationError(f"{self.family} needs {want} sequence subset(s), got {len(self.subsets)}")
        for s in self.subsets:
            if "T1C" not in s:
                raise ValidationError(f"subset {s} must contain T1C")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1) > 1e-9:
            raise ValidationError(f"split_ratios must be three values summing to 1, got {self.split_ratios}")
        OptimizerConfig(self.learning_rate, self.momentum, self.batch_size, self.epochs)
        self.pocket_config(len(self.subsets[0]))
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")

    # -- derived views -----------------------------------------------------
    @property
    def name(self):
        return format_model_name(self.family, self.subsets)

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.learning_rate, self.momentum, self.batch_size, self.epochs)

    def pocket_config(self, in_channels) -> PocketUNetConfig:
        return PocketUNetConfig(in_channels, self.channels, self.depth, self.kernel, self.num_classes)

    def double_config(self) -> DoubleUNetConfig:
        a, b = self.subsets
        return DoubleUNetConfig(self.pocket_config(len(a)), self.pocket_config(len(b)), a, b, self.channels)

    @property
    def eval_patch_size(self):
        return self.inference_patch_size or self.patch_size

    @property
    def eval_stride(self):
        return self.inference_stride or max(1, self.eval_patch_size // 2)

    def run_dir(self, fold=None) -> Path:
        d = Path(self.output_dir) / safe_name(self.name)
        return d if fold is None else d / f"fold{fold}"

    def for_model(self, name: str) -> "ExperimentConfig":
        family, groups = parse_model_name(name)
        return replace(self, family=family, subsets=groups)

    # -- serialization -----------------------------------------------------
    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigParseError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigParseError(f"config file {path} not found") from exc
    except ValueError as exc:
        raise ConfigParseError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigParseError("config must be a JSON object")
    cfg = ExperimentConfig.from_dict(doc)
    base = path.parent
    if not Path(cfg.manifest).is_absolute():
        cfg.manifest = str(base / cfg.manifest)
    if not Path(cfg.output_dir).is_absolute():
        cfg.output_dir = str(base / cfg.output_dir)
    return cfg


def safe_name(model_name: str) -> str:
    """Filesystem-safe run folder name, e.g. DM[T1,T1C + T2,T1C] -> DM_T1-T1C+T2-T1C."""
    family, groups = parse_model_name(model_name)
    return family + "_" + "+".join("-".join(g) for g in groups)


def desk_preset(**overrides) -> ExperimentConfig:
    """Desk-scale profile: 64^3 phantoms, L=2, C=8, 4 folds of 60 studies
    (40 train / 5 val / 15 test per fold)."""
    base = dict(
        channels=8, depth=2, epochs=15, batch_size=16, learning_rate=0.02, momentum=0.9,
        patch_size=16, patches_per_image=2, foreground_fraction=0.5,
        target_spacing_mm=1.0, target_dims=[64, 64, 64], inference_patch_size=64,
        folds=4, split_ratios=[8 / 12, 1 / 12, 3 / 12], fold_indices=[0],
        n_studies=60, n_patients=20,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def full_preset(**overrides) -> ExperimentConfig:
    """Full-scale profile: 256x256x208 at 0.86 mm, 64^3 patches, 16 per image,
    lr 0.02, batch 16, 200 epochs, fivefold CV with seed 18."""
    return ExperimentConfig(**overrides)


FULL_GRID = [
    "BM[T1,T2,T1C,FL]", "BM[T1,T2,T1C]", "BM[T1,T1C,FL]", "BM[T2,T1C,FL]",
    "BM[T1,T1C]", "BM[T2,T1C]", "BM[T1C,FL]", "BM[T1C]",
    "DM[T1,T2,T1C + T1C,FL]", "DM[T2,T1C,FL + T1,T1C]", "DM[T1,T1C,FL + T2,T1C]",
    "DM[T1,T1C + T2,T1C]", "DM[T2,T1C + T1C,FL]", "DM[T1C,FL + T1,T1C]",
    "DM[T1,T1C + T1C]", "DM[T2,T1C + T1C]", "DM[T1C,FL + T1C]",
    "EM[T1,T2,T1C + T1C,FL]", "EM[T2,T1C,FL + T1,T1C]", "EM[T1,T1C,FL + T2,T1C]",
    "EM[T1,T1C + T2,T1C]", "EM[T2,T1C + T1C,FL]", "EM[T1C,FL + T1,T1C]",
    "EM[T1,T1C + T1C]", "EM[T2,T1C + T1C]", "EM[T1C,FL + T1C]",
]
