"""Pocket U-Net (BM), Double Pocket U-Net (DM) and the averaging ensemble (EM).

A Pocket U-Net keeps the same number of feature maps ``C`` at every resolution
level. Layout for depth ``L``::

    enc0 .. enc{L-1}   two 3^3 conv+BN+ReLU (-> C), then 2^3 max-pool
    bottleneck         two 3^3 conv+BN+ReLU at 1/2^L resolution
    up{l}, dec{l}      2^3 stride-2 transposed conv, concat skip (2C),
                       two conv+BN+ReLU back to C; l = L-1 .. 0
    head               1^3 conv to num_classes + channel softmax

The Double U-Net runs two headless Pocket U-Nets on different sequence subsets,
concatenates their last-decoder features and fuses them with two 3^3
conv+BN+ReLU blocks and a 1^3 conv + softmax.
"""
from __future__ import annotations

import io
import json
import re
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatch, IndivisibleDims, ShapeMismatch, ValidationError
from .nn import functional as F
from .nn.layers import Conv3d, ConvTranspose3d, DoubleConv, Module
from .nn.tensor import DiffTensor, no_grad

MAGIC = b"PKTSEG1"


@dataclass
class PocketUNetConfig:
    in_channels: int = 1
    channels: int = 8
    depth: int = 2
    kernel: int = 3
    num_classes: int = 2
    growth: int = 1  # 1 = pocket (constant width); 2 = classic channel doubling

    def __post_init__(self):
        if min(self.in_channels, self.channels, self.kernel, self.num_classes) < 1 or self.depth < 0:
            raise ValidationError(f"invalid Pocket U-Net config {self}")
        if self.kernel % 2 == 0:
            raise ValidationError("kernel must be odd for same-size convolutions")

    def width(self, level):
        return self.channels * self.growth ** level


@dataclass
class DoubleUNetConfig:
    branch_a: PocketUNetConfig
    branch_b: PocketUNetConfig
    subsets_a: list
    subsets_b: list
    fusion_channels: int | None = None

    def __post_init__(self):
        if isinstance(self.branch_a, dict):
            self.branch_a = PocketUNetConfig(**self.branch_a)
        if isinstance(self.branch_b, dict):
            self.branch_b = PocketUNetConfig(**self.branch_b)
        for name, sub, br in (("a", self.subsets_a, self.branch_a), ("b", self.subsets_b, self.branch_b)):
            if "T1C" not in sub:
                raise ValidationError(f"branch {name} subset {sub} must include T1C")
            if len(sub) != br.in_channels:
                raise ValidationError(f"branch {name}: {len(sub)} sequences but in_channels={br.in_channels}")
        if self.fusion_channels is None:
            self.fusion_channels = self.branch_a.channels


@dataclass
class EnsembleConfig:
    model_a: object  # checkpoint path or built PocketUNet
    model_b: object
    weights: tuple = (0.5, 0.5)

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if len(w) != 2 or min(w) < 0 or abs(sum(w) - 1) > 1e-12:
            raise ValidationError(f"ensemble weights must be nonnegative and sum to 1, got {w}")
        self.weights = w


class _Network(Module):
    """Shared inference helpers. ``input_groups`` lists the sequence names fed to
    each network input, in channel order."""

    input_groups: list
    family: str

    def predict(self, inputs):
        """Eval-mode softmax for a list of (B, C_i, D, H, W) arrays."""
        was = self.training
        self.eval()
        try:
            with no_grad():
                out = self.forward([DiffTensor(np.asarray(a, dtype=self.dtype)) for a in inputs])
        finally:
            self.train(was)
        return out.values

    @property
    def dtype(self):
        return next(iter(self.parameters())).values.dtype

    @property
    def name(self):
        return format_model_name(self.family, self.input_groups)


class PocketUNet(_Network):
    family = "BM"

    def __init__(self, cfg: PocketUNetConfig, subsets=None, head=True, seed=0):
        super().__init__()
        self.cfg = cfg
        self.has_head = head
        self.input_groups = [list(subsets) if subsets is not None
                             else [f"ch{i}" for i in range(cfg.in_channels)]]
        if len(self.input_groups[0]) != cfg.in_channels:
            raise ValidationError(f"{len(self.input_groups[0])} sequences for in_channels={cfg.in_channels}")
        rng = np.random.default_rng(seed)
        k, L = cfg.kernel, cfg.depth
        c_prev = cfg.in_channels
        for level in range(L):
            self.add(f"enc{level}", DoubleConv(c_prev, cfg.width(level), k, rng))
            c_prev = cfg.width(level)
        self.add("bottleneck", DoubleConv(c_prev, cfg.width(L), k, rng))
        for level in reversed(range(L)):
            self.add(f"up{level}", ConvTranspose3d(cfg.width(level + 1), cfg.width(level), 2, 2, rng))
            self.add(f"dec{level}", DoubleConv(2 * cfg.width(level), cfg.width(level), k, rng))
        if head:
            self.add("head", Conv3d(cfg.width(0), cfg.num_classes, kernel=1, padding=0, rng=rng))

    def check_input(self, x):
        shape = x.shape
        if len(shape) != 5 or shape[1] != self.cfg.in_channels:
            raise ShapeMismatch(f"expected (B, {self.cfg.in_channels}, D, H, W), got {shape}")
        f = 2 ** self.cfg.depth
        if any(s % f for s in shape[2:]):
            raise IndivisibleDims(f"spatial dims {shape[2:]} not divisible by 2^{self.cfg.depth}")

    def encode(self, x):
        """Return (skips, bottleneck features)."""
        self.check_input(x)
        skips = []
        h = x
        for level in range(self.cfg.depth):
            h = getattr(self, f"enc{level}")(h)
            skips.append(h)
            h = F.downsample(h)
        return skips, self.bottleneck(h)

    def features(self, x):
        """Last-decoder feature map: (B, C, D, H, W) at input resolution."""
        skips, h = self.encode(x)
        for level in reversed(range(self.cfg.depth)):
            h = getattr(self, f"up{level}")(h)
            h = F.concat_channels(h, skips[level])
            h = getattr(self, f"dec{level}")(h)
        return h

    def classify(self, features):
        return F.softmax_channels(self.head(features))

    def forward_with_features(self, x):
        x = x[0] if isinstance(x, (list, tuple)) else x
        feats = self.features(x)
        return self.classify(feats), feats

    def forward(self, inputs):
        x = inputs[0] if isinstance(inputs, (list, tuple)) else inputs
        return self.forward_with_features(x)[0]

    __call__ = forward

    def config_dict(self):
        return {"family": "BM", "pocket": asdict(self.cfg), "subsets": self.input_groups}


class DoubleUNet(_Network):
    family = "DM"

    def __init__(self, cfg: DoubleUNetConfig, seed=0):
        super().__init__()
        self.cfg = cfg
        self.input_groups = [list(cfg.subsets_a), list(cfg.subsets_b)]
        self.add("branch_a", PocketUNet(cfg.branch_a, cfg.subsets_a, head=False, seed=seed))
        self.add("branch_b", PocketUNet(cfg.branch_b, cfg.subsets_b, head=False, seed=seed + 1))
        rng = np.random.default_rng(seed + 2)
        c_in = cfg.branch_a.width(0) + cfg.branch_b.width(0)
        self.add("fuse", DoubleConv(c_in, cfg.fusion_channels, 3, rng))
        self.add("head", Conv3d(cfg.fusion_channels, cfg.branch_a.num_classes, kernel=1, padding=0, rng=rng))

    def forward(self, inputs):
        xa, xb = inputs
        fa = self.branch_a.features(xa)
        fb = self.branch_b.features(xb)
        if fa.shape[2:] != fb.shape[2:]:
            raise ShapeMismatch(f"branch outputs {fa.shape} and {fb.shape} differ spatially")
        h = self.fuse(F.concat_channels(fa, fb))
        return F.softmax_channels(self.head(h))

    __call__ = forward

    def config_dict(self):
        return {
            "family": "DM",
            "branch_a": asdict(self.cfg.branch_a),
            "branch_b": asdict(self.cfg.branch_b),
            "subsets": self.input_groups,
            "fusion_channels": self.cfg.fusion_channels,
        }


class Ensemble:
    """Weighted average of two baseline models' softmax outputs."""

    family = "EM"

    def __init__(self, model_a: PocketUNet, model_b: PocketUNet, weights=(0.5, 0.5)):
        self.members = (model_a, model_b)
        self.weights = EnsembleConfig(None, None, weights).weights
        self.input_groups = [model_a.input_groups[0], model_b.input_groups[0]]

    @property
    def name(self):
        return format_model_name("EM", self.input_groups)

    def combine(self, probs_a, probs_b):
        wa, wb = self.weights
        return wa * np.asarray(probs_a) + wb * np.asarray(probs_b)

    def predict(self, inputs):
        xa, xb = inputs
        return self.combine(self.members[0].predict([xa]), self.members[1].predict([xb]))


def build_pocket_unet(cfg: PocketUNetConfig, subsets=None, seed=0) -> PocketUNet:
    return PocketUNet(cfg, subsets, head=True, seed=seed)


def build_double_unet(cfg: DoubleUNetConfig, seed=0) -> DoubleUNet:
    return DoubleUNet(cfg, seed)


def forward_with_features(net: PocketUNet, x):
    """(class softmax, last-decoder features) for a Pocket U-Net."""
    return net.forward_with_features(x)


def count_parameters(net) -> int:
    """Trainable scalars: kernels, biases, BN scale/shift (running stats excluded)."""
    if isinstance(net, Ensemble):
        return sum(count_parameters(m) for m in net.members)
    return sum(lp.num_trainable() for _, lp in net.named_layers())


def ensemble_predict(cfg: EnsembleConfig, study, patch_size=64, stride=None):
    """Sliding-window probabilities of both members on their own subsets, averaged."""
    from .preprocess import sliding_window_predict

    members = []
    for m in (cfg.model_a, cfg.model_b):
        if isinstance(m, (str, Path)):
            m, _ = load_checkpoint(m)
        if not isinstance(m, PocketUNet):
            raise CheckpointMismatch("ensemble members must be baseline Pocket U-Nets")
        members.append(m)
    ens = Ensemble(members[0], members[1], cfg.weights)
    pa = sliding_window_predict(members[0], study, None, patch_size, stride)
    if members[1] is members[0]:
        pb = pa
    else:
        pb = sliding_window_predict(members[1], study, None, patch_size, stride)
    return ens.combine(pa, pb).astype(np.float32)


# ---------------------------------------------------------------------------
# model names: BM[T1,T2,T1C,FL], DM[T1,T1C,FL + T2,T1C], EM[T1C,FL + T1C]

_NAME_RE = re.compile(r"^\s*(BM|DM|EM)\s*\[(.*)\]\s*$")


def parse_model_name(name: str):
    m = _NAME_RE.match(name)
    if not m:
        raise ValidationError(f"cannot parse model name {name!r}")
    family, body = m.group(1), m.group(2)
    groups = [[s.strip() for s in part.split(",") if s.strip()] for part in body.split("+")]
    expected = 1 if family == "BM" else 2
    if len(groups) != expected or any(not g for g in groups):
        raise ValidationError(f"{family} needs {expected} sequence group(s): {name!r}")
    return family, groups


def format_model_name(family: str, groups) -> str:
    return f"{family}[" + " + ".join(",".join(g) for g in groups) + "]"


def ensemble_members(name: str):
    """EM[a + b] -> (BM[a], BM[b])."""
    family, groups = parse_model_name(name)
    if family != "EM":
        raise ValidationError(f"{name!r} is not an ensemble")
    return format_model_name("BM", [groups[0]]), format_model_name("BM", [groups[1]])


def build_from_config(config: dict, seed=0):
    family = config["family"]
    if family == "BM":
        return build_pocket_unet(PocketUNetConfig(**config["pocket"]), config["subsets"][0], seed)
    if family == "DM":
        cfg = DoubleUNetConfig(
            PocketUNetConfig(**config["branch_a"]), PocketUNetConfig(**config["branch_b"]),
            config["subsets"][0], config["subsets"][1], config.get("fusion_channels"))
        return build_double_unet(cfg, seed)
    raise ValidationError(f"no trainable network for family {family!r}")


# ---------------------------------------------------------------------------
# checkpoint container
#
#   b"PKTSEG1"
#   u32 json_length, json bytes (config, metadata)
#   u32 record_count
#   per record: u32 name_length, name, u32 ndim, ndim * u32 dims, float32 LE data

def save_checkpoint(net, path, metadata=None) -> None:
    records = list(net.named_parameters())
    records = [(n, t.values) for n, t in records] + list(net.named_buffers())
    header = json.dumps({"config": net.config_dict(), "metadata": metadata or {}},
                        sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        nb = name.encode()
        arr = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path):
    """Parse a checkpoint into (header dict, {name: array})."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointMismatch(f"{path} is not a PKTSEG1 checkpoint")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        (hlen,) = take("<I")
        header = json.loads(data[pos:pos + hlen])
        pos += hlen
        (count,) = take("<I")
        arrays = {}
        for _ in range(count):
            (nlen,) = take("<I")
            name = data[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I") if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
            pos += 4 * n
    except (struct.error, ValueError) as exc:
        raise CheckpointMismatch(f"corrupt checkpoint {path}: {exc}") from exc
    return header, arrays


def load_checkpoint(path, expected_config=None):
    """Rebuild the stored network. Refuses when the stored config or any array
    shape disagrees with ``expected_config`` / the rebuilt architecture."""
    header, arrays = read_checkpoint(path)
    config = header["config"]
    if expected_config is not None and _norm(expected_config) != _norm(config):
        raise CheckpointMismatch(f"checkpoint config {config} differs from expected {expected_config}")
    net = build_from_config(config)
    wanted = {n: t for n, t in net.named_parameters()}
    buffers = {n: b for n, b in net.named_buffers()}
    if set(arrays) != set(wanted) | set(buffers):
        missing = (set(wanted) | set(buffers)) ^ set(arrays)
        raise CheckpointMismatch(f"checkpoint records do not match architecture: {sorted(missing)[:5]}")
    for name, t in wanted.items():
        if arrays[name].shape != t.values.shape:
            raise CheckpointMismatch(f"{name}: shape {arrays[name].shape} != {t.values.shape}")
        t.values = arrays[name].astype(np.float32)
    for name, b in buffers.items():
        if arrays[name].shape != b.shape:
            raise CheckpointMismatch(f"{name}: shape {arrays[name].shape} != {b.shape}")
        b[...] = arrays[name]
    return net, header.get("metadata", {})


def _norm(cfg):
    return json.loads(json.dumps(cfg, sort_keys=True))
