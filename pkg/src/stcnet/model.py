"""Two-path spatio-temporal cross network with dual-pyramid sum fusion."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import (
    BatchNorm2d,
    Conv2d,
    Conv2dSpec,
    Linear,
    Module,
    SEBlock,
    SEBlockSpec,
    adaptive_avg_pool,
    decode_records,
    encode_records,
    maxpool2d,
)
from .tensor import Tensor, ShapeError, add, relu, reshape

STAGES = ("res1", "res2", "res3", "res4")
TAPS = ("conv1", "pool1") + STAGES
PATHS = ("spatial", "temporal")


class ConfigError(ValueError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name


class FusionVariant(str, Enum):
    FULL = "full"
    A = "A"
    B = "B"
    C = "C"
    SPATIAL_ONLY = "spatial_only"

    @classmethod
    def parse(cls, name: str) -> "FusionVariant":
        for v in cls:
            if name.lower() in (v.value.lower(), v.name.lower()):
                return v
        raise ConfigError("variant", f"unknown variant {name!r}; choose from {[v.value for v in cls]}")


@dataclass(frozen=True)
class BackboneConfig:
    stage_blocks: tuple[int, ...] = (3, 4, 6, 3)
    stage_out_channels: tuple[int, ...] = (256, 512, 1024, 2048)
    cardinality: int = 32
    se_ratio: int = 16
    input_resolution: int = 224
    n_frames: int = 8
    n_classes: int = 2
    stem_channels: int | None = None  # defaults to stage_out_channels[0] // 4
    head_channels: int = 256

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "stage_out_channels", tuple(int(c) for c in self.stage_out_channels))
        if self.stem_channels is None:
            object.__setattr__(self, "stem_channels", self.stage_out_channels[0] // 4 if self.stage_out_channels else 0)
        self.validate()

    @classmethod
    def full(cls, **overrides) -> "BackboneConfig":
        return cls(**overrides)

    @classmethod
    def micro(cls, **overrides) -> "BackboneConfig":
        base = dict(stage_blocks=(1, 1, 1, 1), stage_out_channels=(32, 64, 128, 256),
                    cardinality=4, se_ratio=4, input_resolution=56)
        base.update(overrides)
        return cls(**base)

    @property
    def mid_channels(self) -> tuple[int, ...]:
        return tuple(c // 2 for c in self.stage_out_channels)

    def validate(self) -> None:
        if len(self.stage_blocks) != 4 or min(self.stage_blocks) < 1:
            raise ConfigError("stage_blocks", f"need 4 positive block counts, got {self.stage_blocks}")
        if len(self.stage_out_channels) != 4 or min(self.stage_out_channels) < 2:
            raise ConfigError("stage_out_channels", f"need 4 widths >= 2, got {self.stage_out_channels}")
        if self.cardinality < 1:
            raise ConfigError("cardinality", "must be positive")
        if self.se_ratio < 1:
            raise ConfigError("se_ratio", "must be positive")
        for out, mid in zip(self.stage_out_channels, self.mid_channels):
            if mid % self.cardinality:
                raise ConfigError("cardinality", f"{self.cardinality} does not divide bottleneck width {mid}")
            if out % self.se_ratio:
                raise ConfigError("se_ratio", f"{self.se_ratio} does not divide stage width {out}")
        r = self.input_resolution
        if r < 32 or r % 8:
            raise ConfigError("input_resolution", f"{r} must be a multiple of 8 and at least 32")
        if self.n_frames < 1:
            raise ConfigError("n_frames", "must be positive")
        if self.n_classes < 2:
            raise ConfigError("n_classes", "need at least 2 classes")
        if self.stem_channels < 1 or self.head_channels < 1:
            raise ConfigError("stem_channels/head_channels", "must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        d["stage_out_channels"] = list(self.stage_out_channels)
        return d


class ConvBN(Module):
    def __init__(self, spec: Conv2dSpec, rng: np.random.Generator, act: bool = True):
        self.conv = Conv2d(spec, rng)
        self.bn = BatchNorm2d(spec.out_channels)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return relu(y) if self.act else y


class Bottleneck(Module):
    """ResNeXt bottleneck: 1x1 reduce, grouped 3x3, 1x1 expand, SE gate, residual add."""

    def __init__(self, c_in: int, mid: int, c_out: int, stride: int, cfg: BackboneConfig, rng: np.random.Generator):
        self.conv1 = Conv2d(Conv2dSpec(c_in, mid), rng)
        self.bn1 = BatchNorm2d(mid)
        self.conv2 = Conv2d(Conv2dSpec(mid, mid, 3, stride, 1, groups=cfg.cardinality), rng)
        self.bn2 = BatchNorm2d(mid)
        self.conv3 = Conv2d(Conv2dSpec(mid, c_out), rng)
        self.bn3 = BatchNorm2d(c_out)
        self.se = SEBlock(SEBlockSpec(c_out, cfg.se_ratio), rng)
        self.down = ConvBN(Conv2dSpec(c_in, c_out, 1, stride), rng, act=False) if stride != 1 or c_in != c_out else None

    def forward(self, x: Tensor) -> Tensor:
        y = relu(self.bn1(self.conv1(x)))
        y = relu(self.bn2(self.conv2(y)))
        y = self.se(self.bn3(self.conv3(y)))
        shortcut = x if self.down is None else self.down(x)
        return relu(add(y, shortcut))


class StreamPath(Module):
    """One CNN branch: conv1, pool1, res1..res4."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.conv1 = Conv2d(Conv2dSpec(3, cfg.stem_channels, 7, 2, 3), rng)
        self.bn1 = BatchNorm2d(cfg.stem_channels)
        c_in = cfg.stem_channels
        for i, (n_blocks, mid, c_out) in enumerate(zip(cfg.stage_blocks, cfg.mid_channels, cfg.stage_out_channels)):
            blocks = []
            for b in range(n_blocks):
                stride = 2 if i > 0 and b == 0 else 1
                blocks.append(Bottleneck(c_in, mid, c_out, stride, cfg, rng))
                c_in = c_out
            setattr(self, STAGES[i], blocks)

    def stem(self, x: Tensor, taps: dict | None = None, name: str = "") -> Tensor:
        y = relu(self.bn1(self.conv1(x)))
        if taps is not None:
            taps[(name, "conv1")] = y
        y = maxpool2d(y, 3, 2, 1)
        if taps is not None:
            taps[(name, "pool1")] = y
        return y

    def stage(self, i: int, x: Tensor) -> Tensor:
        for block in getattr(self, STAGES[i]):
            x = block(x)
        return x


def fuse_stage(sf: Tensor, tf: Tensor, variant: FusionVariant, stage_index: int) -> tuple[Tensor, Tensor]:
    """Cross-fuse the stage-``stage_index`` (1-based) maps of the two paths."""
    if sf.shape != tf.shape:
        raise ShapeError(f"fuse_stage: spatial {sf.shape} vs temporal {tf.shape}")
    if variant is FusionVariant.FULL or (variant is FusionVariant.C and stage_index == 1):
        both = add(sf, tf)
        return both, both
    if variant is FusionVariant.B:
        return add(sf, tf), tf
    return sf, tf


@dataclass
class ForwardTrace:
    """Activations captured during an instrumented forward."""

    taps: dict = field(default_factory=dict)  # (path, tap) -> stage output before fusion
    fused: dict = field(default_factory=dict)  # (path, stage) -> map after the fusion point
    fusions: list = field(default_factory=list)  # (stage, direction) for each sum performed


class STCNet(Module):
    def __init__(self, cfg: BackboneConfig, variant: FusionVariant, rng: np.random.Generator):
        self.config = cfg
        self.variant = variant
        self.spatial = StreamPath(cfg, rng)
        self.temporal = StreamPath(cfg, rng) if variant is not FusionVariant.SPATIAL_ONLY else None
        c4 = cfg.stage_out_channels[-1]
        if self.temporal is not None:
            self.fuse = ConvBN(Conv2dSpec(c4, cfg.head_channels), rng)
            cls_in = cfg.head_channels
        else:
            self.fuse = None
            cls_in = c4
        self.cls = ConvBN(Conv2dSpec(cls_in, cfg.head_channels), rng)
        self.out = Linear(cfg.head_channels, cfg.n_classes, rng)

    @property
    def paths(self) -> tuple[str, ...]:
        return PATHS if self.temporal is not None else PATHS[:1]

    def _frames(self, x, name: str) -> tuple[Tensor, int, int]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim == 4:
            x = reshape(x, (1,) + x.shape)
        if x.data.ndim != 5 or x.shape[2] != 3:
            raise ShapeError(f"{name} input must be [T,3,R,R] or [B,T,3,R,R], got {x.shape}")
        b, t, _, h, w = x.shape
        r = self.config.input_resolution
        if (h, w) != (r, r):
            raise ShapeError(f"{name} resolution {h}x{w} does not match the configured {r}x{r}")
        return reshape(x, (b * t, 3, h, w)), b, t

    def forward(self, rgb, res=None, trace: ForwardTrace | None = None) -> Tensor:
        """Logits [B, n_classes] for rgb/res of shape [T,3,R,R] (B=1) or [B,T,3,R,R]."""
        s, b, t = self._frames(rgb, "rgb")
        taps = trace.taps if trace is not None else None
        s = self.spatial.stem(s, taps, "spatial")
        tm = None
        if self.temporal is not None:
            if res is None:
                raise ShapeError(f"variant {self.variant.value} needs residual frames")
            tm, b2, t2 = self._frames(res, "res")
            if (b2, t2) != (b, t) or tm.shape != s.shape[:1] + tm.shape[1:]:
                raise ShapeError(f"rgb and res disagree: {(b, t)} vs {(b2, t2)}")
            tm = self.temporal.stem(tm, taps, "temporal")
        for i, stage in enumerate(STAGES):
            s = self.spatial.stage(i, s)
            if trace is not None:
                trace.taps[("spatial", stage)] = s
            if tm is not None:
                tm = self.temporal.stage(i, tm)
                if trace is not None:
                    trace.taps[("temporal", stage)] = tm
                if i < 3:
                    s2, tm2 = fuse_stage(s, tm, self.variant, i + 1)
                    if trace is not None:
                        if s2 is not s:
                            trace.fusions.append((stage, "temporal->spatial"))
                        if tm2 is not tm:
                            trace.fusions.append((stage, "spatial->temporal"))
                        trace.fused[("spatial", stage)] = s2
                        trace.fused[("temporal", stage)] = tm2
                    s, tm = s2, tm2
        z = s if tm is None else self.fuse(add(s, tm))
        if trace is not None and self.fuse is not None:
            trace.taps[("head", "fuse")] = z
        z = self.cls(z)
        pooled = adaptive_avg_pool(z, groups=b)
        if trace is not None:
            trace.taps[("head", "cls")] = pooled
        return self.out(reshape(pooled, (b, pooled.shape[1])))

    def run_path(self, name: str, x) -> dict[str, Tensor]:
        """Run one path alone, with no fusion; returns its stage outputs."""
        path = self.spatial if name == "spatial" else self.temporal
        if path is None or name not in PATHS:
            raise KeyError(f"model has no {name!r} path")
        y, _, _ = self._frames(x, name)
        taps: dict = {}
        y = path.stem(y, taps, name)
        out = {k[1]: v for k, v in taps.items()}
        for i, stage in enumerate(STAGES):
            y = path.stage(i, y)
            out[stage] = y
        return out


def build_model(config: BackboneConfig, variant: FusionVariant | str = FusionVariant.FULL, seed: int = 0) -> STCNet:
    if isinstance(variant, str):
        variant = FusionVariant.parse(variant)
    config.validate()
    return STCNet(config, variant, np.random.default_rng(seed))


def param_count(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters()))


@dataclass
class Capture:
    activation: Tensor
    logits: Tensor
    tap: str
    path: str


def capture_activations(model: STCNet, rgb, res, tap: str, path: str) -> Capture:
    """Forward once and keep the ``path``/``tap`` activation for gradient capture."""
    if tap not in TAPS:
        raise KeyError(f"unknown tap {tap!r}; valid taps: {list(TAPS)}")
    if path not in model.paths:
        raise KeyError(f"unknown path {path!r} for variant {model.variant.value}; valid paths: {list(model.paths)}")
    trace = ForwardTrace()
    logits = model.forward(rgb, res, trace)
    act = trace.taps[(path, tap)]
    act.retain_grad()
    return Capture(act, logits, tap, path)


# -- checkpoints ----------------------------------------------------------


def encode_checkpoint(model: STCNet, seed: int, epoch: int) -> bytes:
    header = {"config": model.config.to_dict(), "variant": model.variant.value, "seed": seed, "epoch": epoch}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw + encode_records(model.state_records())


def decode_checkpoint(buf: bytes) -> tuple[STCNet, dict]:
    if len(buf) < 4:
        raise ValueError("checkpoint truncated before header length")
    (n,) = struct.unpack_from("<I", buf, 0)
    if 4 + n > len(buf):
        raise ValueError("checkpoint truncated inside JSON header")
    header = json.loads(buf[4:4 + n].decode("utf-8"))
    cfg = BackboneConfig(**header["config"])
    model = build_model(cfg, FusionVariant.parse(header["variant"]), header["seed"])
    model.load_records(decode_records(buf, 4 + n))
    return model, header


def save_checkpoint(path: str | Path, model: STCNet, seed: int, epoch: int) -> None:
    Path(path).write_bytes(encode_checkpoint(model, seed, epoch))


def load_checkpoint(path: str | Path) -> tuple[STCNet, dict]:
    return decode_checkpoint(Path(path).read_bytes())
