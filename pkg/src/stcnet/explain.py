"""Grad-CAM over the last-stage activations of either path, plus PGM/JSON export."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import STCNet, capture_activations
from .tensor import Tensor, _make, backward
from .video import Clip, ResidualSpec, SamplerSpec, parse_source_id, prepare_inputs

AGGREGATE = "aggregate"
CAM_TAP = "res4"


@dataclass
class Heatmap:
    values: np.ndarray  # [Hc, Wc] in [0, 1]
    path: str
    frame: int | str  # frame index or "aggregate"
    target_class: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"heatmap values must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise ValueError("heatmap values must be finite and lie in [0, 1]")
        self.values = v

    def argmax_cell(self) -> tuple[int, int]:
        i = int(np.argmax(self.values))
        return divmod(i, self.values.shape[1])


def max_normalize(m: np.ndarray) -> np.ndarray:
    """ReLU then divide by the maximum; an all-zero map stays all-zero."""
    m = np.maximum(m, 0.0)
    top = m.max()
    return m / top if top > 0 else m


def cam_maps(act: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Rectified class activation maps [T, h, w] from activations and gradients [T, C, h, w]."""
    if act.shape != grad.shape or act.ndim != 4:
        raise ValueError(f"activation {act.shape} and gradient {grad.shape} must be equal 4-D shapes")
    weights = grad.mean(axis=(2, 3))  # [T, C]
    return np.maximum(np.einsum("tc,tchw->thw", weights, act), 0.0)


def grad_cam(model: STCNet, rgb: np.ndarray, res: np.ndarray | None, target_class: int,
             path: str = "temporal") -> list[Heatmap]:
    """One heatmap per sampled frame followed by the mean-over-frames aggregate.

    The model runs in eval mode with parameters frozen, so neither weights, their
    gradients nor batchnorm statistics change.
    """
    k = model.config.n_classes
    if not 0 <= target_class < k:
        raise ValueError(f"target_class {target_class} outside [0, {k})")
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 4:
        raise ValueError(f"grad_cam takes one clip [T,3,R,R], got {rgb.shape}")
    params = model.parameters()
    flags = [p.requires_grad for p in params]
    was_training = model.training
    model.eval()
    try:
        for p in params:
            p.requires_grad = False
        # gradients flow from the inputs instead of the frozen weights
        x_rgb = Tensor(rgb, requires_grad=True)
        x_res = Tensor(res, requires_grad=True) if res is not None else None
        cap = capture_activations(model, x_rgb, x_res, CAM_TAP, path)
        backward(_pick(cap.logits, target_class))
        act, grad = cap.activation.data, cap.activation.grad
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f
        model.train(was_training)
    maps = cam_maps(act, grad)
    out = [Heatmap(max_normalize(m), path, t, target_class) for t, m in enumerate(maps)]
    out.append(Heatmap(max_normalize(maps.mean(axis=0)), path, AGGREGATE, target_class))
    return out


def _pick(logits: Tensor, c: int) -> Tensor:
    """The pre-softmax logit of class ``c`` for the first clip, as a scalar."""
    shape = logits.shape

    def grad_fn(g):
        d = np.zeros(shape)
        d[0, c] = g[0]
        return (d,)

    return _make(np.array([logits.data[0, c]]), (logits,), grad_fn, "select")


def upscale_nearest(values: np.ndarray, size: int) -> np.ndarray:
    hc, wc = values.shape
    rows = np.arange(size) * hc // size
    cols = np.arange(size) * wc // size
    return values[rows][:, cols]


def to_gray(values: np.ndarray) -> np.ndarray:
    """[0, 1] -> uint8 with round-half-up, so 0.5 maps to 128."""
    return np.floor(values * 255.0 + 0.5).astype(np.uint8)


def encode_pgm(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    parts = buf.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("not a P5 graymap with maxval 255")
    w, h = (int(v) for v in parts[1].split())
    data = parts[3]
    if len(data) != w * h:
        raise ValueError(f"graymap payload has {len(data)} bytes, expected {w * h}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def sidecar_json(h: Heatmap) -> str:
    doc = {"path": h.path, "frame": h.frame, "class": h.target_class,
           "shape": list(h.values.shape), "values": h.values.tolist()}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def heatmap_from_json(text: str) -> Heatmap:
    doc = json.loads(text)
    values = np.array(doc["values"], dtype=np.float64).reshape(doc["shape"])
    return Heatmap(values, doc["path"], doc["frame"], doc["class"])


def heatmap_stem(h: Heatmap, prefix: str = "") -> str:
    frame = h.frame if h.frame == AGGREGATE else f"t{int(h.frame):02d}"
    return f"{prefix}{h.path}_c{h.target_class}_{frame}"


def export_heatmap(h: Heatmap, out_dir: str | Path, resolution: int, prefix: str = "") -> tuple[Path, Path]:
    """Write <stem>.pgm (nearest-neighbour upscaled) and <stem>.json (native-resolution values)."""
    out = Path(out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"heatmap destination {out} is not a directory")
    stem = heatmap_stem(h, prefix)
    pgm, side = out / f"{stem}.pgm", out / f"{stem}.json"
    pgm.write_bytes(encode_pgm(to_gray(upscale_nearest(h.values, resolution))))
    side.write_text(sidecar_json(h))
    return pgm, side


def cell_quadrant(cell: tuple[int, int], shape: tuple[int, int]) -> int:
    """Quadrant (0 TL, 1 TR, 2 BL, 3 BR) containing the centre of a grid cell."""
    i, j = cell
    hc, wc = shape
    return 2 * int(2 * i + 1 >= hc) + int(2 * j + 1 >= wc)


def localization_hits(model: STCNet, clips: Sequence[Clip], sampler: SamplerSpec = SamplerSpec(),
                      residual: ResidualSpec = ResidualSpec(), path: str = "temporal") -> list[bool]:
    """Whether each clip's aggregate heatmap peaks in the clip's ground-truth quadrant."""
    hits = []
    for c in clips:
        q = int(parse_source_id(c.source_id)["quadrant"])
        rgb, res = prepare_inputs(c, sampler, residual, "center")
        agg = grad_cam(model, rgb, res if model.temporal is not None else None, 1, path)[-1]
        hits.append(cell_quadrant(agg.argmax_cell(), agg.values.shape) == q)
    return hits
