"""Clips, segment sampling, residual frames, augmentation, synthetic data, container I/O."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Sequence

import cv2
import numpy as np

CLIP_MAGIC = b"STCV1"
SMOKE, NO_SMOKE = 1, 0


@dataclass
class Clip:
    frames: np.ndarray  # [T, H, W, 3] uint8
    label: int
    source_id: str = ""
    fps: float = 15.0

    def __post_init__(self):
        f = self.frames
        if f.dtype != np.uint8 or f.ndim != 4 or f.shape[3] != 3:
            raise ValueError(f"frames must be uint8 [T,H,W,3], got {f.dtype} {f.shape}")
        if f.shape[0] < 2:
            raise ValueError(f"clip {self.source_id!r} has {f.shape[0]} frames; need at least 2")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def info(self) -> dict[str, str]:
        return parse_source_id(self.source_id)


def parse_source_id(source_id: str) -> dict[str, str]:
    """Split 'view3/clip00042/plume/q1' style ids into their labelled parts."""
    parts = source_id.split("/")
    out = {"view": parts[0]} if parts and parts[0] else {}
    for p in parts[1:]:
        if p.startswith("clip"):
            out["clip"] = p
        elif p.startswith("q") and p[1:].isdigit():
            out["quadrant"] = p[1:]
        else:
            out["kind"] = p
    return out


# -- sampling and residual frames ---------------------------------------------


@dataclass(frozen=True)
class SamplerSpec:
    n_segments: int = 8

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError(f"n_segments must be positive, got {self.n_segments}")


def sample_frames(n_source: int, spec: SamplerSpec = SamplerSpec(), mode: str = "center",
                  seed: int | np.random.Generator | None = None) -> list[int]:
    """One frame index per equal segment [floor(kL/N), floor((k+1)L/N))."""
    n = spec.n_segments
    if n_source < n:
        raise ValueError(f"cannot sample {n} segments from {n_source} frames")
    bounds = [(k * n_source // n, (k + 1) * n_source // n) for k in range(n)]
    if mode == "center":
        return [(a + b) // 2 for a, b in bounds]
    if mode == "random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return [int(rng.integers(a, b)) for a, b in bounds]
    raise ValueError(f"unknown sampling mode {mode!r}; use 'center' or 'random'")


@dataclass(frozen=True)
class ResidualSpec:
    alpha: float = 5.0
    beta: float = 255.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0 < self.beta <= 255:
            raise ValueError(f"beta must lie in (0, 255], got {self.beta}")


def neighbor_index(t: int, n_source: int) -> int:
    """The next source frame, or the previous one for the last frame."""
    return t + 1 if t + 1 < n_source else t - 1


def residual_frames(frames: np.ndarray, indices: Sequence[int], spec: ResidualSpec = ResidualSpec()) -> np.ndarray:
    """min(alpha * |F_t - F_next|, beta) per pixel and channel, for each sampled t."""
    n_source = frames.shape[0]
    if n_source < 2:
        raise ValueError("residual frames need at least 2 source frames")
    cur = frames[list(indices)].astype(np.float64)
    nxt = frames[[neighbor_index(t, n_source) for t in indices]].astype(np.float64)
    return np.minimum(spec.alpha * np.abs(cur - nxt), spec.beta)


def residual_energy(frames: np.ndarray, spec: ResidualSpec = ResidualSpec(),
                    region: tuple[slice, slice] | None = None) -> float:
    """Mean residual value over all frames (optionally within a region)."""
    res = residual_frames(frames, range(frames.shape[0]), spec)
    if region is not None:
        res = res[:, region[0], region[1]]
    return float(res.mean())


# -- augmentation --------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    out_size: int | None = None  # None keeps the input resolution
    flip_prob: float = 0.0
    crop_prob: float = 0.0
    crop_scale_range: tuple[float, float] = (1.0, 1.0)  # fraction of frame area kept
    perspective_prob: float = 0.0
    perspective_strength: float = 0.0  # max corner shift as a fraction of size
    erase_prob: float = 0.0
    erase_area_range: tuple[float, float] = (0.02, 0.1)
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob", "crop_prob", "perspective_prob", "erase_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        lo, hi = self.erase_area_range
        if not 0 < lo <= hi:
            raise ValueError(f"erase_area_range must satisfy 0 < lo <= hi, got {self.erase_area_range}")
        if hi > 1:
            raise ValueError(f"erase area {hi} exceeds the frame")
        if not 0 <= self.perspective_strength < 0.5:
            raise ValueError(f"perspective_strength must lie in [0, 0.5), got {self.perspective_strength}")
        for name in ("brightness", "contrast", "saturation"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} jitter must lie in [0, 1)")
        if self.out_size is not None and self.out_size < 1:
            raise ValueError(f"out_size must be positive, got {self.out_size}")

    @classmethod
    def training_default(cls, out_size: int | None = None, seed: int = 0) -> "AugmentSpec":
        return cls(out_size=out_size, flip_prob=0.5, crop_prob=0.5, crop_scale_range=(0.7, 1.0),
                   perspective_prob=0.3, perspective_strength=0.08, erase_prob=0.2,
                   erase_area_range=(0.02, 0.08), brightness=0.15, contrast=0.15, saturation=0.15,
                   rng_seed=seed)


def hflip(frames: np.ndarray) -> np.ndarray:
    return frames[:, :, ::-1].copy()


def augment(clip: Clip, spec: AugmentSpec, rng: np.random.Generator | None = None) -> Clip:
    """Apply one randomly drawn transform identically to every frame of ``clip``."""
    rng = rng if rng is not None else np.random.default_rng(spec.rng_seed)
    frames = clip.frames
    t, h, w, _ = frames.shape
    oh, ow = (spec.out_size, spec.out_size) if spec.out_size else (h, w)
    flip = rng.random() < spec.flip_prob

    # source quadrilateral (x, y corners) mapped onto the output square
    x0, y0, x1, y1 = 0.0, 0.0, float(w), float(h)
    if rng.random() < spec.crop_prob:
        area = rng.uniform(*spec.crop_scale_range)
        side_w, side_h = w * np.sqrt(area), h * np.sqrt(area)
        x0 = rng.uniform(0, w - side_w)
        y0 = rng.uniform(0, h - side_h)
        x1, y1 = x0 + side_w, y0 + side_h
    src = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)
    if rng.random() < spec.perspective_prob and spec.perspective_strength > 0:
        jitter = rng.uniform(-1, 1, size=(4, 2)) * spec.perspective_strength * np.array([x1 - x0, y1 - y0])
        src = src + jitter
    geometric = not np.array_equal(src, [[0, 0], [w, 0], [w, h], [0, h]]) or (oh, ow) != (h, w)

    if geometric:
        dst = np.array([[0, 0], [ow, 0], [ow, oh], [0, oh]], dtype=np.float32)
        m = cv2.getPerspectiveTransform(src.astype(np.float32), dst)
        frames = np.stack([cv2.warpPerspective(f, m, (ow, oh), flags=cv2.INTER_LINEAR,
                                               borderMode=cv2.BORDER_REFLECT_101) for f in frames])
    else:
        frames = frames.copy()
    if flip:
        frames = hflip(frames)

    if rng.random() < spec.erase_prob:
        area = rng.uniform(*spec.erase_area_range) * oh * ow
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        eh = int(min(oh, max(1, round(np.sqrt(area * aspect)))))
        ew = int(min(ow, max(1, round(np.sqrt(area / aspect)))))
        ey = int(rng.integers(0, oh - eh + 1))
        ex = int(rng.integers(0, ow - ew + 1))
        frames[:, ey:ey + eh, ex:ex + ew] = rng.integers(0, 256, size=3, dtype=np.uint8)

    if spec.brightness or spec.contrast or spec.saturation:
        b = 1 + rng.uniform(-spec.brightness, spec.brightness)
        c = 1 + rng.uniform(-spec.contrast, spec.contrast)
        s = 1 + rng.uniform(-spec.saturation, spec.saturation)
        f = frames.astype(np.float64) * b
        gray = f.mean(axis=3, keepdims=True)
        f = gray + (f - gray) * s
        f = f.mean() + (f - f.mean()) * c
        frames = np.clip(np.rint(f), 0, 255).astype(np.uint8)

    return Clip(frames, clip.label, clip.source_id, clip.fps)


# -- network inputs --------------------------------------------------------------


def to_chw(frames: np.ndarray) -> np.ndarray:
    """[T, H, W, 3] values on the 0..255 scale -> [T, 3, H, W] float64 in [0, 1]."""
    return np.ascontiguousarray(np.asarray(frames, dtype=np.float64).transpose(0, 3, 1, 2) / 255.0)


def prepare_inputs(
    clip: Clip,
    sampler: SamplerSpec = SamplerSpec(),
    residual: ResidualSpec = ResidualSpec(),
    mode: str = "center",
    rng: np.random.Generator | None = None,
    augment_spec: AugmentSpec | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample, (optionally) augment and encode one clip as (rgb, res), each [T, 3, R, R]."""
    n_source = clip.n_frames
    idx = sample_frames(n_source, sampler, mode, rng)
    if augment_spec is not None:
        # only the sampled frames and their residual partners are transformed
        needed = sorted(set(idx) | {neighbor_index(t, n_source) for t in idx})
        local = {t: i for i, t in enumerate(needed)}
        sub = augment(Clip(clip.frames[needed], clip.label, clip.source_id, clip.fps), augment_spec, rng)
        frames = sub.frames
        cur = [local[t] for t in idx]
        nxt = [local[neighbor_index(t, n_source)] for t in idx]
    else:
        frames = clip.frames
        cur = idx
        nxt = [neighbor_index(t, n_source) for t in idx]
    rgb = frames[cur]
    res = np.minimum(residual.alpha * np.abs(rgb.astype(np.float64) - frames[nxt].astype(np.float64)), residual.beta)
    return to_chw(rgb), to_chw(res)


# -- synthetic smoke / distractor clips ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_clips: int = 400
    frames_per_clip: int = 16
    resolution: int = 56
    class_mix: float = 0.5  # fraction of smoke clips
    seed: int = 0
    n_views: int = 6
    noise_amp: int = 1  # sensor noise, integer levels

    def __post_init__(self):
        if self.n_clips < 1:
            raise ValueError("n_clips must be positive")
        if self.frames_per_clip < 2:
            raise ValueError("frames_per_clip must be at least 2")
        if self.resolution < 32 or self.resolution % 8:
            raise ValueError(f"resolution {self.resolution} must be a multiple of 8 and at least 32")
        if not 0 <= self.class_mix <= 1:
            raise ValueError("class_mix must lie in [0, 1]")
        if self.n_views < 1 or self.noise_amp < 0:
            raise ValueError("n_views must be positive and noise_amp non-negative")


NEGATIVE_KINDS = ("steam", "box", "steam", "static")


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.standard_normal((cells, cells)).astype(np.float32)
    return cv2.resize(grid, (size, size), interpolation=cv2.INTER_CUBIC).astype(np.float64)


def _view_background(rng: np.random.Generator, r: int) -> np.ndarray:
    yy = np.linspace(0, 1, r)[:, None]
    sky = np.array(rng.uniform([150, 160, 170], [200, 210, 235]))
    ground = np.array(rng.uniform([50, 60, 40], [110, 120, 90]))
    horizon = rng.uniform(0.45, 0.75)
    mix = np.clip((yy - horizon) * 12 + 0.5, 0, 1)[..., None]
    bg = (1 - mix) * sky + mix * ground
    bg = np.broadcast_to(bg, (r, r, 3)).copy()
    for _ in range(rng.integers(2, 5)):  # buildings / stacks
        bw, bh = rng.integers(r // 10, r // 4, size=2)
        bx = rng.integers(0, r - bw)
        by = int(horizon * r) - bh + rng.integers(0, r // 6)
        bg[max(by, 0):by + bh, bx:bx + bw] = rng.uniform(40, 140, size=3)
    bg += 12 * _smooth_noise(rng, r, 6)[..., None]
    bg += 4 * rng.standard_normal((r, r, 1))
    return bg


def _blob(r: int, cy: float, cx: float, puffs: np.ndarray, scale: float) -> np.ndarray:
    """Sum of anisotropic gaussian puffs centred near (cy, cx); puffs rows are (dy, dx, sy, sx, weight)."""
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float64)
    out = np.zeros((r, r))
    for dy, dx, sy, sx, wgt in puffs:
        out += wgt * np.exp(-0.5 * (((yy - cy - dy) / (sy * scale)) ** 2 + ((xx - cx - dx) / (sx * scale)) ** 2))
    return np.clip(out, 0, 1)


def _random_puffs(rng: np.random.Generator, r: int) -> np.ndarray:
    k = int(rng.integers(3, 6))
    base = r / 11.0
    return np.column_stack([
        rng.normal(0, base, k), rng.normal(0, base, k),
        rng.uniform(0.6, 1.3, k) * base, rng.uniform(0.6, 1.3, k) * base,
        rng.uniform(0.6, 1.0, k),
    ])


def _quadrant_center(q: int, r: int) -> tuple[float, float]:
    return (q // 2 + 0.5) * r / 2, (q % 2 + 0.5) * r / 2


def _contrasting_level(rng: np.random.Generator, lo: float, hi: float, local: float, gap: float = 35.0) -> float:
    """Gray level in [lo, hi] at least ``gap`` away from the local background where possible."""
    level = rng.uniform(lo, hi)
    for _ in range(20):
        if abs(level - local) >= gap:
            break
        level = rng.uniform(lo, hi)
    return level


def _render_clip(rng: np.random.Generator, spec: SyntheticSpec, bg: np.ndarray, kind: str, q: int) -> np.ndarray:
    r, n = spec.resolution, spec.frames_per_clip
    base = bg + rng.uniform(-10, 10) + 3 * _smooth_noise(rng, r, 8)[..., None]
    frames = np.repeat(base[None], n, axis=0)
    texture = 0.75 + 0.25 * _smooth_noise(rng, 2 * r, 10)  # moves with the plume
    qy, qx = _quadrant_center(q, r)

    if kind in ("plume", "steam"):
        puffs = _random_puffs(rng, r)
        local = float(base[quadrant_slices(q, r)].mean())
        lo, hi = (90.0, 210.0) if kind == "plume" else (120.0, 235.0)
        level = _contrasting_level(rng, lo, hi, local)
        opacity = rng.uniform(0.6, 0.9)
        if kind == "plume":
            speed = rng.uniform(0.8, 1.3)
            angle = rng.uniform(0, 2 * np.pi)
            vy, vx = speed * np.sin(angle), speed * np.cos(angle)
        else:
            vy = vx = 0.0
            qy, qx = qy + rng.uniform(-4, 4), qx + rng.uniform(-4, 4)
            period = rng.uniform(6, 12)
            phase = rng.uniform(0, 2 * np.pi)
        tint = level + rng.uniform(-6, 6, size=3)
        for t in range(n):
            dt = t - (n - 1) / 2
            cy, cx = qy + vy * dt, qx + vx * dt
            if kind == "plume":
                scale, op = 1.0 + 0.01 * t, opacity
            else:
                wave = np.sin(2 * np.pi * t / period + phase)
                scale, op = 1.0 + 0.03 * wave, opacity * (1.0 + 0.05 * wave)
            alpha = _blob(r, cy, cx, puffs, scale)
            oy, ox = int(round(r / 2 - vy * dt)), int(round(r / 2 - vx * dt))
            oy, ox = min(max(oy, 0), r), min(max(ox, 0), r)
            alpha = np.clip(alpha * texture[oy:oy + r, ox:ox + r] * op, 0, 1)[..., None]
            frames[t] = frames[t] * (1 - alpha) + tint * alpha
    elif kind == "box":
        bh, bw = rng.integers(r // 7, r // 4, size=2)
        color = rng.uniform(0, 255, size=3)
        speed = rng.uniform(1.0, 2.0)
        angle = rng.uniform(0, 2 * np.pi)
        vy, vx = speed * np.sin(angle), speed * np.cos(angle)
        for t in range(n):
            dt = t - (n - 1) / 2
            y0 = int(round(qy + vy * dt - bh / 2))
            x0 = int(round(qx + vx * dt - bw / 2))
            frames[t, max(y0, 0):max(y0 + bh, 0), max(x0, 0):max(x0 + bw, 0)] = color
    elif kind != "static":
        raise ValueError(f"unknown clip kind {kind!r}")

    if spec.noise_amp:
        frames = frames + rng.integers(-spec.noise_amp, spec.noise_amp + 1, size=frames.shape)
    return np.clip(np.rint(frames), 0, 255).astype(np.uint8)


def synth_labels(n: int, class_mix: float) -> list[int]:
    """Evenly interleaved labels with exactly floor(n * class_mix) positives."""
    return [int(np.floor((i + 1) * class_mix + 1e-9) - np.floor(i * class_mix + 1e-9)) for i in range(n)]


def synth_generate(spec: SyntheticSpec) -> list[Clip]:
    """Seeded smoke-plume positives and steam / moving-box / static negatives."""
    r = spec.resolution
    backgrounds = [_view_background(np.random.default_rng([spec.seed, 7919, v]), r) for v in range(spec.n_views)]
    clips = []
    n_neg = 0
    for i, label in enumerate(synth_labels(spec.n_clips, spec.class_mix)):
        rng = np.random.default_rng([spec.seed, i])
        view = (i // 2) % spec.n_views  # pairs of clips share a view, so no view is single-class
        q = int(rng.integers(0, 4))
        if label == SMOKE:
            kind = "plume"
        else:
            kind = NEGATIVE_KINDS[n_neg % len(NEGATIVE_KINDS)]
            n_neg += 1
        frames = _render_clip(rng, spec, backgrounds[view], kind, q)
        clips.append(Clip(frames, label, f"view{view}/clip{i:05d}/{kind}/q{q}", 15.0))
    return clips


def quadrant_slices(q: int, r: int) -> tuple[slice, slice]:
    h = r // 2
    return slice((q // 2) * h, (q // 2 + 1) * h), slice((q % 2) * h, (q % 2 + 1) * h)


# -- container ---------------------------------------------------------------------


class ClipFormatError(ValueError):
    pass


class BadMagicError(ClipFormatError):
    pass


class TruncatedError(ClipFormatError):
    pass


class DimensionOverflowError(ClipFormatError):
    pass


def encode_clips(clips: Sequence[Clip]) -> bytes:
    parts = [CLIP_MAGIC, struct.pack("<I", len(clips))]
    for c in clips:
        t, h, w, _ = c.frames.shape
        if max(t, h, w) > 0xFFFF:
            raise DimensionOverflowError(f"clip {c.source_id!r}: dims {t}x{h}x{w} exceed u16")
        sid = c.source_id.encode("utf-8")
        parts.append(struct.pack("<HHHBI", t, h, w, c.label, len(sid)))
        parts.append(sid)
        parts.append(struct.pack("<f", c.fps))
        parts.append(np.ascontiguousarray(c.frames).tobytes())
    return b"".join(parts)


def decode_clips(buf: bytes) -> list[Clip]:
    if len(buf) < len(CLIP_MAGIC) and CLIP_MAGIC.startswith(bytes(buf)):
        raise TruncatedError(f"buffer of {len(buf)} bytes ends inside the magic")
    if buf[:len(CLIP_MAGIC)] != CLIP_MAGIC:
        raise BadMagicError(f"expected magic {CLIP_MAGIC!r}, found {bytes(buf[:len(CLIP_MAGIC)])!r}")
    off = len(CLIP_MAGIC)

    def need(k: int, what: str):
        if off + k > len(buf):
            raise TruncatedError(f"container truncated while reading {what} at byte {off}")

    need(4, "clip count")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    clips = []
    for i in range(count):
        need(11, f"clip {i} header")
        t, h, w, label, sid_len = struct.unpack_from("<HHHBI", buf, off)
        off += 11
        if t < 2 or h == 0 or w == 0:
            raise DimensionOverflowError(f"clip {i}: invalid dims {t}x{h}x{w}")
        need(sid_len, f"clip {i} source id")
        sid = bytes(buf[off:off + sid_len]).decode("utf-8")
        off += sid_len
        need(4, f"clip {i} fps")
        (fps,) = struct.unpack_from("<f", buf, off)
        off += 4
        n = t * h * w * 3
        need(n, f"clip {i} pixels")
        frames = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).reshape(t, h, w, 3).copy()
        off += n
        if label not in (0, 1):
            raise ClipFormatError(f"clip {i}: label {label} not in {{0, 1}}")
        clips.append(Clip(frames, label, sid, float(fps)))
    if off != len(buf):
        raise ClipFormatError(f"{len(buf) - off} trailing bytes after {count} clips")
    return clips


def dataset_digest(clips: Sequence[Clip]) -> str:
    return hashlib.sha256(encode_clips(clips)).hexdigest()
