"""Layers for the two-path backbone: grouped conv, BN, pools, SE, linear, loss."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, ShapeError, TensorFormatError, _make, decode_tensor, encode_tensor, mean, mul, note_kink, relu, sigmoid


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1

    def __post_init__(self):
        for name in ("kernel", "stride", "padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if min(self.in_channels, self.out_channels, self.groups, *self.kernel, *self.stride) < 1:
            raise ValueError(f"conv spec has a non-positive field: {self}")
        if min(self.padding) < 0:
            raise ValueError(f"negative padding: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(f"channels not divisible by groups: {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}")
        return ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, spec: Conv2dSpec | None = None) -> Tensor:
    """Grouped 2-D cross-correlation over [N, C, H, W].

    Columns are laid out [G, Cg*kh*kw, N*Ho*Wo] so every group is a single GEMM
    with the whole batch on the long axis.
    """
    if spec is None:
        o, cg, kh, kw = weight.shape
        spec = Conv2dSpec(cg, o, (kh, kw))
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, {spec} expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv2d: weight shape {weight.shape} != {spec.weight_shape} for {spec}")
    g = spec.groups
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    ho, wo = spec.output_size(h, w)
    cg, og = c // g, spec.out_channels // g
    k = cg * kh * kw
    p = n * ho * wo

    xd = x.data.transpose(1, 0, 2, 3)  # [C, N, H, W] view
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    padded_shape = xd.shape
    if kh == kw == 1:
        phases = {(0, 0): xd[:, :, ::sh, ::sw]}
        cols = np.ascontiguousarray(phases[0, 0][:, :, :ho, :wo]).reshape(g, k, p)
    else:
        # split strided inputs into stride phases so each window copy is contiguous
        phases = {(a, b): np.ascontiguousarray(xd[:, :, a::sh, b::sw]) for a in range(min(sh, kh)) for b in range(min(sw, kw))}
        cols = np.empty((c, kh, kw, n, ho, wo))
        for i in range(kh):
            for j in range(kw):
                src = phases[i % sh, j % sw]
                cols[:, i, j] = src[:, :, i // sh:i // sh + ho, j // sw:j // sw + wo]
        cols = cols.reshape(g, k, p)
    wmat = weight.data.reshape(g, og, k)
    out = np.matmul(wmat, cols).reshape(spec.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def grad_fn(gout):
        gmat = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(g, og, p)
        gw = gx = gb = None
        if weight.requires_grad:
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).reshape(spec.weight_shape)
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = np.matmul(wmat.transpose(0, 2, 1), gmat)  # [G, K, P]
            if kh == kw == 1 and sh == sw == 1 and not (ph or pw):
                return gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3), gw, gb
            gcols = gcols.reshape(c, kh, kw, n, ho, wo)
            gphase = {key: np.zeros(arr.shape) for key, arr in phases.items()}
            for i in range(kh):
                for j in range(kw):
                    gphase[i % sh, j % sw][:, :, i // sh:i // sh + ho, j // sw:j // sw + wo] += gcols[:, i, j]
            gxp = np.zeros(padded_shape)
            for (a, b), arr in gphase.items():
                gxp[:, :, a::sh, b::sw] = arr
            gx = gxp[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn, "conv2d")


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    if ho < 1 or wo < 1 or padding * 2 > kernel:
        raise ShapeError(f"maxpool2d: degenerate output for input {h}x{w}, k={kernel}, s={stride}, p={padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)  # first occurrence on ties
    note_kink(arg)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gxp = np.zeros(xp.shape)
        for i in range(kernel):
            for j in range(kernel):
                sel = arg == i * kernel + j
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(sel, g, 0.0)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return _make(out, (x,), grad_fn, "maxpool2d")


def adaptive_avg_pool(x: Tensor, groups: int = 1) -> Tensor:
    """Mean over every non-channel axis, separately for ``groups`` equal slices of axis 0.

    With ``groups=1`` an [N, C, H, W] input collapses to [1, C, 1, 1]; frames of a
    clip ride axis 0, so this also averages over time.
    """
    n, c, h, w = x.shape
    if n % groups:
        raise ShapeError(f"adaptive_avg_pool: {n} rows not divisible into {groups} groups")
    per = n // groups
    stacked = _make(x.data.reshape(groups, per, c, h, w), (x,), lambda g: (g.reshape(n, c, h, w),), "reshape")
    pooled = mean(stacked, axis=(1, 3, 4))  # [groups, C]
    return _make(pooled.data.reshape(groups, c, 1, 1), (pooled,), lambda g: (g.reshape(groups, c),), "reshape")


def spatial_mean(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] global average over H and W."""
    return mean(x, axis=(2, 3))


def _channel_sum(a: np.ndarray) -> np.ndarray:
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of [N, C, H, W]; updates running stats in place when training."""
    n, c, h, w = x.shape
    m = n * h * w
    shape = (1, c, 1, 1)
    if training:
        if m < 2:
            raise ValueError("batchnorm in train mode needs at least 2 values per channel")
        mu = _channel_sum(x.data) / m
        xc = x.data - mu.reshape(shape)
        var = _channel_sum(xc * xc) / m
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
        xc = x.data - mu.reshape(shape)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * invstd.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def grad_fn(g):
        gb = _channel_sum(g)
        gg = _channel_sum(g * xhat)
        gx = None
        if x.requires_grad:
            scale = (gamma.data * invstd).reshape(shape)
            if training:
                gx = scale * (g - (gb / m).reshape(shape) - xhat * (gg / m).reshape(shape))
            else:
                gx = g * scale
        return gx, gg, gb

    return _make(out, (x, gamma, beta), grad_fn, "batchnorm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x [N, Din] @ weight[Dout, Din].T + bias."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn, "linear")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logsum - z[np.arange(n), labels])
    probs = np.exp(z - logsum[:, None])

    def grad_fn(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g[0] / n),)

    return _make(np.array([loss]), (logits,), grad_fn, "cross_entropy")


# -- modules ---------------------------------------------------------------


class Module:
    training = True

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _own_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for name, v in vars(self).items():
            if isinstance(v, Tensor):
                yield name, v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._own_tensors():
            yield prefix + name, t
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def state_records(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, in definition order."""
        return [(n, p.data) for n, p in self.named_parameters()] + list(self.named_buffers())

    def load_records(self, records: list[tuple[str, np.ndarray]]) -> None:
        targets: dict[str, tuple[object, str]] = {}
        for name, p in self.named_parameters():
            targets[name] = (p, "param")
        for name, b in self.named_buffers():
            targets[name] = (b, "buffer")
        missing = set(targets) - {n for n, _ in records}
        if missing:
            raise KeyError(f"checkpoint lacks records: {sorted(missing)[:5]}")
        for name, arr in records:
            if name not in targets:
                raise KeyError(f"unexpected record {name!r}")
            obj, kind = targets[name]
            cur = obj.data if kind == "param" else obj
            if cur.shape != arr.shape:
                raise ShapeError(f"record {name!r}: shape {arr.shape} != {cur.shape}")
            cur[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)


class Conv2d(Module):
    def __init__(self, spec: Conv2dSpec, rng: np.random.Generator, bias: bool = False):
        self.spec = spec
        fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
        self.weight = he_normal(rng, spec.weight_shape, fan_in)
        if bias:
            self.bias = Tensor(np.zeros(spec.out_channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, getattr(self, "bias", None), self.spec)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        if not 0 < momentum < 1:
            raise ValueError(f"batchnorm momentum must lie in (0, 1), got {momentum}")
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                         self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = Tensor(rng.standard_normal((d_out, d_in)) / np.sqrt(d_in), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


@dataclass(frozen=True)
class SEBlockSpec:
    channels: int
    reduction_ratio: int = 16

    def __post_init__(self):
        if self.channels < 1 or self.reduction_ratio < 1:
            raise ValueError(f"SE spec fields must be positive: {self}")
        if self.channels % self.reduction_ratio:
            raise ValueError(f"SE reduction ratio {self.reduction_ratio} does not divide {self.channels} channels")

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction_ratio


def se_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Gate channels by sigmoid(W2 relu(W1 avg(x) + b1) + b2)."""
    n, c = x.shape[:2]
    s = sigmoid(linear(relu(linear(spatial_mean(x), w1, b1)), w2, b2))
    gate = _make(s.data.reshape(n, c, 1, 1), (s,), lambda g: (g.reshape(n, c),), "reshape")
    return mul(x, gate)


class SEBlock(Module):
    def __init__(self, spec: SEBlockSpec, rng: np.random.Generator):
        self.spec = spec
        self.fc1 = Linear(spec.channels, spec.hidden, rng)
        self.fc2 = Linear(spec.hidden, spec.channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.channels:
            raise ShapeError(f"SE block built for {self.spec.channels} channels got {x.shape[1]}")
        return se_block(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


# -- weight records -------------------------------------------------------


def encode_records(records: list[tuple[str, np.ndarray]]) -> bytes:
    parts = []
    for name, arr in records:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + encode_tensor(arr))
    return b"".join(parts)


def decode_records(buf: bytes, offset: int = 0) -> list[tuple[str, np.ndarray]]:
    out = []
    while offset < len(buf):
        if offset + 4 > len(buf):
            raise TensorFormatError("truncated record name length")
        (length,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if offset + length > len(buf):
            raise TensorFormatError("truncated record name")
        name = buf[offset:offset + length].decode("utf-8")
        offset += length
        arr, offset = decode_tensor(buf, offset)
        out.append((name, arr))
    return out
