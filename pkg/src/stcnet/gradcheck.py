"""Finite-difference gradient checks for every differentiable op and the end-to-end loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .model import BackboneConfig, FusionVariant, build_model
from .tensor import (
    Tensor, add, backward, finite_diff_check, mean, mul, record_kinks, relu, reshape, same_pattern, scale, sigmoid,
    sum_all,
)

TOLERANCE = 1e-4
EPS = 1e-4
KINK_GAP = 1e-3


def away_from_zero(x: np.ndarray, gap: float = KINK_GAP) -> np.ndarray:
    """Push entries with |x| < gap out to +/-gap so central differences never straddle 0."""
    x = x.copy()
    near = np.abs(x) < gap
    x[near] = np.where(x[near] >= 0, gap, -gap) * 2
    return x


def distinct(x: np.ndarray, gap: float = KINK_GAP) -> np.ndarray:
    """Replace values by their ranks spaced 2*gap apart, so max-pool windows have no near ties."""
    ranks = np.argsort(np.argsort(x, axis=None)).reshape(x.shape)
    return (ranks - x.size / 2) * gap * 2


def _probe(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalar <out, W> with fixed random W, so every output coordinate matters."""
    w = Tensor(rng.standard_normal(out.shape))
    return sum_all(mul(out, w))


@dataclass
class OpCase:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _conv_case(spec: nn.Conv2dSpec, hw: tuple[int, int], wrt: str, bias: bool = False):
    def build(rng):
        x = rng.standard_normal((2, spec.in_channels, *hw))
        w = rng.standard_normal(spec.weight_shape) * 0.5
        b = rng.standard_normal(spec.out_channels) if bias else None
        probe_rng_seed = int(rng.integers(2**31))

        def f(t: Tensor) -> Tensor:
            xs = t if wrt == "x" else Tensor(x)
            ws = t if wrt == "w" else Tensor(w)
            bs = None if b is None else (t if wrt == "b" else Tensor(b))
            return _probe(nn.conv2d(xs, ws, bs, spec), np.random.default_rng(probe_rng_seed))

        return f, {"x": x, "w": w, "b": b}[wrt]

    return build


def _unary(op: Callable[[Tensor], Tensor], shape, prep=lambda a: a):
    def build(rng):
        x = prep(rng.standard_normal(shape))
        s = int(rng.integers(2**31))
        return (lambda t: _probe(op(t), np.random.default_rng(s))), x

    return build


def _binary(op, shape_a, shape_b, wrt: int):
    def build(rng):
        a, b = rng.standard_normal(shape_a), rng.standard_normal(shape_b)
        s = int(rng.integers(2**31))

        def f(t):
            ta = t if wrt == 0 else Tensor(a)
            tb = t if wrt == 1 else Tensor(b)
            return _probe(op(ta, tb), np.random.default_rng(s))

        return f, (a, b)[wrt]

    return build


def _bn_case(wrt: str, training: bool):
    def build(rng):
        x = rng.standard_normal((3, 4, 3, 3)) * 2 + 1
        g, b = rng.standard_normal(4), rng.standard_normal(4)
        rm, rv = rng.standard_normal(4), rng.uniform(0.5, 2, 4)
        s = int(rng.integers(2**31))

        def f(t):
            xs = t if wrt == "x" else Tensor(x)
            gs = t if wrt == "gamma" else Tensor(g)
            bs = t if wrt == "beta" else Tensor(b)
            # stats buffers are copied so repeated evaluations stay identical
            return _probe(nn.batchnorm(xs, gs, bs, rm.copy(), rv.copy(), training), np.random.default_rng(s))

        return f, {"x": x, "gamma": g, "beta": b}[wrt]

    return build


def _linear_case(wrt: str):
    def build(rng):
        x, w, b = rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)
        s = int(rng.integers(2**31))

        def f(t):
            args = {"x": Tensor(x), "w": Tensor(w), "b": Tensor(b)}
            args[wrt] = t
            return _probe(nn.linear(args["x"], args["w"], args["b"]), np.random.default_rng(s))

        return f, {"x": x, "w": w, "b": b}[wrt]

    return build


def _ce_case(rng):
    logits = rng.standard_normal((4, 3)) * 3
    labels = rng.integers(0, 3, 4)
    return (lambda t: nn.softmax_cross_entropy(t, labels)), logits


def _se_case(wrt: str):
    def build(rng):
        c, h = 8, 2
        arrays = {"x": rng.standard_normal((2, c, 3, 3)), "w1": rng.standard_normal((h, c)),
                  "b1": away_from_zero(rng.standard_normal(h)), "w2": rng.standard_normal((c, h)),
                  "b2": rng.standard_normal(c)}
        s = int(rng.integers(2**31))

        def f(t):
            args = {k: Tensor(v) for k, v in arrays.items()}
            args[wrt] = t
            return _probe(nn.se_block(args["x"], args["w1"], args["b1"], args["w2"], args["b2"]),
                          np.random.default_rng(s))

        return f, arrays[wrt]

    return build


def op_cases() -> list[OpCase]:
    s = (2, 3, 4, 5)
    cases = [
        OpCase("add.a", _binary(add, s, s, 0)),
        OpCase("add.b", _binary(add, s, s, 1)),
        OpCase("scale", _unary(lambda t: scale(t, -1.7), s)),
        OpCase("mul.a", _binary(mul, s, s, 0)),
        OpCase("mul.broadcast", _binary(mul, s, (2, 3, 1, 1), 1)),
        OpCase("relu", _unary(relu, s, away_from_zero)),
        OpCase("sigmoid", _unary(sigmoid, s)),
        OpCase("sum", _unary(sum_all, s)),
        OpCase("mean", _unary(lambda t: mean(t, axis=(2, 3)), s)),
        OpCase("reshape", _unary(lambda t: reshape(t, (6, 20)), s)),
        OpCase("maxpool2d", _unary(lambda t: nn.maxpool2d(t, 3, 2, 1), (2, 2, 7, 6), distinct)),
        OpCase("adaptive_avg_pool", _unary(lambda t: nn.adaptive_avg_pool(t, 2), (4, 3, 2, 3))),
        OpCase("linear.x", _linear_case("x")),
        OpCase("linear.w", _linear_case("w")),
        OpCase("linear.b", _linear_case("b")),
        OpCase("cross_entropy", _ce_case),
        OpCase("batchnorm.train.x", _bn_case("x", True)),
        OpCase("batchnorm.train.gamma", _bn_case("gamma", True)),
        OpCase("batchnorm.train.beta", _bn_case("beta", True)),
        OpCase("batchnorm.eval.x", _bn_case("x", False)),
        OpCase("se_block.x", _se_case("x")),
        OpCase("se_block.w1", _se_case("w1")),
        OpCase("se_block.w2", _se_case("w2")),
        OpCase("se_block.b2", _se_case("b2")),
    ]
    convs = {
        "conv2d.1x1": (nn.Conv2dSpec(4, 6), (5, 5)),
        "conv2d.1x1.stride2": (nn.Conv2dSpec(4, 6, 1, 2), (5, 6)),
        "conv2d.3x3.grouped": (nn.Conv2dSpec(4, 6, 3, 1, 1, groups=2), (5, 5)),
        "conv2d.3x3.grouped.stride2": (nn.Conv2dSpec(4, 4, 3, 2, 1, groups=4), (6, 7)),
        "conv2d.7x7.stride2": (nn.Conv2dSpec(3, 4, 7, 2, 3), (9, 8)),
        "conv2d.rect": (nn.Conv2dSpec(2, 3, (3, 2), (2, 1), (1, 0)), (6, 5)),
    }
    for name, (spec, hw) in convs.items():
        cases.append(OpCase(f"{name}.x", _conv_case(spec, hw, "x")))
        cases.append(OpCase(f"{name}.w", _conv_case(spec, hw, "w")))
    cases.append(OpCase("conv2d.bias", _conv_case(nn.Conv2dSpec(2, 3, 3, 1, 1), (4, 4), "b", bias=True)))
    return cases


def check_op(case: OpCase, seed: int, eps: float = EPS) -> float:
    f, x = case.build(np.random.default_rng(seed))
    return finite_diff_check(f, Tensor(x), eps)


def run_op_suite(seeds: Sequence[int] = range(20), eps: float = EPS) -> dict[str, float]:
    """Max relative error per op over all seeds."""
    return {c.name: max(check_op(c, s, eps) for s in seeds) for c in op_cases()}


# -- end to end -------------------------------------------------------------------------


E2E_CONFIG = dict(input_resolution=32, n_frames=2)
DRAWS_PER_STEP = 8


STEP_SHRINK = (1, 10, 100)  # eps, eps/10, eps/100


@dataclass
class E2EReport:
    worst: float
    checks: int
    resampled: int  # probes discarded because they straddled a relu or max-pool switch


def e2e_check(seed: int, variant: FusionVariant | str = FusionVariant.FULL, n_directions: int = 12,
              n_input_coords: int = 4, eps: float = EPS, gap: float = 0.0) -> E2EReport:
    """Finite-difference check of the micro model's cross-entropy gradient.

    Parameters are probed along random unit directions (one over all parameters plus
    ``n_directions`` single-tensor ones) and inputs at sampled coordinates. A probe is
    used only if the relu / max-pool switching pattern is unchanged at both ends (and at
    +-gap when given), so the central difference never straddles a kink.
    """
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig.micro(**E2E_CONFIG)
    model = build_model(cfg, variant, seed)
    b, t, r = 2, cfg.n_frames, cfg.input_resolution
    inputs = {"rgb": rng.uniform(0, 1, (b, t, 3, r, r)), "res": rng.uniform(0, 1, (b, t, 3, r, r))}
    labels = [0, 1]
    params = list(model.named_parameters())
    uses_res = model.temporal is not None

    def loss_at(rgb, res) -> tuple[Tensor, list]:
        # running stats are restored so every evaluation sees the same state
        saved = [buf.copy() for _, buf in model.named_buffers()]
        with record_kinks() as kinks:
            out = nn.softmax_cross_entropy(model(rgb, res if uses_res else None), labels)
        for (_, buf), s in zip(model.named_buffers(), saved):
            buf[...] = s
        return out, kinks

    model.zero_grad()
    base_loss, base_kinks = loss_at(inputs["rgb"], inputs["res"])
    backward(base_loss)
    grads = {n: p.grad.copy() for n, p in params}
    grads["rgb"] = grads["res"] = None
    originals = {n: p.data.copy() for n, p in params}

    def shifted(direction: dict[str, np.ndarray], step: float) -> tuple[float, list]:
        for n, p in params:
            p.data[...] = originals[n] + step * direction[n] if n in direction else originals[n]
        rgb = inputs["rgb"] + step * direction["rgb"] if "rgb" in direction else inputs["rgb"]
        res = inputs["res"] + step * direction["res"] if "res" in direction else inputs["res"]
        try:
            loss, kinks = loss_at(rgb, res)
        finally:
            for n, p in params:
                p.data[...] = originals[n]
        return loss.item(), kinks

    def probe(direction: dict[str, np.ndarray], analytic: float, step: float) -> float | None:
        """Relative error along ``direction``, or None if a kink lies within the probe."""
        values = {}
        for h in sorted({step, -step, max(step, gap), -max(step, gap)}):
            values[h], kinks = shifted(direction, h)
            if not same_pattern(kinks, base_kinks):
                return None
        numeric = (values[step] - values[-step]) / (2 * step)
        return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))

    report = E2EReport(0.0, 0, 0)

    def run(draw):
        # parameters early in the network move every downstream unit, so a probe of
        # width eps nearly always crosses some kink; shrink the step before giving up
        for step in (eps / k for k in STEP_SHRINK):
            for _ in range(DRAWS_PER_STEP):
                direction, analytic = draw()
                err = probe(direction, analytic, step)
                if err is not None:
                    report.worst = max(report.worst, err)
                    report.checks += 1
                    return
                report.resampled += 1
        raise RuntimeError(f"seed {seed}: no kink-free probe along {sorted(direction)}")

    def unit(shape) -> np.ndarray:
        d = rng.standard_normal(shape)
        return d / np.linalg.norm(d)

    def draw_all():
        d = {n: rng.standard_normal(p.shape) for n, p in params}
        norm = np.sqrt(sum(float((v * v).sum()) for v in d.values()))
        d = {n: v / norm for n, v in d.items()}
        return d, sum(float((grads[n] * v).sum()) for n, v in d.items())

    run(draw_all)
    for i in rng.choice(len(params), size=min(n_directions, len(params)), replace=False):
        name, p = params[int(i)]

        def draw_one(name=name, p=p):
            d = unit(p.shape)
            return {name: d}, float((grads[name] * d).sum())

        run(draw_one)

    # input gradients come from a second backward with the inputs as leaves
    model.zero_grad()
    leaves = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    backward(loss_at(leaves["rgb"], leaves["res"])[0])
    model.zero_grad()
    for name in ("rgb", "res") if uses_res else ("rgb",):
        g = leaves[name].grad
        for _ in range(n_input_coords):
            def draw_coord(name=name, g=g):
                i = int(rng.integers(g.size))
                d = np.zeros(g.size)
                d[i] = 1.0
                return {name: d.reshape(g.shape)}, float(g.reshape(-1)[i])

            run(draw_coord)
    return report


def e2e_error(seed: int, variant: FusionVariant | str = FusionVariant.FULL, **kw) -> float:
    return e2e_check(seed, variant, **kw).worst


def run_suite(seeds: Sequence[int] = range(20), e2e_seeds: Sequence[int] | None = None) -> dict[str, float]:
    out = run_op_suite(seeds)
    e2e = list(seeds if e2e_seeds is None else e2e_seeds)
    if e2e:
        out["stcnet.micro.loss"] = max(e2e_error(s) for s in e2e)
    return out
