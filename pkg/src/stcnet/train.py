"""SGD with momentum, F-score metrics, per-split evaluation and the ablation runner."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import BackboneConfig, FusionVariant, STCNet, build_model, encode_checkpoint
from .nn import softmax_cross_entropy
from .tensor import backward, no_grad
from .video import AugmentSpec, Clip, ResidualSpec, SamplerSpec, parse_source_id, prepare_inputs

log = logging.getLogger(__name__)

METRICS_HEADER = ("variant", "seed", "split", "tp", "fp", "fn", "tn", "precision", "recall", "fscore")
UNDEFINED = "undefined"
AVERAGE = "average"


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 3
    epochs: int = 10
    seed: int = 0
    sampling: str = "random"  # frame sampling mode used while training

    def __post_init__(self):
        if not self.lr >= 0:  # lr = 0 freezes the weights
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if self.sampling not in ("center", "random"):
            raise ValueError(f"sampling must be 'center' or 'random', got {self.sampling!r}")


# -- metrics ------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    """Confusion counts with precision / recall / F; None marks an undefined ratio."""

    tp: int
    fp: int
    fn: int
    tn: int = 0
    precision: float | None = None
    recall: float | None = None
    fscore: float | None = None

    @property
    def defined(self) -> bool:
        return self.fscore is not None


def fscore(tp: int, fp: int, fn: int, tn: int = 0) -> Metrics:
    if min(tp, fp, fn, tn) < 0:
        raise ValueError(f"counts must be non-negative, got tp={tp} fp={fp} fn={fn} tn={tn}")
    p = tp / (tp + fp) if tp + fp else None
    r = tp / (tp + fn) if tp + fn else None
    f = 2 * p * r / (p + r) if p is not None and r is not None and p + r > 0 else None
    return Metrics(tp, fp, fn, tn, p, r, f)


def confusion(pred: Sequence[int], truth: Sequence[int]) -> Metrics:
    tp = fp = fn = tn = 0
    for p, t in zip(pred, truth, strict=True):
        if p == 1 and t == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif t == 1:
            fn += 1
        else:
            tn += 1
    return fscore(tp, fp, fn, tn)


def macro_average(rows: Iterable[Metrics]) -> Metrics:
    """Summed counts; precision, recall and F averaged over rows where each is defined."""
    rows = list(rows)

    def avg(vals):
        vals = [v for v in vals if v is not None]
        return sum(vals) / len(vals) if vals else None

    return Metrics(
        sum(m.tp for m in rows), sum(m.fp for m in rows), sum(m.fn for m in rows), sum(m.tn for m in rows),
        avg(m.precision for m in rows), avg(m.recall for m in rows), avg(m.fscore for m in rows),
    )


def _fmt(v: float | None) -> str:
    return UNDEFINED if v is None else f"{v:.6f}"


def metrics_rows(variant: str, seed: int, per_split: dict[str, Metrics]) -> list[list[str]]:
    return [[variant, str(seed), name, str(m.tp), str(m.fp), str(m.fn), str(m.tn),
             _fmt(m.precision), _fmt(m.recall), _fmt(m.fscore)] for name, m in per_split.items()]


def write_metrics_csv(path: str | Path | None, rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


# -- optimizer ------------------------------------------------------------------


@dataclass
class TrainState:
    model: STCNet
    cfg: SGDConfig
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    rng: np.random.Generator | None = None
    history: list[tuple[int, float, Metrics | None]] = field(default_factory=list)
    events: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.velocity:
            self.velocity = {n: np.zeros_like(p.data) for n, p in self.model.named_parameters()}
        if self.rng is None:
            self.rng = np.random.default_rng(self.cfg.seed)


def sgd_step(state: TrainState, cfg: SGDConfig | None = None) -> bool:
    """v <- m*v + g + wd*w (wd on weights with ndim >= 2 only); w <- w - lr*v; grads zeroed.

    A missing or non-finite gradient rejects the whole step and leaves the state untouched.
    """
    cfg = cfg or state.cfg
    params = list(state.model.named_parameters())
    for name, p in params:
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            msg = f"epoch {state.epoch}: non-finite gradient in {name!r}; step rejected"
            log.warning(msg)
            state.events.append(msg)
            state.model.zero_grad()
            return False
    for name, p in params:
        v = state.velocity[name]
        v *= cfg.momentum
        v += p.grad
        if cfg.weight_decay and p.data.ndim >= 2:
            v += cfg.weight_decay * p.data
        p.data -= cfg.lr * v
    state.model.zero_grad()
    return True


# -- training -------------------------------------------------------------------------


def clip_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def batch_inputs(clips: Sequence[Clip], sampler: SamplerSpec, residual: ResidualSpec, mode: str,
                 rngs: Sequence[np.random.Generator | None], augment_spec: AugmentSpec | None):
    rgb, res = zip(*(prepare_inputs(c, sampler, residual, mode, r, augment_spec) for c, r in zip(clips, rngs)))
    return np.stack(rgb), np.stack(res)


def train_epoch(
    state: TrainState,
    clips: Sequence[Clip],
    augment_spec: AugmentSpec | None = None,
    sampler: SamplerSpec = SamplerSpec(),
    residual: ResidualSpec = ResidualSpec(),
) -> float:
    """One shuffled pass; returns the mean per-batch loss (nan if every batch diverged)."""
    if not clips:
        raise ValueError("training set is empty")
    cfg, model = state.cfg, state.model
    model.train()
    order = state.rng.permutation(len(clips))
    usable = []
    for i in order:
        if clips[i].n_frames < sampler.n_segments:
            msg = f"skipping clip {clips[i].source_id!r}: {clips[i].n_frames} frames < {sampler.n_segments} segments"
            log.warning(msg)
            state.events.append(msg)
        else:
            usable.append(int(i))
    losses = []
    model.zero_grad()
    for start in range(0, len(usable), cfg.batch_size):
        idx = usable[start:start + cfg.batch_size]
        batch = [clips[i] for i in idx]
        rngs = [clip_rng(cfg.seed, state.epoch, i) for i in idx]
        rgb, res = batch_inputs(batch, sampler, residual, cfg.sampling, rngs, augment_spec)
        if len(idx) * sampler.n_segments < 2:
            continue  # batchnorm needs two values per channel
        logits = model(rgb, res if model.temporal is not None else None)
        loss = softmax_cross_entropy(logits, [c.label for c in batch])
        value = loss.item()
        if not math.isfinite(value):
            msg = f"epoch {state.epoch}: non-finite loss on batch starting at {start}; step rejected"
            log.warning(msg)
            state.events.append(msg)
            continue
        backward(loss)
        if sgd_step(state, cfg):
            losses.append(value)
    state.epoch += 1
    return float(np.mean(losses)) if losses else float("nan")


def split_of(clip: Clip) -> str:
    return parse_source_id(clip.source_id).get("view", "all")


@dataclass
class EvalResult:
    per_split: dict[str, Metrics]
    average: Metrics
    predictions: list[int]

    def rows(self) -> dict[str, Metrics]:
        return {**self.per_split, AVERAGE: self.average}


def predict(model: STCNet, clips: Sequence[Clip], sampler: SamplerSpec = SamplerSpec(),
            residual: ResidualSpec = ResidualSpec(), batch_size: int = 8) -> np.ndarray:
    """Logits [N, n_classes] in eval mode with centre sampling and no augmentation."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for start in range(0, len(clips), batch_size):
                batch = clips[start:start + batch_size]
                rgb, res = batch_inputs(batch, sampler, residual, "center", [None] * len(batch), None)
                out.append(model(rgb, res if model.temporal is not None else None).data)
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def evaluate(model: STCNet, clips: Sequence[Clip], sampler: SamplerSpec = SamplerSpec(),
             residual: ResidualSpec = ResidualSpec(), split_fn: Callable[[Clip], str] = split_of,
             splits: Sequence[str] | None = None) -> EvalResult:
    """Per-split and macro-average metrics. Listed ``splits`` with no clips yield undefined rows."""
    logits = predict(model, clips, sampler, residual)
    preds = [int(np.argmax(row)) for row in logits]
    names = sorted(set(splits or []) | {split_fn(c) for c in clips})
    per_split = {}
    for name in names:
        sel = [i for i, c in enumerate(clips) if split_fn(c) == name]
        if not sel:
            per_split[name] = Metrics(0, 0, 0, 0)
            continue
        per_split[name] = confusion([preds[i] for i in sel], [clips[i].label for i in sel])
    return EvalResult(per_split, macro_average(per_split.values()), preds)


def fit(
    model: STCNet,
    train: Sequence[Clip],
    cfg: SGDConfig,
    test: Sequence[Clip] | None = None,
    augment_spec: AugmentSpec | None = None,
    sampler: SamplerSpec = SamplerSpec(),
    residual: ResidualSpec = ResidualSpec(),
    log_path: str | Path | None = None,
    eval_every: int = 1,
) -> TrainState:
    """Train for cfg.epochs, appending (epoch, loss, eval metrics) to the history and log file."""
    state = TrainState(model, cfg)
    lines = []
    for e in range(cfg.epochs):
        loss = train_epoch(state, train, augment_spec, sampler, residual)
        metrics = None
        if test and eval_every and ((e + 1) % eval_every == 0 or e + 1 == cfg.epochs):
            metrics = evaluate(model, test, sampler, residual).average
        state.history.append((state.epoch, loss, metrics))
        line = f"{state.epoch},{loss:.6f},{_fmt(metrics.fscore if metrics else None)}"
        lines.append(line)
        log.info("epoch %s", line)
    if log_path is not None:
        Path(log_path).write_text("".join(l + "\n" for l in lines))
    return state


# -- ablation ------------------------------------------------------------------------------


@dataclass
class RunResult:
    variant: str
    seed: int
    result: EvalResult | None
    diverged: bool
    checkpoint: Path | None
    history: list


def run_ablation(
    config: BackboneConfig,
    train: Sequence[Clip],
    test: Sequence[Clip],
    variants: Sequence[FusionVariant | str],
    seeds: Sequence[int],
    cfg: SGDConfig,
    out_dir: str | Path | None = None,
    augment_spec: AugmentSpec | None = None,
    sampler: SamplerSpec = SamplerSpec(),
    residual: ResidualSpec = ResidualSpec(),
) -> tuple[list[RunResult], str, str]:
    """Train every (variant, seed); return runs, the per-split metrics CSV and a summary CSV.

    The data order depends on the seed only, so all variants see the same batches.
    """
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    views = sorted({split_of(c) for c in train} | {split_of(c) for c in test})
    runs: list[RunResult] = []
    rows: list[list[str]] = []
    for v in variants:
        variant = FusionVariant.parse(v) if isinstance(v, str) else v
        for seed in seeds:
            run_cfg = SGDConfig(**{**cfg.__dict__, "seed": seed})
            model = build_model(config, variant, seed)
            log_path = out / f"{variant.value}_seed{seed}.log" if out is not None else None
            state = fit(model, train, run_cfg, None, augment_spec, sampler, residual, log_path)
            losses = [h[1] for h in state.history]
            diverged = (any(not math.isfinite(l) for l in losses)
                        or any("non-finite" in e for e in state.events)
                        or not all(np.all(np.isfinite(p.data)) for p in model.parameters()))
            ckpt = None
            if out is not None:
                ckpt = out / f"{variant.value}_seed{seed}.stcw"
                ckpt.write_bytes(encode_checkpoint(model, seed, state.epoch))
            result = None if diverged else evaluate(model, test, sampler, residual, splits=views)
            if result is None:
                rows.append([variant.value, str(seed), "diverged", "0", "0", "0", "0", UNDEFINED, UNDEFINED, UNDEFINED])
            else:
                rows.extend(metrics_rows(variant.value, seed, result.rows()))
            runs.append(RunResult(variant.value, seed, result, diverged, ckpt, state.history))
    metrics_csv = write_metrics_csv(out / "metrics.csv" if out is not None else None, rows)
    summary_csv = summarize(runs)
    if out is not None:
        (out / "summary.csv").write_text(summary_csv)
    return runs, metrics_csv, summary_csv


def summarize(runs: Sequence[RunResult]) -> str:
    """variant,runs,diverged,mean_fscore,std_fscore over the average rows of each run."""
    lines = ["variant,runs,diverged,mean_fscore,std_fscore"]
    for variant in dict.fromkeys(r.variant for r in runs):
        mine = [r for r in runs if r.variant == variant]
        fs = [r.result.average.fscore for r in mine if r.result is not None and r.result.average.fscore is not None]
        mean = _fmt(float(np.mean(fs)) if fs else None)
        std = _fmt(float(np.std(fs)) if fs else None)
        lines.append(f"{variant},{len(mine)},{sum(r.diverged for r in mine)},{mean},{std}")
    return "\n".join(lines) + "\n"
