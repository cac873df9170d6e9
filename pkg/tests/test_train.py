import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stcnet.model import BackboneConfig, build_model, encode_checkpoint
from stcnet.nn import Module, Linear
from stcnet.tensor import Tensor
from stcnet.train import (
    METRICS_HEADER,
    UNDEFINED,
    Metrics,
    SGDConfig,
    TrainState,
    confusion,
    evaluate,
    fit,
    fscore,
    macro_average,
    run_ablation,
    sgd_step,
    train_epoch,
)
from stcnet.video import Clip, SyntheticSpec, synth_generate

TINY = BackboneConfig.micro(input_resolution=32)


@pytest.fixture(scope="module")
def tiny_clips():
    return synth_generate(SyntheticSpec(n_clips=16, resolution=32, seed=5))


class _Scalar(Module):
    """A module holding one weight matrix (decayed) and one bias (not decayed)."""

    def __init__(self, w, b=0.0):
        self.weight = Tensor(np.full((1, 1), float(w)), requires_grad=True)
        self.bias = Tensor(np.array([float(b)]), requires_grad=True)


def _state(model, **cfg):
    return TrainState(model, SGDConfig(**cfg))


def _set_grads(model, g):
    for p in model.parameters():
        p.grad = np.full_like(p.data, g)


def sgd_oracle(w, grads, lr, m, wd, v=0.0):
    """Hand-unrolled momentum recurrence on a scalar."""
    trace = []
    for g in grads:
        v = m * v + g + wd * w
        w = w - lr * v
        trace.append((v, w))
    return trace


def test_sgd_plain_step():
    model = _Scalar(1.0)
    st_ = _state(model, lr=0.1, momentum=0.0, weight_decay=0.0)
    _set_grads(model, 0.5)
    assert sgd_step(st_)
    assert model.weight.data[0, 0] == pytest.approx(0.95, abs=1e-15)
    assert np.all(model.weight.grad == 0)


def test_sgd_two_momentum_steps_match_oracle():
    model = _Scalar(0.0)
    st_ = _state(model, lr=0.1, momentum=0.9, weight_decay=0.0)
    oracle = sgd_oracle(0.0, [1.0, 1.0], 0.1, 0.9, 0.0)
    assert np.allclose(oracle, [(1.0, -0.1), (1.9, -0.29)], rtol=0, atol=1e-15)
    for v_want, w_want in oracle:
        _set_grads(model, 1.0)
        sgd_step(st_)
        assert st_.velocity["weight"][0, 0] == pytest.approx(v_want, abs=1e-15)
        assert model.weight.data[0, 0] == pytest.approx(w_want, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 2), st.lists(st.floats(-1, 1), min_size=1, max_size=6),
       st.floats(1e-3, 0.5), st.floats(0, 0.95), st.floats(0, 0.01))
def test_sgd_matches_oracle_with_weight_decay(w0, grads, lr, m, wd):
    model = _Scalar(w0, b=w0)
    st_ = _state(model, lr=lr, momentum=m, weight_decay=wd)
    for g, (v, w) in zip(grads, sgd_oracle(w0, grads, lr, m, wd)):
        _set_grads(model, g)
        sgd_step(st_)
        assert model.weight.data[0, 0] == pytest.approx(w, rel=1e-12, abs=1e-12)
    # biases are never decayed
    expect_b = sgd_oracle(w0, grads, lr, m, 0.0)[-1][1]
    assert model.bias.data[0] == pytest.approx(expect_b, rel=1e-12, abs=1e-12)


def test_zero_grad_momentum_decays_geometrically():
    model = _Scalar(0.0)
    st_ = _state(model, lr=0.1, momentum=0.5, weight_decay=0.0)
    st_.velocity["weight"][...] = 1.0
    ws = []
    for _ in range(5):
        _set_grads(model, 0.0)
        sgd_step(st_)
        ws.append(model.weight.data[0, 0])
    steps = np.diff([0.0] + ws)
    assert np.allclose(steps[1:] / steps[:-1], 0.5)


def test_lr_zero_is_identity():
    model = _Scalar(1.25)
    st_ = _state(model, lr=0.0, momentum=0.9, weight_decay=0.1)
    _set_grads(model, 3.0)
    sgd_step(st_)
    assert model.weight.data[0, 0] == 1.25


def test_non_finite_gradient_rejects_step():
    model = _Scalar(1.0)
    st_ = _state(model, lr=0.1)
    _set_grads(model, 1.0)
    sgd_step(st_)
    before = (model.weight.data.copy(), st_.velocity["weight"].copy())
    _set_grads(model, np.nan)
    assert not sgd_step(st_)
    assert np.array_equal(model.weight.data, before[0]) and np.array_equal(st_.velocity["weight"], before[1])
    assert st_.events and "non-finite" in st_.events[-1]


def test_sgd_config_validation():
    with pytest.raises(ValueError):
        SGDConfig(lr=-1)
    with pytest.raises(ValueError):
        SGDConfig(momentum=1.0)
    with pytest.raises(ValueError):
        SGDConfig(weight_decay=-0.1)


# -- metrics ---------------------------------------------------------------------------


def test_fscore_examples():
    assert fscore(10, 0, 0).fscore == 1.0
    m = fscore(8, 2, 4)
    assert m.precision == pytest.approx(0.8) and m.recall == pytest.approx(2 / 3)
    assert m.fscore == pytest.approx(2 * 0.8 * (2 / 3) / (0.8 + 2 / 3))
    assert round(m.fscore, 4) == 0.7273
    d = fscore(0, 0, 5)
    assert d.precision is None and d.fscore is None and d.recall == 0.0
    assert fscore(0, 3, 5).fscore is None  # P + R = 0
    with pytest.raises(ValueError):
        fscore(-1, 0, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(1, 20))
def test_fscore_scale_invariant(tp, fp, fn, k):
    a, b = fscore(tp, fp, fn), fscore(k * tp, k * fp, k * fn)
    for x, y in ((a.precision, b.precision), (a.recall, b.recall), (a.fscore, b.fscore)):
        assert (x is None) == (y is None)
        if x is not None:
            assert x == pytest.approx(y, rel=1e-12)


def test_confusion_counts_by_hand():
    m = confusion([1, 1, 0, 0, 1, 0], [1, 0, 0, 1, 1, 0])
    assert (m.tp, m.fp, m.fn, m.tn) == (2, 1, 1, 2)


def test_macro_average_skips_undefined():
    rows = [fscore(1, 0, 0), Metrics(0, 0, 0, 0), fscore(1, 1, 1)]
    avg = macro_average(rows)
    assert avg.fscore == pytest.approx((1.0 + 0.5) / 2)
    assert (avg.tp, avg.fp, avg.fn) == (2, 1, 1)


# -- evaluation -------------------------------------------------------------------------


def _biased_model(cls: int):
    model = build_model(TINY, "full", 0)
    model.out.weight.data[...] = 0.0
    model.out.bias.data[...] = [0.0, 0.0]
    model.out.bias.data[cls] = 5.0
    return model


def _relabel(clips, labels, views):
    return [Clip(c.frames, lab, f"view{v}/clip{i:05d}/x/q0", c.fps)
            for i, (c, lab, v) in enumerate(zip(clips, labels, views))]


def test_always_positive_on_positive_split(tiny_clips):
    clips = _relabel(tiny_clips[:3], [1, 1, 1], [0, 0, 0])
    res = evaluate(_biased_model(1), clips)
    assert res.per_split["view0"].fscore == 1.0


def test_evaluate_hand_built_confusion(tiny_clips):
    clips = _relabel(tiny_clips[:6], [1, 1, 0, 0, 0, 1], [0, 0, 0, 1, 1, 1])
    res = evaluate(_biased_model(1), clips, splits=["view0", "view1", "view2"])
    v0, v1, v2 = (res.per_split[k] for k in ("view0", "view1", "view2"))
    assert (v0.tp, v0.fp, v0.fn, v0.tn) == (2, 1, 0, 0)
    assert (v1.tp, v1.fp, v1.fn, v1.tn) == (1, 2, 0, 0)
    assert v2.fscore is None
    assert res.average.fscore == pytest.approx((0.8 + 0.5) / 2)


def test_evaluate_is_pure_and_deterministic(tiny_clips):
    model = build_model(TINY, "full", 1)
    before = encode_checkpoint(model, 1, 0)
    a = evaluate(model, tiny_clips)
    b = evaluate(model, tiny_clips)
    assert encode_checkpoint(model, 1, 0) == before
    assert a.predictions == b.predictions and a.average == b.average
    assert model.training  # mode restored


# -- training ---------------------------------------------------------------------------------


def test_lr_zero_epoch_keeps_parameters(tiny_clips):
    model = build_model(TINY, "full", 0)
    before = [p.data.copy() for p in model.parameters()]
    st_ = TrainState(model, SGDConfig(lr=0.0, epochs=1))
    loss = train_epoch(st_, tiny_clips[:6])
    assert math.isfinite(loss)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))


def test_training_is_bit_reproducible(tiny_clips):
    def run():
        model = build_model(TINY, "B", 3)
        fit(model, tiny_clips[:9], SGDConfig(lr=0.01, epochs=2, seed=3))
        return encode_checkpoint(model, 3, 2)

    assert run() == run()


def test_short_clip_skipped_with_warning(tiny_clips):
    short = Clip(tiny_clips[0].frames[:4], 1, "view0/clip99999/plume/q0", 15.0)
    st_ = TrainState(build_model(TINY, "full", 0), SGDConfig(epochs=1))
    train_epoch(st_, [short] + list(tiny_clips[:3]))
    assert any("skipping" in e for e in st_.events)


def test_fit_writes_epoch_log(tiny_clips, tmp_path):
    log = tmp_path / "train.log"
    fit(build_model(TINY, "spatial_only", 0), tiny_clips[:6], SGDConfig(epochs=2), tiny_clips[6:9], log_path=log)
    lines = log.read_text().splitlines()
    assert len(lines) == 2
    for i, line in enumerate(lines, 1):
        e, loss, f = line.split(",")
        assert int(e) == i and math.isfinite(float(loss))
        assert f == UNDEFINED or 0 <= float(f) <= 1


@pytest.mark.slow
def test_second_epoch_loss_lower_in_most_seeds():
    clips = synth_generate(SyntheticSpec(n_clips=64, seed=0))
    wins = 0
    for seed in range(5):
        model = build_model(BackboneConfig.micro(), "full", seed)
        st_ = fit(model, clips, SGDConfig(epochs=2, seed=seed))
        wins += st_.history[1][1] < st_.history[0][1]
    assert wins >= 4


def test_ablation_bookkeeping(tiny_clips, tmp_path):
    runs, metrics, summary = run_ablation(TINY, tiny_clips[:6], tiny_clips[6:10], ["full", "spatial_only"], [0, 1],
                                          SGDConfig(epochs=1), tmp_path)
    assert len(runs) == 4
    assert sorted(p.name for p in tmp_path.glob("*.stcw")) == [
        "full_seed0.stcw", "full_seed1.stcw", "spatial_only_seed0.stcw", "spatial_only_seed1.stcw"]
    lines = metrics.splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert (tmp_path / "metrics.csv").read_text() == metrics
    assert sum(1 for l in lines if l.split(",")[2] == "average") == 4
    assert summary.splitlines()[0] == "variant,runs,diverged,mean_fscore,std_fscore"
    assert len(summary.splitlines()) == 3


def test_ablation_records_divergence(tiny_clips, tmp_path):
    with np.errstate(all="ignore"):
        runs, metrics, summary = run_ablation(TINY, tiny_clips[:6], tiny_clips[6:9], ["full", "spatial_only"], [0],
                                              SGDConfig(lr=1e30, epochs=2), tmp_path)
    assert runs[0].diverged and runs[0].result is None
    assert metrics.splitlines()[1].startswith("full,0,diverged,")
    assert summary.splitlines()[1].startswith("full,1,1,")


def test_healthy_run_is_not_diverged(tiny_clips):
    runs, _, summary = run_ablation(TINY, tiny_clips[:6], tiny_clips[6:9], ["full"], [0], SGDConfig(epochs=1))
    assert not runs[0].diverged and runs[0].result is not None
    assert summary.splitlines()[1].startswith("full,1,0,")
