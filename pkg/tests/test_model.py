import numpy as np
import pytest

from stcnet.model import (
    BackboneConfig,
    ConfigError,
    ForwardTrace,
    FusionVariant,
    STAGES,
    build_model,
    capture_activations,
    decode_checkpoint,
    encode_checkpoint,
    param_count,
)
from stcnet.tensor import ShapeError, no_grad


def _inputs(cfg, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = (cfg.n_frames, 3, cfg.input_resolution, cfg.input_resolution)
    if batch:
        shape = (batch,) + shape
    return rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)


@pytest.fixture(scope="module")
def micro():
    return BackboneConfig.micro()


def test_micro_shape_ladder(micro):
    model = build_model(micro, "full", 0).eval()
    rgb, res = _inputs(micro)
    trace = ForwardTrace()
    with no_grad():
        logits = model(rgb, res, trace)
    t = micro.n_frames
    want = {"conv1": (t, 8, 28, 28), "pool1": (t, 8, 14, 14), "res1": (t, 32, 14, 14),
            "res2": (t, 64, 7, 7), "res3": (t, 128, 4, 4), "res4": (t, 256, 2, 2)}
    for path in ("spatial", "temporal"):
        for tap, shape in want.items():
            assert trace.taps[(path, tap)].shape == shape, (path, tap)
    assert trace.taps[("head", "fuse")].shape == (t, 256, 2, 2)
    assert trace.taps[("head", "cls")].shape == (1, 256, 1, 1)
    assert logits.shape == (1, 2)


def test_micro_param_count_is_stable(micro):
    # frozen from the first build; guards against accidental architecture drift
    assert param_count(build_model(micro, "full", 0)) == 543_746


def test_spatial_only_has_one_path_and_fewer_params(micro):
    full = build_model(micro, "full", 0)
    single = build_model(micro, "spatial_only", 0)
    assert single.temporal is None and single.paths == ("spatial",)
    assert param_count(single) < param_count(full)
    rgb, _ = _inputs(micro)
    with no_grad():
        assert single.eval()(rgb).shape == (1, 2)


def test_variants_share_parameter_shapes(micro):
    shapes = {v: [p.shape for p in build_model(micro, v, 0).parameters()] for v in ("full", "A", "B", "C")}
    assert len({tuple(s) for s in shapes.values()}) == 1


def test_batched_forward_matches_single_clips_in_eval(micro):
    model = build_model(micro, "full", 0).eval()
    rgb, res = _inputs(micro, batch=2)
    with no_grad():
        both = model(rgb, res).data
        one = np.concatenate([model(rgb[i], res[i]).data for i in range(2)])
    assert np.allclose(both, one, atol=1e-12)


def test_fusion_full_paths_identical_after_each_point(micro):
    model = build_model(micro, "full", 1).eval()
    rgb, res = _inputs(micro, 1)
    trace = ForwardTrace()
    with no_grad():
        model(rgb, res, trace)
    for stage in STAGES[:3]:
        s, t = trace.fused[("spatial", stage)], trace.fused[("temporal", stage)]
        assert np.array_equal(s.data, t.data)
    assert [f[0] for f in trace.fusions] == ["res1", "res1", "res2", "res2", "res3", "res3"]


def test_fusion_b_leaves_temporal_path_unfused(micro):
    model = build_model(micro, "B", 2).eval()
    rgb, res = _inputs(micro, 2)
    trace = ForwardTrace()
    with no_grad():
        model(rgb, res, trace)
        alone = model.run_path("temporal", res)
    for stage in STAGES:
        assert np.array_equal(trace.taps[("temporal", stage)].data, alone[stage].data)
    assert all(direction == "temporal->spatial" for _, direction in trace.fusions)
    assert not np.array_equal(trace.taps[("spatial", "res2")].data, model.run_path("spatial", rgb)["res2"].data)


def test_fusion_a_paths_independent(micro):
    model = build_model(micro, "A", 3).eval()
    rgb, res = _inputs(micro, 3)
    trace = ForwardTrace()
    with no_grad():
        model(rgb, res, trace)
        s_alone, t_alone = model.run_path("spatial", rgb), model.run_path("temporal", res)
    for stage in STAGES:
        assert np.array_equal(trace.taps[("spatial", stage)].data, s_alone[stage].data)
        assert np.array_equal(trace.taps[("temporal", stage)].data, t_alone[stage].data)
    assert trace.fusions == []


def test_fusion_c_exactly_one_point(micro):
    model = build_model(micro, "C", 4).eval()
    rgb, res = _inputs(micro, 4)
    trace = ForwardTrace()
    with no_grad():
        model(rgb, res, trace)
    assert {f[0] for f in trace.fusions} == {"res1"}
    assert np.array_equal(trace.fused[("spatial", "res1")].data, trace.fused[("temporal", "res1")].data)
    assert not np.array_equal(trace.fused[("spatial", "res2")].data, trace.fused[("temporal", "res2")].data)


def test_config_validation_names_field():
    with pytest.raises(ConfigError) as e:
        BackboneConfig.micro(cardinality=3)
    assert e.value.field == "cardinality"
    with pytest.raises(ConfigError) as e:
        BackboneConfig.micro(input_resolution=60)
    assert e.value.field == "input_resolution"
    with pytest.raises(ConfigError):
        FusionVariant.parse("D")


def test_forward_rejects_bad_inputs(micro):
    model = build_model(micro, "full", 0)
    rgb, res = _inputs(micro)
    with pytest.raises(ShapeError):
        model(rgb)  # temporal path needs residual frames
    with pytest.raises(ShapeError):
        model(rgb[:, :, :40, :40], res[:, :, :40, :40])


def test_capture_activations_rejects_unknown_taps(micro):
    model = build_model(micro, "spatial_only", 0)
    rgb, res = _inputs(micro)
    with pytest.raises(KeyError, match="valid taps"):
        capture_activations(model, rgb, None, "res5", "spatial")
    with pytest.raises(KeyError, match="valid paths"):
        capture_activations(model, rgb, None, "res4", "temporal")


def test_checkpoint_round_trip_is_byte_identical(micro):
    model = build_model(micro, "C", 7)
    model.spatial.bn1.running_mean[:] = np.arange(8.0)
    buf = encode_checkpoint(model, 7, 3)
    restored, header = decode_checkpoint(buf)
    assert header == {"config": micro.to_dict(), "variant": "C", "seed": 7, "epoch": 3}
    assert encode_checkpoint(restored, 7, 3) == buf


def test_same_seed_same_weights(micro):
    a, b = build_model(micro, "full", 5), build_model(micro, "full", 5)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
