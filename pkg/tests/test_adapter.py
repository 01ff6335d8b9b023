import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from battrack import tensor as T
from battrack.adapter import (AdapterConfig, adapter_forward, build_adapter_plan, count_instances,
                              count_trainable_params, init_adapter)
from battrack.config import RunConfig
from battrack.tensor import ShapeError, Tensor
from battrack.tracker import BATModel, TrainBatch

FULL = AdapterConfig(d_t=768, d_e=8)


def test_zero_up_projection_gives_zero_prompt():
    a = init_adapter(AdapterConfig(8, 3), np.random.default_rng(0))
    a.down_b.data[:] = 1.0
    a.mid_b.data[:] = -2.0
    x = Tensor(np.random.default_rng(1).standard_normal((2, 5, 8)))
    np.testing.assert_array_equal(adapter_forward(x, a).data, np.zeros((2, 5, 8)))


def test_zero_input_without_bias_gives_zero_prompt():
    a = init_adapter(AdapterConfig(8, 3), np.random.default_rng(0))
    a.up_w.data = np.ones((3, 8))
    np.testing.assert_array_equal(adapter_forward(Tensor(np.zeros((1, 4, 8))), a).data, 0.0)


def test_hand_chain():
    a = init_adapter(AdapterConfig(4, 2), np.random.default_rng(0))
    a.down_w.data = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, -1.0]])
    a.down_b.data = np.array([0.5, 0.0])
    a.mid_w.data = np.array([[2.0, 0.0], [1.0, 1.0]])
    a.mid_b.data = np.array([0.0, 1.0])
    a.up_w.data = np.array([[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, -1.0, 0.0]])
    a.up_b.data = np.array([0.0, 0.0, 0.0, 0.25])
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    # down: (1+3+0.5, 2+3-4) = (4.5, 1); mid: (9+1, 1+1) = (10, 2); up: (10, 2, -2, 10.25)
    out = adapter_forward(Tensor(x), a).data
    np.testing.assert_array_equal(out, [[10.0, 2.0, -2.0, 10.25]])


def test_width_mismatch():
    a = init_adapter(AdapterConfig(8, 3), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        adapter_forward(Tensor(np.zeros((1, 2, 6))), a)


def test_bottleneck_must_be_narrower():
    with pytest.raises(ValueError):
        AdapterConfig(8, 8)
    with pytest.raises(ValueError):
        AdapterConfig(8, 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31))
def test_linearity_without_bias(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    a = init_adapter(AdapterConfig(6, 2, include_bias=False), rng, std=1.0)
    a.up_w.data = rng.standard_normal((2, 6))
    x, y = rng.standard_normal((3, 6)), rng.standard_normal((3, 6))
    lhs = adapter_forward(Tensor(alpha * x + beta * y), a).data
    rhs = alpha * adapter_forward(Tensor(x), a).data + beta * adapter_forward(Tensor(y), a).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_up_projection_starts_at_zero():
    a = init_adapter(AdapterConfig(16, 4), np.random.default_rng(0))
    assert not a.up_w.data.any() and not a.up_b.data.any()
    assert a.down_w.data.std() == pytest.approx(0.02, rel=0.3)
    assert all(t.requires_grad for t in a.tensors())


@pytest.mark.parametrize("variant, layers, n_layers, expected", [
    ("BAT", range(5, 9), 12, 8),
    ("BAT-Dual", range(1, 13), 12, 48),
    ("BAT-RGB", range(1, 13), 12, 24),
    ("BAT-TIR", [3], 12, 2),
    ("Baseline-Dual", range(1, 13), 12, 0),
])
def test_instance_counts(variant, layers, n_layers, expected):
    assert count_instances(variant, layers, ("attention", "mlp"), n_layers) == expected
    plan = build_adapter_plan(variant, layers, ("attention", "mlp"), AdapterConfig(8, 2), n_layers)
    assert len(plan.instances) == expected


def test_layer_outside_range_is_rejected():
    with pytest.raises(ValueError, match="13"):
        build_adapter_plan("BAT-RGB", [13], ("attention", "mlp"), FULL, 12)
    with pytest.raises(ValueError):
        build_adapter_plan("BAT", [0], ("attention",), FULL, 12)


def test_unknown_variant_and_stage():
    with pytest.raises(ValueError):
        build_adapter_plan("BAT-X", [1], ("attention",), FULL, 12)
    with pytest.raises(ValueError):
        build_adapter_plan("BAT", [1], ("ffn",), FULL, 12)


def test_full_shape_counts():
    both = ("attention", "mlp")
    assert FULL.params_per_instance() == 13_136
    bat = build_adapter_plan("BAT", range(1, 13), both, AdapterConfig(4, 2), 12)
    assert count_trainable_params(bat.descriptor(), FULL) == 315_264
    dual = {"variant": "BAT-Dual", "num_layers": 12, "layers": list(range(1, 13)), "stages": list(both)}
    assert count_trainable_params(dual, FULL) == 630_528
    base = {"variant": "Baseline-Dual", "num_layers": 12, "layers": [], "stages": list(both)}
    assert count_trainable_params(base, FULL) == 0


def test_toy_single_layer_count():
    plan = {"variant": "BAT", "num_layers": 2, "layers": [1], "stages": ["attention", "mlp"]}
    assert count_trainable_params(plan, AdapterConfig(64, 4)) == 1_200


def test_counted_params_match_instantiated_arrays():
    cfg = AdapterConfig(12, 3)
    for variant in ("BAT", "BAT-Dual", "BAT-RGB", "Baseline-Dual"):
        plan = build_adapter_plan(variant, [1, 3], ("mlp",), cfg, 3)
        assert sum(t.data.size for t in plan.tensors()) == count_trainable_params(plan, cfg)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 64), st.integers(1, 12), st.booleans(), st.sets(st.sampled_from(["attention", "mlp"]), min_size=1),
       st.data())
def test_dual_doubles_shared(d_t, n_layers, bias, stages, data):
    d_e = data.draw(st.integers(1, d_t - 1))
    layers = data.draw(st.sets(st.integers(1, n_layers), min_size=1))
    cfg = AdapterConfig(d_t, d_e, bias)

    def desc(v):
        return {"variant": v, "num_layers": n_layers, "layers": sorted(layers), "stages": sorted(stages)}
    assert count_trainable_params(desc("BAT-Dual"), cfg) == 2 * count_trainable_params(desc("BAT"), cfg)


def test_checkpoint_names():
    plan = build_adapter_plan("BAT-Dual", [2], ("attention",), AdapterConfig(4, 2), 2)
    names = set(plan.named_tensors())
    assert "adapter.2.attention.rgb2tir.down.w" in names
    assert "adapter.2.attention.tir2rgb.up.b" in names
    shared = build_adapter_plan("BAT", [1], ("mlp",), AdapterConfig(4, 2), 2)
    assert sorted(shared.named_tensors()) == sorted(f"adapter.1.mlp.{p}.{k}" for p in ("down", "mid", "up")
                                                    for k in ("w", "b"))


def _generic_batch(cfg: RunConfig, b=2, seed=0):
    rng = np.random.default_rng(seed)
    zt, zs = cfg.image_size_template, cfg.image_size_search
    gt = np.tile([20.0, 18.0, 22.0, 26.0], (b, 1))
    return TrainBatch(rng.random((b, zt, zt, 3)), rng.random((b, zt, zt)), rng.random((b, zs, zs, 3)),
                      rng.random((b, zs, zs)), gt, gt + 1.0)


@pytest.mark.parametrize("variant", ["BAT", "BAT-Dual", "BAT-RGB", "BAT-TIR"])
def test_every_adapter_tensor_gets_gradient(variant):
    cfg = RunConfig(variant=variant)
    model = BATModel(cfg)
    rng = np.random.default_rng(1)
    # nonzero up projections so gradients reach down and mid as well
    for t in model.plan.tensors():
        t.data = rng.normal(0, 0.05, t.shape)
    total, _ = model.loss(_generic_batch(cfg), cfg.loss_config())
    T.backward(total)
    for name, t in model.plan.named_tensors().items():
        assert t.grad is not None and np.any(t.grad != 0), name
    for name, t in model.head.named_tensors().items():
        assert t.grad is not None and np.any(t.grad != 0), name
    for t in model.backbone.tensors():
        assert not t.requires_grad and t.grad is None
