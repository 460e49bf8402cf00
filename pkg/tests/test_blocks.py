import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arpmnet import tensor as T
from arpmnet.blocks import (
    DNetConfig,
    MRFConfig,
    NetParams,
    SNetConfig,
    dnet_forward,
    dnet_layout,
    init_params,
    mrf_block,
    mrf_local_param_counts,
    multires_block,
    multires_widths,
    multiscale_pool,
    residual_forward_path,
    residual_units,
    snet_forward,
    snet_layout,
)
from arpmnet.tensor import Tensor

SMALL = SNetConfig(levels=2, base_channels=16, num_classes=6)

# enc0.multires 24 + enc0.pool 14 + enc1.multires 24 + dec0.up 2 + skip0 (4 units) 32
# + dec0.multires 24 + head 2 + mrf 4, with 8 keys per residual stage
GOLDEN_KEYS_L2 = 126


@pytest.fixture(scope="module")
def small_params():
    return init_params(SMALL, 0)


def test_golden_key_count():
    assert len(snet_layout(SMALL)) == GOLDEN_KEYS_L2
    assert len(init_params(SMALL, 0)) == GOLDEN_KEYS_L2
    assert len(dnet_layout(DNetConfig())) == 10


def test_init_deterministic_and_conventions():
    a, b = init_params(SMALL, 3), init_params(SMALL, 3)
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)
    c = init_params(SMALL, 4)
    assert not np.array_equal(a["head.weight"].data, c["head.weight"].data)
    for k, t in a.items():
        if k.endswith((".running_mean", ".running_var")):
            assert not t.requires_grad
        else:
            assert t.requires_grad
        if k.endswith(".bias") or k.endswith(".beta") or k.endswith("running_mean"):
            assert not t.data.any()
        if k.endswith((".gamma", ".running_var")):
            assert (t.data == 1).all()
    assert not a["mrf.global.weight"].data.any()
    w = a["enc0.multires.stage1.conv.weight"].data
    assert np.abs(w).max() <= np.sqrt(6.0 / 9)


def test_netparams_unknown_key_and_load_checks(small_params):
    with pytest.raises(KeyError):
        small_params["nope"]
    arrays = small_params.arrays()
    p = init_params(SMALL, 9)
    p.load_arrays(arrays)
    np.testing.assert_array_equal(p["head.weight"].data, small_params["head.weight"].data)
    with pytest.raises(KeyError):
        p.load_arrays({**arrays, "extra": np.zeros(1)})
    missing = dict(arrays)
    missing.pop("head.bias")
    with pytest.raises(KeyError):
        p.load_arrays(missing)
    with pytest.raises(ValueError):
        NetParams("generator", {})


@pytest.mark.parametrize("cout,widths", [(16, (3, 5, 8)), (32, (6, 10, 16)), (24, (4, 7, 13)), (20, (3, 6, 11))])
def test_multires_widths(cout, widths):
    assert multires_widths(cout) == widths
    assert sum(widths) == cout


def test_multires_widths_rejects_small():
    with pytest.raises(ValueError):
        multires_widths(8)
    with pytest.raises(ValueError):
        SNetConfig(base_channels=8)


def test_multires_block_shapes(small_params):
    out = multires_block(Tensor(np.random.default_rng(0).normal(size=(1, 1, 32, 32))), small_params, "enc0.multires", 16)
    assert out.shape == (1, 16, 32, 32)
    # enc1 of a base-16 net maps 16 channels to 32
    out = multires_block(T.zeros((1, 16, 32, 32)), small_params, "enc1.multires", 32)
    assert out.shape == (1, 32, 32, 32)


def test_multires_zero_input_is_beta_driven(small_params):
    # zero input and zero biases: batch norm of a constant map returns beta
    out = multires_block(T.zeros((2, 1, 8, 8)), small_params, "enc0.multires", 16).data
    np.testing.assert_array_equal(out, 0.0)
    p = small_params.copy()
    beta = np.array([-0.5, 0.25, 1.0])
    p["enc0.multires.stage1.bn.beta"].data = beta
    out = multires_block(T.zeros((2, 1, 8, 8)), p, "enc0.multires", 16).data
    np.testing.assert_allclose(out[:, :3], np.broadcast_to(np.maximum(beta, 0)[None, :, None, None], (2, 3, 8, 8)), atol=1e-12)


@pytest.mark.parametrize("size", [16, 32, 64])
@pytest.mark.parametrize("c", [4, 16, 32])
def test_multiscale_pool_halves(size, c):
    cfg = SNetConfig(levels=2, base_channels=max(16, c))
    p = init_params(cfg, 1)
    # build a pool of exactly c channels from the layout conventions
    from arpmnet.blocks import _Layout

    lay = _Layout()
    lay.multiscale("pool", c)
    tensors = {k: Tensor(np.random.default_rng(0).normal(size=s) * 0.1, requires_grad=not kind.startswith("running"))
               for k, (s, kind) in lay.entries.items()}
    for k in tensors:
        if k.endswith("running_var"):
            tensors[k].data[...] = 1.0
    params = NetParams(p.role, tensors)
    out = multiscale_pool(Tensor(np.random.default_rng(1).normal(size=(1, c, size, size))), params, "pool")
    assert out.shape == (1, c, size // 2, size // 2)


def test_multiscale_pool_errors(small_params):
    with pytest.raises(ValueError):
        multiscale_pool(T.zeros((1, 16, 7, 8)), small_params, "enc0.pool")
    with pytest.raises(ValueError):
        multiscale_pool(T.zeros((1, 6, 8, 8)), small_params, "enc0.pool")


def test_multiscale_pool_zero_branches_give_zero(small_params):
    p = small_params.copy()
    for d in (1, 2, 3, 4):
        p[f"enc0.pool.branch{d}.weight"].data[...] = 0.0
    out = multiscale_pool(Tensor(np.random.default_rng(2).normal(size=(2, 16, 8, 8))), p, "enc0.pool")
    np.testing.assert_array_equal(out.data, 0.0)


def test_residual_path_identity_wiring(small_params):
    p = small_params.copy()
    p["skip0.unit0.conv.weight"].data[...] = 0.0
    proj = p["skip0.unit0.proj.weight"].data
    proj[...] = 0.0
    proj[:, :, 0, 0] = np.eye(16)
    skip = np.abs(np.random.default_rng(3).normal(size=(2, 16, 4, 4)))
    out = residual_forward_path(Tensor(skip), p, "skip0", 1)
    np.testing.assert_allclose(out.data, skip, atol=1e-12)


def test_residual_units_schedule():
    assert [residual_units(lv) for lv in range(5)] == [4, 3, 2, 1, 1]
    with pytest.raises(ValueError):
        residual_forward_path(T.zeros((1, 16, 4, 4)), init_params(SMALL, 0), "skip0", 0)


def test_residual_path_grads_reach_branch_and_projection(small_params):
    p = small_params.copy()
    x = Tensor(np.random.default_rng(4).normal(size=(2, 16, 6, 6)))
    T.backward(T.sum(residual_forward_path(x, p, "skip0", 4) * Tensor(np.random.default_rng(5).normal(size=(2, 16, 6, 6)))))
    for u in range(4):
        assert np.abs(p[f"skip0.unit{u}.conv.weight"].grad).sum() > 0
        assert np.abs(p[f"skip0.unit{u}.proj.weight"].grad).sum() > 0


def test_mrf_identity_at_init(small_params):
    x = np.random.default_rng(6).normal(size=(2, 6, 8, 8)) * 3
    out = mrf_block(Tensor(x), small_params, "mrf", SMALL.mrf)
    np.testing.assert_array_equal(out.data, x)


def test_mrf_uniform_logits_stay_uniform(small_params):
    p = small_params.copy()
    rng = np.random.default_rng(7)
    p["mrf.global.weight"].data = rng.normal(size=(6, 6, 1, 1))
    p["mrf.local0.weight"].data = np.ones((6, 9, 9))
    p["mrf.local1.weight"].data = np.ones((6, 9, 9))
    logits = np.broadcast_to(rng.normal(size=(1, 6, 1, 1)), (1, 6, 24, 24)).copy()
    out = mrf_block(Tensor(logits), p, "mrf", SMALL.mrf).data
    # constant fields propagate; only cells within reach of the zero-padded border can differ
    reach = 2 * (9 // 2) + 1
    interior = out[:, :, reach:-reach, reach:-reach]
    np.testing.assert_allclose(interior, interior[:, :, :1, :1] * np.ones_like(interior), atol=1e-12)


def test_mrf_wrong_class_count(small_params):
    with pytest.raises(ValueError):
        mrf_block(T.zeros((1, 3, 8, 8)), small_params, "mrf", SMALL.mrf)


def test_mrf_config_validation():
    with pytest.raises(ValueError):
        MRFConfig(local_kernel=4)
    with pytest.raises(ValueError):
        MRFConfig(local_dilations=(2, 2))
    with pytest.raises(ValueError):
        MRFConfig(pool_window=(3, 2, 3))


def test_mrf_param_halving():
    # two 25x25 filters replace one 50x50 filter, 3 classes
    assert mrf_local_param_counts(50, 3) == (3750, 7500)
    for k in range(3, 26, 2):
        for c in (1, 3, 6):
            pair, full = mrf_local_param_counts(k, c)
            assert pair < full


def test_snet_shapes_and_softmax():
    cfg = SNetConfig()
    p = init_params(cfg, 0)
    with T.no_grad():
        logits = snet_forward(Tensor(np.random.default_rng(8).uniform(-3, 3, size=(2, 1, 64, 64))), p, cfg)
    assert logits.shape == (2, 6, 64, 64)
    assert np.isfinite(logits.data).all()
    np.testing.assert_allclose(T.softmax_channels(logits).data.sum(axis=1), 1.0, atol=1e-12)


def test_snet_indivisible_input(small_params):
    with pytest.raises(ValueError):
        snet_forward(T.zeros((1, 1, 15, 16)), small_params, SMALL)


def test_snet_inference_mode_does_not_touch_running_stats(small_params):
    p = small_params.copy()
    before = {k: t.data.copy() for k, t in p.items()}
    with T.no_grad():
        snet_forward(Tensor(np.random.default_rng(9).normal(size=(1, 1, 16, 16))), p, SMALL, training=False)
    for k, t in p.items():
        np.testing.assert_array_equal(t.data, before[k])


def test_snet_input_affine_equivalence(small_params):
    # shifting the configured mean with the image leaves the network unchanged
    x = np.random.default_rng(11).uniform(0, 1, size=(1, 1, 16, 16))
    moved = SNetConfig(levels=2, base_channels=16, input_mean=1.5, input_std=0.5)
    with T.no_grad():
        a = snet_forward(Tensor(x), small_params, SMALL, training=False).data
        b = snet_forward(Tensor(2 * x + 0.5), small_params, moved, training=False).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("std", [0.0, -1.0, float("nan")])
def test_snet_rejects_bad_input_std(std):
    with pytest.raises(ValueError):
        SNetConfig(input_std=std)


def test_dnet_shape_range_and_zero_head():
    cfg = DNetConfig()
    p = init_params(cfg, 0)
    x = Tensor(np.random.default_rng(10).uniform(0, 1, size=(1, 6, 64, 64)))
    score = dnet_forward(x, p, cfg).data
    assert score.shape == (1, 1, 64, 64)
    assert ((score > 0) & (score < 1)).all()
    p["classify.weight"].data[...] = 0.0
    np.testing.assert_array_equal(dnet_forward(x, p, cfg).data, 0.5)
    with pytest.raises(ValueError):
        dnet_forward(T.zeros((1, 6, 24, 24)), p, cfg)
    with pytest.raises(ValueError):
        DNetConfig(channels=(32, 64, 128))


@settings(max_examples=10, deadline=None)
@given(st.floats(-1e3, 1e3), st.integers(0, 2**31 - 1))
def test_dnet_output_strictly_inside_unit_interval(scale, seed):
    cfg = DNetConfig(in_channels=2, channels=(4, 4, 4, 4))
    p = init_params(cfg, seed % 7)
    x = Tensor(np.random.default_rng(seed).normal(size=(1, 2, 16, 16)) * scale)
    score = dnet_forward(x, p, cfg).data
    assert ((score > 0) & (score < 1)).all()
