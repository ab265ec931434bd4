import numpy as np
import pytest

from gradcheck import check_gradients
from trajgpt.backbone import (
    BackboneConfig,
    BackboneWeights,
    ContextOverflowError,
    backbone_forward,
    backbone_param_names,
    expected_param_count,
    init_backbone,
)
from trajgpt.tensor import Tensor, mul, tensor_sum

TINY = BackboneConfig(d_model=16, n_heads=4, n_layers=2, dropout=0.0, max_positions=32)


def tiny_weights(seed=0):
    return init_backbone(TINY, seed)


# ---------------------------------------------------------------- config

def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        BackboneConfig(d_model=10, n_heads=3)


def test_config_rejects_bad_dropout():
    with pytest.raises(ValueError):
        BackboneConfig(dropout=1.0)


# ---------------------------------------------------------------- init

def test_default_param_count():
    w = init_backbone(BackboneConfig(), seed=0)
    assert w.param_count() == expected_param_count(BackboneConfig()) == 2_369_792


def test_param_names_match_init():
    cfg = BackboneConfig(d_model=8, n_heads=2, n_layers=3, max_positions=4)
    w = init_backbone(cfg, seed=0)
    assert w.names() == backbone_param_names(cfg)
    assert all(name.startswith("backbone.") for name in w.names())
    assert len(w.names()) == 16 * 3 + 2


def test_init_deterministic_per_seed():
    a, b = tiny_weights(7), tiny_weights(7)
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data)
    c = tiny_weights(8)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a.names())


def test_init_statistics():
    w = init_backbone(BackboneConfig(), seed=3)
    flat = np.concatenate(
        [w[n].data.ravel() for n in w.names() if n.endswith((".wq", ".wk", ".wv", ".wo", ".w1", ".w2"))]
    )
    assert abs(flat.mean()) < 1e-3
    assert abs(flat.std() - 0.02) < 0.001
    for n in w.names():
        if n.endswith((".bq", ".bk", ".bv", ".bo", ".b1", ".b2", ".bias")):
            np.testing.assert_array_equal(w[n].data, 0.0)
        if n.endswith(".gain"):
            np.testing.assert_array_equal(w[n].data, 1.0)


# ---------------------------------------------------------------- forward shapes

def test_forward_shapes_2d_and_3d():
    w = tiny_weights()
    rng = np.random.default_rng(0)
    single = backbone_forward(w, Tensor(rng.standard_normal((5, 16))))
    assert single.shape == (5, 16)
    batched = backbone_forward(w, Tensor(rng.standard_normal((3, 5, 16))))
    assert batched.shape == (3, 5, 16)


def test_forward_t1_degenerate():
    w = tiny_weights()
    out = backbone_forward(w, Tensor(np.random.default_rng(1).standard_normal((1, 16))))
    assert out.shape == (1, 16)
    assert np.all(np.isfinite(out.data))


def test_context_overflow():
    w = tiny_weights()
    x = Tensor(np.zeros((TINY.max_positions + 1, 16)))
    with pytest.raises(ContextOverflowError):
        backbone_forward(w, x)


def test_wrong_feature_dim_rejected():
    w = tiny_weights()
    with pytest.raises(ValueError):
        backbone_forward(w, Tensor(np.zeros((4, 8))))


# ---------------------------------------------------------------- causality

def test_causality_bitwise_100_trials():
    w = init_backbone(BackboneConfig(d_model=32, n_heads=4, n_layers=3, dropout=0.0, max_positions=64), seed=1)
    rng = np.random.default_rng(99)
    for _ in range(100):
        t = int(rng.integers(2, 12))
        x = rng.standard_normal((t, 32))
        base = backbone_forward(w, Tensor(x)).data
        j = int(rng.integers(1, t))
        x2 = x.copy()
        x2[j] += rng.standard_normal(32) * 10.0
        pert = backbone_forward(w, Tensor(x2)).data
        np.testing.assert_array_equal(base[:j], pert[:j])


def test_t1_output_independent_of_absent_future():
    w = tiny_weights()
    rng = np.random.default_rng(2)
    row = rng.standard_normal((1, 16))
    solo = backbone_forward(w, Tensor(row)).data
    longer = backbone_forward(w, Tensor(np.concatenate([row, rng.standard_normal((6, 16))]))).data
    np.testing.assert_allclose(solo[0], longer[0], rtol=0, atol=1e-12)


# ---------------------------------------------------------------- padding

def test_pad_invariance():
    # appending padded positions never changes real outputs; tolerance admits
    # BLAS blocking differences across sequence lengths (observed ~1 ulp)
    w = tiny_weights()
    rng = np.random.default_rng(3)
    t_real = 6
    x = rng.standard_normal((t_real, 16))
    base = backbone_forward(w, Tensor(x), pad_mask=np.ones(t_real, dtype=bool)).data
    for pad in (1, 4, 17):
        x_padded = np.concatenate([x, rng.standard_normal((pad, 16))])
        mask = np.concatenate([np.ones(t_real, dtype=bool), np.zeros(pad, dtype=bool)])
        out = backbone_forward(w, Tensor(x_padded), pad_mask=mask).data
        np.testing.assert_allclose(out[:t_real], base, rtol=0, atol=1e-12)
        assert np.all(np.isfinite(out))


def test_padded_rows_stay_finite():
    w = tiny_weights()
    x = np.random.default_rng(4).standard_normal((5, 16))
    mask = np.array([True, False, False, False, False])
    out = backbone_forward(w, Tensor(x), pad_mask=mask).data
    assert np.all(np.isfinite(out))


def test_per_row_pad_masks_in_batch():
    w = tiny_weights()
    rng = np.random.default_rng(5)
    xb = rng.standard_normal((2, 8, 16))
    mask = np.ones((2, 8), dtype=bool)
    mask[0, 5:] = False
    out_batch = backbone_forward(w, Tensor(xb), pad_mask=mask).data
    out_row0 = backbone_forward(w, Tensor(xb[0]), pad_mask=mask[0]).data
    np.testing.assert_array_equal(out_batch[0], out_row0)


# ---------------------------------------------------------------- dropout

def test_dropout_paths():
    cfg = BackboneConfig(d_model=16, n_heads=4, n_layers=2, dropout=0.5, max_positions=32)
    w = init_backbone(cfg, seed=0)
    x = Tensor(np.random.default_rng(6).standard_normal((4, 16)))
    eval_a = backbone_forward(w, x).data
    eval_b = backbone_forward(w, x).data
    np.testing.assert_array_equal(eval_a, eval_b)
    train_a = backbone_forward(w, x, rng=np.random.default_rng(10)).data
    train_b = backbone_forward(w, x, rng=np.random.default_rng(10)).data
    train_c = backbone_forward(w, x, rng=np.random.default_rng(11)).data
    np.testing.assert_array_equal(train_a, train_b)
    assert not np.array_equal(train_a, train_c)
    assert not np.array_equal(train_a, eval_a)


# ---------------------------------------------------------------- gradients

def test_full_model_gradcheck():
    cfg = BackboneConfig(d_model=8, n_heads=2, n_layers=2, dropout=0.0, max_positions=8)
    w = init_backbone(cfg, seed=12)
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 5, 8))
    mask = np.ones((2, 5), dtype=bool)
    mask[1, 3:] = False
    proj = rng.standard_normal((2, 5, 8))

    def loss_fn():
        out = backbone_forward(w, Tensor(x), pad_mask=mask)
        return tensor_sum(mul(out, Tensor(proj)))

    # composite-model gradients sit near the roundoff floor at h=1e-6;
    # h=1e-5 balances truncation vs cancellation for the stacked blocks
    check_gradients(loss_fn, w.trainable(), rtol=1e-4, h_base=1e-5)


def test_gradients_flow_to_inputs():
    w = tiny_weights()
    x = Tensor(np.random.default_rng(14).standard_normal((3, 16)), requires_grad=True)
    tensor_sum(backbone_forward(w, x)).backward()
    assert np.any(x.grad != 0.0)


# ---------------------------------------------------------------- weights container

def test_weights_container_basics():
    w = tiny_weights()
    assert isinstance(w, BackboneWeights)
    assert w["backbone.ln_f.gain"].shape == (16,)
    trainable = w.trainable()
    assert len(trainable) == len(w.names())
    assert all(t.requires_grad for t in trainable)
