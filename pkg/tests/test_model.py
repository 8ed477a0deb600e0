"""Model: init, resolution-agnostic encoding, predictor isolation, EMA."""

import numpy as np
import pytest

from mulan import tensor as T
from mulan.augment import ViewType
from mulan.errors import ConfigError, ShapeError
from mulan.model import HeadConfig, SiameseModel, he_uniform
from mulan.tensor import Tape, Tensor


def small_cfg(method="byol", **kw):
    defaults = dict(backbone_channels=(4, 8), proj_hidden=16, proj_out=8,
                    pred_hidden=16)
    defaults.update(kw)
    return HeadConfig.for_method(method, **defaults)


def batch(n=4, size=32, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32)


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def test_target_equals_online_at_step_zero():
    model = SiameseModel.create(small_cfg(), seed=0)
    online = dict(model.online.named_params("x"))
    for name, t in model.target.named_params("x"):
        np.testing.assert_array_equal(t.data, online[name].data)


def test_different_seeds_differ():
    a = SiameseModel.create(small_cfg(), seed=0)
    b = SiameseModel.create(small_cfg(), seed=1)
    ka = a.online.backbone.blocks[0].conv.kernel.data
    kb = b.online.backbone.blocks[0].conv.kernel.data
    assert not np.array_equal(ka, kb)


def test_he_init_variance_matches_formula():
    rng = np.random.default_rng(0)
    fan_in = 64
    w = he_uniform(rng, (200, 64), fan_in, np.float64)  # 12800 >= 1e4 weights
    target = 2.0 / fan_in
    assert abs(w.var() - target) / target < 0.10


def test_predictors_share_architecture_not_parameters():
    model = SiameseModel.create(small_cfg(), seed=3)
    wg = model.predictors[ViewType.GLOBAL].linears[0].W.data
    wl = model.predictors[ViewType.LOCAL].linears[0].W.data
    assert wg.shape == wl.shape
    assert not np.array_equal(wg, wl)


def test_simsiam_head_layout():
    cfg = HeadConfig.for_method("simsiam", backbone_channels=(4, 8),
                                proj_hidden=16, proj_out=32)
    model = SiameseModel.create(cfg, seed=0)
    assert len(model.online.projector.linears) == 3
    assert model.online.projector.out_bn is not None
    pred = model.predictors[ViewType.GLOBAL]
    assert pred.linears[0].W.shape == (32, 8)  # bottleneck = out / 4
    assert model.target is None


def test_mocov3_output_bn_on_both_heads():
    model = SiameseModel.create(small_cfg("mocov3"), seed=0)
    assert model.online.projector.out_bn is not None
    assert model.predictors[ViewType.GLOBAL].out_bn is not None


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------

def test_encode_output_dim_independent_of_resolution():
    model = SiameseModel.create(small_cfg(), seed=1)
    z32 = model.encode(batch(2, 32), mode="eval", update_stats=False)
    z16 = model.encode(batch(2, 16), mode="eval", update_stats=False)
    assert z32.shape == (2, 8)
    assert z16.shape == (2, 8)


def test_encode_rejects_tiny_inputs():
    model = SiameseModel.create(small_cfg(), seed=1)
    with pytest.raises(ShapeError):
        model.encode(batch(1, 4))


def test_eval_encode_deterministic():
    model = SiameseModel.create(small_cfg(), seed=2)
    x = batch(3)
    a = model.encode(x, mode="eval", update_stats=False).data
    b = model.encode(x, mode="eval", update_stats=False).data
    assert np.array_equal(a, b)


def test_batch_encode_equals_per_sample_in_eval_mode():
    model = SiameseModel.create(small_cfg(), seed=4)
    x = batch(5)
    full = model.encode(x, mode="eval", update_stats=False).data
    singles = np.concatenate([
        model.encode(x[i:i + 1], mode="eval", update_stats=False).data
        for i in range(5)])
    np.testing.assert_allclose(full, singles, atol=1e-6)


# ---------------------------------------------------------------------------
# predictor isolation
# ---------------------------------------------------------------------------

def test_gradient_of_global_loss_zero_on_local_predictor():
    model = SiameseModel.create(small_cfg(), seed=5)
    x = batch(4)
    with Tape() as tape:
        z = model.encode(x)
        q = model.predict(ViewType.GLOBAL, z)
        loss = T.mean_all(T.mul(q, q))
        tape.backward(loss)
    for _, p in model.predictors[ViewType.LOCAL].named_params("p"):
        assert p.grad is None
    for _, p in model.predictors[ViewType.GLOBAL].named_params("p"):
        assert p.grad is not None
    assert model.online.backbone.blocks[0].conv.kernel.grad is not None


def test_missing_view_type_rejected():
    model = SiameseModel.create(small_cfg(), seed=5, view_types=[ViewType.GLOBAL])
    with pytest.raises(ConfigError):
        model.predict(ViewType.CUTOUT, Tensor(np.zeros((2, 8), dtype=np.float32)))


def test_identical_banks_identical_outputs():
    a = SiameseModel.create(small_cfg(), seed=6)
    b = SiameseModel.create(small_cfg(), seed=6)
    z = Tensor(np.random.default_rng(0).random((4, 8)).astype(np.float32))
    qa = a.predict(ViewType.CUTOUT, z, mode="eval", update_stats=False).data
    qb = b.predict(ViewType.CUTOUT, z, mode="eval", update_stats=False).data
    np.testing.assert_array_equal(qa, qb)


def test_shared_predictor_mode_uses_one_head():
    model = SiameseModel.create(small_cfg(shared_predictor=True), seed=7)
    assert model.predictors[ViewType.GLOBAL] is model.predictors[ViewType.LOCAL]
    assert len(model.predictor_items()) == 1


# ---------------------------------------------------------------------------
# target branch
# ---------------------------------------------------------------------------

def test_target_forward_produces_no_gradients():
    model = SiameseModel.create(small_cfg(), seed=8)
    x = batch(4)
    with Tape() as tape:
        zt = model.target_forward(x)
        # any loss built on the (numpy) target output cannot reach the encoder
        loss = T.sum_all(T.mul(Tensor(zt), Tensor(zt)))
        assert not loss.requires_grad
        assert tape.live_entries == 0
    assert model.online.backbone.blocks[0].conv.kernel.grad is None


def test_simsiam_target_equals_online_encode():
    model = SiameseModel.create(small_cfg("simsiam"), seed=9)
    x = batch(4)
    zt = model.target_forward(x)
    zo = model.encode(x, mode="train", update_stats=False).data
    np.testing.assert_allclose(zt, zo, atol=1e-6)


def test_byol_target_equals_online_at_step_zero():
    model = SiameseModel.create(small_cfg(), seed=10)
    x = batch(4)
    zt = model.target_forward(x)
    zo = model.encode(x, mode="train", update_stats=False).data
    np.testing.assert_allclose(zt, zo, atol=1e-6)


def test_target_forward_does_not_touch_running_stats():
    model = SiameseModel.create(small_cfg(), seed=11)
    before = [s for _, state, f in model.target.named_states("t")
              for s in [getattr(state, f).copy()]]
    model.target_forward(batch(4))
    after = [s for _, state, f in model.target.named_states("t")
             for s in [getattr(state, f)]]
    for b, a in zip(before, after):
        np.testing.assert_array_equal(b, a)


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

def test_ema_tau_one_leaves_target_unchanged():
    model = SiameseModel.create(small_cfg(), seed=12)
    model.online.backbone.blocks[0].conv.kernel.data += 1.0
    before = model.target.backbone.blocks[0].conv.kernel.data.copy()
    model.ema_update(1.0)
    np.testing.assert_array_equal(model.target.backbone.blocks[0].conv.kernel.data, before)


def test_ema_tau_zero_copies_online():
    model = SiameseModel.create(small_cfg(), seed=13)
    model.online.backbone.blocks[0].conv.kernel.data += 0.5
    model.ema_update(0.0)
    np.testing.assert_allclose(model.target.backbone.blocks[0].conv.kernel.data,
                               model.online.backbone.blocks[0].conv.kernel.data)


def test_ema_scalar_arithmetic():
    model = SiameseModel.create(small_cfg(), seed=14)
    k_online = model.online.backbone.blocks[0].conv.kernel
    k_target = model.target.backbone.blocks[0].conv.kernel
    k_online.data = np.ones_like(k_online.data)
    k_target.data = np.zeros_like(k_target.data)
    model.ema_update(0.996)
    np.testing.assert_allclose(k_target.data, 0.004, rtol=1e-5)


def test_ema_is_contraction_per_coordinate():
    model = SiameseModel.create(small_cfg(), seed=15)
    rng = np.random.default_rng(0)
    for _, p in model.online.named_params("x"):
        p.data = p.data + rng.standard_normal(p.data.shape).astype(p.data.dtype)
    online = dict(model.online.named_params("x"))
    gaps_before = {n: (t.data - online[n].data).copy()
                   for n, t in model.target.named_params("x")}
    tau = 0.9
    model.ema_update(tau)
    for n, t in model.target.named_params("x"):
        np.testing.assert_allclose(t.data - online[n].data, tau * gaps_before[n],
                                   atol=1e-6)


def test_ema_updates_running_stats_too():
    model = SiameseModel.create(small_cfg(), seed=16)
    model.encode(batch(8))  # train-mode forward updates online running stats
    model.ema_update(0.5)
    on = {n: (s, f) for n, s, f in model.online.named_states("x")}
    for name, state, f in model.target.named_states("x"):
        src_state, src_f = on[name]
        src = getattr(src_state, src_f)
        got = getattr(state, f)
        base = np.zeros_like(src) if f == "running_mean" else np.ones_like(src)
        np.testing.assert_allclose(got, 0.5 * base + 0.5 * src, atol=1e-6)
