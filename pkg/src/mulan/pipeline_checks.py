"""End-to-end gradient checks through the real model.

These run in float64: a central-difference check of the full pair loss
through conv -> pool -> projector -> predictor against the tape gradients of
every parameter, and the per-view-accumulation vs joint-backward equivalence
on a (2 global, 2 local, 1 cutout) micro-batch, including the tape
high-water instrumentation.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .augment import Recipe, ViewType, collate_views
from .data import make_synth_dataset
from .gradcheck import max_rel_error, numeric_gradient
from .model import HeadConfig, SiameseModel
from .objective import byol_pair_loss
from .tensor import Tape, Tensor
from .train import accumulate_view_gradients, joint_gradients, route_pairs

_TINY = dict(backbone_channels=(2, 4), proj_hidden=8, proj_out=4, pred_hidden=8)


def _tiny_model(seed: int, method="byol") -> SiameseModel:
    cfg = HeadConfig.for_method(method, **_TINY)
    return SiameseModel.create(cfg, seed=seed, dtype=np.float64)


def check_pair_loss_gradient(seed: int, h: float = 1e-5) -> float:
    """Max relative error of d(pair loss)/d(theta) over every parameter."""
    rng = np.random.default_rng(seed)
    x_online = rng.random((2, 3, 12, 12))
    x_target = rng.random((2, 3, 12, 12))

    model = _tiny_model(seed)
    params = model.trainable_named_params()
    sizes = [p.data.size for _, p in params]
    theta0 = np.concatenate([p.data.reshape(-1) for _, p in params])

    def set_theta(theta):
        offset = 0
        for (_, p), size in zip(params, sizes):
            p.data = theta[offset:offset + size].reshape(p.data.shape).copy()
            offset += size

    def loss_value(theta):
        set_theta(theta)
        z_t = model.target_forward(x_target, mode="train")
        with T.no_grad():
            z = model.encode(x_online, mode="train", update_stats=False)
            q = model.predict(ViewType.GLOBAL, z, update_stats=False)
            return byol_pair_loss(q, Tensor(z_t)).item()

    set_theta(theta0)
    z_t = model.target_forward(x_target, mode="train")
    with Tape() as tape:
        z = model.encode(x_online, mode="train", update_stats=False)
        q = model.predict(ViewType.GLOBAL, z, update_stats=False)
        loss = byol_pair_loss(q, Tensor(z_t))
        tape.backward(loss)
    analytic = np.concatenate([
        (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        for _, p in params])

    numeric = numeric_gradient(loss_value, theta0.copy(), h)
    set_theta(theta0)
    return max_rel_error(analytic, numeric)


def _micro_slots(recipe: Recipe, n_images: int = 4, seed: int = 0):
    dataset = make_synth_dataset(seed, n_train=n_images, n_val=4, size=16)
    slots = collate_views(dataset.train_images, recipe, seed, 0,
                          np.arange(n_images), dataset.stats)
    for slot in slots:  # 64-bit build of the same batch
        slot["online"] = slot["online"].astype(np.float64)
        slot["target"] = slot["target"].astype(np.float64)
    return slots


def _grad_map(model: SiameseModel) -> dict[str, np.ndarray]:
    return {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in model.trainable_named_params()}


def check_accumulation(seed: int = 0) -> tuple[float, dict[int, int], int]:
    """Compare per-view accumulated grads with the joint backward.

    Returns (max coordinate difference, {view_count: per-view high water},
    joint-path high water for the 5-view recipe).
    """
    recipe5 = Recipe(n_global=2, n_local=2, n_cutout=1, global_size=16,
                     local_size=8)
    plan5 = route_pairs(recipe5)
    slots5 = _micro_slots(recipe5, seed=seed)

    model_a = _tiny_model(seed)
    model_a.zero_grad()
    tape_a = Tape()
    accumulate_view_gradients(model_a, slots5, plan5, recipe5, 0.2, tape_a)
    grads_a = _grad_map(model_a)

    model_b = _tiny_model(seed)
    model_b.zero_grad()
    _, tape_b = joint_gradients(model_b, slots5, plan5, recipe5, 0.2)
    grads_b = _grad_map(model_b)

    max_diff = max(float(np.max(np.abs(grads_a[k] - grads_b[k]))) for k in grads_a)

    recipe2 = Recipe(n_global=2, global_size=16, local_size=8)
    slots2 = _micro_slots(recipe2, seed=seed)
    model_c = _tiny_model(seed)
    model_c.zero_grad()
    tape_c = Tape()
    accumulate_view_gradients(model_c, slots2, route_pairs(recipe2), recipe2,
                              0.2, tape_c)

    high_water = {2: tape_c.high_water, 5: tape_a.high_water}
    return max_diff, high_water, tape_b.high_water
