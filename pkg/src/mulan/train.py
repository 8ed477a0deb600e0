"""Pre-training loop: schedules, SGD+momentum, per-view gradient accumulation,
and collapse monitoring.

A step runs the target forwards once (gradient-free), then one forward +
backward per online view, accumulating leaf gradients and releasing each
view's activations before the next -- mathematically identical to a joint
backward over the multi-view loss, with view-count-independent live memory.
``joint_gradients`` implements the joint formulation for equivalence checks.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import Recipe, ViewType, collate_views
from .errors import ConfigError, NonFiniteError
from .model import SiameseModel
from .objective import (LossWeights, normalize_rows, multi_target_loss,
                        pairs_by_type, route_pairs, total_loss)
from .rng import DOMAIN_SHUFFLE, stream
from .tensor import Tape, Tensor

METRICS_COLUMNS = ("step", "epoch", "loss_total", "loss_glob", "loss_loc",
                   "loss_cutout", "lr", "ema_tau", "embed_std", "grad_norm",
                   "time_ms")


@dataclass
class Schedule:
    base_lr: float
    warmup_epochs: int
    total_steps: int
    ema_base: float
    batch_size: int
    steps_per_epoch: int

    def __post_init__(self):
        if not 0.0 <= self.ema_base <= 1.0:
            raise ConfigError(f"ema_base must be in [0, 1], got {self.ema_base}")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup longer than the whole run")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warmup to base_lr, then cosine decay to 0 at the final step."""
    if not 0 <= step <= schedule.total_steps:
        raise ConfigError(f"step {step} outside [0, {schedule.total_steps}]")
    warmup = schedule.warmup_steps
    if warmup > 0 and step < warmup:
        return schedule.base_lr * step / warmup
    span = max(schedule.total_steps - warmup, 1)
    progress = (step - warmup) / span
    return schedule.base_lr * (math.cos(math.pi * progress) + 1.0) / 2.0


def ema_tau_at(step: int, schedule: Schedule) -> float:
    """tau(k) = 1 - (1 - base) * (cos(pi k / K) + 1) / 2, rising base -> 1."""
    if not 0 <= step <= schedule.total_steps:
        raise ConfigError(f"step {step} outside [0, {schedule.total_steps}]")
    k = step / max(schedule.total_steps, 1)
    return 1.0 - (1.0 - schedule.ema_base) * (math.cos(math.pi * k) + 1.0) / 2.0


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def _decay_excluded(name: str) -> bool:
    # batchnorm parameters and biases carry no weight decay
    return name.endswith(".b") or name.endswith(".gamma") or name.endswith(".beta")


class SGDMomentum:
    """v <- m v + g + wd w ; w <- w - lr v.

    Parameters whose grad buffer was never populated in a step are skipped
    entirely, so view types absent from a step's loss stay bitwise unchanged.
    Predictor parameters form their own group, which can be pinned to a
    constant learning rate (the simsiam convention).
    """

    def __init__(self, named_params, momentum: float = 0.9,
                 weight_decay: float = 0.0, constant_lr_predictors: bool = False):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.constant_lr_predictors = constant_lr_predictors
        self.velocities: dict[str, np.ndarray] = {}
        self.last_lrs: dict[str, float] = {}

    def step(self, lr: float, base_lr: float) -> None:
        pred_lr = base_lr if self.constant_lr_predictors else lr
        self.last_lrs = {"encoder": lr, "predictor": pred_lr}
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and not _decay_excluded(name):
                g = g + self.weight_decay * p.data
            v = self.velocities.get(name)
            v = g.astype(p.data.dtype) if v is None else self.momentum * v + g
            self.velocities[name] = v
            group_lr = pred_lr if name.startswith("predictor.") else lr
            p.data = p.data - group_lr * v

    def state_arrays(self):
        """Velocity buffers for checkpointing (names are param names)."""
        return dict(self.velocities)

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.velocities = {k: v.copy() for k, v in arrays.items()}


# ---------------------------------------------------------------------------
# collapse diagnostics
# ---------------------------------------------------------------------------

@dataclass
class CollapseStats:
    per_dim_std: np.ndarray
    mean_std: float
    mean_pairwise_cosine: float
    grad_norm: float
    threshold: float
    collapsed: bool


def default_collapse_threshold(dim: int, scale: float = 0.2) -> float:
    # isotropic unit vectors give per-dim std ~ 1/sqrt(D); a fixed fraction of
    # that detects collapse independently of the embedding width
    return scale / math.sqrt(dim)


def collapse_stats(embeddings: np.ndarray, threshold: float = None,
                   grad_norm: float = 0.0) -> CollapseStats:
    """Population std per dimension of row-normalized embeddings."""
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise ConfigError("collapse stats need at least two embedding rows")
    z = normalize_rows(embeddings.astype(np.float64))
    per_dim_std = z.std(axis=0)
    mean_std = float(per_dim_std.mean())
    n = z.shape[0]
    s = z.sum(axis=0)
    # mean over i != j of cos(z_i, z_j) via the Gram identity
    mean_cos = float((s @ s - n) / (n * (n - 1)))
    if threshold is None:
        threshold = default_collapse_threshold(z.shape[1])
    return CollapseStats(per_dim_std, mean_std, mean_cos, grad_norm,
                         threshold, mean_std < threshold)


# ---------------------------------------------------------------------------
# one training step
# ---------------------------------------------------------------------------

@dataclass
class MetricsRow:
    step: int
    epoch: int
    loss_total: float
    loss_glob: float
    loss_loc: float
    loss_cutout: float
    lr: float
    ema_tau: float
    embed_std: float
    grad_norm: float
    time_ms: float

    def csv(self) -> str:
        return ",".join([str(self.step), str(self.epoch)]
                        + [repr(float(v)) for v in (
                            self.loss_total, self.loss_glob, self.loss_loc,
                            self.loss_cutout, self.lr, self.ema_tau,
                            self.embed_std, self.grad_norm, self.time_ms)])


def _online_target_map(plan) -> dict[int, list[int]]:
    mapping: dict[int, list[int]] = {}
    for pair in plan:
        mapping.setdefault(pair.online_index, []).append(pair.target_index)
    return {i: sorted(js) for i, js in sorted(mapping.items())}


def accumulate_view_gradients(model: SiameseModel, slots, plan, recipe: Recipe,
                              temperature: float, tape: Tape
                              ) -> tuple[dict[ViewType, float], np.ndarray]:
    """Per-view forward/backward; grads accumulate on the model's leaves.

    Returns the (weighted) per-type loss components and the online projections
    gathered for collapse monitoring.
    """
    weights = LossWeights.from_recipe(recipe)
    n_pairs = {vt: len(ps) for vt, ps in pairs_by_type(plan).items()}
    online_map = _online_target_map(plan)
    objective = model.cfg.method

    targets_hat = {}
    for j in sorted({j for js in online_map.values() for j in js}):
        targets_hat[j] = normalize_rows(
            model.target_forward(slots[j]["target"], mode="train"))

    components = {vt: 0.0 for vt in n_pairs}
    embed_rows = []
    with tape:
        for i, target_ids in online_map.items():
            vt = slots[i]["view_type"]
            z = model.encode(slots[i]["online"], mode="train", update_stats=True)
            q = model.predict(vt, z)
            q_hat = T.l2_normalize(q)
            z_stack = np.stack([targets_hat[j] for j in target_ids])
            view_sum = multi_target_loss(q_hat, z_stack, objective, temperature)
            share = T.scale(view_sum, weights.of(vt) / n_pairs[vt])
            tape.backward(share)
            components[vt] += share.item()
            embed_rows.append(z.data)
            tape.clear()
    return components, np.concatenate(embed_rows)


def joint_gradients(model: SiameseModel, slots, plan, recipe: Recipe,
                    temperature: float) -> tuple[float, Tape]:
    """Joint formulation: forward every view, one backward over the total loss.

    Built from the pairwise-op composition, so agreement with the accumulation
    path cross-validates both the reordering and the fused multi-target op.
    """
    weights = LossWeights.from_recipe(recipe)
    online_map = _online_target_map(plan)
    targets = {j: model.target_forward(slots[j]["target"], mode="train")
               for j in sorted({j for js in online_map.values() for j in js})}
    tape = Tape()
    with tape:
        preds = {}
        for i in online_map:
            vt = slots[i]["view_type"]
            z = model.encode(slots[i]["online"], mode="train", update_stats=True)
            preds[i] = model.predict(vt, z)
        loss, _ = total_loss(preds, targets, plan, weights, model.cfg.method,
                             temperature)
        tape.backward(loss)
    return loss.item(), tape


def train_step(model: SiameseModel, slots, plan, recipe: Recipe,
               optimizer: SGDMomentum, schedule: Schedule, step: int,
               temperature: float = 0.2, collapse_scale: float = 0.2,
               deterministic: bool = False, tape: Tape = None) -> MetricsRow:
    """One optimization step; EMA update happens exactly once, after it."""
    t0 = time.perf_counter()
    model.zero_grad()
    tape = tape if tape is not None else Tape()
    try:
        components, embeddings = accumulate_view_gradients(
            model, slots, plan, recipe, temperature, tape)
    except NonFiniteError as err:
        raise NonFiniteError(
            f"non-finite loss at step {step}: {err}",
            diagnostics={"step": step, **err.diagnostics}) from err

    grad_sq = 0.0
    for _, p in model.trainable_named_params():
        if p.grad is not None:
            grad_sq += float((p.grad.astype(np.float64) ** 2).sum())
    grad_norm = math.sqrt(grad_sq)

    lr = lr_at(step, schedule)
    optimizer.step(lr, schedule.base_lr)

    if model.target is not None:
        tau = ema_tau_at(step, schedule)
        model.ema_update(tau)
    else:
        tau = 0.0  # simsiam: stop-gradient alias, no EMA

    dim = embeddings.shape[1]
    stats = collapse_stats(embeddings,
                           threshold=default_collapse_threshold(dim, collapse_scale),
                           grad_norm=grad_norm)
    elapsed_ms = 0.0 if deterministic else (time.perf_counter() - t0) * 1000.0
    return MetricsRow(
        step=step,
        epoch=step // schedule.steps_per_epoch,
        loss_total=sum(components.values()),
        loss_glob=components.get(ViewType.GLOBAL, 0.0),
        loss_loc=components.get(ViewType.LOCAL, 0.0),
        loss_cutout=components.get(ViewType.CUTOUT, 0.0),
        lr=lr,
        ema_tau=tau,
        embed_std=stats.mean_std,
        grad_norm=grad_norm,
        time_ms=elapsed_ms,
    )


# ---------------------------------------------------------------------------
# full training run
# ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 128
    base_lr: float = 0.0          # 0 -> linear scaling rule below
    lr_scale: float = 0.4
    momentum: float = 0.9
    weight_decay: float = 1.5e-6
    warmup_epochs: int = 2
    ema_base: float = 0.996
    temperature: float = 0.2
    collapse_scale: float = 0.2
    checkpoint_every: int = 0     # epochs; 0 -> only final
    deterministic: bool = False

    def resolved_lr(self) -> float:
        if self.base_lr > 0:
            return self.base_lr
        return self.lr_scale * self.batch_size / 256.0


def make_schedule(settings: TrainSettings, n_train: int) -> Schedule:
    steps_per_epoch = n_train // settings.batch_size
    if steps_per_epoch < 1:
        raise ConfigError(
            f"batch size {settings.batch_size} exceeds training set size {n_train}")
    return Schedule(
        base_lr=settings.resolved_lr(),
        warmup_epochs=settings.warmup_epochs,
        total_steps=settings.epochs * steps_per_epoch,
        ema_base=settings.ema_base,
        batch_size=settings.batch_size,
        steps_per_epoch=steps_per_epoch,
    )


def run_training(model: SiameseModel, dataset, recipe: Recipe,
                 settings: TrainSettings, seed: int, *, start_step: int = 0,
                 optimizer_state: dict = None, on_metrics=None,
                 on_epoch_end=None) -> list[MetricsRow]:
    """Drive train_step over shuffled epochs; resumable at epoch boundaries."""
    recipe.validate()
    plan = route_pairs(recipe)
    schedule = make_schedule(settings, len(dataset.train_images))
    optimizer = SGDMomentum(
        model.trainable_named_params(),
        momentum=settings.momentum,
        weight_decay=settings.weight_decay,
        constant_lr_predictors=(model.cfg.method == "simsiam"),
    )
    if optimizer_state:
        optimizer.load_state_arrays(optimizer_state)
    if start_step % schedule.steps_per_epoch != 0:
        raise ConfigError("resume is supported at epoch boundaries only")

    rows = []
    tape = Tape()
    n = len(dataset.train_images)
    for epoch in range(start_step // schedule.steps_per_epoch, settings.epochs):
        perm = stream(seed, DOMAIN_SHUFFLE, epoch).permutation(n)
        for b in range(schedule.steps_per_epoch):
            step = epoch * schedule.steps_per_epoch + b
            idx = perm[b * settings.batch_size:(b + 1) * settings.batch_size]
            slots = collate_views(dataset.train_images[idx], recipe, seed, epoch,
                                  idx, dataset.stats)
            row = train_step(model, slots, plan, recipe, optimizer, schedule,
                             step, settings.temperature, settings.collapse_scale,
                             settings.deterministic, tape=tape)
            rows.append(row)
            if on_metrics is not None:
                on_metrics(row)
        if on_epoch_end is not None:
            on_epoch_end(epoch, optimizer)
    return rows
