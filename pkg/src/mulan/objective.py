"""Pair routing and the multi-task alignment loss.

Targets are always global embeddings.  Every global online view pairs with
every *other* global target; every local and cutout online view pairs with
every global target.  Pair losses are averaged within each view type before
the per-type weights apply, so a weight's meaning does not depend on how many
views of that type the recipe uses.

Three objective plug-ins: ``byol`` (squared distance of normalized vectors),
``simsiam`` (negative cosine), ``mocov3`` (InfoNCE over in-batch negatives).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .augment import Recipe, ViewType
from .errors import ConfigError
from .tensor import Tensor, custom_op

OBJECTIVES = ("byol", "simsiam", "mocov3")


class Pair(NamedTuple):
    online_index: int
    target_index: int
    view_type: ViewType


@dataclass(frozen=True)
class LossWeights:
    lam_global: float = 1.0
    lam_local: float = 1.0
    lam_cutout: float = 1.0

    def of(self, vt: ViewType) -> float:
        return {ViewType.GLOBAL: self.lam_global,
                ViewType.LOCAL: self.lam_local,
                ViewType.CUTOUT: self.lam_cutout}[vt]

    @classmethod
    def from_recipe(cls, recipe: Recipe) -> "LossWeights":
        return cls(recipe.lambda_global, recipe.lambda_local, recipe.lambda_cutout)


def route_pairs(recipe: Recipe) -> list[Pair]:
    """Enumerate (online view, global target) pairs for a recipe."""
    if recipe.n_global < 1:
        raise ConfigError("pair routing needs at least one global view")
    kinds = recipe.view_types()
    globals_ = [i for i, vt in enumerate(kinds) if vt is ViewType.GLOBAL]
    pairs = []
    for i, vt in enumerate(kinds):
        if vt is ViewType.GLOBAL:
            pairs.extend(Pair(i, j, vt) for j in globals_ if j != i)
        else:
            pairs.extend(Pair(i, j, vt) for j in globals_)
    return pairs


def pairs_by_type(plan: list[Pair]) -> dict[ViewType, list[Pair]]:
    out: dict[ViewType, list[Pair]] = {}
    for pair in plan:
        out.setdefault(pair.view_type, []).append(pair)
    return out


# ---------------------------------------------------------------------------
# pairwise losses (compositional path)
# ---------------------------------------------------------------------------

def _rows(t) -> float:
    return 1 if t.ndim == 1 else t.shape[0]


def byol_pair_loss(p, z) -> Tensor:
    """Mean over the batch of ||normalize(p) - normalize(z)||^2 = 2 - 2 cos."""
    p_hat = T.l2_normalize(p if isinstance(p, Tensor) else Tensor(p))
    z_hat = T.l2_normalize(z if isinstance(z, Tensor) else Tensor(z))
    d = T.sub(p_hat, z_hat)
    return T.scale(T.sum_all(T.mul(d, d)), 1.0 / _rows(p_hat))


def simsiam_pair_loss(p, z) -> Tensor:
    """Mean negative cosine similarity; byol_pair_loss = 2 + 2 * this."""
    p_hat = T.l2_normalize(p if isinstance(p, Tensor) else Tensor(p))
    z_hat = T.l2_normalize(z if isinstance(z, Tensor) else Tensor(z))
    return T.scale(T.sum_all(T.mul(p_hat, z_hat)), -1.0 / _rows(p_hat))


def infonce_loss(q, positive, negatives, temperature: float) -> Tensor:
    """Cross-entropy of cosine similarities / temperature, positive at index 0."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if len(negatives) < 1:
        raise ConfigError("infonce needs at least one negative")
    q = q if isinstance(q, Tensor) else Tensor(q)
    cands = T.stack_rows([positive] + list(negatives))          # (K+1, D)
    q_hat = T.l2_normalize(T.stack_rows([q]))                   # (1, D)
    c_hat = T.l2_normalize(cands)
    logits = T.scale(T.matmul(q_hat, T.transpose(c_hat)), 1.0 / temperature)  # (1, K+1)
    return T.sub(T.sum_all(T.row_logsumexp(logits)), T.sum_all(T.take_diag(logits)))


def infonce_batch_loss(pred, targets, temperature: float) -> Tensor:
    """Batched InfoNCE: row n's positive is targets row n, negatives are the
    other rows of the same target view (in-batch negatives)."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    p_hat = T.l2_normalize(pred if isinstance(pred, Tensor) else Tensor(pred))
    z_hat = T.l2_normalize(targets if isinstance(targets, Tensor) else Tensor(targets))
    logits = T.scale(T.matmul(p_hat, T.transpose(z_hat)), 1.0 / temperature)  # (N, N)
    per_row = T.sub(T.row_logsumexp(logits), T.take_diag(logits))
    return T.scale(T.sum_all(per_row), 1.0 / _rows(p_hat))


def pair_loss(objective: str, p, z, temperature: float = 0.2) -> Tensor:
    if objective == "byol":
        return byol_pair_loss(p, z)
    if objective == "simsiam":
        return simsiam_pair_loss(p, z)
    if objective == "mocov3":
        return infonce_batch_loss(p, z, temperature)
    raise ConfigError(f"unknown objective {objective!r}, expected one of {OBJECTIVES}")


# ---------------------------------------------------------------------------
# fused multi-target loss (used by the per-view accumulation path)
# ---------------------------------------------------------------------------

def normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(norms, eps)


def multi_target_loss(q_hat: Tensor, targets_hat: np.ndarray, objective: str,
                      temperature: float = 0.2) -> Tensor:
    """Sum over target views j of the mean pair loss against constant target
    stack targets_hat (J, N, D); q_hat must already be row-normalized.

    One tape entry regardless of J, which keeps the per-view live-entry count
    identical across recipes (the memory-constancy instrument).
    """
    qd = q_hat.data
    n = qd.shape[0]
    zs = targets_hat
    if zs.ndim != 3 or zs.shape[1:] != qd.shape:
        raise ConfigError(f"target stack {zs.shape} does not match predictions {qd.shape}")

    if objective == "byol":
        # sum_j mean_n ||q - z_j||^2 ; both sides unit norm
        cos = np.einsum("nd,jnd->jn", qd, zs)
        value = float((2.0 - 2.0 * cos).mean(axis=1).sum())

        def vjp(g):
            return (np.asarray(g) * (-2.0 / n) * zs.sum(axis=0),)

    elif objective == "simsiam":
        cos = np.einsum("nd,jnd->jn", qd, zs)
        value = float((-cos).mean(axis=1).sum())

        def vjp(g):
            return (np.asarray(g) * (-1.0 / n) * zs.sum(axis=0),)

    elif objective == "mocov3":
        if temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {temperature}")
        logits = np.einsum("nd,jmd->jnm", qd, zs) / temperature  # (J, N, N)
        m = logits.max(axis=2, keepdims=True)
        e = np.exp(logits - m)
        softmax = e / e.sum(axis=2, keepdims=True)
        lse = (m[:, :, 0] + np.log(e.sum(axis=2)))
        diag = np.einsum("jnn->jn", logits)
        value = float((lse - diag).mean(axis=1).sum())
        smd = softmax.copy()
        idx = np.arange(n)
        smd[:, idx, idx] -= 1.0

        def vjp(g):
            grad = np.einsum("jnm,jmd->nd", smd, zs) / (temperature * n)
            return (np.asarray(g) * grad,)

    else:
        raise ConfigError(f"unknown objective {objective!r}")

    out = np.asarray(value, dtype=qd.dtype)
    return custom_op(out, [q_hat], vjp, name=f"multi_target_loss[{objective}]")


# ---------------------------------------------------------------------------
# total loss (joint path)
# ---------------------------------------------------------------------------

def total_loss(predictions: dict[int, Tensor], targets: dict[int, np.ndarray],
               plan: list[Pair], weights: LossWeights, objective: str,
               temperature: float = 0.2) -> tuple[Tensor, dict[ViewType, float]]:
    """Weighted sum over view types of the mean pair loss of that type.

    ``predictions[i]`` is the predicted embedding of online view i (through
    its view type's predictor); ``targets[j]`` is the gradient-free target
    embedding of global view j.  Returns the scalar total and the per-type
    components (already weighted) for logging.
    """
    if not plan:
        raise ConfigError("empty pair plan")
    by_type = pairs_by_type(plan)
    total = None
    components: dict[ViewType, float] = {}
    for vt in sorted(by_type, key=lambda v: v.value):
        pairs = by_type[vt]
        acc = None
        for pair in pairs:
            term = pair_loss(objective, predictions[pair.online_index],
                             Tensor(targets[pair.target_index]), temperature)
            acc = term if acc is None else T.add(acc, term)
        weighted = T.scale(acc, weights.of(vt) / len(pairs))
        components[vt] = weighted.item()
        total = weighted if total is None else T.add(total, weighted)
    return total, components
