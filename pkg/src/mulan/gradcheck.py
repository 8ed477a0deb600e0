"""Finite-difference verification of every gradient path.

``run_all`` is what the ``gradcheck`` CLI subcommand executes: per-op
randomized central-difference checks in float64, a full pair-loss check
through conv -> pool -> projector -> predictor, and the per-view-accumulation
vs joint-backward equivalence on a multi-view micro-batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = DEFAULT_H) -> np.ndarray:
    """Central finite differences of a scalar function around x (in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = 1e-5) -> float:
    """Worst-coordinate relative error between two gradient arrays.

    The floor keeps true-zero gradients (e.g. a bias feeding straight into
    batchnorm) from being compared against bare finite-difference rounding
    noise, which is ~|f| eps / h ~ 1e-10 at h=1e-5 in float64.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def analytic_input_gradient(build: Callable[[Tensor], Tensor],
                            x: np.ndarray) -> np.ndarray:
    """Gradient of scalar build(x) w.r.t. x via the tape."""
    xt = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        loss = build(xt)
        tape.backward(loss)
    return xt.grad


def check_input_gradient(name: str, build: Callable[[Tensor], Tensor],
                         x: np.ndarray, h: float = DEFAULT_H) -> tuple[str, float]:
    """Compare tape gradient of scalar build(x) against central differences."""
    analytic = analytic_input_gradient(build, x)

    def f(arr):
        with T.no_grad():
            return build(Tensor(arr.copy())).item()

    numeric = numeric_gradient(f, x.copy(), h)
    return name, max_rel_error(analytic, numeric)


@dataclass
class CheckReport:
    lines: list[str] = field(default_factory=list)
    failures: int = 0

    def add(self, name: str, err: float, tol: float = DEFAULT_TOL) -> None:
        ok = err <= tol
        if not ok:
            self.failures += 1
        self.lines.append(f"{'PASS' if ok else 'FAIL'}  {name:<42s} max_rel_err={err:.3e}")

    def add_line(self, text: str, ok: bool = True) -> None:
        if not ok:
            self.failures += 1
        self.lines.append(text)

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def text(self) -> str:
        return "\n".join(self.lines)


def _op_cases(rng: np.random.Generator):
    """One randomized scalar-loss case per differentiable op (float64)."""
    f64 = np.float64

    def rnd(*shape):
        return rng.standard_normal(shape).astype(f64)

    x2 = rnd(4, 5)
    y2 = rnd(4, 5)
    # every weight array is drawn once here; the lambdas must be pure in `a`
    w_mm, r_mm = rnd(5, 3), rnd(4, 3)
    w_tr = rnd(5, 4)
    w_diag, x_diag = rnd(4), rnd(4, 6)
    w_lse = rnd(4)
    w_pool, x_pool = rnd(2, 3), rnd(2, 3, 4, 4)
    w_stack, x_stack = rnd(2, 5), rnd(5)
    cases = {
        "add": (lambda a: T.sum_all(T.mul(T.add(a, Tensor(y2)), Tensor(y2 + 0.5))), x2),
        "sub": (lambda a: T.sum_all(T.mul(T.sub(a, Tensor(y2)), Tensor(y2 + 0.5))), x2),
        "mul": (lambda a: T.sum_all(T.mul(a, Tensor(y2))), x2),
        "scale": (lambda a: T.sum_all(T.scale(a, -1.7)), x2),
        # shift relu inputs off the kink so central differences are valid
        "relu": (lambda a: T.sum_all(T.mul(T.relu(a), Tensor(y2))),
                 x2 + np.sign(x2) * 0.05),
        "matmul": (lambda a: T.sum_all(T.mul(T.matmul(a, Tensor(w_mm)), Tensor(r_mm))), x2),
        "transpose": (lambda a: T.sum_all(T.mul(T.transpose(a), Tensor(w_tr))), x2),
        "sum_all": (lambda a: T.scale(T.sum_all(a), 0.3), x2),
        "take_diag": (lambda a: T.sum_all(T.mul(T.take_diag(a), Tensor(w_diag))), x_diag),
        "row_logsumexp": (lambda a: T.sum_all(T.mul(T.row_logsumexp(a), Tensor(w_lse))), x2),
        "l2_normalize": (lambda a: T.sum_all(T.mul(T.l2_normalize(a), Tensor(y2))),
                         x2 + np.sign(x2) * 0.2),
        "global_mean_pool": (lambda a: T.sum_all(T.mul(T.global_mean_pool(a), Tensor(w_pool))),
                             x_pool),
        "stack_rows": (lambda a: T.sum_all(T.mul(
            T.stack_rows([T.scale(a, 1.0), T.scale(a, -0.5)]), Tensor(w_stack))), x_stack),
    }

    xc = rnd(2, 3, 5, 5)
    kc = rnd(4, 3, 3, 3)
    wc = rnd(2, 4, 3, 3)

    def conv_x(a):
        return T.sum_all(T.mul(T.conv2d(a, Tensor(kc), stride=2), Tensor(wc)))

    def conv_k(a):
        return T.sum_all(T.mul(T.conv2d(Tensor(xc), a, stride=2), Tensor(wc)))

    cases["conv2d/input"] = (conv_x, xc)
    cases["conv2d/kernel"] = (conv_k, kc)

    xb = rnd(6, 3)
    gb = rnd(3) * 0.3 + 1.0
    bb = rnd(3) * 0.3
    wb = rnd(6, 3)

    def bn_train_x(a):
        state = T.BatchNormState(3, dtype=f64)
        return T.sum_all(T.mul(
            T.batchnorm(a, Tensor(gb), Tensor(bb), state, mode="train"), Tensor(wb)))

    def bn_train_gamma(a):
        state = T.BatchNormState(3, dtype=f64)
        return T.sum_all(T.mul(
            T.batchnorm(Tensor(xb), a, Tensor(bb), state, mode="train"), Tensor(wb)))

    eval_state = T.BatchNormState(3, dtype=f64)
    eval_state.running_mean = rnd(3) * 0.2
    eval_state.running_var = np.abs(rnd(3)) * 0.5 + 0.5

    def bn_eval_x(a):
        return T.sum_all(T.mul(
            T.batchnorm(a, Tensor(gb), Tensor(bb), eval_state, mode="eval"), Tensor(wb)))

    cases["batchnorm/train/input"] = (bn_train_x, xb)
    cases["batchnorm/train/gamma"] = (bn_train_gamma, gb.copy())
    cases["batchnorm/eval/input"] = (bn_eval_x, xb)
    return cases


def check_op_gradients(seeds=(0, 1, 2, 3, 4), h: float = DEFAULT_H) -> list[tuple[str, float]]:
    """Worst relative error per op across the given seeds."""
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (build, x) in _op_cases(rng).items():
            _, err = check_input_gradient(name, build, x, h)
            worst[name] = max(worst.get(name, 0.0), err)
    return sorted(worst.items())


def run_all(seeds=(0, 1, 2, 3, 4), h: float = DEFAULT_H,
            tol: float = DEFAULT_TOL) -> CheckReport:
    """Full gradient audit: ops, encoder pair loss, accumulation equivalence."""
    # imported here to keep this module usable with tensor-core alone
    from .pipeline_checks import check_pair_loss_gradient, check_accumulation

    report = CheckReport()
    for name, err in check_op_gradients(seeds, h):
        report.add(name, err, tol)

    for seed in seeds:
        err = check_pair_loss_gradient(seed, h=h)
        report.add(f"pair_loss_pipeline/seed{seed}", err, tol)

    max_diff, hw_per_view, hw_counts = check_accumulation()
    report.add_line(
        f"{'PASS' if max_diff <= 1e-6 else 'FAIL'}  per-view accumulation vs joint backward"
        f"      max_coord_diff={max_diff:.3e} (tol 1e-6)",
        ok=max_diff <= 1e-6)
    hw_ok = len(set(hw_per_view.values())) == 1
    report.add_line(
        f"{'PASS' if hw_ok else 'FAIL'}  tape high-water vs view count            "
        + " ".join(f"{k}v={v}" for k, v in sorted(hw_per_view.items()))
        + f" joint={hw_counts}",
        ok=hw_ok)
    return report
