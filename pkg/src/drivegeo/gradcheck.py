"""Finite-difference verification of the reverse-mode gradients.

Two layers: per-primitive vector-Jacobian checks (used by the property
suite) and a whole-model check that compares analytic training-loss
gradients against 64-bit central differences, probing a subsample of
coordinates per parameter tensor plus one random direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T

DEFAULT_STEP = 1e-5
# Relative error denominator is floored so FD roundoff on near-zero
# derivatives does not register as failure.
REL_FLOOR = 1e-3


def rel_err(a: float, b: float, floor: float = REL_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def vjp_vs_fd(
    fn: Callable[..., T.Tensor],
    arrays: Sequence[np.ndarray],
    rng: np.random.Generator,
    h: float = DEFAULT_STEP,
) -> float:
    """Max relative error between v.(J u) from backward and central FD.

    ``fn`` maps float64 Tensors to one Tensor. A random cotangent v and
    tangents u_i probe the full Jacobian: analytic side contracts the
    backward pass with u, the FD side differentiates f(x + s*h*u).v.
    """
    leaves = [T.tensor(a, dtype="f64", requires_grad=True) for a in arrays]
    out = fn(*leaves)
    v = rng.standard_normal(out.shape)
    s = T.tsum(T.mul(out, T.tensor(v, dtype="f64")))
    T.backward(s)
    tangents = [rng.standard_normal(a.shape) for a in arrays]
    analytic = sum(
        float(np.vdot(leaf.grad, u)) for leaf, u in zip(leaves, tangents) if leaf.grad is not None
    )

    def eval_at(sign: float) -> float:
        with T.no_grad():
            shifted = [
                T.tensor(a + sign * h * u, dtype="f64") for a, u in zip(arrays, tangents)
            ]
            return float(np.vdot(fn(*shifted).data, v))

    fd = (eval_at(+1.0) - eval_at(-1.0)) / (2.0 * h)
    return rel_err(analytic, fd)


@dataclass
class GradCheckReport:
    per_param: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def check_param_gradients(
    params: dict[str, T.Tensor],
    loss_fn: Callable[[], T.Tensor],
    coords_per_tensor: int = 6,
    h: float = DEFAULT_STEP,
    seed: int = 0,
    tolerance: float = 1e-4,
    corrupt: str | None = None,
) -> GradCheckReport:
    """Compare analytic loss gradients with central differences.

    Every parameter tensor is probed at ``coords_per_tensor`` random
    coordinates and along one random direction. ``corrupt`` names a
    parameter whose analytic gradient is deliberately perturbed, as a
    self-test that the check can fail.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.zero_grad()
    T.clear_tape()
    loss = loss_fn()
    T.backward(loss)
    grads = {name: p.grad.copy() for name, p in params.items()}
    if corrupt is not None:
        if corrupt not in grads:
            raise KeyError(f"no parameter named {corrupt!r}")
        grads[corrupt] = grads[corrupt] * 1.1 + 0.05

    def loss_value() -> float:
        with T.no_grad():
            return float(loss_fn().data)

    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        g = grads[name]
        flat = p.data.reshape(-1)
        n = flat.size
        idx = rng.permutation(n)[: min(coords_per_tensor, n)]
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_value()
            flat[i] = orig - h
            f_minus = loss_value()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, rel_err(float(g.reshape(-1)[i]), fd))
        # directional probe covers the coordinates the subsample missed
        u = rng.standard_normal(p.shape)
        u /= max(np.linalg.norm(u), 1e-12)
        saved = p.data.copy()
        p.data += h * u
        f_plus = loss_value()
        p.data[...] = saved - h * u
        f_minus = loss_value()
        p.data[...] = saved
        fd_dir = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, rel_err(float(np.vdot(g, u)), fd_dir))
        report.per_param[name] = worst
    return report
