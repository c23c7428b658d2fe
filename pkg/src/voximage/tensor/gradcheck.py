"""Finite-difference gradient verification.

``grad_check`` compares reverse-mode gradients against central differences,
coordinate by coordinate.  The loss function must be deterministic: it is
evaluated twice up front and any discrepancy aborts the check with a
diagnostic rather than reporting meaningless errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import GradCheckError
from .core import Tensor, backward

# Relative error floor: |fd - ad| / max(|fd|, |ad|, _DENOM_FLOOR).  The floor
# keeps finite-difference noise on near-zero gradients from dominating while
# still flagging a 1% corruption of any gradient above it.
_DENOM_FLOOR = 1e-2


@dataclass
class GradCheckReport:
    """Per-parameter worst relative errors from one grad_check run."""
    per_param: dict[str, float] = field(default_factory=dict)
    max_rel_err: float = 0.0
    worst_param: str = ""

    def ok(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def grad_check(loss_fn, params: dict[str, Tensor], h: float = 1e-5,
               max_coords_per_param: int = 0,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare autodiff gradients of loss_fn() against central differences.

    loss_fn rebuilds the graph from the current parameter values on every
    call.  If max_coords_per_param > 0, at most that many coordinates per
    parameter are probed (chosen by rng, all coordinates otherwise).
    """
    l0 = loss_fn()
    l1 = loss_fn()
    if not isinstance(l0, Tensor) or l0.data.size != 1:
        raise GradCheckError("loss_fn must return a scalar Tensor")
    if l0.item() != l1.item():
        raise GradCheckError(
            f"loss_fn is not deterministic: {l0.item()!r} vs {l1.item()!r}; "
            "fix the rng threading before checking gradients")

    for p in params.values():
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            raise GradCheckError(f"parameter '{name}' received no gradient")
        analytic[name] = p.grad.copy()

    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        if max_coords_per_param and n > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(n)
        ad_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn().item()
            flat[i] = orig - h
            f_minus = loss_fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            ad = ad_flat[i]
            rel = abs(fd - ad) / max(abs(fd), abs(ad), _DENOM_FLOOR)
            if rel > worst:
                worst = rel
        report.per_param[name] = worst
        if worst > report.max_rel_err:
            report.max_rel_err = worst
            report.worst_param = name
    return report
