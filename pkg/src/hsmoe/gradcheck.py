"""Finite-difference gradient verification.

Central differences (h=1e-5, f64) against tape gradients, with a relative
error floored to keep FD noise on near-zero coordinates from dominating.
The per-module suites at the bottom are what ``hsmoe gradcheck`` runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    coords_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rel_err(a: float, f: float, floor: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), floor)


def grad_check(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor],
               name: str = "check", h: float = 1e-5, tol: float = 1e-4,
               floor: float = 1e-6, coord_budget: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> CheckResult:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the forward pass from the live ``params`` data on
    every call. ``coord_budget`` caps the total number of coordinates probed
    (sampled uniformly across parameters when set).
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    T.backward(loss)
    analytic = {}
    for key, p in params.items():
        if p.grad is None:
            raise AssertionError(f"{name}: parameter {key!r} received no gradient")
        analytic[key] = p.grad.copy()
    # scale the negligibility floor with the gradient population: coordinates
    # orders of magnitude below the RMS sit at the FD noise floor, where a
    # fixed denominator would report noise as error
    all_g = np.concatenate([g.reshape(-1) for g in analytic.values()])
    floor = floor * max(1.0, float(np.sqrt(np.mean(all_g * all_g))))

    coords = []
    for key, p in params.items():
        for flat_idx in range(p.size):
            coords.append((key, flat_idx))
    if coord_budget is not None and len(coords) > coord_budget:
        if rng is None:
            rng = np.random.default_rng(0)
        picks = rng.choice(len(coords), size=coord_budget, replace=False)
        coords = [coords[i] for i in picks]

    max_err = 0.0
    for key, flat_idx in coords:
        p = params[key]
        flat = p.data.reshape(-1)
        orig = flat[flat_idx]
        flat[flat_idx] = orig + h
        up = loss_fn().item()
        flat[flat_idx] = orig - h
        down = loss_fn().item()
        flat[flat_idx] = orig
        fd = (up - down) / (2.0 * h)
        err = _rel_err(analytic[key].reshape(-1)[flat_idx], fd, floor)
        max_err = max(max_err, err)
    return CheckResult(name, max_err, len(coords), tol)


def weighted_sum_loss(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar loss sum(w * out) with fixed random weights; avoids symmetric
    cancellations that would leave true-zero gradient coordinates."""
    w = T.rng(seed).uniform(0.5, 1.5, size=out.shape)
    return T.reduce_sum(T.mul(out, Tensor(w)))


def gradient_flow(named_params: Sequence, loss: Tensor) -> Dict[str, float]:
    """Run backward and report max|grad| per named parameter (None -> 0)."""
    for _, p in named_params:
        p.grad = None
    T.backward(loss)
    return {name: (0.0 if p.grad is None else float(np.max(np.abs(p.grad))))
            for name, p in named_params}


# ---------------------------------------------------------------------------
# per-module suites (built lazily to avoid import cycles)


def run_suites(names: Optional[Sequence[str]] = None) -> list:
    """Run the finite-difference suite for each module; returns CheckResults."""
    from .suites import MODULE_SUITES

    selected = MODULE_SUITES if names is None else {k: MODULE_SUITES[k] for k in names}
    results = []
    for mod_name, suite_fn in selected.items():
        results.extend(suite_fn())
    return results
