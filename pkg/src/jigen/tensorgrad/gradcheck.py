"""Finite-difference verification of backward rules."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .ops import record_kinks
from .tensor import Parameter, Tensor, backward, precision


@dataclass
class GradCheckReport:
    passed: bool
    checked: int
    max_rel_error: float
    tolerance: float
    # (param name, flat index, analytic, numeric, relative error)
    failures: List[tuple] = field(default_factory=list)
    # (param name, flat index) skipped because a relu/maxpool branch flipped
    kinks: List[tuple] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} checked={self.checked} skipped_kinks={len(self.kinks)} "
            f"max_rel_error={self.max_rel_error:.3e} tol={self.tolerance:g}"
        )


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    build: Callable[[], Tensor],
    params: Sequence[Parameter],
    tolerance: float = 1e-4,
    step: float = 1e-3,
    max_coords: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backward() against central differences in float64.

    ``build`` must rebuild the loss from the current parameter values on every
    call. Relative error is ``|a - n| / max(|a|, |n|, floor)``. A coordinate is
    skipped (and listed in ``kinks``) when either perturbed evaluation selects a
    different relu or maxpool branch than the unperturbed one. ``max_coords``
    caps how many coordinates per parameter are sampled (all when None).
    Parameter values are restored bit-exactly afterwards.
    """
    rng = np.random.default_rng(seed)
    originals = [p.data for p in params]
    saved_grads = [p.grad for p in params]
    failures, kinks = [], []
    checked = 0
    worst = 0.0
    try:
        with precision(np.float64):
            for p in params:
                p.data = p.data.astype(np.float64)
                p.grad = np.zeros_like(p.data)
            with record_kinks() as base_branches:
                loss = build()
            base_branches = list(base_branches)
            backward(loss)
            analytic = [p.grad.copy() for p in params]

            def evaluate():
                with record_kinks() as branches:
                    value = build().item()
                return value, list(branches)

            for p, grad in zip(params, analytic):
                flat = p.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
                for idx in coords:
                    orig = flat[idx]
                    flat[idx] = orig + step
                    up, up_br = evaluate()
                    flat[idx] = orig - step
                    down, down_br = evaluate()
                    flat[idx] = orig
                    if not (_same_branches(up_br, base_branches) and _same_branches(down_br, base_branches)):
                        kinks.append((p.name, int(idx)))
                        continue
                    numeric = (up - down) / (2 * step)
                    a = float(grad.reshape(-1)[idx])
                    rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                    checked += 1
                    worst = max(worst, rel)
                    if rel > tolerance:
                        failures.append((p.name, int(idx), a, numeric, rel))
    finally:
        for p, data, g in zip(params, originals, saved_grads):
            p.data = data
            p.grad = g
    return GradCheckReport(not failures and checked > 0, checked, worst, tolerance, failures, kinks)
