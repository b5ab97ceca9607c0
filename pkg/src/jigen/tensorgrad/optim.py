"""Plain SGD with optional momentum."""
from __future__ import annotations

from typing import Dict, Iterable, Optional

import numpy as np

from .tensor import Parameter


def sgd_step(
    params: Iterable[Parameter],
    lr: float,
    momentum: float = 0.0,
    velocity: Optional[Dict[str, np.ndarray]] = None,
) -> Dict[str, np.ndarray]:
    """One update ``v <- momentum*v + g; theta <- theta - lr*v``, then zero the grads.

    ``velocity`` maps parameter names to momentum buffers and is updated in place
    (a new dict is created when omitted). Returns the velocity dict.
    """
    if velocity is None:
        velocity = {}
    for p in params:
        dtype = p.data.dtype.type
        g = p.grad
        if momentum:
            v = velocity.get(p.name)
            v = g.copy() if v is None else dtype(momentum) * v + g
            velocity[p.name] = v
        else:
            v = g
        p.data = p.data - dtype(lr) * v
        p.zero_grad()
    return velocity


class SGD:
    def __init__(self, params, momentum: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        sgd_step(self.params, lr, self.momentum, self.velocity)
