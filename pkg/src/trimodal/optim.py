"""SGD with Nesterov momentum and the per-epoch exponential schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class OptimizerState:
    """Velocity buffers plus hyper-parameters for :func:`sgd_nesterov_step`.

    ``velocities`` is keyed by parameter name, one array per registered
    parameter with the parameter's shape.
    """

    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocities: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, **hyper) -> "OptimizerState":
        state = cls(**hyper)
        for name, p in params.items():
            state.velocities[name] = np.zeros_like(p.values)
        return state


def sgd_nesterov_step(params: dict, state: OptimizerState, grads: dict | None = None):
    """Apply one in-place update to every parameter in ``params``.

    With ``g`` the gradient, ``p`` the parameter, ``v`` its velocity::

        g <- g + weight_decay * p
        v <- momentum * v + g
        p <- p - lr * (g + momentum * v)

    ``grads`` defaults to each tensor's ``.grad``.
    """
    mu, wd, lr = state.momentum, state.weight_decay, state.lr
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            raise ContractError(f"no gradient for parameter {name!r}")
        v = state.velocities.get(name)
        if v is None or v.shape != p.values.shape:
            raise DimensionError(f"velocity for {name!r} missing or shape-mismatched")
        g = g + wd * p.values
        v *= mu
        v += g
        p.values -= lr * (g + mu * v)
    return params, state


def lr_at_epoch(eta0: float, gamma: float, epoch: int) -> float:
    """Learning rate ``eta0 * gamma**epoch`` used throughout ``epoch``."""
    return eta0 * gamma ** epoch


class NesterovSGD:
    """Thin stateful wrapper binding named parameters to an OptimizerState."""

    def __init__(self, params: dict[str, Tensor], lr=1e-4, momentum=0.9, weight_decay=5e-4):
        self.params = dict(params)
        self.state = OptimizerState.for_params(
            self.params, lr=lr, momentum=momentum, weight_decay=weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        sgd_nesterov_step(self.params, self.state)

    def set_lr(self, lr: float):
        self.state.lr = float(lr)
