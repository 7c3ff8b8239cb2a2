"""Named parameter storage and the Adam update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParameterStore:
    """Ordered map of parameter name -> :class:`Param`.

    Insertion order is the canonical order for serialization and seeding.
    """

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        value = np.ascontiguousarray(value)
        p = Param(value, np.zeros_like(value), np.zeros_like(value), np.zeros_like(value))
        self._params[name] = p
        return p

    def restore(self, name: str, param: Param) -> None:
        """Insert a fully populated entry (used when loading checkpoints)."""
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        self._params[name] = param

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def value(self, name: str) -> np.ndarray:
        return self._params[name].value

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        p = self._params[name]
        if grad.shape != p.value.shape:
            raise ShapeError(f"gradient for {name!r} has shape {grad.shape}, parameter has {p.value.shape}")
        p.grad += grad

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def copy(self) -> "ParameterStore":
        other = ParameterStore()
        for name, p in self._params.items():
            other._params[name] = Param(p.value.copy(), p.grad.copy(), p.m.copy(), p.v.copy(), p.step)
        return other


def adam_step(store: ParameterStore, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every parameter, then zero the gradients.

    Nothing is modified if any gradient is non-finite.
    """
    for name, p in store.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}; step aborted")
    for _, p in store.items():
        p.step += 1
        g = p.grad
        dt = p.value.dtype.type
        p.m *= dt(beta1)
        p.m += dt(1.0 - beta1) * g
        p.v *= dt(beta2)
        p.v += dt(1.0 - beta2) * (g * g)
        m_hat = p.m / dt(1.0 - beta1 ** p.step)
        v_hat = p.v / dt(1.0 - beta2 ** p.step)
        p.value -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
        g[...] = 0
