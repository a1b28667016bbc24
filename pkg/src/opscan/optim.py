"""Optimizers over named Parameters.

Weight decay is decoupled everywhere: the shrinkage term lr * wd * w is
applied beside the gradient step, never folded into the gradient. Frozen
parameters are skipped entirely, values and state both.

Per-parameter learning rates come from Parameter.layer_group: step() takes
either one lr or a sequence indexed by group.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Parameter


class NumericalError(RuntimeError):
    pass


def _check_finite(p: Parameter) -> np.ndarray:
    g = p.grad
    if g is None:
        return None
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"non-finite gradient in parameter {p.name!r}")
    return g


def _resolve_lr(lr, group: int) -> float:
    if np.ndim(lr) == 0:
        return float(lr)
    return float(lr[group])


class Adam:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.99),
        eps: float = 1e-7,
        weight_decay: float = 0.0,
    ):
        names = [p.name for p in params]
        if len(names) != len(set(names)):
            raise ValueError("parameter names must be unique")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}

    def step(self, lr=None, beta1: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1 = self.betas[0] if beta1 is None else beta1
        b2 = self.betas[1]
        for p in self.params:
            if p.frozen:
                continue
            g = _check_finite(p)
            if g is None:
                continue
            st = self.state.setdefault(
                p.name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            )
            st["t"] += 1
            t = st["t"]
            st["m"] = b1 * st["m"] + (1.0 - b1) * g
            st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
            m_hat = st["m"] / (1.0 - b1**t)
            v_hat = st["v"] / (1.0 - b2**t)
            step_lr = _resolve_lr(lr, p.layer_group)
            p.data -= step_lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                p.data -= step_lr * self.weight_decay * p.data

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class SGD:
    """Plain gradient descent with decoupled weight decay."""

    def __init__(self, params: Sequence[Parameter], lr: float = 0.1, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, lr=None, beta1=None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.frozen:
                continue
            g = _check_finite(p)
            if g is None:
                continue
            step_lr = _resolve_lr(lr, p.layer_group)
            p.data -= step_lr * g
            if self.weight_decay:
                p.data -= step_lr * self.weight_decay * p.data

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class ASGD(SGD):
    """SGD that can switch to trailing parameter averaging (NT-ASGD style).

    The trainer calls start_averaging() once validation loss stops
    improving; from then on every step folds the current weights into a
    running average, and swap_in_average() installs it.
    """

    def __init__(self, params, lr=0.1, weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        self._avg: dict[str, np.ndarray] | None = None
        self._avg_count = 0

    @property
    def averaging(self) -> bool:
        return self._avg is not None

    def start_averaging(self) -> None:
        if self._avg is None:
            self._avg = {p.name: p.data.copy() for p in self.params}
            self._avg_count = 1

    def step(self, lr=None, beta1=None) -> None:
        super().step(lr, beta1)
        if self._avg is not None:
            self._avg_count += 1
            for p in self.params:
                avg = self._avg[p.name]
                avg += (p.data - avg) / self._avg_count

    def swap_in_average(self) -> None:
        if self._avg is None:
            return
        for p in self.params:
            p.data = self._avg[p.name].copy()
