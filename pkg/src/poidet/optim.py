"""AdamW with decoupled weight decay, plus an optional one-cycle LR schedule."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class OptimError(Exception):
    pass


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter table.

    The decay term ``p -= lr * wd * p`` is applied independently of the
    Adam update, and moments are bias-corrected by the step counter.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01) -> None:
        if lr <= 0:
            raise OptimError(f"lr must be > 0, got {lr}")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        # scratch buffers keep the update allocation-free
        self._buf = {k: np.empty_like(p.data) for k, p in self.params.items()}
        self._buf2 = {k: np.empty_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        """One update from the accumulated grads; `lr` overrides the stored rate.

        All gradients are validated before any parameter is touched, so a
        non-finite gradient aborts with the parameters still unchanged.
        """
        rate = self.lr if lr is None else float(lr)
        for name, p in self.params.items():
            if p.grad is None:
                raise OptimError(f"parameter '{name}' has no grad buffer")
            if not np.all(np.isfinite(p.grad)):
                raise OptimError(f"non-finite gradient in parameter '{name}'")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            buf = self._buf[name]
            buf2 = self._buf2[name]
            if self.weight_decay != 0.0:
                np.multiply(p.data, rate * self.weight_decay, out=buf)
                p.data -= buf
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=buf)
            m += buf
            v *= self.beta2
            np.multiply(g, g, out=buf)
            buf *= 1.0 - self.beta2
            v += buf
            np.divide(v, bc2, out=buf)
            np.sqrt(buf, out=buf)
            buf += self.eps
            np.divide(m, buf, out=buf2)
            buf2 *= rate / bc1
            p.data -= buf2


def one_cycle_lr(base_lr: float, step: int, total_steps: int,
                 pct_start: float = 0.3, div_factor: float = 25.0,
                 final_div: float = 1e4) -> float:
    """Cosine ramp from base/div to base over pct_start, then down to base/final."""
    if total_steps <= 1:
        return base_lr
    warm = max(1, int(round(total_steps * pct_start)))
    if step < warm:
        frac = step / warm
        lo = base_lr / div_factor
        return lo + (base_lr - lo) * 0.5 * (1.0 - math.cos(math.pi * frac))
    frac = (step - warm) / max(1, total_steps - warm)
    lo = base_lr / final_div
    return lo + (base_lr - lo) * 0.5 * (1.0 + math.cos(math.pi * frac))
