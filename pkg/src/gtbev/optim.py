"""Adam with decoupled weight decay, plus non-finite step rejection.

The update for each parameter p with gradient g at step t:

    m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
    mhat = m / (1-b1^t)           vhat = v / (1-b2^t)
    p <- p*(1 - lr*wd) - lr * mhat / (sqrt(vhat) + eps)

Weight decay multiplies the parameter directly instead of being added to the
gradient, so decay strength does not get rescaled by the adaptive term.  If
any gradient entry is NaN or inf the whole step is rejected: parameters and
moment state stay untouched and ``skipped_steps`` is incremented.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import ShapeError, Tensor

__all__ = ["AdamW"]


class AdamW:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self._m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.step_count = 0
        self.skipped_steps = 0

    def step(self, grads: Mapping[Tensor, np.ndarray], lr: float | None = None) -> bool:
        """Apply one update; returns False if rejected for non-finite grads.

        ``grads`` maps parameter tensors (by identity) to gradient arrays, as
        produced by ``Graph.backward``.  Parameters absent from the mapping
        are treated as having zero gradient; they still decay.
        """
        lr = self.lr if lr is None else float(lr)
        resolved: dict[str, np.ndarray | None] = {}
        for name, p in self.params.items():
            g = grads.get(p)
            if g is not None and g.shape != p.data.shape:
                raise ShapeError(
                    f"step: gradient shape {g.shape} does not match parameter "
                    f"{name!r} of shape {p.data.shape}")
            resolved[name] = g
        for g in resolved.values():
            if g is not None and not np.isfinite(g).all():
                self.skipped_steps += 1
                return False

        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        decay = 1.0 - lr * self.weight_decay
        for name, p in self.params.items():
            g = resolved[name]
            m, v = self._m[name], self._v[name]
            m *= self.beta1
            v *= self.beta2
            if g is not None:
                m += (1.0 - self.beta1) * g
                v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data *= decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return True
