"""Adam and global-norm gradient clipping over named float64 arrays."""

from __future__ import annotations

import numpy as np


def global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns the clipped gradients and the norm measured before clipping.
    """
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
        # rounding can leave the result a hair above max_norm
        while global_norm(grads) > max_norm:
            scale = np.nextafter(scale, 0.0)
            grads = [g * scale for g in grads]
    return grads, norm


class Adam:
    def __init__(self, names, shapes, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros(s) for n, s in zip(names, shapes)}
        self.v = {n: np.zeros(s) for n, s in zip(names, shapes)}

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        """In-place update of ``params[name].data`` from ``grads[name]``."""
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if lr == 0.0:
                continue
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name].data -= update
