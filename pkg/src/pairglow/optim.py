"""Adam with bias correction.

Parameters that received no gradient (nothing on the tape touched
them) are treated as having a zero gradient: moments decay but the
bias-corrected update is exactly zero only while both moments are
zero, matching the standard algorithm.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .tensor import Parameter


class AdamState:
    """First/second moment accumulators for one parameter set."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise UsageError("learning rate must be positive")
        self.params: list[Parameter] = list(params)
        self.lr = lr
        self.state = AdamState(self.params, beta1, beta2, eps)

    def step(self, grads: dict[int, np.ndarray]):
        """Apply one update given a node_id -> gradient map."""
        s = self.state
        s.t += 1
        b1, b2 = s.beta1, s.beta2
        bc1 = 1.0 - b1 ** s.t
        bc2 = 1.0 - b2 ** s.t
        for i, p in enumerate(self.params):
            g = grads.get(p.node_id)
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise UsageError(
                    f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            s.m[i] = b1 * s.m[i] + (1.0 - b1) * g
            s.v[i] = b2 * s.v[i] + (1.0 - b2) * (g * g)
            m_hat = s.m[i] / bc1
            v_hat = s.v[i] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + s.eps)
