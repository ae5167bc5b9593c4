"""AdamW with decoupled weight decay."""

import numpy as np

from .errors import StateError


class AdamW:
    """``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``.

    Moment buffers exist only for the params handed in at construction, all of
    which must be trainable.
    """

    def __init__(self, params, lr=3e-4, weight_decay=0.1, betas=(0.9, 0.999), eps=1e-8):
        params = list(params)
        frozen = [p.name for p in params if not p.trainable]
        if frozen:
            raise StateError(f"cannot optimize frozen params: {frozen}")
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    @property
    def registered_count(self):
        return int(sum(p.value.size for p in self.params))

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        missing = [p.name for p in self.params if p.grad is None]
        if missing:
            raise StateError(f"no gradient for {missing}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / c1
            v_hat = v / c2
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.value
            p.value = (p.value - self.lr * update).astype(p.value.dtype, copy=False)
