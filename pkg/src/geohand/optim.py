"""AdamW with decoupled weight decay."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params: dict[str, Tensor] = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            # decay only matrices and kernels, not biases, norms, gates or embeddings
            if self.weight_decay and p.data.ndim >= 2 and not name.endswith(("pos", "token")):
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def state(self) -> dict[str, dict[str, np.ndarray]]:
        return {"m": self.m, "v": self.v}

    def load_state(self, moments: dict[str, dict[str, np.ndarray]], step: int) -> None:
        for k in self.params:
            self.m[k] = np.asarray(moments["m"][k], dtype=np.float64).copy()
            self.v[k] = np.asarray(moments["v"][k], dtype=np.float64).copy()
        self.step_count = step
