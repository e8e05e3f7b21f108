"""Adam optimizer with decoupled weight decay and global-norm clipping."""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE, Tensor


def global_grad_norm(params: list[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = DTYPE(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class Adam:
    """Adam with bias correction; weight decay is decoupled from the moments.

    Decay multiplies the parameter by (1 - lr * weight_decay) before the
    moment-based update, so it never enters m or v.
    """

    def __init__(self, params: list[Tensor], lr: float = 5e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if self.weight_decay != 0.0:
                p.data *= DTYPE(1.0 - self.lr * self.weight_decay)
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= DTYPE(self.lr) * m_hat / (np.sqrt(v_hat) + DTYPE(self.eps))

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        self.m = [np.asarray(m, dtype=DTYPE).copy() for m in state["m"]]
        self.v = [np.asarray(v, dtype=DTYPE).copy() for v in state["v"]]
