from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from normdiff.ndmath import Node


def global_grad_norm(params: Sequence[Node]) -> float:
    return float(np.sqrt(np.sum([np.sum(p.grad * p.grad) for p in params])))


def clip_grad_norm(params: Sequence[Node], max_norm: float) -> float:
    """
    Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns:
        The norm before clipping.
    """
    total = global_grad_norm(params)
    if max_norm > 0 and total > max_norm:
        coef = max_norm / (total + 1e-6)
        for p in params:
            p.grad = p.grad * coef
    return total


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(
        self,
        params: Sequence[Node],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params: List[Node] = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        beta1, beta2 = self.betas
        bias1 = 1.0 - beta1 ** self.step_count
        bias2 = 1.0 - beta2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            decayed = p.value * (1.0 - self.lr * self.weight_decay)
            p.value = decayed - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> Dict[str, Any]:
        return {
            "step_count": self.step_count,
            "m": [m.reshape(-1).tolist() for m in self.m],
            "v": [v.reshape(-1).tolist() for v in self.v],
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.step_count = int(state["step_count"])
        self.m = [np.array(m, dtype=np.float64).reshape(p.shape) for m, p in zip(state["m"], self.params)]
        self.v = [np.array(v, dtype=np.float64).reshape(p.shape) for v, p in zip(state["v"], self.params)]
