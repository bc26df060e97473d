from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter


class MissingGradientError(RuntimeError):
    pass


@dataclass
class AdamWState:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay, "betas": list(self.betas),
                "eps": self.eps, "step": self.step}


class AdamW:
    """Adam with decoupled weight decay (decay applied to the weights, not the gradient)."""

    def __init__(self, params: dict[str, Parameter], lr: float = 1e-4, weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamWState(lr=lr, weight_decay=weight_decay, betas=tuple(betas), eps=eps)
        for name, p in self.params.items():
            self.state.exp_avg[name] = np.zeros_like(p.data)
            self.state.exp_avg_sq[name] = np.zeros_like(p.data)

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradientError(f"parameter {name!r} has no gradient")
        st = self.state
        st.step += 1
        b1, b2 = st.betas
        bc1 = 1.0 - b1**st.step
        bc2 = 1.0 - b2**st.step
        for name, p in self.params.items():
            g = p.grad
            m = st.exp_avg[name]
            v = st.exp_avg_sq[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - st.lr * st.weight_decay
            p.data -= st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def max_abs_grad(self) -> float:
        vals = [float(np.max(np.abs(p.grad))) for p in self.params.values() if p.grad is not None and p.grad.size]
        return max(vals, default=0.0)
