"""AdamW, momentum SGD and cosine annealing over Tensor parameters."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from .tensor import Tensor


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    """lr(0) = base_lr, lr(total) = 0."""
    if total <= 0:
        return base_lr
    step = min(max(step, 0), total)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total))


class Optimizer:
    def __init__(self, named_params: "OrderedDict[str, Tensor]", lr: float):
        self.params = OrderedDict(named_params)
        self.lr = lr
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"steps": np.asarray([self.steps], dtype=np.int64)}

    def load_state_dict(self, state) -> None:
        self.steps = int(np.asarray(state["steps"]).reshape(-1)[0])


class AdamW(Optimizer):
    """Adam with decoupled weight decay."""

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(named_params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.steps += 1
        t = self.steps
        c1 = 1.0 - self.b1**t
        c2 = 1.0 - self.b2**t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - self.lr * upd).astype(p.dtype, copy=False)

    def state_dict(self):
        out = super().state_dict()
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state):
        super().load_state_dict(state)
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"])
            self.v[k] = np.array(state[f"v.{k}"])


class SGD(Optimizer):
    """Heavy-ball momentum SGD."""

    def __init__(self, named_params, lr=5e-3, momentum=0.9, weight_decay=0.0):
        super().__init__(named_params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.steps += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            b = self.buf[k]
            b *= self.momentum
            b += g
            p.data = (p.data - self.lr * b).astype(p.dtype, copy=False)

    def state_dict(self):
        out = super().state_dict()
        for k in self.params:
            out[f"buf.{k}"] = self.buf[k]
        return out

    def load_state_dict(self, state):
        super().load_state_dict(state)
        for k in self.params:
            self.buf[k] = np.array(state[f"buf.{k}"])
