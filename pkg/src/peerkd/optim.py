"""Momentum SGD, Adam, and the piecewise-constant learning-rate schedule.

The two training phases own disjoint optimizer instances even where their
parameter sets overlap, so momentum and moment estimates never leak across
phases. Parameter updates assign fresh arrays instead of writing in place,
which keeps gradients recorded before a step valid afterwards.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def lr_at(epoch: int, base_lr: float, milestones, factor: float) -> float:
    """base_lr * factor^(number of milestones <= epoch); milestones ascending."""
    return base_lr * factor ** sum(1 for m in milestones if m <= epoch)


class SGDMomentum:
    def __init__(self, params: dict[str, Tensor], lr: float,
                 momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            p.data = p.data - self.lr * v

    def state_arrays(self):
        return {f"{name}/velocity": v for name, v in self.velocity.items()}

    def load_state_arrays(self, arrays):
        for name in self.velocity:
            self.velocity[name] = arrays[f"{name}/velocity"].copy()


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.1):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.t = {name: 0 for name in self.params}

    def zero_grad(self, names=None):
        for name in (self.params if names is None else names):
            self.params[name].grad = None

    def step(self, names=None):
        """Update the named parameters (all by default); skips absent grads.

        Step counts are per parameter, so updating the discriminator and the
        extractor at different points in a batch keeps each bias correction
        consistent with how often that parameter actually moved.
        """
        for name in (self.params if names is None else names):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            self.t[name] += 1
            t = self.t[name]
            m = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        out = {}
        for name in self.params:
            out[f"{name}/m"] = self.m[name]
            out[f"{name}/v"] = self.v[name]
            out[f"{name}/t"] = np.asarray([float(self.t[name])], dtype=np.float32)
        return out

    def load_state_arrays(self, arrays):
        for name in self.params:
            self.m[name] = arrays[f"{name}/m"].copy()
            self.v[name] = arrays[f"{name}/v"].copy()
            self.t[name] = int(arrays[f"{name}/t"][0])
