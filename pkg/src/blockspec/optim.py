"""AdamW with decoupled weight decay and global gradient-norm clipping."""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class AdamW:
    def __init__(
        self,
        params: list[Tensor],
        lr: float = 6e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        grad_clip_norm: float | None = 1.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip_norm = grad_clip_norm
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is None:
                raise ContractError("adamw_step: parameter has no grad")
            total += float((p.grad.astype(np.float64) ** 2).sum())
        return math.sqrt(total)

    def step(self):
        """One AdamW update; clips first, clears grads afterwards."""
        norm = self.grad_norm()
        scale = 1.0
        if self.grad_clip_norm is not None and norm > self.grad_clip_norm:
            scale = self.grad_clip_norm / norm
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * scale
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.dtype)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup for warmup_ratio of total steps, then cosine to zero."""
    warmup = max(1, int(round(total_steps * warmup_ratio)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    t = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, t)))
