"""AdamW with decoupled weight decay."""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)


class AdamW:
    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1 - b1 ** t
        bc2 = 1 - b2 ** t
        for p in self.params:
            if p.grad is None:
                log.warning("parameter %s has no grad, skipped", p.name or "<unnamed>")
                continue
            g = p.grad.astype(np.float32, copy=False)
            # decoupled decay: applied to the weights, not the gradient
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.exp_avg = b1 * p.exp_avg + (1 - b1) * g
            p.exp_avg_sq = b2 * p.exp_avg_sq + (1 - b2) * g * g
            m_hat = p.exp_avg / bc1
            v_hat = p.exp_avg_sq / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        """Moment buffers + step counter for checkpointing."""
        out = {"optim.step": np.array([self.step_count], dtype=np.float64)}
        for p in self.params:
            out[f"optim.m.{p.name}"] = p.exp_avg
            out[f"optim.v.{p.name}"] = p.exp_avg_sq
        return out

    def load_state_arrays(self, state):
        self.step_count = int(state["optim.step"][0])
        for p in self.params:
            p.exp_avg = state[f"optim.m.{p.name}"].astype(np.float32).copy()
            p.exp_avg_sq = state[f"optim.v.{p.name}"].astype(np.float32).copy()
