"""
Optimizers over keyed parameter stores.

A store exposes get_param(key) / set_param(key, value); gradients arrive as a
dict keyed the same way. Parameters without a gradient are left untouched.
"""

import numpy as np

from utils.errors import EngineError


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads, max_norm):
    """
    Scale all gradients so their joint L2 norm is at most max_norm.

    Returns:
        (clipped, norm): clipped gradient dict and the norm before clipping
    """
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


class SGD:
    def __init__(self, lr, warmup_steps=0):
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.t = 0

    def current_lr(self):
        if self.warmup_steps and self.t <= self.warmup_steps:
            return self.lr * self.t / self.warmup_steps
        return self.lr

    def step(self, params, grads):
        self.t += 1
        lr = self.current_lr()
        for key, g in grads.items():
            params.set_param(key, params.get_param(key) - lr * g)
        return lr


class AdamW(SGD):
    """Adam with decoupled weight decay and per-parameter bias correction."""

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, warmup_steps=0):
        super().__init__(lr, warmup_steps)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {}

    def step(self, params, grads):
        self.t += 1
        lr = self.current_lr()
        b1, b2 = self.betas
        for key, g in grads.items():
            p = params.get_param(key)
            m, v, k = self.state.get(key, (np.zeros_like(g), np.zeros_like(g), 0))
            k += 1
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** k)
            v_hat = v / (1.0 - b2 ** k)
            params.set_param(key, p - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p))
            self.state[key] = (m, v, k)
        return lr


def make_optimizer(cfg):
    if cfg.optimizer == "adamw":
        return AdamW(cfg.lr, weight_decay=cfg.weight_decay, warmup_steps=cfg.warmup_steps)
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr, warmup_steps=cfg.warmup_steps)
    raise EngineError(f"unknown optimizer {cfg.optimizer!r}")
