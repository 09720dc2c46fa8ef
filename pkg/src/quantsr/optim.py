"""Optimizer, learning-rate schedule and parameter post-processing."""

from __future__ import annotations

import logging
import math
from typing import Mapping

import numpy as np

from .errors import InvalidArgument

logger = logging.getLogger(__name__)


class Adam:
    """Bias-corrected Adam over a name -> array mapping, updated in place.

    A step whose gradients contain non-finite values is skipped and counted in
    :attr:`skipped`.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.skipped = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> bool:
        if not all(np.all(np.isfinite(grads[k])) for k in params):
            self.skipped += 1
            logger.warning("skipping optimizer step with non-finite gradients (%d so far)", self.skipped)
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads[name].astype(p.dtype, copy=False)
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
        return True

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state(self, t: int, skipped: int, arrays: Mapping[str, np.ndarray]) -> None:
        self.t = t
        self.skipped = skipped
        self.m = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("v.")}


def lr_schedule(step: int, lr0: float, iterations: int, warmup_steps: int = 0, lr_min: float = 0.0) -> float:
    """Linear warmup from 0 to ``lr0`` then cosine decay to ``lr_min`` at ``iterations``."""
    if warmup_steps > 0 and step < warmup_steps:
        return lr0 * step / warmup_steps
    span = iterations - warmup_steps
    if span <= 0:
        return lr_min
    t = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t))


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    if max_norm <= 0:
        raise InvalidArgument(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


def clip_weights(params: Mapping[str, np.ndarray], lo: float, hi: float) -> None:
    if not lo < hi:
        raise InvalidArgument(f"weight clip needs lo < hi, got ({lo}, {hi})")
    for p in params.values():
        np.clip(p, lo, hi, out=p)


def ema_update(shadow: dict[str, np.ndarray], params: Mapping[str, np.ndarray], decay: float) -> None:
    """``shadow <- decay * shadow + (1 - decay) * params`` (decay 0 copies)."""
    if not 0 <= decay < 1:
        raise InvalidArgument(f"EMA decay must be in [0, 1), got {decay}")
    for name, p in params.items():
        s = shadow.get(name)
        if s is None or s.shape != p.shape:
            shadow[name] = p.copy()
            continue
        s *= decay
        s += (1 - decay) * p
