"""AdamW with global-norm clipping, and the warmup + decay learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at(step: int, total_steps: int, peak: float, warmup_frac: float = 0.05, floor_frac: float = 0.1, decay: str = "cosine") -> float:
    """Linear warmup to ``peak``, then decay to ``floor_frac * peak`` at ``total_steps``."""
    total_steps = max(total_steps, 1)
    warmup = int(round(warmup_frac * total_steps))
    if warmup and step < warmup:
        return peak * (step + 1) / warmup
    floor = floor_frac * peak
    if decay == "constant":
        return peak
    progress = min(1.0, (step - warmup) / max(1, total_steps - warmup))
    if decay == "cosine":
        return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
    if decay == "linear":
        return peak + (floor - peak) * progress
    raise ValueError(f"unknown lr decay {decay!r}")


def clip_grads(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; return the original norm."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient norm")
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    clip: float | None = 1.0,
) -> float:
    """One in-place AdamW update. Decay applies only to matrices. Returns the pre-clip grad norm."""
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
    norm = clip_grads(grads, clip)
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and p.ndim >= 2:
            p -= (lr * weight_decay) * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return norm
