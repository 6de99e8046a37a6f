"""Whole-model gradient check and route-stat report formatting."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .masking import forward_mask
from .model import MaskPredictor, ModelConfig
from .objectives import diffusion_objective

GRAD_TOL = 1e-5

TINY = dict(n_layers=2, d_model=32, n_heads=2, n_experts=8, n_active=2, d_expert=16,
            max_context=16, vocab=12, mask_id=11, eos_id=10, init_std=0.3)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY, **overrides})


def model_grad_check(cfg: ModelConfig, seed: int = 0, batch: int = 2, length: int = 6,
                     max_coords: int | None = 6) -> float:
    """Worst relative error of the full training loss (task + router aux) in float64."""
    model = MaskPredictor(cfg, seed=seed).astype(np.float64)
    rng = np.random.default_rng(seed)
    content = [i for i in range(cfg.vocab) if i != cfg.mask_id]
    clean = rng.choice(content, size=(batch, length))
    t = rng.uniform(0.3, 1.0, size=batch)
    noisy = forward_mask(clean, t, rng, cfg.mask_id).ids
    noisy[:, 0] = cfg.mask_id  # at least one masked position per row
    routing = []

    def loss():
        total, _, decisions = diffusion_objective(model, clean, noisy, t)
        routing[:] = [d.indices.tobytes() for d in decisions]
        return total

    with T.precision(np.float64):
        return T.grad_check(
            loss,
            list(model.params.values()),
            max_coords=max_coords,
            rng=np.random.default_rng(seed + 1),
            piece=lambda: tuple(routing),
        )


def route_table(stats: list[dict]) -> str:
    """Plain-text per-layer table of f_i and P_i with the max/mean ratio."""
    lines = []
    for s in stats:
        lines.append(f"layer {s['layer']}  max_f={s['max_f']:.4f}  max/mean={s['max_over_mean']:.3f}  "
                     f"sum_f={sum(s['f']):.4f}  sum_P={sum(s['P']):.4f}")
        lines.append("  expert      f_i      P_i")
        for i, (f, p) in enumerate(zip(s["f"], s["P"])):
            lines.append(f"  {i:6d}  {f:7.4f}  {p:7.4f}")
    return "\n".join(lines)


def write_route_columns(stats: list[dict], path) -> Path:
    """Whitespace-separated columns: layer expert f P."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = ["# layer expert f P"]
    for s in stats:
        for i, (f, p) in enumerate(zip(s["f"], s["P"])):
            rows.append(f"{s['layer']} {i} {f:.8f} {p:.8f}")
    path.write_text("\n".join(rows) + "\n")
    return path
