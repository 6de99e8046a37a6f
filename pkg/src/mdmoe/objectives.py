"""Diffusion objectives (pretraining and SFT) and router auxiliary losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import MaskPredictor, RouterDecision
from .tensor import Tensor

LB_WEIGHT = 0.01
Z_WEIGHT = 0.001


@dataclass
class LossBreakdown:
    task_loss: float
    lb_loss: float
    z_loss: float
    total: float
    masked_count: int


def _nll_at(dists: np.ndarray, targets: np.ndarray) -> np.ndarray:
    p = np.take_along_axis(dists, targets[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        return -np.log(p)


def pretrain_loss(y, t: float, y_t, dists: np.ndarray, mask_id: int) -> float:
    """Single-sample estimate (1/t) * sum over masked i of -log p(y_i | y_t)."""
    y = np.asarray(y)
    ids = y_t.ids if hasattr(y_t, "ids") else np.asarray(y_t)
    masked = ids == mask_id
    n = int(masked.sum())
    if n == 0:
        return 0.0
    if t <= 0:
        raise ValueError("t = 0 is inconsistent with masked positions")
    return float(_nll_at(dists[masked], y[masked]).sum() / t)


def sft_loss(x, y, t: float, y_t, dists: np.ndarray, mask_id: int) -> float:
    """Response-only diffusion loss; the prompt ``x`` must be clean.

    ``y_t`` and ``dists`` cover the full sequence [prompt, response]; ``y``
    is the clean response including its EOS padding.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    ids = y_t.ids if hasattr(y_t, "ids") else np.asarray(y_t)
    if ids.shape[-1] != x.size + y.size:
        raise ValueError("noisy sequence must cover prompt and response")
    if np.any(ids[: x.size] == mask_id):
        raise ValueError("prompt positions must not be masked")
    return pretrain_loss(y, t, ids[x.size:], dists[x.size:], mask_id)


def load_balance_loss(decision: RouterDecision | tuple, n_experts: int | None = None):
    """N * sum_i f_i P_i; returns a Tensor when P carries gradients."""
    if isinstance(decision, RouterDecision):
        f, P = decision.f, decision.P
        if decision.n_tokens == 0:
            raise ValueError("load-balance loss over an empty batch")
    else:
        f, P = decision
    N = n_experts if n_experts is not None else len(f)
    if isinstance(P, Tensor):
        return T.sum_(T.mul(P, np.asarray(f, dtype=P.dtype))) * float(N)
    return float(N * np.dot(np.asarray(f, dtype=np.float64), np.asarray(P, dtype=np.float64)))


def z_loss(logits):
    """Mean over tokens of (logsumexp of router logits)^2."""
    if isinstance(logits, Tensor):
        if logits.shape[0] == 0:
            raise ValueError("z-loss over zero tokens")
        return T.mean(T.square(T.logsumexp(logits, axis=-1)))
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if z.shape[0] == 0:
        raise ValueError("z-loss over zero tokens")
    m = z.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[:, 0]
    return float(np.mean(lse * lse))


def combine(task, lb, z, lb_weight: float = LB_WEIGHT, z_weight: float = Z_WEIGHT):
    return task + lb * lb_weight + z * z_weight


def aux_losses(decisions: list[RouterDecision]) -> tuple:
    """Per-layer load-balance and z losses, averaged over layers."""
    if not decisions:
        return 0.0, 0.0
    lb = [load_balance_loss(d) for d in decisions]
    zs = [z_loss(d.logits) for d in decisions]
    n = len(decisions)
    return sum(lb[1:], lb[0]) * (1.0 / n), sum(zs[1:], zs[0]) * (1.0 / n)


def diffusion_objective(
    model: MaskPredictor,
    clean: np.ndarray,
    noisy: np.ndarray,
    t: np.ndarray,
    loss_region: np.ndarray | None = None,
    lb_weight: float = LB_WEIGHT,
    z_weight: float = Z_WEIGHT,
) -> tuple[Tensor, LossBreakdown, list[RouterDecision]]:
    """Batched training loss for the mask predictor.

    Each row contributes (1/t) * sum of masked NLL divided by the number of
    loss-eligible positions in that row (the whole row, or ``loss_region``),
    and rows are averaged. Router auxiliary losses are averaged over layers
    and added with the given weights.
    """
    clean = np.atleast_2d(clean)
    noisy = np.atleast_2d(noisy)
    B, L = clean.shape
    mask_id = model.cfg.mask_id
    region = np.ones_like(clean, dtype=bool) if loss_region is None else np.atleast_2d(loss_region)
    masked = (noisy == mask_id) & region
    if np.any((noisy == mask_id) & ~region):
        raise ValueError("masked position outside the loss region")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    h, decisions = model.hidden(noisy)
    rows, cols = np.nonzero(masked)
    n_masked = rows.size
    if n_masked:
        if np.any(t[rows] <= 0):
            raise ValueError("t = 0 with masked positions")
        per_row = region.sum(axis=1).astype(np.float64)
        w = 1.0 / (t[rows] * per_row[rows] * B)
        hm = T.take_rows(h.reshape(-1, h.shape[-1]), rows * L + cols, unique=True)
        task = T.cross_entropy(hm @ model.params["lm_head"], clean[rows, cols], w)
    else:
        task = T.Tensor(np.zeros((), dtype=h.dtype))
    lb, z = aux_losses(decisions)
    total = combine(task, lb, z, lb_weight, z_weight) if (lb_weight or z_weight) else task
    as_float = lambda v: v.item() if isinstance(v, Tensor) else float(v)
    br = LossBreakdown(as_float(task), as_float(lb), as_float(z), as_float(total), n_masked)
    return total, br, decisions
