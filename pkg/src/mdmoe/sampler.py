"""Reverse-process generation: vanilla and semi-autoregressive block decoding.

A predictor is any callable mapping a (rows, seq) id array to (rows, seq, V)
float64 distributions; ``MaskPredictor`` qualifies.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from .masking import NoisySeq, draw_tokens, reverse_step
from .rng import TOKEN, keyed_uniform

Predictor = Callable[[np.ndarray], np.ndarray]
StepHook = Callable[[int, int, np.ndarray], None]

POLICIES = ("greedy", "sample")
REMASKING = ("low_confidence", "none")


@dataclass
class DecodePlan:
    gen_length: int = 1024
    block_size: int = 64
    steps_per_block: int | None = None  # defaults to block_size
    policy: str = "greedy"
    temperature: float = 1.0
    remask: str = "low_confidence"
    seed: int = 0

    def __post_init__(self):
        if self.gen_length < 1 or self.block_size < 1:
            raise ValueError("gen_length and block_size must be positive")
        if self.gen_length % self.block_size:
            raise ValueError(
                f"block size {self.block_size} must divide generation length {self.gen_length}"
            )
        if self.steps_per_block is None:
            self.steps_per_block = self.block_size
        if not 1 <= self.steps_per_block <= self.block_size:
            raise ValueError(f"steps_per_block must lie in [1, {self.block_size}]")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if self.remask not in REMASKING:
            raise ValueError(f"remask must be one of {REMASKING}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def n_blocks(self) -> int:
        return self.gen_length // self.block_size

    def to_dict(self) -> dict:
        return asdict(self)


def low_confidence_remask(
    ids: np.ndarray,
    tokens: np.ndarray,
    confidence: np.ndarray,
    predicted: np.ndarray,
    n_keep,
    mask_id: int,
) -> np.ndarray:
    """Commit the ``n_keep`` most confident predictions per row; the rest stay masked.

    ``predicted`` flags the positions predicted this step (all currently
    masked). Ties go to the lower position. Positions outside ``predicted``
    are returned unchanged.
    """
    ids = np.atleast_2d(ids)
    rows, L = ids.shape
    predicted = np.atleast_2d(predicted)
    n_keep = np.broadcast_to(np.asarray(n_keep), (rows,))
    available = predicted.sum(axis=1)
    if np.any(n_keep > available) or np.any(n_keep < 0):
        raise ValueError("n_keep exceeds the number of predicted positions")
    score = np.where(predicted, np.atleast_2d(confidence), -np.inf)
    order = np.argsort(-score, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(L)[None, :].repeat(rows, 0), axis=1)
    keep = predicted & (rank < n_keep[:, None])
    return np.where(keep, np.atleast_2d(tokens), ids)


def truncate_at_eos(y, eos_id: int) -> np.ndarray:
    y = np.asarray(y)
    hits = np.flatnonzero(y == eos_id)
    return y[: hits[0]] if hits.size else y


def _suppress(dists: np.ndarray, mask_id: int) -> np.ndarray:
    # the mask token is never a valid output
    if dists.shape[-1] <= mask_id or not np.any(dists[..., mask_id] > 0):
        return dists
    d = dists.copy()
    d[..., mask_id] = 0.0
    return d / d.sum(axis=-1, keepdims=True)


def generate_semi_ar(
    prompt,
    plan: DecodePlan,
    predictor: Predictor,
    mask_id: int,
    n_samples: int = 1,
    max_context: int | None = None,
    on_step: StepHook | None = None,
) -> np.ndarray:
    """Decode ``plan.gen_length`` tokens after ``prompt`` block by block, left to right.

    Returns an (n_samples, gen_length) array, or a 1-D array when
    ``n_samples == 1``. ``on_step(block, step, context)`` is called after
    every denoising step with the full context (prompt included).
    """
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    P, L, B = prompt.size, plan.gen_length, plan.block_size
    if max_context is None:
        max_context = getattr(getattr(predictor, "cfg", None), "max_context", None)
    if max_context is not None and P + L > max_context:
        raise ValueError(f"prompt ({P}) + generation ({L}) exceeds context {max_context}")
    ctx = np.concatenate([np.tile(prompt, (n_samples, 1)), np.full((n_samples, L), mask_id)], axis=1)
    steps = plan.steps_per_block
    global_step = 0
    for b in range(plan.n_blocks):
        lo, hi = P + b * B, P + (b + 1) * B
        region = np.zeros(ctx.shape[1], dtype=bool)
        region[lo:hi] = True
        for j in range(steps):
            t = 1.0 - j / steps
            s = 1.0 - (j + 1) / steps
            dists = _suppress(np.asarray(predictor(ctx)), mask_id)
            if plan.remask == "none":
                ctx = reverse_step(
                    NoisySeq(ctx, t), max(s, 0.0), dists, mask_id, plan.seed, global_step,
                    plan.policy, plan.temperature, region,
                ).ids
            else:
                masked = (ctx == mask_id) & region
                u = keyed_uniform(plan.seed, TOKEN, global_step, ctx.shape)
                tok, conf = draw_tokens(dists, u, plan.policy, plan.temperature)
                target = math.ceil(B * (j + 1) / steps)
                done = B - masked[:, lo:hi].sum(axis=1)
                ctx = low_confidence_remask(ctx, tok, conf, masked, target - done, mask_id)
            if on_step is not None:
                on_step(b, j, ctx)
            global_step += 1
    out = ctx[:, P:]
    return out[0] if n_samples == 1 else out


def generate_vanilla(
    prompt,
    plan: DecodePlan,
    predictor: Predictor,
    mask_id: int,
    n_samples: int = 1,
    max_context: int | None = None,
    on_step: StepHook | None = None,
) -> np.ndarray:
    """Whole-sequence reverse process: a single block spanning the generation length."""
    if plan.block_size != plan.gen_length:
        plan = replace(plan, block_size=plan.gen_length)
    return generate_semi_ar(prompt, plan, predictor, mask_id, n_samples, max_context, on_step)
