"""Forward corruption and reverse unmasking kernels for absorbing-state diffusion.

Sequences are integer arrays whose last axis is the position; leading axes are
treated as independent rows. ``mask_id`` marks an unknown position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import COIN, TOKEN, keyed_uniform


@dataclass
class NoisySeq:
    ids: np.ndarray
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"noise level {self.t} outside [0, 1]")

    def masked(self, mask_id: int) -> np.ndarray:
        return self.ids == mask_id


def sample_noise_level(rng: np.random.Generator, size=None, floor: float = 0.0):
    """Uniform noise level on [floor, 1]; ``floor=0`` gives the plain U[0, 1] draw."""
    u = rng.random(size)
    return floor + (1.0 - floor) * u


def forward_mask(y, t, rng: np.random.Generator, mask_id: int) -> NoisySeq:
    """Replace each position by ``mask_id`` independently with probability ``t``.

    ``t`` may be a scalar or one value per row (shape ``y.shape[:-1]``); the
    returned NoisySeq carries ``t`` only for the scalar case.
    """
    y = np.asarray(y)
    if np.any(y == mask_id):
        raise ValueError("clean sequence already contains the mask token")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise ValueError("noise level outside [0, 1]")
    if t_arr.ndim:
        t_arr = t_arr[..., None]
    hit = rng.random(y.shape) < t_arr
    ids = np.where(hit, mask_id, y)
    return NoisySeq(ids, float(t) if np.ndim(t) == 0 else 1.0)


def draw_tokens(
    dists: np.ndarray,
    u: np.ndarray,
    policy: str = "sample",
    temperature: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Pick a token per position and return ``(tokens, confidence)``.

    Confidence is the probability the (untempered) distribution assigns to the
    chosen token.
    """
    if policy == "greedy":
        tok = dists.argmax(axis=-1)
    elif policy == "sample":
        p = dists
        if temperature != 1.0:
            if temperature <= 0:
                raise ValueError("temperature must be positive")
            p = np.power(np.maximum(dists, 0.0), 1.0 / temperature)
            p = p / p.sum(axis=-1, keepdims=True)
        cdf = np.cumsum(p, axis=-1)
        tok = (cdf < (u * cdf[..., -1])[..., None]).sum(axis=-1)
        tok = np.minimum(tok, dists.shape[-1] - 1)
    else:
        raise ValueError(f"unknown token policy {policy!r}")
    conf = np.take_along_axis(dists, tok[..., None], axis=-1)[..., 0]
    return tok, conf


def check_normalized(dists: np.ndarray, tol: float = 1e-6) -> None:
    sums = dists.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol) or np.any(dists < 0):
        raise ValueError("predictor distributions are not normalised")


def reverse_step(
    y_t: NoisySeq,
    s: float,
    dists: np.ndarray,
    mask_id: int,
    seed: int = 0,
    step: int = 0,
    policy: str = "sample",
    temperature: float = 1.0,
    region: np.ndarray | None = None,
) -> NoisySeq:
    """One reverse transition from noise level ``y_t.t`` down to ``s``.

    Unmasked positions are copied. Each masked position stays masked with
    probability s/t and otherwise receives a token from its distribution.
    ``region`` (boolean, broadcastable to ids) restricts which masked positions
    are eligible; positions outside it are left untouched.
    The coin and the token draw come from separate keyed streams.
    """
    t = y_t.t
    if not s < t:
        raise ValueError(f"reverse step needs s < t, got s={s}, t={t}")
    if s < 0:
        raise ValueError("s must be non-negative")
    ids = y_t.ids
    if dists.shape[:-1] != ids.shape:
        raise ValueError(f"distribution shape {dists.shape} does not match ids {ids.shape}")
    check_normalized(dists)
    masked = ids == mask_id
    if region is not None:
        masked = masked & region
    coin = keyed_uniform(seed, COIN, step, ids.shape)
    reveal = masked & (coin < (t - s) / t)
    tok, _ = draw_tokens(dists, keyed_uniform(seed, TOKEN, step, ids.shape), policy, temperature)
    return NoisySeq(np.where(reveal, tok, ids), s)
