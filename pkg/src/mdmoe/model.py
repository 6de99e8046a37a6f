"""Bidirectional mask-predictor transformer with sparse top-k MoE feed-forward blocks."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    n_experts: int = 8
    n_active: int = 2
    d_expert: int = 64
    rope_base: float = 10_000.0
    max_context: int = 256
    vocab: int = 260
    mask_id: int = 256
    eos_id: int = 257
    norm_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        if self.n_active < 1 or self.n_active > self.n_experts:
            raise ValueError(f"n_active={self.n_active} must be in [1, n_experts={self.n_experts}]")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_head % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.mask_id == self.eos_id:
            raise ValueError("mask_id and eos_id must differ")
        for name in ("mask_id", "eos_id"):
            v = getattr(self, name)
            if not 0 <= v < self.vocab:
                raise ValueError(f"{name}={v} outside vocabulary of size {self.vocab}")
        if min(self.n_layers, self.d_model, self.n_heads, self.d_expert, self.max_context) < 1:
            raise ValueError("model dimensions must be positive")
        if not self.rope_base > 1.0:
            raise ValueError("rope_base must exceed 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def shape_digest(self) -> str:
        """Digest over the fields that fix parameter shapes.

        RoPE base and context length are excluded: they may change between
        training stages without touching any parameter.
        """
        d = self.to_dict()
        d.pop("rope_base")
        d.pop("max_context")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def param_counts(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts (total, active per token, and their parts)."""
    d, K, N, k = cfg.d_model, cfg.vocab, cfg.n_experts, cfg.n_active
    per_expert = 3 * d * cfg.d_expert
    attn = 4 * d * d + 2 * cfg.d_head + d
    moe_shared = d + d * N
    embedding = K * d
    head = d * K + d
    total = embedding + head + cfg.n_layers * (attn + moe_shared + N * per_expert)
    active = embedding + head + cfg.n_layers * (attn + moe_shared + k * per_expert)
    return {
        "total": total,
        "active": active,
        "embedding": embedding,
        "non_embedding": total - embedding,
        "expert_total": cfg.n_layers * N * per_expert,
        "expert_active": cfg.n_layers * k * per_expert,
    }


def init_params(cfg: ModelConfig, seed: int = 0, dtype=None) -> dict[str, Tensor]:
    dtype = dtype or T.default_dtype()
    rng = np.random.default_rng(seed)
    d, std = cfg.d_model, cfg.init_std
    resid_std = std / math.sqrt(2 * cfg.n_layers)

    def normal(shape, s=std):
        return Tensor(rng.normal(0.0, s, size=shape), requires_grad=True, dtype=dtype)

    def ones(n):
        return Tensor(np.ones(n), requires_grad=True, dtype=dtype)

    p = {"tok_emb": normal((cfg.vocab, d))}
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        p[pre + "attn_norm"] = ones(d)
        for w in ("wq", "wk", "wv"):
            p[pre + w] = normal((d, d))
        p[pre + "wo"] = normal((d, d), resid_std)
        p[pre + "q_norm"] = ones(cfg.d_head)
        p[pre + "k_norm"] = ones(cfg.d_head)
        p[pre + "moe_norm"] = ones(d)
        p[pre + "router"] = normal((d, cfg.n_experts))
        for e in range(cfg.n_experts):
            ex = f"{pre}experts.{e}."
            p[ex + "w_gate"] = normal((d, cfg.d_expert))
            p[ex + "w_up"] = normal((d, cfg.d_expert))
            p[ex + "w_down"] = normal((cfg.d_expert, d), resid_std)
    p["final_norm"] = ones(d)
    p["lm_head"] = normal((d, cfg.vocab))
    for name, t in p.items():
        t.name = name
    return p


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    if not isinstance(gain, Tensor):
        gain = Tensor(np.asarray(gain, dtype=x.dtype))
    return T.rms_norm(x, gain, eps)


def rope_tables(positions: np.ndarray, d_head: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (len(positions), d_head // 2); frequency j is base**(-2j/d_head)."""
    if d_head % 2:
        raise ValueError("rotary embedding needs an even head dimension")
    j = np.arange(d_head // 2, dtype=np.float64)
    inv_freq = base ** (-2.0 * j / d_head)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def rope_rotate(x, positions, base: float) -> Tensor:
    """Rotate per-head vectors (last axis) by position; the sequence axis is second to last.

    A non-finite ``base`` disables the rotation.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    if x.shape[-1] % 2:
        raise ValueError("rotary embedding needs an even head dimension")
    if not math.isfinite(base):
        return x
    cos, sin = rope_tables(np.asarray(positions), x.shape[-1], base)
    return T.rope(x, cos, sin)


def attention_block(
    h: Tensor,
    p: dict[str, Tensor],
    cfg: ModelConfig,
    prefix: str = "",
    positions: np.ndarray | None = None,
    probs_out: list | None = None,
) -> Tensor:
    """Pre-norm bidirectional multi-head attention with QK-RMSNorm and RoPE, plus residual.

    ``h`` is (batch, seq, d_model). No causal mask is applied.
    """
    B, L, d = h.shape
    if L > cfg.max_context:
        raise ValueError(f"sequence length {L} exceeds max_context {cfg.max_context}")
    H, Dh = cfg.n_heads, cfg.d_head
    pos = np.arange(L) if positions is None else positions
    x = T.rms_norm(h, p[prefix + "attn_norm"], cfg.norm_eps)

    def heads(w):
        return (x @ p[prefix + w]).reshape(B, L, H, Dh)

    q = T.rms_norm(heads("wq"), p[prefix + "q_norm"], cfg.norm_eps).transpose(0, 2, 1, 3)
    k = T.rms_norm(heads("wk"), p[prefix + "k_norm"], cfg.norm_eps).transpose(0, 2, 1, 3)
    v = heads("wv").transpose(0, 2, 1, 3)
    q = rope_rotate(q, pos, cfg.rope_base)
    k = rope_rotate(k, pos, cfg.rope_base)
    att = T.softmax((q @ T.swap_last(k)) * (1.0 / math.sqrt(Dh)), axis=-1)
    if probs_out is not None:
        probs_out.append(att.data)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    return h + out @ p[prefix + "wo"]


@dataclass
class RouterDecision:
    indices: np.ndarray  # (tokens, k) selected experts, best first
    weights: Tensor  # (tokens, k) softmax scores at ``indices``
    probs: Tensor  # (tokens, N)
    logits: Tensor  # (tokens, N)
    f: np.ndarray  # (N,) selections per token; sums to k
    P: Tensor  # (N,) mean routing probability; sums to 1

    @property
    def n_experts(self) -> int:
        return self.probs.shape[-1]

    @property
    def n_tokens(self) -> int:
        return self.probs.shape[0]


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties go to the lower index."""
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def route(x: Tensor, router_w: Tensor, k: int) -> RouterDecision:
    """Linear router, softmax over experts, top-k selection (selection is not differentiated)."""
    if k > router_w.shape[1]:
        raise ValueError("k exceeds the number of experts")
    if x.shape[0] == 0:
        raise ValueError("cannot route an empty batch")
    logits = x @ router_w
    probs = T.softmax(logits, axis=-1)
    idx = top_k_indices(probs.data, k)
    weights = T.take_along(probs, idx, axis=-1)
    n, N = probs.shape
    f = np.bincount(idx.reshape(-1), minlength=N).astype(np.float64) / n
    P = T.mean(probs, axis=0)
    return RouterDecision(idx, weights, probs, logits, f, P)


def swiglu(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    return (T.silu(x @ w_gate) * (x @ w_up)) @ w_down


def moe_block(h: Tensor, p: dict[str, Tensor], cfg: ModelConfig, prefix: str = "") -> tuple[Tensor, RouterDecision]:
    """Pre-norm routed SwiGLU experts; output is h + sum_i p_i * E_i(x) over the top-k experts."""
    shape = h.shape
    x = T.rms_norm(h, p[prefix + "moe_norm"], cfg.norm_eps)
    x2 = x.reshape(-1, shape[-1])
    dec = route(x2, p[prefix + "router"], cfg.n_active)
    out = T.zeros(x2.shape, dtype=h.dtype)
    # sum in expert-index order so the result is independent of dispatch order
    for e in range(cfg.n_experts):
        rows, slots = np.nonzero(dec.indices == e)
        if rows.size == 0:
            continue
        ex = f"{prefix}experts.{e}."
        y = swiglu(T.take_rows(x2, rows, unique=True), p[ex + "w_gate"], p[ex + "w_up"], p[ex + "w_down"])
        w = T.gather_elements(dec.weights, rows, slots).reshape(-1, 1)
        out = T.scatter_add_rows(out, rows, y * w, unique=True)
    return h + out.reshape(shape), dec


class MaskPredictor:
    """The transformer p(. | y_t); parameters are a flat dict of named tensors."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def astype(self, dtype) -> MaskPredictor:
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return MaskPredictor(self.cfg, params)

    def copy(self) -> MaskPredictor:
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return MaskPredictor(ModelConfig(**self.cfg.to_dict()), params)

    def hidden(self, ids: np.ndarray) -> tuple[Tensor, list[RouterDecision]]:
        """Final normalised hidden states (batch, seq, d_model) and per-layer routing."""
        ids = np.atleast_2d(np.asarray(ids))
        if ids.shape[1] > self.cfg.max_context:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_context {self.cfg.max_context}")
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= self.cfg.vocab:
            raise ValueError("token id outside vocabulary")
        p = self.params
        h = T.embedding(p["tok_emb"], ids)
        decisions = []
        for i in range(self.cfg.n_layers):
            pre = f"layers.{i}."
            h = attention_block(h, p, self.cfg, pre)
            h, dec = moe_block(h, p, self.cfg, pre)
            decisions.append(dec)
        return T.rms_norm(h, p["final_norm"], self.cfg.norm_eps), decisions

    def logits(self, ids: np.ndarray) -> tuple[Tensor, list[RouterDecision]]:
        h, decisions = self.hidden(ids)
        return h @ self.params["lm_head"], decisions

    def predict(self, ids: np.ndarray) -> np.ndarray:
        """Per-position token distributions (float64) for a (batch, seq) or (seq,) input."""
        ids = np.asarray(ids)
        with T.no_grad():
            logits, _ = self.logits(ids)
        z = logits.data.astype(np.float64)
        T.check_finite(z, "logits")
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
        return out[0] if ids.ndim == 1 else out

    def __call__(self, ids: np.ndarray) -> np.ndarray:
        return self.predict(ids)


def predict(y_t, prompt_prefix, params: dict[str, Tensor], cfg: ModelConfig) -> np.ndarray:
    """Distributions over the vocabulary for every position of ``y_t`` given a clean prompt."""
    ids = y_t.ids if hasattr(y_t, "ids") else np.asarray(y_t)
    prompt = np.asarray([] if prompt_prefix is None else prompt_prefix, dtype=np.int64)
    full = np.concatenate([prompt, ids])
    if full.size > cfg.max_context:
        raise ValueError(f"context of {full.size} tokens exceeds max_context {cfg.max_context}")
    return MaskPredictor(cfg, params).predict(full)[prompt.size:]
