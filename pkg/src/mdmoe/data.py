"""Byte-level vocabulary, corpus packing and batch assembly for pretraining and SFT."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_BYTES = 256
MASK_ID = 256
EOS_ID = 257
PAD_ID = EOS_ID  # responses are padded with EOS
BOS_ID = 258  # opens a user turn
SEP_ID = 259  # opens an assistant turn
VOCAB_SIZE = 260

RESERVED = {MASK_ID: b"<|mask|>", EOS_ID: b"<|eos|>", BOS_ID: b"<|bos|>", SEP_ID: b"<|sep|>"}


def encode(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def decode_bytes(ids) -> bytes:
    out = bytearray()
    for i in np.asarray(ids, dtype=np.int64).reshape(-1):
        i = int(i)
        if i < N_BYTES:
            out.append(i)
        elif i in RESERVED:
            out += RESERVED[i]
        else:
            raise ValueError(f"token id {i} outside the byte vocabulary")
    return bytes(out)


def decode(ids) -> str:
    return decode_bytes(ids).decode("utf-8", errors="replace")


def split_documents(text: str) -> list[str]:
    """Documents are separated by one or more blank lines."""
    return [d.strip() for d in re.split(r"\n\s*\n", text) if d.strip()]


def load_documents(*paths) -> list[str]:
    docs: list[str] = []
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"corpus file not found: {path}")
        docs.extend(split_documents(path.read_text(encoding="utf-8")))
    return docs


class PackedStream:
    """Documents concatenated with an EOS separator, read as one cyclic token stream."""

    def __init__(self, docs: list[str], eos_id: int = EOS_ID):
        parts = []
        for d in docs:
            parts.append(encode(d))
            parts.append(np.array([eos_id], dtype=np.int64))
        self.tokens = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        if self.tokens.size == 0:
            raise ValueError("empty corpus")
        self.cursor = 0
        self.consumed = 0

    def __len__(self) -> int:
        return self.tokens.size

    def take(self, n: int) -> np.ndarray:
        n_tok = self.tokens.size
        idx = (self.cursor + np.arange(n)) % n_tok
        self.cursor = int((self.cursor + n) % n_tok)
        self.consumed += n
        return self.tokens[idx]

    def state_dict(self) -> dict:
        return {"cursor": self.cursor, "consumed": self.consumed}

    def load_state_dict(self, state: dict) -> None:
        self.cursor = int(state["cursor"])
        self.consumed = int(state["consumed"])


class CorpusMixture:
    """Several packed streams sampled per sequence in proportion to ``weights``."""

    def __init__(self, streams: dict[str, PackedStream], weights: dict[str, float] | None = None):
        if not streams:
            raise ValueError("empty corpus")
        self.streams = streams
        self.set_weights(weights or {name: 1.0 for name in streams})

    def set_weights(self, weights: dict[str, float]) -> None:
        unknown = set(weights) - set(self.streams)
        if unknown:
            raise ValueError(f"weights name unknown corpora: {sorted(unknown)}")
        names = [n for n in self.streams if weights.get(n, 0.0) > 0]
        if not names:
            raise ValueError("all corpus weights are zero")
        w = np.array([weights[n] for n in names], dtype=np.float64)
        self.names = names
        self.probs = w / w.sum()

    def take(self, n: int, rng: np.random.Generator) -> np.ndarray:
        name = self.names[0] if len(self.names) == 1 else self.names[rng.choice(len(self.names), p=self.probs)]
        return self.streams[name].take(n)

    @property
    def consumed(self) -> int:
        return sum(s.consumed for s in self.streams.values())

    def state_dict(self) -> dict:
        return {name: s.state_dict() for name, s in self.streams.items()}

    def load_state_dict(self, state: dict) -> None:
        for name, s in state.items():
            self.streams[name].load_state_dict(s)


@dataclass
class PretrainBatch:
    ids: np.ndarray  # (batch, length)
    variable: bool

    @property
    def length(self) -> int:
        return self.ids.shape[1]


def pretrain_batch(
    source: PackedStream | CorpusMixture,
    L_ctx: int,
    batch_size: int,
    rng: np.random.Generator,
    var_len_prob: float = 0.01,
    min_len: int = 8,
) -> PretrainBatch:
    """Packed sequences of ``L_ctx`` tokens; with prob ``var_len_prob`` every row is cut to one random length.

    Only the emitted tokens are consumed from the stream, so truncated steps
    do not skip data.
    """
    if isinstance(source, PackedStream):
        source = CorpusMixture({"corpus": source})
    variable = bool(rng.random() < var_len_prob)
    length = int(rng.integers(min(min_len, L_ctx), L_ctx + 1)) if variable else L_ctx
    rows = [source.take(length, rng) for _ in range(batch_size)]
    return PretrainBatch(np.stack(rows), variable)


# ---------------------------------------------------------------------------
# supervised fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class SftRecord:
    turns: list[tuple[str, str]]

    def __post_init__(self):
        if not self.turns:
            raise ValueError("SFT record has no turns")
        for prompt, response in self.turns:
            if not prompt or not response:
                raise ValueError("every SFT turn needs a non-empty prompt and response")

    def to_json(self) -> str:
        return json.dumps({"turns": [{"prompt": p, "response": r} for p, r in self.turns]})

    @classmethod
    def from_obj(cls, obj: dict) -> SftRecord:
        if set(obj) != {"turns"}:
            raise ValueError(f"SFT record must have exactly the field 'turns', got {sorted(obj)}")
        turns = []
        for t in obj["turns"]:
            if set(t) != {"prompt", "response"}:
                raise ValueError("each turn needs exactly 'prompt' and 'response'")
            if not isinstance(t["prompt"], str) or not isinstance(t["response"], str):
                raise ValueError("prompt and response must be strings")
            turns.append((t["prompt"], t["response"]))
        return cls(turns)


def load_sft(path) -> list[SftRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"SFT file not found: {path}")
    records = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(SftRecord.from_obj(json.loads(line)))
        except (ValueError, TypeError, KeyError) as exc:
            raise ValueError(f"{path}:{n}: {exc}") from exc
    return records


def format_prompt(turns: list[tuple[str, str]], tau: int) -> np.ndarray:
    """Visible context for target turn ``tau`` (1-based): x_1, y_1, ..., x_tau."""
    parts = []
    for prompt, response in turns[: tau - 1]:
        parts += [[BOS_ID], encode(prompt), [SEP_ID], encode(response), [EOS_ID]]
    parts += [[BOS_ID], encode(turns[tau - 1][0]), [SEP_ID]]
    return np.concatenate([np.asarray(p, dtype=np.int64) for p in parts])


def format_response(text: str) -> np.ndarray:
    """Response tokens: the bytes followed by one terminating EOS."""
    return np.concatenate([encode(text), [EOS_ID]]).astype(np.int64)


def encode_prompt(text: str) -> np.ndarray:
    """Single-turn inference prompt in the SFT layout."""
    return format_prompt([(text, "")], 1)


@dataclass
class SftBatch:
    prompts: list[np.ndarray]
    responses: np.ndarray  # (batch, R) EOS-padded
    response_lengths: np.ndarray  # unpadded, terminator included
    taus: np.ndarray
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.prompts)

    def sequence(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Full sequence [prompt, padded response] and its loss-position mask."""
        p = self.prompts[i]
        ids = np.concatenate([p, self.responses[i]])
        loss = np.zeros(ids.size, dtype=bool)
        loss[p.size:] = True
        return ids, loss


def sft_batch(records: list[SftRecord], L_max: int, rng: np.random.Generator) -> SftBatch:
    """Sample a target turn per record and pad responses with EOS to the batch maximum.

    Samples that cannot fit in ``L_max`` tokens are dropped and counted.
    """
    if not records:
        raise ValueError("empty SFT batch")
    items = []
    dropped = 0
    for rec in records:
        if not rec.turns:
            raise ValueError("SFT record has no turns")
        tau = int(rng.integers(1, len(rec.turns) + 1))
        p, r = format_prompt(rec.turns, tau), format_response(rec.turns[tau - 1][1])
        if p.size + r.size > L_max:
            dropped += 1
            continue
        items.append((p, r, tau))
    while items:
        R = max(r.size for _, r, _ in items)
        worst = max(range(len(items)), key=lambda i: items[i][0].size)
        if items[worst][0].size + R <= L_max:
            break
        items.pop(worst)
        dropped += 1
    if not items:
        return SftBatch([], np.zeros((0, 0), dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), dropped)
    R = max(r.size for _, r, _ in items)
    responses = np.full((len(items), R), PAD_ID, dtype=np.int64)
    for i, (_, r, _) in enumerate(items):
        responses[i, : r.size] = r
    return SftBatch(
        [p for p, _, _ in items],
        responses,
        np.array([r.size for _, r, _ in items]),
        np.array([tau for _, _, tau in items]),
        dropped,
    )
