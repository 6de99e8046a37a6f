"""Procedurally generated toy corpora for desk-scale runs.

Everything here is produced from small hand-written word lists and templates,
so the output carries no third-party text. Four flavours are produced:
``prose`` (pastoral narrative), ``math`` (arithmetic word problems),
``code`` (tiny Python functions) and ``quality`` (the most regular prose
templates, used as the annealing subset). ``sft`` records pair short
instructions with short answers.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

NAMES = [
    "Anna", "Thomas", "Mary", "John", "Clara", "Henry", "Alice", "Peter", "Martha", "George",
    "Ellen", "Samuel", "Ruth", "Walter", "Edith", "Arthur", "Lucy", "Frank", "Jane", "Oliver",
]
NOUNS = [
    "river", "garden", "house", "letter", "horse", "window", "road", "field", "village", "tree",
    "bridge", "mill", "church", "forest", "hill", "lamp", "table", "door", "boat", "market",
    "orchard", "barn", "well", "fire", "coat", "basket", "bird", "dog", "cart", "stone",
]
ADJS = [
    "old", "quiet", "small", "bright", "cold", "green", "narrow", "heavy", "gentle", "dark",
    "tall", "warm", "empty", "distant", "red", "broad", "wet", "golden", "little", "long",
]
VERBS_PAST = [
    "walked to", "looked at", "painted", "found", "carried", "opened", "closed", "watched",
    "remembered", "cleaned", "repaired", "passed", "visited", "left", "reached", "followed",
]
INTRANS = ["slept", "waited", "laughed", "listened", "sang", "rested", "worked", "wondered"]
TIMES = [
    "In the morning", "At noon", "That evening", "Before dawn", "After supper", "On Sunday",
    "Later that day", "In the spring", "During the winter", "At midnight",
]
PLACES = ["by the river", "near the mill", "in the garden", "on the hill", "at the market", "under the tree"]
WEATHER = ["The rain fell softly.", "The wind was cold.", "The sun was warm.", "Snow covered the road.", "The sky was clear."]
COLORS = ["red", "blue", "green", "yellow", "white", "black", "brown", "grey"]
ANIMALS = ["horse", "dog", "cat", "bird", "cow", "sheep", "goat", "fox"]


def _pick(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


def _cap(s: str) -> str:
    return s[0].upper() + s[1:]


def prose_sentence(rng: np.random.Generator, regular: bool = False) -> str:
    name, other = _pick(rng, NAMES), _pick(rng, NAMES)
    adj, noun, noun2 = _pick(rng, ADJS), _pick(rng, NOUNS), _pick(rng, NOUNS)
    forms = [
        lambda: f"{name} {_pick(rng, VERBS_PAST)} the {adj} {noun}.",
        lambda: f"The {adj} {noun} stood {_pick(rng, PLACES)}.",
        lambda: f"{_pick(rng, TIMES)}, {name} {_pick(rng, VERBS_PAST)} the {noun}.",
        lambda: f"{name} and {other} {_pick(rng, INTRANS)} {_pick(rng, PLACES)}.",
    ]
    if not regular:
        forms += [
            lambda: f'"Where is the {noun}?" asked {name}.',
            lambda: f"{_pick(rng, WEATHER)} {name} {_pick(rng, INTRANS)}.",
            lambda: f"There was a {adj} {noun} beside the {noun2}, and {name} {_pick(rng, INTRANS)}.",
            lambda: f"{name} said that the {noun} was {adj}.",
            lambda: f"{_cap(_pick(rng, TIMES).lower())} the {noun} seemed {adj} to {other}.",
        ]
    return forms[int(rng.integers(len(forms)))]()


def prose_document(rng: np.random.Generator, regular: bool = False) -> str:
    n = int(rng.integers(3, 8))
    return " ".join(prose_sentence(rng, regular) for _ in range(n))


def math_document(rng: np.random.Generator) -> str:
    lines = []
    for _ in range(int(rng.integers(3, 7))):
        a, b = int(rng.integers(1, 100)), int(rng.integers(1, 100))
        kind = int(rng.integers(3))
        name, noun = _pick(rng, NAMES), _pick(rng, ["apples", "coins", "books", "stones", "eggs"])
        if kind == 0:
            lines.append(f"{name} has {a} {noun} and finds {b} more. {a} + {b} = {a + b}.")
        elif kind == 1:
            hi, lo = max(a, b), min(a, b)
            lines.append(f"{name} had {hi} {noun} and gave away {lo}. {hi} - {lo} = {hi - lo}.")
        else:
            a, b = a % 13, b % 13
            lines.append(f"{a} rows of {b} {noun} make {a} * {b} = {a * b}.")
    return "\n".join(lines)


def code_document(rng: np.random.Generator) -> str:
    noun = _pick(rng, NOUNS)
    a, b = int(rng.integers(1, 10)), int(rng.integers(1, 10))
    op = _pick(rng, ["+", "-", "*"])
    body = [
        f"def {noun}_{_pick(rng, ['count', 'total', 'size', 'score'])}(x, y):",
        f"    z = x {op} {a}",
        f"    if z > {b}:",
        f"        return z {op} y",
        "    return y",
    ]
    return "\n".join(body)


def sft_record(rng: np.random.Generator) -> dict:
    def turn():
        kind = int(rng.integers(5))
        if kind == 0:
            a, b = int(rng.integers(1, 50)), int(rng.integers(1, 50))
            return f"What is {a} + {b}?", f"{a + b}."
        if kind == 1:
            w = f"{_pick(rng, ADJS)} {_pick(rng, NOUNS)}"
            return f"Repeat: {w}", w
        if kind == 2:
            return "Name a color.", f"{_cap(_pick(rng, COLORS))}."
        if kind == 3:
            return "Name an animal.", f"The {_pick(rng, ANIMALS)}."
        name = _pick(rng, NAMES)
        return f"Who walked to the {_pick(rng, NOUNS)}?", f"{name} did."

    n_turns = 1 if rng.random() < 0.7 else int(rng.integers(2, 4))
    return {"turns": [dict(zip(("prompt", "response"), turn())) for _ in range(n_turns)]}


def write_corpus(out_dir, seed: int = 0, prose_bytes: int = 1_000_000, heldout_bytes: int = 30_000, sft_records: int = 4000) -> dict[str, Path]:
    """Write all toy corpora under ``out_dir`` and return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    def docs_until(fn, n_bytes):
        docs, size = [], 0
        while size < n_bytes:
            d = fn()
            docs.append(d)
            size += len(d) + 2
        return "\n\n".join(docs) + "\n"

    paths = {
        "prose": out / "prose.txt",
        "math": out / "math.txt",
        "code": out / "code.txt",
        "quality": out / "quality.txt",
        "heldout": out / "heldout.txt",
        "sft": out / "sft.jsonl",
        "sft_heldout": out / "sft_heldout.jsonl",
    }
    paths["prose"].write_text(docs_until(lambda: prose_document(rng), prose_bytes))
    paths["math"].write_text(docs_until(lambda: math_document(rng), prose_bytes // 5))
    paths["code"].write_text(docs_until(lambda: code_document(rng), prose_bytes // 5))
    paths["quality"].write_text(docs_until(lambda: prose_document(rng, regular=True), prose_bytes // 10))
    held = np.random.default_rng(seed + 10_007)
    paths["heldout"].write_text(docs_until(lambda: prose_document(held), heldout_bytes))
    paths["sft"].write_text("".join(json.dumps(sft_record(rng)) + "\n" for _ in range(sft_records)))
    paths["sft_heldout"].write_text("".join(json.dumps(sft_record(held)) + "\n" for _ in range(200)))
    return paths
