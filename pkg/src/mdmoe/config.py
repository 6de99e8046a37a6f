"""Run configuration: TOML with sections [model], [data], [sampler] and [stages.N].

Unknown keys anywhere are errors. Relative paths in [data] resolve against
the directory of the config file.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .model import ModelConfig
from .sampler import DecodePlan


class ConfigError(ValueError):
    pass


STAGE_KINDS = ("pretrain", "sft")


@dataclass
class StageConfig:
    name: str
    kind: str = "pretrain"
    token_budget: int = 0
    corpus_weights: dict[str, float] = field(default_factory=dict)
    L_ctx: int = 128
    rope_base: float = 10_000.0
    batch_size: int = 16
    lr_peak: float = 3e-3
    lr_warmup: float = 0.05
    lr_floor: float = 0.1
    lr_decay: str = "cosine"
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    init: str = "previous"  # scratch | previous | best | path to a checkpoint
    var_len_prob: float = 0.01
    min_len: int = 8
    t_floor: float = 1e-3
    lb_weight: float = 0.01
    z_weight: float = 0.001
    eval_interval: int = 0
    checkpoint_interval: int = 0
    log_interval: int = 1
    select_best: bool = False

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ConfigError(f"stage {self.name!r}: kind must be one of {STAGE_KINDS}")
        if self.token_budget < 0:
            raise ConfigError(f"stage {self.name!r}: token_budget must be >= 0")
        if self.L_ctx < 1 or self.batch_size < 1:
            raise ConfigError(f"stage {self.name!r}: L_ctx and batch_size must be positive")
        if not 0.0 <= self.var_len_prob <= 1.0:
            raise ConfigError(f"stage {self.name!r}: var_len_prob must be a probability")
        if not 0.0 <= self.t_floor < 1.0:
            raise ConfigError(f"stage {self.name!r}: t_floor must lie in [0, 1)")


@dataclass
class DataConfig:
    corpora: dict[str, str] = field(default_factory=dict)
    heldout: str = ""
    sft: str = ""
    sft_heldout: str = ""
    eval_seq_len: int = 128
    eval_n_mc: int = 4
    eval_max_seqs: int = 64


@dataclass
class RunConfig:
    model: ModelConfig
    data: DataConfig
    sampler: DecodePlan
    stages: list[StageConfig]
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "data": asdict(self.data),
            "sampler": self.sampler.to_dict(),
            "stages": {str(i + 1): _drop_none(asdict(s)) for i, s in enumerate(self.stages)},
        }


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def _build(cls, section: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**section)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _resolve(path: str, base: Path | None) -> str:
    if not path or base is None:
        return path
    p = Path(path)
    return str(p if p.is_absolute() else (base / p).resolve())


def from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    allowed = {"seed", "model", "data", "sampler", "stages"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    model = _build(ModelConfig, raw.get("model", {}), "[model]")
    data = _build(DataConfig, dict(raw.get("data", {})), "[data]")
    data.corpora = {k: _resolve(v, base_dir) for k, v in data.corpora.items()}
    for name in ("heldout", "sft", "sft_heldout"):
        setattr(data, name, _resolve(getattr(data, name), base_dir))
    sampler = _build(DecodePlan, raw.get("sampler", {}), "[sampler]")
    stages_raw = raw.get("stages", {})
    try:
        keys = sorted(stages_raw, key=int)
    except ValueError as exc:
        raise ConfigError("stage tables must be named [stages.1], [stages.2], ...") from exc
    stages = [_build(StageConfig, dict(stages_raw[k]), f"[stages.{k}]") for k in keys]
    for s in stages:
        if s.init not in ("scratch", "previous", "best"):
            s.init = _resolve(s.init, base_dir)
        for corpus in s.corpus_weights:
            if corpus not in data.corpora:
                raise ConfigError(f"stage {s.name!r} weights unknown corpus {corpus!r}")
    names = [s.name for s in stages]
    if len(set(names)) != len(names):
        raise ConfigError("stage names must be unique")
    return RunConfig(model, data, sampler, stages, int(raw.get("seed", 0)))


def parse_value(text: str):
    """Parse an override value as a TOML value, falling back to a bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form dotted.key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table")
        node[parts[-1]] = parse_value(value.strip())
    return raw


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(apply_overrides(raw, overrides or []), path.parent.resolve())


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(tomli_w.dumps(cfg.to_dict()))
    return path
