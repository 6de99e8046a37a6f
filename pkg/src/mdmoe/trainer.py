"""Staged training driver: pretraining stages, annealing with RoPE/context changes, SFT."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, StageConfig
from .data import (
    CorpusMixture,
    PackedStream,
    SftRecord,
    encode,
    load_documents,
    load_sft,
    pretrain_batch,
    sft_batch,
)
from .masking import forward_mask, sample_noise_level
from .model import MaskPredictor, ModelConfig, init_params
from .objectives import LossBreakdown, diffusion_objective, pretrain_loss
from .optim import AdamState, adamw_step, lr_at

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class BoundEstimate:
    mean: float  # per-token bound, nats
    stderr: float
    n: int


def heldout_sequences(docs: list[str], seq_len: int, max_seqs: int | None = None) -> np.ndarray:
    """Pack held-out documents and cut them into full sequences of ``seq_len`` tokens."""
    stream = PackedStream(docs)
    n = len(stream) // seq_len
    if max_seqs is not None:
        n = min(n, max_seqs)
    if n == 0:
        raise ValueError("held-out data shorter than one sequence")
    return stream.tokens[: n * seq_len].reshape(n, seq_len)


def evaluate_bound(
    predictor,
    sequences: np.ndarray,
    n_mc: int,
    mask_id: int,
    seed: int = 0,
    t_floor: float = 0.0,
    batch_rows: int = 64,
) -> BoundEstimate:
    """Monte-Carlo estimate of the diffusion bound per token with its standard error.

    Each sequence gets ``n_mc`` independent (t, mask) draws; every draw is one
    sample of (1/t) * masked NLL / length.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    sequences = np.atleast_2d(sequences)
    if sequences.size == 0:
        raise ValueError("empty held-out set")
    rng = np.random.default_rng(seed)
    rows = np.repeat(sequences, n_mc, axis=0)
    t = sample_noise_level(rng, rows.shape[0], t_floor)
    noisy = forward_mask(rows, t, rng, mask_id).ids
    L = rows.shape[1]
    values = np.empty(rows.shape[0])
    for lo in range(0, rows.shape[0], batch_rows):
        hi = min(lo + batch_rows, rows.shape[0])
        dists = predictor(noisy[lo:hi])
        for i in range(lo, hi):
            values[i] = pretrain_loss(rows[i], t[i], noisy[i], dists[i - lo], mask_id) / L
    n = values.size
    stderr = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    return BoundEstimate(float(values.mean()), stderr, n)


def route_stats(model: MaskPredictor, sequences: np.ndarray, seed: int = 0, noised: bool = True, batch_rows: int = 32) -> list[dict]:
    """Per-layer expert selection frequency f and mean routing probability P.

    With ``noised`` the inputs are masked at t ~ U[0, 1] as during training.
    """
    sequences = np.atleast_2d(sequences)
    if sequences.size == 0:
        raise ValueError("empty sample")
    rng = np.random.default_rng(seed)
    inputs = sequences
    if noised:
        inputs = forward_mask(sequences, rng.random(sequences.shape[0]), rng, model.cfg.mask_id).ids
    N = model.cfg.n_experts
    counts = np.zeros((model.cfg.n_layers, N))
    probs = np.zeros((model.cfg.n_layers, N))
    n_tok = 0
    with T.no_grad():
        for lo in range(0, inputs.shape[0], batch_rows):
            _, decisions = model.hidden(inputs[lo:lo + batch_rows])
            for layer, d in enumerate(decisions):
                counts[layer] += d.f * d.n_tokens
                probs[layer] += d.probs.data.astype(np.float64).sum(axis=0)
            n_tok += decisions[0].n_tokens
    out = []
    for layer in range(model.cfg.n_layers):
        f = counts[layer] / n_tok
        P = probs[layer] / n_tok
        out.append({
            "layer": layer,
            "f": f.tolist(),
            "P": P.tolist(),
            "max_f": float(f.max()),
            "max_over_mean": float(f.max() / f.mean()),
        })
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class Trainer:
    """Owns the model, optimizer state, RNG and data cursors across all stages."""

    def __init__(
        self,
        run: RunConfig,
        out_dir=None,
        corpora: dict[str, PackedStream] | None = None,
        sft_records: list[SftRecord] | None = None,
        heldout: np.ndarray | None = None,
    ):
        self.run = run
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.rng = np.random.default_rng(run.seed)
        self.model = MaskPredictor(ModelConfig(**run.model.to_dict()), seed=run.seed)
        self.opt = AdamState()
        self.step = 0
        self.tokens_seen = 0
        self.stage_index = 0
        self.stage_step = 0
        self.stage_tokens = 0
        self.stage_started = False
        self.best: dict[str, float] = {}
        self._best_params: dict[str, dict[str, np.ndarray]] = {}
        self.trace: list[dict] = []
        self._corpora = corpora
        self._sft = sft_records
        self._heldout = heldout
        self._mixture: CorpusMixture | None = None
        self._log_file = None

    # -- data ------------------------------------------------------------
    @property
    def mixture(self) -> CorpusMixture:
        if self._mixture is None:
            if self._corpora is None:
                self._corpora = {name: PackedStream(load_documents(path)) for name, path in self.run.data.corpora.items()}
            self._mixture = CorpusMixture(self._corpora)
        return self._mixture

    @property
    def sft_records(self) -> list[SftRecord]:
        if self._sft is None:
            if not self.run.data.sft:
                raise TrainingError("an SFT stage needs data.sft")
            self._sft = load_sft(self.run.data.sft)
            if not self._sft:
                raise TrainingError(f"no SFT records in {self.run.data.sft}")
        return self._sft

    @property
    def heldout(self) -> np.ndarray | None:
        if self._heldout is None and self.run.data.heldout:
            d = self.run.data
            self._heldout = heldout_sequences(load_documents(d.heldout), d.eval_seq_len, d.eval_max_seqs)
        return self._heldout

    # -- state -----------------------------------------------------------
    def checkpoint(self, stage: str = "") -> Checkpoint:
        return Checkpoint(
            model_config=ModelConfig(**self.model.cfg.to_dict()),
            params={k: v.data.copy() for k, v in self.model.params.items()},
            stage=stage,
            tokens_seen=self.tokens_seen,
            step=self.step,
            stage_step=self.stage_step,
            stage_tokens=self.stage_tokens,
            optim_step=self.opt.step,
            optim_m={k: v.copy() for k, v in self.opt.m.items()},
            optim_v={k: v.copy() for k, v in self.opt.v.items()},
            rng_state=self.rng.bit_generator.state,
            data_state=self._mixture.state_dict() if self._mixture is not None else {},
            extra={"stage_index": self.stage_index, "stage_started": self.stage_started, "best": self.best},
        )

    def restore(self, ckpt: Checkpoint, full: bool = True) -> None:
        """Load parameters; with ``full`` also optimizer, RNG, data cursors and counters."""
        self._load_params(ckpt)
        self.model.cfg = ModelConfig(**ckpt.model_config.to_dict())
        if not full:
            return
        self.opt = AdamState(ckpt.optim_step, {k: v.copy() for k, v in ckpt.optim_m.items()}, {k: v.copy() for k, v in ckpt.optim_v.items()})
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state
        if ckpt.data_state:
            self.mixture.load_state_dict(ckpt.data_state)
        self.step = ckpt.step
        self.tokens_seen = ckpt.tokens_seen
        self.stage_step = ckpt.stage_step
        self.stage_tokens = ckpt.stage_tokens
        self.stage_index = int(ckpt.extra.get("stage_index", 0))
        self.stage_started = bool(ckpt.extra.get("stage_started", False))
        self.best = dict(ckpt.extra.get("best", {}))

    def _load_params(self, ckpt: Checkpoint) -> None:
        if ckpt.model_config.shape_digest() != self.model.cfg.shape_digest():
            raise CheckpointError("checkpoint model shapes are incompatible with the configured model")
        for name, p in self.model.params.items():
            if name not in ckpt.params or ckpt.params[name].shape != p.shape:
                raise CheckpointError(f"checkpoint is missing or misshapes parameter {name}")
            p.data = ckpt.params[name].astype(p.dtype).copy()

    # -- logging ---------------------------------------------------------
    def _emit(self, record: dict) -> None:
        self.trace.append(record)
        if self.out_dir is not None:
            if self._log_file is None:
                self.out_dir.mkdir(parents=True, exist_ok=True)
                self._log_file = open(self.out_dir / "metrics.jsonl", "a")
            self._log_file.write(json.dumps(record) + "\n")
            self._log_file.flush()

    def close(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    # -- stage control -----------------------------------------------------
    def _begin_stage(self, stage: StageConfig, prev: StageConfig | None) -> None:
        if stage.init == "scratch":
            self.model.params = init_params(self.model.cfg, self.run.seed, self.model.dtype)
            self.opt = AdamState()
        elif stage.init == "best":
            path = self.out_dir / f"best_{prev.name}.ckpt" if (prev is not None and self.out_dir is not None) else None
            if path is not None and path.exists():
                self._load_params(load_checkpoint(path))
            elif prev is not None and prev.name in self._best_params:
                for k, v in self._best_params[prev.name].items():
                    self.model.params[k].data = v.copy()
            else:
                raise TrainingError(f"stage {stage.name!r} asks for the best checkpoint of the previous stage, but none was kept")
            self.opt = AdamState()
        elif stage.init != "previous":
            self._load_params(load_checkpoint(stage.init))
            self.opt = AdamState()
        else:
            self.opt = AdamState()
        cfg = self.model.cfg
        cfg.rope_base = stage.rope_base
        cfg.max_context = max(cfg.max_context, stage.L_ctx)
        self._apply_stage_constants(stage)
        self.stage_step = 0
        self.stage_tokens = 0
        self.stage_started = True

    def _apply_stage_constants(self, stage: StageConfig) -> None:
        if stage.kind == "pretrain":
            self.mixture.set_weights(stage.corpus_weights or {name: 1.0 for name in self.mixture.streams})

    def _planned_steps(self, stage: StageConfig) -> int:
        if stage.kind == "pretrain":
            per_step = stage.batch_size * stage.L_ctx
        else:
            recs = self.sft_records[:256]
            avg = np.mean([sum(len(encode(p)) + len(encode(r)) + 3 for p, r in rec.turns) for rec in recs])
            per_step = stage.batch_size * max(avg, 1.0)
        return max(1, math.ceil(stage.token_budget / per_step))

    def _step_pretrain(self, stage: StageConfig):
        batch = pretrain_batch(self.mixture, stage.L_ctx, stage.batch_size, self.rng, stage.var_len_prob, stage.min_len)
        t = sample_noise_level(self.rng, stage.batch_size, stage.t_floor)
        noisy = forward_mask(batch.ids, t, self.rng, self.model.cfg.mask_id).ids
        loss, br, decisions = diffusion_objective(self.model, batch.ids, noisy, t, None, stage.lb_weight, stage.z_weight)
        loss.backward()
        return br, decisions, batch.ids.size, {"variable": batch.variable, "length": batch.length}

    def _step_sft(self, stage: StageConfig):
        records = self.sft_records
        picks = self.rng.integers(0, len(records), size=stage.batch_size)
        batch = sft_batch([records[i] for i in picks], stage.L_ctx, self.rng)
        if len(batch) == 0:
            raise TrainingError("every SFT sample in the batch exceeded L_ctx")
        seqs = [batch.sequence(i) for i in range(len(batch))]
        t = sample_noise_level(self.rng, len(batch), stage.t_floor)
        mask_id = self.model.cfg.mask_id
        noisy = []
        for (ids, region), ti in zip(seqs, t):
            n_prompt = int((~region).sum())
            resp = forward_mask(ids[n_prompt:], ti, self.rng, mask_id).ids
            noisy.append(np.concatenate([ids[:n_prompt], resp]))
        groups: dict[int, list[int]] = {}
        for i, (ids, _) in enumerate(seqs):
            groups.setdefault(ids.size, []).append(i)
        totals = np.zeros(4)
        n_masked = 0
        decisions_all = []
        for length in sorted(groups):
            idx = groups[length]
            w = len(idx) / len(batch)
            loss, br, decisions = diffusion_objective(
                self.model,
                np.stack([seqs[i][0] for i in idx]),
                np.stack([noisy[i] for i in idx]),
                t[idx],
                np.stack([seqs[i][1] for i in idx]),
                stage.lb_weight,
                stage.z_weight,
            )
            (loss * w).backward()
            totals += w * np.array([br.task_loss, br.lb_loss, br.z_loss, br.total])
            n_masked += br.masked_count
            decisions_all.extend(decisions)
        br = LossBreakdown(*map(float, totals), n_masked)
        n_tok = sum(ids.size for ids, _ in seqs)
        return br, decisions_all, n_tok, {"dropped": batch.dropped}

    def train_stage(self, stage: StageConfig, max_steps: int | None = None) -> Checkpoint:
        """Run optimizer steps until the stage's token budget is consumed.

        ``max_steps`` stops early (used to cut a run for save/resume); the
        returned checkpoint then resumes mid-stage.
        """
        planned = self._planned_steps(stage)
        params = self.model.params
        steps_done = 0
        while self.stage_tokens < stage.token_budget:
            if max_steps is not None and steps_done >= max_steps:
                break
            for p in params.values():
                p.grad = None
            lr = lr_at(self.stage_step, planned, stage.lr_peak, stage.lr_warmup, stage.lr_floor, stage.lr_decay)
            if stage.kind == "pretrain":
                br, decisions, n_tok, info = self._step_pretrain(stage)
            else:
                br, decisions, n_tok, info = self._step_sft(stage)
            if not math.isfinite(br.total):
                raise TrainingError(f"non-finite loss at step {self.step} in stage {stage.name!r}: {br}")
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            try:
                gnorm = adamw_step(
                    {k: p.data for k, p in params.items()}, grads, self.opt, lr,
                    weight_decay=stage.weight_decay, clip=stage.grad_clip,
                )
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite gradients at step {self.step} in stage {stage.name!r}") from exc
            self.step += 1
            self.stage_step += 1
            steps_done += 1
            self.stage_tokens += n_tok
            self.tokens_seen += n_tok
            n_layers = self.model.cfg.n_layers
            f_by_layer = [d.f for d in decisions[:n_layers]]
            rec = {
                "step": self.step,
                "stage": stage.name,
                "tokens": self.tokens_seen,
                "task_loss": br.task_loss,
                "lb_loss": br.lb_loss,
                "z_loss": br.z_loss,
                "total": br.total,
                "lr": lr,
                "grad_norm": gnorm,
                "max_f": float(max(f.max() for f in f_by_layer)),
                **info,
            }
            if stage.log_interval and self.stage_step % stage.log_interval == 0:
                rec["expert_f"] = [np.round(f, 6).tolist() for f in f_by_layer]
            last = self.stage_tokens >= stage.token_budget
            if self.heldout is not None and ((stage.eval_interval and self.stage_step % stage.eval_interval == 0) or (last and stage.select_best)):
                est = self.evaluate()
                rec["eval_bound"] = est.mean
                rec["eval_stderr"] = est.stderr
                if stage.select_best and est.mean < self.best.get(stage.name, math.inf):
                    self.best[stage.name] = est.mean
                    self._best_params[stage.name] = {k: v.data.copy() for k, v in params.items()}
                    if self.out_dir is not None:
                        save_checkpoint(self.out_dir / f"best_{stage.name}.ckpt", self.checkpoint(stage.name))
            self._emit(rec)
            if self.out_dir is not None and stage.checkpoint_interval and self.stage_step % stage.checkpoint_interval == 0:
                save_checkpoint(self.out_dir / "latest.ckpt", self.checkpoint(stage.name))
        return self.checkpoint(stage.name)

    def evaluate(self, n_mc: int | None = None) -> BoundEstimate:
        d = self.run.data
        return evaluate_bound(self.model, self.heldout, n_mc or d.eval_n_mc, self.model.cfg.mask_id, seed=self.run.seed + 1)

    def run_stages(self, resume: Checkpoint | None = None, max_steps: int | None = None) -> Checkpoint:
        """Run the configured stages in order, optionally continuing a checkpointed run.

        With ``max_steps`` the run stops after that many optimizer steps; the
        returned checkpoint (also written as ``final.ckpt``) resumes exactly there.
        """
        stages = self.run.stages
        if resume is not None:
            self.restore(resume)
            if self.stage_started and self.stage_index < len(stages):
                self._apply_stage_constants(stages[self.stage_index])
        remaining = max_steps
        while self.stage_index < len(stages):
            i = self.stage_index
            stage = stages[i]
            if not self.stage_started:
                self._begin_stage(stage, stages[i - 1] if i else None)
            before = self.step
            self.train_stage(stage, remaining)
            if remaining is not None:
                remaining -= self.step - before
            if self.stage_tokens < stage.token_budget:
                break
            log.info("stage %s done: %d steps, %d tokens", stage.name, self.stage_step, self.stage_tokens)
            if self.out_dir is not None:
                save_checkpoint(self.out_dir / f"stage_{stage.name}.ckpt", self.checkpoint(stage.name))
            self.stage_index += 1
            self.stage_started = False
            if remaining is not None and remaining <= 0:
                break
        ckpt = self.checkpoint(stages[min(self.stage_index, len(stages) - 1)].name if stages else "")
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / "final.ckpt", ckpt)
        return ckpt


def model_from_checkpoint(ckpt: Checkpoint, dtype=None) -> MaskPredictor:
    params = {
        k: T.Tensor(v.astype(dtype or v.dtype), requires_grad=True, name=k) for k, v in ckpt.params.items()
    }
    return MaskPredictor(ModelConfig(**ckpt.model_config.to_dict()), params)
