"""Command-line entry point: ``mdmoe <subcommand> ...``.

Exit codes: 0 success, 1 runtime error (data, checkpoint, non-finite loss),
2 usage error (bad flags or config). ``MDMOE_CONFIG`` supplies the default
``--config`` path.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, dump_config, load_config
from .data import decode, encode_prompt, load_documents
from .diagnostics import GRAD_TOL, model_grad_check, route_table, tiny_config, write_route_columns
from .model import ModelConfig
from .sampler import DecodePlan, generate_semi_ar, generate_vanilla, truncate_at_eos
from .tensor import NonFiniteError
from .toycorpus import write_corpus
from .trainer import Trainer, TrainingError, evaluate_bound, heldout_sequences, model_from_checkpoint, route_stats

ENV_CONFIG = "MDMOE_CONFIG"


class UsageError(Exception):
    pass


def _config_path(args) -> str:
    path = args.config or os.environ.get(ENV_CONFIG)
    if not path:
        raise UsageError(f"no config given (use --config or set {ENV_CONFIG})")
    return path


def _overrides(args) -> list[str]:
    out = list(args.set or [])
    if args.seed is not None:
        out.append(f"seed={args.seed}")
    return out


def _print(msg: str = "") -> None:
    sys.stdout.write(msg + "\n")
    sys.stdout.flush()


def _note(msg: str) -> None:
    sys.stderr.write(msg + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_make_corpus(args) -> int:
    paths = write_corpus(args.out, seed=args.seed or 0, prose_bytes=args.bytes)
    for name, p in paths.items():
        _print(f"{name}\t{p}")
    return 0


def _run_training(args, only_sft: bool) -> int:
    cfg = load_config(_config_path(args), _overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "effective.toml")
    resume = None
    if only_sft:
        cfg.stages = [s for s in cfg.stages if s.kind == "sft"]
        if not cfg.stages:
            raise UsageError("config has no sft stage")
        for s in cfg.stages:
            if s.init == "best":
                s.init = "previous"
    trainer = Trainer(cfg, out)
    try:
        if only_sft:
            trainer.restore(load_checkpoint(args.checkpoint), full=False)
        elif args.resume:
            resume = load_checkpoint(args.resume)
        ckpt = trainer.run_stages(resume=resume, max_steps=args.max_steps)
    finally:
        trainer.close()
    _print(f"steps {ckpt.step}  tokens {ckpt.tokens_seen}  checkpoint {out / 'final.ckpt'}")
    if trainer.trace:
        last = trainer.trace[-1]
        _print(f"last task_loss {last['task_loss']:.4f}  max_f {last['max_f']:.3f}")
    return 0


def cmd_train(args) -> int:
    return _run_training(args, only_sft=False)


def cmd_sft(args) -> int:
    return _run_training(args, only_sft=True)


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    plan = DecodePlan(
        gen_length=args.len,
        block_size=args.len if args.vanilla else args.block,
        steps_per_block=args.steps,
        policy=args.policy,
        temperature=args.temperature,
        remask=args.remask,
        seed=args.seed or 0,
    )
    _note("plan " + json.dumps({**plan.to_dict(), "vanilla": args.vanilla}))
    prompt = encode_prompt(args.prompt) if args.chat else np.array(list(args.prompt.encode()), dtype=np.int64)
    # positions past the trained context rely on RoPE extrapolation
    model.cfg.max_context = max(model.cfg.max_context, prompt.size + plan.gen_length)
    gen = generate_vanilla if args.vanilla else generate_semi_ar
    out = gen(prompt, plan, model, model.cfg.mask_id)
    _print(decode(truncate_at_eos(out, model.cfg.eos_id)))
    return 0


def cmd_eval(args) -> int:
    if args.n_mc < 1:
        raise UsageError("--n-mc must be at least 1")
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    seq_len = min(args.seq_len, model.cfg.max_context)
    seqs = heldout_sequences(load_documents(args.heldout), seq_len, args.max_seqs)
    est = evaluate_bound(model, seqs, args.n_mc, model.cfg.mask_id, seed=args.seed or 0)
    logk = math.log(model.cfg.vocab)
    _print(f"bound_per_token {est.mean:.6f}  stderr {est.stderr:.6f}  n {est.n}")
    _print(f"uniform_log_K {logk:.6f}  reduction {1 - est.mean / logk:.4f}")
    return 0


def cmd_route_stats(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    seq_len = min(args.seq_len, model.cfg.max_context)
    seqs = heldout_sequences(load_documents(args.corpus), seq_len, args.max_seqs)
    stats = route_stats(model, seqs, seed=args.seed or 0, noised=not args.clean)
    _print(route_table(stats))
    if args.columns:
        write_route_columns(stats, args.columns)
        _note(f"columns written to {args.columns}")
    return 0


def cmd_grad_check(args) -> int:
    if args.config or os.environ.get(ENV_CONFIG):
        cfg = load_config(_config_path(args), _overrides(args)).model
        cfg = ModelConfig(**{**cfg.to_dict(), "max_context": max(cfg.max_context, args.length)})
    else:
        cfg = tiny_config()
    worst = 0.0
    base = args.seed or 0
    for s in range(base, base + args.seeds):
        err = model_grad_check(cfg, seed=s, length=args.length, max_coords=args.max_coords)
        _print(f"seed {s}  max_rel_err {err:.3e}")
        worst = max(worst, err)
    ok = worst < GRAD_TOL
    _print(f"{'PASS' if ok else 'FAIL'}  worst {worst:.3e}  tolerance {GRAD_TOL:.0e}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mdmoe", description="Masked diffusion language model with a sparse MoE transformer.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help=f"TOML config (default: ${ENV_CONFIG})")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key; repeatable")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("make-corpus", help="write the procedural toy corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--bytes", type=int, default=1_000_000, help="size of the main prose corpus")
    common(p, config=False)
    p.set_defaults(func=cmd_make_corpus)

    for name, func, helptext in (("train", cmd_train, "run all configured stages"), ("sft", cmd_sft, "run only the sft stages from a checkpoint")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--out", required=True)
        p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
        if name == "train":
            p.add_argument("--resume", help="continue from a checkpoint written by train")
        else:
            p.add_argument("--checkpoint", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("sample", help="generate text from a checkpoint")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--chat", action="store_true", help="wrap the prompt in the instruction layout")
    p.add_argument("--len", type=int, default=1024)
    p.add_argument("--block", type=int, default=64)
    p.add_argument("--steps", type=int, help="denoising steps per block (default: block size)")
    p.add_argument("--policy", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--remask", choices=("low_confidence", "none"), default="low_confidence")
    p.add_argument("--vanilla", action="store_true", help="decode the whole length as one block")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="Monte-Carlo likelihood bound on held-out text")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--heldout", required=True)
    p.add_argument("--n-mc", type=int, default=4)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--max-seqs", type=int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("route-stats", help="per-layer expert usage report")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--max-seqs", type=int, default=32)
    p.add_argument("--clean", action="store_true", help="route clean text instead of noised text")
    p.add_argument("--columns", help="also write a plot-ready column file here")
    p.set_defaults(func=cmd_route_stats)

    p = sub.add_parser("grad-check", help="finite-difference check of the full training loss")
    common(p)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--length", type=int, default=6)
    p.add_argument("--max-coords", type=int, default=6)
    p.set_defaults(func=cmd_grad_check)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        _note(f"error: {exc}")
        return 2
    except (FileNotFoundError, CheckpointError, TrainingError, NonFiniteError, FloatingPointError, OSError) as exc:
        _note(f"error: {exc}")
        return 1
    except ValueError as exc:
        # argument validation (for example a block size that does not divide the length)
        _note(f"error: {exc}")
        return 2 if args.command == "sample" else 1


if __name__ == "__main__":
    sys.exit(main())
