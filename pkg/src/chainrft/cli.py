"""Command-line entry points for datasets, training stages, and experiments.

Exit codes: 0 success, 2 configuration problems, 3 numeric failures,
4 unmet accuracy thresholds.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import distill
from . import harness
from . import policy as pol
from . import ppo as ppo_mod
from .augment import AugmentConfig
from .distill import SftConfig
from .harness import ExperimentConfig, HarnessError, ThresholdError
from .ppo import PpoConfig
from .retrieval import build_index, make_icl_fn
from .reward import RewardConfig
from .taskenv import (TaskSpec, generate_dataset, read_questions, source_spec,
                      target_spec, write_questions)

SEED_ENV_VAR = "CHAINRFT_SEED"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_THRESHOLD = 4


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise HarnessError("config file must hold a JSON object")
    return cfg


def resolve_seed(flag_value: int | None, config: dict, default: int = 0) -> int:
    """Master seed precedence: CLI flag, then environment, then config file."""
    if flag_value is not None:
        return flag_value
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise HarnessError(f"{SEED_ENV_VAR} must be an integer, got {env!r}")
    if "seed" in config:
        return int(config["seed"])
    return default


def _task_spec(name: str, overrides: dict | None = None) -> TaskSpec:
    overrides = dict(overrides or {})
    for key in ("op_kinds", "operand_range", "start_range"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    if "domain_tag" in overrides:
        name = overrides.pop("domain_tag")
    if name == "source":
        return source_spec(**overrides)
    if name == "target":
        return target_spec(**overrides)
    raise HarnessError(f"unknown task {name!r} (expected source or target)")


_SUB_CONFIGS = {"reward": RewardConfig, "ppo": PpoConfig, "sft": SftConfig,
                "augment": AugmentConfig}


def build_experiment_config(config: dict, **flag_overrides) -> ExperimentConfig:
    """Merge config-file fields and CLI flags; flags win."""
    merged = dict(config)
    merged.pop("seed", None)  # consumed by resolve_seed
    for k, v in flag_overrides.items():
        if v is not None:
            merged[k] = v
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise HarnessError(f"unknown config fields {unknown}")
    kwargs: dict = {}
    for key, value in merged.items():
        if key in _SUB_CONFIGS and isinstance(value, dict):
            value = _SUB_CONFIGS[key](**value)
        elif key in ("source", "target") and isinstance(value, dict):
            value = _task_spec(key, value)
        elif key == "seeds":
            value = tuple(int(s) for s in value)
        kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise HarnessError(str(exc))


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise HarnessError(f"seeds must be comma-separated integers, got {text!r}")


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise HarnessError(f"expected comma-separated integers, got {text!r}")


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    config = _load_config(args.config)
    seed = resolve_seed(args.seed, config)
    spec = _task_spec(args.task, config.get(args.task))
    if args.num_steps is not None:
        spec = dataclasses.replace(spec, num_steps=args.num_steps)
    questions = generate_dataset(spec, args.size, seed=seed,
                                 id_base=args.id_base)
    write_questions(args.out, questions)
    print(f"wrote {len(questions)} questions to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = _load_config(args.config)
    seed = resolve_seed(args.seed, config)
    cfg = build_experiment_config(
        config, hidden=args.hidden, pretrain_threshold=args.threshold,
        pretrain_size=args.pretrain_size)
    p = harness.pretrain_vanilla(cfg.source, seed, cfg)
    pol.save_params(args.out, p)
    print(f"wrote pretrained policy to {args.out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    config = _load_config(args.config)
    seed = resolve_seed(args.seed, config)
    questions = read_questions(args.data)
    if args.mismatch_granularity is not None:
        ds = distill.synthesize_mismatched(args.mismatch_granularity,
                                           questions, seed=seed)
    else:
        if not args.ckpt:
            raise HarnessError("--ckpt is required unless "
                               "--mismatch-granularity is given")
        p = pol.load_params(args.ckpt)
        ds = distill.synthesize_traces(p, questions,
                                       max_attempts=args.attempts,
                                       temperature=args.temperature, seed=seed)
    distill.write_process_dataset(args.out, ds)
    fallbacks = sum(r.fallback for r in ds.records)
    print(f"wrote {len(ds.records)} traces ({fallbacks} fallbacks) to {args.out}")
    return EXIT_OK


def cmd_sft(args) -> int:
    config = _load_config(args.config)
    cfg = build_experiment_config(config)
    sft_cfg = cfg.sft
    for name, value in (("learning_rate", args.lr), ("epochs", args.epochs),
                        ("batch_size", args.batch_size),
                        ("shuffle_seed", args.shuffle_seed)):
        if value is not None:
            sft_cfg = dataclasses.replace(sft_cfg, **{name: value})
    p = pol.load_params(args.ckpt)
    ds = distill.read_process_dataset(args.traces)
    questions = read_questions(args.data)
    p, hist = distill.sft_train(p, ds, questions, sft_cfg)
    pol.save_params(args.out, p)
    losses = hist.get("epoch_loss", [])
    tail = f", final loss {losses[-1]:.4f}" if losses else ""
    print(f"wrote fine-tuned policy to {args.out}{tail}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args.config)
    seed = resolve_seed(args.seed, config)
    cfg = build_experiment_config(config)
    rcfg = cfg.reward
    if args.alpha is not None:
        rcfg = dataclasses.replace(rcfg, alpha=args.alpha)
    if args.placement is not None:
        rcfg = dataclasses.replace(rcfg, placement=args.placement)
    pcfg = cfg.ppo
    for name, value in (("iterations", args.iterations),
                        ("actor_lr", args.actor_lr),
                        ("critic_lr", args.critic_lr),
                        ("kl_coeff", args.kl_coeff)):
        if value is not None:
            pcfg = dataclasses.replace(pcfg, **{name: value})
    p = pol.load_params(args.ckpt)
    reference = pol.load_params(args.reference) if args.reference else p.copy()
    pcfg = dataclasses.replace(pcfg, reference=reference)
    questions = read_questions(args.data)
    p, hist = ppo_mod.train_rft(p, questions, rcfg, pcfg, seed=seed)
    pol.save_params(args.out, p)
    if args.history:
        ppo_mod.write_history(args.history, hist)
    last = hist.records[-1] if hist.records else {}
    print(f"wrote policy to {args.out}"
          + (f", final reward {last.get('mean_reward', 0.0):.3f}" if last else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    seed = resolve_seed(args.seed, config, default=harness._EVAL_SEED)
    p = pol.load_params(args.ckpt)
    questions = read_questions(args.data)
    icl_fn = None
    if args.icl_data:
        index = build_index(read_questions(args.icl_data))
        icl_fn = make_icl_fn(index, exclude_self=False)
    result = harness.evaluate(p, questions, repeats=args.repeats,
                              temperature=args.temperature, seed=seed,
                              icl_fn=icl_fn)
    payload = {"per_repeat": result.per_repeat, "mean": result.mean,
               "stddev": result.stddev}
    print(json.dumps(payload, sort_keys=True))
    if args.min_accuracy is not None and result.mean < args.min_accuracy:
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_matrix(args) -> int:
    config = _load_config(args.config)
    seeds = _parse_seeds(args.seeds) if args.seeds else None
    if seeds is None and os.environ.get(SEED_ENV_VAR) is not None:
        seeds = (resolve_seed(None, config),)
    cfg = build_experiment_config(
        config, seeds=seeds, out_dir=args.out, train_size=args.train_size,
        test_size=args.test_size, hidden=args.hidden)
    methods = args.methods.split(",") if args.methods else harness.METHODS
    reports = harness.run_matrix(cfg, methods, jobs=args.jobs)
    summary = harness.format_summary(reports)
    print(summary, end="")
    if cfg.out_dir:
        (Path(cfg.out_dir) / "summary.txt").write_text(summary,
                                                       encoding="utf-8")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load_config(args.config)
    seeds = _parse_seeds(args.seeds) if args.seeds else None
    if seeds is None and os.environ.get(SEED_ENV_VAR) is not None:
        seeds = (resolve_seed(None, config),)
    cfg = build_experiment_config(config, seeds=seeds, out_dir=args.out)
    sizes = _parse_int_list(args.sizes) if args.sizes else (25, 50, 100, 200, 400)
    methods = (args.methods.split(",") if args.methods
               else ("reft", "sft_rl_prm", "sft_rl_prm_da"))
    rows = harness.data_scale_sweep(cfg, sizes=sizes, methods=methods)
    print(f"{len(rows)} sweep rows" + (f" -> {cfg.out_dir}/sweep.csv"
                                       if cfg.out_dir else ""))
    return EXIT_OK


def cmd_report(args) -> int:
    reports = {}
    for d in args.dirs:
        rep = harness.load_report(d)
        reports[rep.method] = rep
        if args.reemit:
            harness.emit_report(rep, d)
    print(harness.format_summary(reports), end="")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chainrft",
        description="Multi-step arithmetic fine-tuning laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help=f"master seed (overrides ${SEED_ENV_VAR})")
        return p

    p = add("gen", cmd_gen, "generate a question dataset")
    p.add_argument("--task", choices=("source", "target"), default="target")
    p.add_argument("--size", type=int, default=100)
    p.add_argument("--num-steps", type=int, default=None)
    p.add_argument("--id-base", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("pretrain", cmd_pretrain, "pretrain the shared starting policy")
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--pretrain-size", type=int, default=None)

    p = add("distill", cmd_distill, "synthesize reasoning traces")
    p.add_argument("--ckpt", help="teacher policy checkpoint")
    p.add_argument("--data", required=True, help="questions file")
    p.add_argument("--out", required=True)
    p.add_argument("--attempts", type=int, default=64)
    p.add_argument("--temperature", type=float, default=0.6)
    p.add_argument("--mismatch-granularity", type=int, default=None,
                   help="use the coarse scripted teacher instead of --ckpt")

    p = add("sft", cmd_sft, "imitation-train a policy on traces")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--shuffle-seed", type=int, default=None)

    p = add("train", cmd_train, "PPO fine-tuning over a question pool")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference", help="KL reference checkpoint (default: --ckpt)")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--placement", choices=("terminal", "per_step"),
                   default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--actor-lr", type=float, default=None)
    p.add_argument("--critic-lr", type=float, default=None)
    p.add_argument("--kl-coeff", type=float, default=None)
    p.add_argument("--history", help="write per-iteration metrics here")

    p = add("eval", cmd_eval, "sampled accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--temperature", type=float, default=0.6)
    p.add_argument("--icl-data", help="questions to index for retrieval context")
    p.add_argument("--min-accuracy", type=float, default=None,
                   help="exit 4 if the mean falls below this")

    p = add("matrix", cmd_matrix, "run the method-comparison matrix")
    p.add_argument("--out", default=None)
    p.add_argument("--seeds", help="comma-separated experiment seeds")
    p.add_argument("--methods", help="comma-separated subset of methods")
    p.add_argument("--train-size", type=int, default=None)
    p.add_argument("--test-size", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)

    p = add("sweep", cmd_sweep, "accuracy versus RL pool size")
    p.add_argument("--out", default=None)
    p.add_argument("--seeds", help="comma-separated experiment seeds")
    p.add_argument("--sizes", help="comma-separated pool sizes")
    p.add_argument("--methods", help="comma-separated subset of methods")

    p = add("report", cmd_report, "summarize emitted reports")
    p.add_argument("dirs", nargs="+", help="report directories")
    p.add_argument("--reemit", action="store_true",
                   help="rewrite each report's files in place")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ThresholdError as exc:
        print(f"threshold not met: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    except pol.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HarnessError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
