"""Experiment harness: method matrix, evaluation protocol, and reports.

All eight comparison methods start from one pretrained generalist policy per
seed and share that seed's train/test split, so accuracy differences are
attributable to the method pipeline alone.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distill
from . import policy as pol
from . import ppo as ppo_mod
from .actors import Actor, SamplingActor, play_episode
from .augment import AugmentConfig, augment_dataset
from .distill import SftConfig
from .ppo import PpoConfig
from .retrieval import build_index, make_icl_fn
from .reward import RewardConfig
from .taskenv import (Question, TaskSpec, extract_letter, generate_dataset,
                      serialize_trace, source_spec, target_spec)

METHODS = ("vanilla", "reft", "reft_prm", "sft", "sft_plus",
           "sft_rl_prm", "sft_rl_prm_da", "sft_rl_prm_da_icl")

# id ranges keeping every dataset family disjoint (augmented variants of
# train questions start at 1_000_000, far above all of these)
TRAIN_ID_BASE = 0
TEST_ID_BASE = 500_000
PRETRAIN_TRAIN_ID_BASE = 800_000
PRETRAIN_VAL_ID_BASE = 900_000

# fixed offsets separating the dataset seed streams of one experiment seed
_SOURCE_SEED_OFFSET = 11
_TARGET_SEED_OFFSET = 21
_EVAL_SEED = 7
_SELECT_SEED = 55
_PRETRAIN_VAL_SEED = 99


class HarnessError(RuntimeError):
    """Configuration or pipeline failure in the experiment harness."""


class ThresholdError(HarnessError):
    """A required accuracy threshold was not reached."""


@dataclass
class ExperimentConfig:
    method: str = "vanilla"
    source: TaskSpec = field(default_factory=source_spec)
    target: TaskSpec = field(default_factory=target_spec)
    train_size: int = 100
    test_size: int = 100
    eval_repeats: int = 3
    eval_temperature: float = 0.6
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    reward: RewardConfig = field(
        default_factory=lambda: RewardConfig(placement="per_step"))
    ppo: PpoConfig = field(
        default_factory=lambda: PpoConfig(actor_lr=0.01, critic_lr=0.02,
                                          iterations=2000))
    sft: SftConfig = field(
        default_factory=lambda: SftConfig(learning_rate=0.01, epochs=8,
                                          shuffle_seed=3))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    # policy size for all methods; 16 keeps the RL stages from memorizing
    # the small train pool, which a width of 32 is prone to
    hidden: int = 16
    pretrain_size: int = 200
    pretrain_val_size: int = 100
    pretrain_threshold: float = 0.9
    synth_attempts: int = 64
    mismatch_granularity: int = 2
    # checkpoint selection: every select_every PPO iterations the policy is
    # scored on a held-back slice of the train split and the best snapshot
    # is kept (0 disables and the final iterate is returned)
    select_every: int = 100
    select_repeats: int = 9
    select_holdout: int = 20
    icl_k: int = 3
    # consistent conditioning applies the retrieved context in both the SFT
    # and RL stages; the inconsistent mode drops it from RL, mimicking a
    # pipeline whose prompts differ between stages
    icl_consistent: bool = True
    out_dir: str | None = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise HarnessError(f"unknown method {self.method!r}")
        if min(self.train_size, self.test_size) < 1:
            raise HarnessError("train_size and test_size must be at least 1")
        if not self.seeds:
            raise HarnessError("seeds must be nonempty")
        if self.eval_repeats < 1:
            raise HarnessError("eval_repeats must be at least 1")
        if not 0.0 < self.pretrain_threshold <= 1.0:
            raise HarnessError("pretrain_threshold must lie in (0, 1]")
        if self.select_every < 0:
            raise HarnessError("select_every must be nonnegative")
        if not 0 <= self.select_holdout < self.train_size:
            raise HarnessError("select_holdout must leave train data behind")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_record(self) -> dict:
        rec = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v) and not isinstance(v, type):
                if isinstance(v, (RewardConfig,)):
                    v = v.to_record()
                else:
                    v = dataclasses.asdict(v)
                    v.pop("reference", None)  # params snapshot, not config
            elif isinstance(v, tuple):
                v = list(v)
            elif isinstance(v, Path):
                v = str(v)
            rec[f.name] = v
        return rec


def run_id_for(config_record: Mapping) -> str:
    blob = json.dumps(config_record, sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


@dataclass
class MetricsReport:
    method: str
    run_id: str
    config: dict
    per_seed: dict[int, list[float]]  # seed -> per-repeat accuracies
    timings: dict[int, dict[str, float]]  # seed -> stage -> seconds
    partial: bool = False

    @property
    def all_repeats(self) -> list[float]:
        return [a for seed in sorted(self.per_seed) for a in self.per_seed[seed]]

    @property
    def mean(self) -> float:
        return float(np.mean(self.all_repeats))

    @property
    def stddev(self) -> float:
        return float(np.std(self.all_repeats))

    def seed_mean(self, seed: int) -> float:
        return float(np.mean(self.per_seed[seed]))

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "run_id": self.run_id,
            "config": self.config,
            "per_seed": {str(s): list(map(float, a))
                         for s, a in sorted(self.per_seed.items())},
            "mean": self.mean,
            "stddev": self.stddev,
            "partial": self.partial,
        }


@dataclass
class EvalResult:
    per_repeat: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_repeat))

    @property
    def stddev(self) -> float:
        return float(np.std(self.per_repeat))


def evaluate(p: pol.PolicyParams, testset: Sequence[Question],
             repeats: int = 3, temperature: float = 0.6, seed: int = _EVAL_SEED,
             icl_fn: Callable[[Question], object] | None = None,
             actor: Actor | None = None) -> EvalResult:
    """Sampled accuracy over the test set.

    One trajectory per question per repeat; the parsed letter must match the
    gold letter, and a trace whose last line is not a well-formed answer
    scores zero. A replacement actor (scripted baseline, oracle) may stand
    in for the policy sampler.
    """
    if repeats < 1:
        raise HarnessError("repeats must be at least 1")
    if actor is None:
        actor = SamplingActor(p, temperature, icl_fn)
    per_repeat = []
    for r in range(repeats):
        hits = 0
        for q in testset:
            rng = np.random.default_rng(
                np.random.SeedSequence((seed & 0xFFFFFFFF, r, q.id)))
            ep = play_episode(actor, q, rng)
            letter = extract_letter(serialize_trace(q, ep.final_state))
            hits += int(letter == q.gold_letter)
        per_repeat.append(hits / len(testset))
    return EvalResult(per_repeat)


def _source_datasets(cfg: ExperimentConfig, seed: int):
    data_seed = seed + _SOURCE_SEED_OFFSET
    train = generate_dataset(cfg.source, cfg.pretrain_size, seed=data_seed,
                             id_base=PRETRAIN_TRAIN_ID_BASE)
    val = generate_dataset(cfg.source, cfg.pretrain_val_size, seed=data_seed,
                           id_base=PRETRAIN_VAL_ID_BASE)
    return train, val


def _target_datasets(cfg: ExperimentConfig, seed: int):
    data_seed = seed + _TARGET_SEED_OFFSET
    train = generate_dataset(cfg.target, cfg.train_size, seed=data_seed,
                             id_base=TRAIN_ID_BASE)
    test = generate_dataset(cfg.target, cfg.test_size, seed=data_seed,
                            id_base=TEST_ID_BASE)
    return train, test


def pretrain_vanilla(source: TaskSpec, seed: int,
                     cfg: ExperimentConfig | None = None) -> pol.PolicyParams:
    """Imitation pretraining on oracle source traces until validation
    accuracy clears the threshold; the shared starting policy for a seed."""
    cfg = cfg if cfg is not None else ExperimentConfig(source=source)
    train, val = _source_datasets(cfg.replace(source=source), seed)
    p = pol.init_params(seed, hidden=cfg.hidden)
    ds = distill.oracle_traces(train)
    acc = 0.0
    for round_no in range(40):
        # long rounds take the policy most of the way; short rounds keep the
        # stopping accuracy near the threshold instead of far past it
        epochs = 50 if round_no < 5 else 10
        round_cfg = SftConfig(learning_rate=0.15, epochs=epochs, batch_size=8,
                              shuffle_seed=round_no)
        p, _ = distill.sft_train(p, ds, train, round_cfg)
        acc = evaluate(p, val, repeats=3, temperature=cfg.eval_temperature,
                       seed=_PRETRAIN_VAL_SEED).mean
        if acc >= cfg.pretrain_threshold:
            return p
    raise ThresholdError(
        f"pretraining stalled at source accuracy {acc:.3f} "
        f"(threshold {cfg.pretrain_threshold})")


class _VanillaCache:
    """Per-seed pretrained policies, shared across matrix cells."""

    def __init__(self, directory: Path | None = None):
        self.directory = directory
        self.memory: dict[tuple, pol.PolicyParams] = {}

    def get(self, cfg: ExperimentConfig, seed: int) -> pol.PolicyParams:
        key = (seed, cfg.hidden, cfg.pretrain_size, cfg.pretrain_threshold)
        if key in self.memory:
            return self.memory[key].copy()
        path = None
        if self.directory is not None:
            tag = "-".join(str(x) for x in key)
            path = self.directory / f"vanilla-{tag}.ckpt"
            if path.exists():
                p = pol.load_params(path)
                self.memory[key] = p
                return p.copy()
        p = pretrain_vanilla(cfg.source, seed, cfg)
        self.memory[key] = p
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            pol.save_params(path, p)
        return p.copy()


def _rl_stage(p_start: pol.PolicyParams, pool: Sequence[Question],
              holdout: Sequence[Question], reference: pol.PolicyParams,
              alpha: float, cfg: ExperimentConfig, seed: int,
              icl_fn: Callable[[Question], object] | None = None
              ) -> pol.PolicyParams:
    """PPO over the pool with periodic checkpoint selection on the holdout."""
    rcfg = dataclasses.replace(cfg.reward, alpha=alpha)
    total = cfg.ppo.iterations
    chunk = cfg.select_every if 0 < cfg.select_every < total else total
    pcfg = dataclasses.replace(cfg.ppo, iterations=chunk, reference=reference)
    select = bool(holdout) and 0 < cfg.select_every < total

    def holdout_acc(params):
        return evaluate(params, holdout, repeats=cfg.select_repeats,
                        temperature=cfg.eval_temperature, seed=_SELECT_SEED,
                        icl_fn=icl_fn).mean

    p = p_start
    best_p, best_acc = p, holdout_acc(p) if select else -1.0
    done = 0
    while done < total:
        p, _ = ppo_mod.train_rft(p, pool, rcfg, pcfg, seed=seed + done,
                                 icl_fn=icl_fn)
        done += chunk
        if select:
            acc = holdout_acc(p)
            if acc > best_acc:
                best_acc, best_p = acc, p
    return best_p if select else p


def run_method(cfg: ExperimentConfig,
               vanilla_cache: _VanillaCache | None = None) -> MetricsReport:
    """Execute one method's stage pipeline over all seeds and evaluate."""
    cache = vanilla_cache if vanilla_cache is not None else _VanillaCache(
        Path(cfg.out_dir) if cfg.out_dir else None)
    config_record = cfg.to_record()
    report = MetricsReport(method=cfg.method, run_id=run_id_for(config_record),
                           config=config_record, per_seed={}, timings={})
    try:
        for seed in cfg.seeds:
            accs, timings = _run_method_seed(cfg, seed, cache)
            report.per_seed[seed] = accs
            report.timings[seed] = timings
    except Exception:
        if report.per_seed and cfg.out_dir:
            report.partial = True
            emit_report(report, Path(cfg.out_dir) / cfg.method)
        raise
    if cfg.out_dir:
        emit_report(report, Path(cfg.out_dir) / cfg.method)
    return report


def _run_method_seed(cfg: ExperimentConfig, seed: int, cache: _VanillaCache):
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    p = cache.get(cfg, seed)
    timings["pretrain"] = time.perf_counter() - t0

    train, test = _target_datasets(cfg, seed)
    holdout = train[len(train) - cfg.select_holdout:] if cfg.select_holdout else []
    icl_fn = None
    eval_icl_fn = None
    if cfg.method == "sft_rl_prm_da_icl":
        index = build_index(train)
        icl_fn = make_icl_fn(index, k=cfg.icl_k, exclude_self=True)
        eval_icl_fn = make_icl_fn(index, k=cfg.icl_k, exclude_self=False)

    rl_seed = seed * 10_000 + 31

    if cfg.method in ("sft", "sft_plus", "sft_rl_prm", "sft_rl_prm_da",
                      "sft_rl_prm_da_icl"):
        t0 = time.perf_counter()
        if cfg.method == "sft_plus":
            ds = distill.synthesize_mismatched(cfg.mismatch_granularity, train,
                                               seed=seed + 13)
        else:
            ds = distill.synthesize_traces(
                p, train, max_attempts=cfg.synth_attempts,
                temperature=cfg.eval_temperature, seed=seed + 13,
                icl_fn=icl_fn)
        timings["synthesize"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        p, _ = distill.sft_train(p, ds, train, cfg.sft, icl_fn=icl_fn)
        timings["sft"] = time.perf_counter() - t0

    if cfg.method in ("reft", "reft_prm", "sft_rl_prm", "sft_rl_prm_da",
                      "sft_rl_prm_da_icl"):
        reference = p  # vanilla for the warm-up-free methods, else the SFT policy
        alpha = 1.0 if cfg.method == "reft" else cfg.reward.alpha
        pool: Sequence[Question] = train
        if cfg.method in ("sft_rl_prm_da", "sft_rl_prm_da_icl"):
            pool = augment_dataset(train, cfg.augment, seed=seed + 5)
        t0 = time.perf_counter()
        rl_icl_fn = icl_fn if cfg.icl_consistent else None
        p = _rl_stage(p, pool, holdout, reference, alpha, cfg, rl_seed,
                      icl_fn=rl_icl_fn)
        timings["rl"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    result = evaluate(p, test, repeats=cfg.eval_repeats,
                      temperature=cfg.eval_temperature, seed=_EVAL_SEED,
                      icl_fn=eval_icl_fn)
    timings["evaluate"] = time.perf_counter() - t0
    return result.per_repeat, timings


def run_matrix(cfg: ExperimentConfig, methods: Sequence[str] = METHODS,
               jobs: int = 1) -> dict[str, MetricsReport]:
    """All requested methods on shared per-seed vanilla policies and splits.

    With jobs > 1 matrix cells run as independent worker processes that pick
    the shared pretrained policies up from disk; aggregation stays in this
    process.
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise HarnessError(f"unknown methods {unknown}")
    cache = _VanillaCache(Path(cfg.out_dir) if cfg.out_dir else None)
    if jobs > 1:
        if not cfg.out_dir:
            raise HarnessError("parallel matrix runs need an output directory")
        for seed in cfg.seeds:  # warm the shared checkpoints once, up front
            cache.get(cfg, seed)
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {m: pool.submit(run_method, cfg.replace(method=m))
                       for m in methods}
            return {m: f.result() for m, f in futures.items()}
    out = {}
    for method in methods:
        out[method] = run_method(cfg.replace(method=method), cache)
    return out


def data_scale_sweep(cfg: ExperimentConfig,
                     sizes: Sequence[int] = (25, 50, 100, 200, 400),
                     methods: Sequence[str] = ("reft", "sft_rl_prm",
                                               "sft_rl_prm_da")
                     ) -> list[dict]:
    """Accuracy of the RL-bearing methods as the RL pool grows.

    The SFT warm-up stays fixed on the standard train split; only the RL
    pool is resized. Rows also include the fixed-size SFT baseline.
    """
    if any(s < 1 for s in sizes):
        raise HarnessError("sweep sizes must be positive")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise HarnessError(f"unknown methods {unknown}")
    cache = _VanillaCache(Path(cfg.out_dir) if cfg.out_dir else None)
    rows: list[dict] = []
    for seed in cfg.seeds:
        van = cache.get(cfg, seed)
        train, test = _target_datasets(cfg, seed)
        big = generate_dataset(cfg.target, max(max(sizes), cfg.train_size),
                               seed=seed + _TARGET_SEED_OFFSET,
                               id_base=TRAIN_ID_BASE)
        holdout = (train[len(train) - cfg.select_holdout:]
                   if cfg.select_holdout else [])
        rl_seed = seed * 10_000 + 31

        ds = distill.synthesize_traces(van, train,
                                       max_attempts=cfg.synth_attempts,
                                       temperature=cfg.eval_temperature,
                                       seed=seed + 13)
        p_sft, _ = distill.sft_train(van, ds, train, cfg.sft)
        sft_acc = evaluate(p_sft, test, repeats=cfg.eval_repeats,
                           temperature=cfg.eval_temperature).mean
        rows.append({"method": "sft", "size": cfg.train_size, "seed": seed,
                     "accuracy": sft_acc})

        for size in sizes:
            pool = big[:size]
            for method in methods:
                start, ref = (van, van) if method == "reft" else (p_sft, p_sft)
                alpha = 1.0 if method == "reft" else cfg.reward.alpha
                rl_pool: Sequence[Question] = pool
                if method == "sft_rl_prm_da":
                    rl_pool = augment_dataset(pool, cfg.augment, seed=seed + 5)
                p = _rl_stage(start, rl_pool, holdout, ref, alpha, cfg, rl_seed)
                acc = evaluate(p, test, repeats=cfg.eval_repeats,
                               temperature=cfg.eval_temperature).mean
                rows.append({"method": method, "size": size, "seed": seed,
                             "accuracy": acc})
    if cfg.out_dir:
        write_sweep_csv(rows, Path(cfg.out_dir) / "sweep.csv")
    return rows


def write_sweep_csv(rows: Sequence[Mapping], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["method,size,seed,accuracy"]
    lines += [f"{r['method']},{r['size']},{r['seed']},{r['accuracy']:.6f}"
              for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sweep_csv(path: Path | str) -> list[dict]:
    out = []
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    for line in lines[1:]:
        method, size, seed, acc = line.split(",")
        out.append({"method": method, "size": int(size), "seed": int(seed),
                    "accuracy": float(acc)})
    return out


def emit_report(report: MetricsReport, directory: Path | str) -> list[Path]:
    """Persist a report: metrics records, timings, summary, plot CSV.

    Timings go to their own file so every other artifact is byte-stable
    across re-emission of the same report.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []

    metrics = directory / "metrics.jsonl"
    with open(metrics, "w", encoding="utf-8") as fh:
        head = dict(report.to_record())
        head.pop("per_seed")
        fh.write(json.dumps({"kind": "run", **head}, sort_keys=True) + "\n")
        for seed in sorted(report.per_seed):
            for repeat, acc in enumerate(report.per_seed[seed]):
                fh.write(json.dumps(
                    {"kind": "accuracy", "method": report.method, "seed": seed,
                     "repeat": repeat, "accuracy": acc}, sort_keys=True) + "\n")
    paths.append(metrics)

    timings = directory / "timings.json"
    with open(timings, "w", encoding="utf-8") as fh:
        json.dump({str(s): t for s, t in sorted(report.timings.items())},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths.append(timings)

    csv = directory / "accuracy.csv"
    lines = ["method,seed,repeat,accuracy"]
    for seed in sorted(report.per_seed):
        lines += [f"{report.method},{seed},{i},{a:.6f}"
                  for i, a in enumerate(report.per_seed[seed])]
    csv.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths.append(csv)

    summary = directory / "summary.txt"
    summary.write_text(format_summary({report.method: report}),
                       encoding="utf-8")
    paths.append(summary)
    return paths


def load_report(directory: Path | str) -> MetricsReport:
    directory = Path(directory)
    per_seed: dict[int, list[float]] = {}
    head = None
    with open(directory / "metrics.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["kind"] == "run":
                head = rec
            else:
                per_seed.setdefault(rec["seed"], []).append(rec["accuracy"])
    if head is None:
        raise HarnessError(f"no run record in {directory}/metrics.jsonl")
    with open(directory / "timings.json", encoding="utf-8") as fh:
        timings = {int(s): t for s, t in json.load(fh).items()}
    return MetricsReport(method=head["method"], run_id=head["run_id"],
                         config=head["config"], per_seed=per_seed,
                         timings=timings, partial=head.get("partial", False))


def format_summary(reports: Mapping[str, MetricsReport]) -> str:
    """Method-by-accuracy table over whatever reports are supplied."""
    name_w = max([len(m) for m in reports] + [len("method")])
    lines = [f"{'method':<{name_w}}  {'mean':>6}  {'std':>6}  seeds"]
    for method in METHODS:
        if method not in reports:
            continue
        rep = reports[method]
        seed_means = " ".join(f"{rep.seed_mean(s):.3f}"
                              for s in sorted(rep.per_seed))
        lines.append(f"{method:<{name_w}}  {rep.mean:6.3f}  {rep.stddev:6.3f}"
                     f"  {seed_means}")
    return "\n".join(lines) + "\n"
