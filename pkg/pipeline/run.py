"""Command-line entrypoint, one subcommand per stage of a run.

    python -m pipeline gen-data   [--config run.yaml] [--run-dir DIR]
    python -m pipeline train-sft  [--config run.yaml] [--run-dir DIR]
    python -m pipeline train-spin [--config run.yaml] [--run-dir DIR] [--resume]
    python -m pipeline sample     --checkpoint PATH --condition C [--n N] [--trajectory] [--seed S]
    python -m pipeline eval       --checkpoint PATH [PATH ...]
    python -m pipeline report     RUN_DIR

Every command works inside one run directory, guarded by run.lock, and writes
the resolved config there first. Failures map to exit codes by category:
0 ok, 1 configuration, 2 storage or validation, 3 numerical divergence,
4 a broken internal guarantee.
"""

import argparse
import logging
import re
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from pandera.errors import SchemaError, SchemaErrors

from config import LOG_LEVEL, SCHEMA_VERSION, WORKERS, RunConfig, check, check_paths, emit_config, load_config, resolve
from evaluation.metrics import EvalReport, evaluate, win_counts
from pipeline.load import (
    RunLock,
    load_checkpoint,
    load_dataset,
    read_metrics,
    save_dataset,
    save_samples,
    write_yaml,
)
from pipeline.target import Dataset, TargetSpec, default_target, generate_dataset
from pipeline.train import IterationPlan, OptimizerConfig, RunLog, TrainerOptions, run_spin, train_sft
from report.figures import build_figures
from report.summary import iteration_table, render_summary, sft_table, win_rate_table, write_summary
from spin.diffusion import reverse_sample
from spin.errors import ConfigError, DivergenceError, InvariantError, NonDifferentiableError, StorageError
from spin.losses import EllFunction, SpinLossConfig
from spin.schedule import NoiseSchedule, beta_schedule, from_alphas, from_dict, make_schedule
from spin.score_net import Architecture, ScoreModelParams, init_params

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_STORAGE = 2
EXIT_DIVERGENCE = 3
EXIT_INTERNAL = 4

# Seed streams of the DSM phases, apart from the per-iteration SPIN streams [seed, k]
BASE_STREAM = 10_000
SFT_STREAM = 10_001

ITERATION_CHECKPOINT = re.compile(r"spin-iter(\d+)\.ckpt")


class CliParser(argparse.ArgumentParser):
    """argparse that raises ConfigError instead of exiting, so usage errors get exit code 1."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


@dataclass
class RunContext:
    cfg: RunConfig
    run_dir: Path
    spec: TargetSpec
    schedule: NoiseSchedule
    arch: Architecture
    log: RunLog
    dataset: Dataset | None = None
    written: list[Path] = field(default_factory=list)


# --- setup -----------------------------------------------------------------------


def _target(cfg: RunConfig) -> TargetSpec:
    if cfg.task.target is None:
        return default_target()
    try:
        return TargetSpec.from_dict(cfg.task.target)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"task.target is not a valid target: {e}") from e


def _schedule(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    try:
        if s.alpha is None:
            return make_schedule(s.T, s.shape, s.eta, gamma=s.gamma)
        derived = from_alphas(s.alpha, s.eta, gamma=s.gamma, shape=s.shape)
    except ValueError as e:
        raise ConfigError(f"schedule: {e}") from e
    if s.sigma is None and s.h is None:
        return derived
    payload = derived.to_dict()
    for key in ("sigma", "h"):
        pinned = getattr(s, key)
        if pinned is None:
            continue
        # Pinned arrays must agree with alpha and eta.
        if not np.allclose(pinned, payload[key], rtol=1e-12, atol=1e-15):
            raise ConfigError(f"schedule.{key} does not match the schedule derived from alpha and eta")
        payload[key] = list(pinned)
    return from_dict(payload)


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.run_dir is not None:
        cfg = replace(cfg, output_dir=str(args.run_dir))
    return cfg


def _open_run(cfg: RunConfig, command: str) -> RunContext:
    """Build the task objects, pin the resolved config in the run directory."""
    dataset = load_dataset(cfg.task.dataset_path) if cfg.task.dataset_path else None
    spec = dataset.spec if dataset is not None else _target(cfg)
    if dataset is not None and cfg.task.target is not None and _target(cfg) != dataset.spec:
        raise ConfigError(f"task.target does not match the target stored in {cfg.task.dataset_path}")
    if cfg.task.condition_probs is not None and len(cfg.task.condition_probs) != spec.num_conditions:
        raise ConfigError(f"task.condition_probs needs {spec.num_conditions} entries")
    schedule = _schedule(cfg)
    m = cfg.model
    try:
        arch = Architecture(spec.data_dim, spec.num_conditions, tuple(m.hidden), m.time_dim, m.clamp)
    except ValueError as e:
        raise ConfigError(f"model: {e}") from e

    resolved = resolve(cfg, spec.to_dict(), schedule.to_dict())
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        (run_dir / "resolved_config.yaml").write_text(emit_config(resolved), encoding="utf-8")
    except OSError as e:
        raise StorageError(f"could not write resolved config: {e}") from e
    log = RunLog(run_dir / "metrics.jsonl", run_dir / "checkpoints", schedule.T)
    log.record("config", command=command, name=cfg.name)
    return RunContext(cfg, run_dir, spec, schedule, arch, log, dataset, [run_dir / "resolved_config.yaml"])


def _banner(title: str, ctx: RunContext) -> None:
    s = ctx.schedule
    print(f"{'=' * 60}")
    print(f"spinlab {title}: {ctx.cfg.name}")
    print(f"{'=' * 60}")
    print(f"Task: d={ctx.spec.data_dim}, {ctx.spec.num_conditions} conditions")
    print(f"Schedule: T={s.T} ({s.shape}, eta={s.eta})")
    print(f"Network: hidden {list(ctx.arch.hidden)}, {ctx.arch.num_params:,} parameters")
    print(f"Output: {ctx.run_dir}")
    print()


def _footer(start: float, ctx: RunContext) -> None:
    print()
    print(f"{'=' * 60}")
    print(f"Done in {time.time() - start:.1f}s")
    for path in dict.fromkeys([*ctx.written, *ctx.log.written]):
        print(f"  → {path}")
    print(f"{'=' * 60}")


def _dataset(ctx: RunContext) -> Dataset:
    if ctx.dataset is not None:
        return ctx.dataset
    path = ctx.run_dir / "dataset.bin"
    if path.exists():
        dataset = load_dataset(path)
        if dataset.spec != ctx.spec:
            raise ConfigError(f"{path} was generated for a different target; rerun gen-data")
        return dataset
    return _generate_dataset(ctx)


def _generate_dataset(ctx: RunContext) -> Dataset:
    task = ctx.cfg.task
    dataset = generate_dataset(
        ctx.spec, task.n_records, np.random.default_rng(task.seed), task.seed, task.condition_probs
    )
    path = ctx.run_dir / "dataset.bin"
    save_dataset(dataset, path)
    ctx.written.append(path)
    return dataset


def _load_model(ctx: RunContext, path: str | Path) -> ScoreModelParams:
    params, header = load_checkpoint(path)
    if params.arch != ctx.arch:
        raise ConfigError(f"{path}: architecture {params.arch.to_dict()} does not match the config")
    if header["T"] != ctx.schedule.T:
        raise ConfigError(f"{path}: trained with T={header['T']}, config has T={ctx.schedule.T}")
    return params


def _optimizer(cfg: RunConfig, lr: float, shape: str) -> OptimizerConfig:
    tr = cfg.trainer
    return OptimizerConfig(lr=lr, warmup=tr.warmup, shape=shape, weight_decay=tr.weight_decay)


def _trainer_options(cfg: RunConfig) -> TrainerOptions:
    tr, loss = cfg.trainer, cfg.loss
    return TrainerOptions(
        batch_size=tr.batch_size,
        shards=tr.shards,
        workers=WORKERS,
        checkpoint_every=tr.checkpoint_every,
        real_pairs=loss.real_pairs,
        synthetic_fraction=tr.synthetic_fraction,
        regenerate_every_epoch=tr.regenerate_every_epoch,
        shuffle_pairs=loss.shuffle_pairs,
        shared_t=loss.shared_t,
        test_function_diagnostics=tr.test_function_diagnostics,
    )


def _train_base(ctx: RunContext, dataset: Dataset, options: TrainerOptions) -> ScoreModelParams:
    """The shared starting point of SFT and SPIN: DSM from a fixed init for base_steps."""
    cfg = ctx.cfg
    tr = cfg.trainer
    init = init_params(ctx.arch, np.random.default_rng(cfg.model.init_seed))
    result = train_sft(
        init,
        dataset,
        ctx.schedule,
        _optimizer(cfg, tr.base_lr, tr.sft_lr_shape),
        tr.base_steps,
        np.random.default_rng([tr.seed, BASE_STREAM]),
        replace(options, checkpoint_every=0),
    )
    if result.losses:
        print(f"  Base DSM loss: {result.losses[0]:.4f} → {result.losses[-1]:.4f}")
    ctx.log.checkpoint("base", result.params, kind="base", steps=tr.base_steps)
    return result.params


def _evaluate(ctx: RunContext, model: ScoreModelParams, checkpoint_id: str, phase: str, **fields) -> EvalReport:
    ev = ctx.cfg.eval
    report = evaluate(model, ctx.spec, ctx.schedule, ev.n_samples, ev.seed, ev.best_of, checkpoint_id, WORKERS)
    aggregate = asdict(report.aggregate)
    aggregate.pop("condition")
    ctx.log.record(
        "eval", phase=phase, checkpoint_id=checkpoint_id, seed=ev.seed, best_of=ev.best_of, **fields, **aggregate
    )
    path = ctx.run_dir / "reports" / f"{checkpoint_id}.yaml"
    write_yaml(path, {"schema_version": SCHEMA_VERSION, "phase": phase, **fields, **report.to_dict()})
    ctx.written.append(path)
    return report


def _win_rate(ctx: RunContext, model, opponent, opponent_name: str, iteration: int) -> float:
    ev = ctx.cfg.eval
    wins, ties, losses = win_counts(model, opponent, ctx.spec, ctx.schedule, ev.n_prompts, ev.seed, ev.best_of)
    rate = (wins + 0.5 * ties) / ev.n_prompts
    ctx.log.record(
        "win_rate",
        iteration=iteration,
        opponent=opponent_name,
        win_rate=rate,
        wins=wins,
        ties=ties,
        losses=losses,
        n_prompts=ev.n_prompts,
    )
    return rate


def _describe(report: EvalReport) -> str:
    a = report.aggregate
    return (
        f"energy distance {a.energy_distance:.4f} ± {a.energy_distance_se:.4f}, "
        f"loglik {a.loglik_mean:.3f}, DSM excess {a.dsm_excess:.4f}"
    )


# --- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    start = time.time()
    cfg = _load_run_config(args)
    with RunLock(cfg.run_dir):
        ctx = _open_run(cfg, "gen-data")
        _banner("gen-data", ctx)
        print(f"[1/1] Sampling {cfg.task.n_records:,} records (seed {cfg.task.seed})...")
        dataset = _generate_dataset(ctx)
        counts = ", ".join(f"c{c}={n}" for c, n in enumerate(dataset.condition_counts()))
        print(f"  Per condition: {counts}")
        print("  Dataset schema: PASSED ✓")
        _footer(start, ctx)
    return EXIT_OK


def cmd_train_sft(args) -> int:
    start = time.time()
    cfg = _load_run_config(args)
    check_paths(cfg)
    with RunLock(cfg.run_dir):
        ctx = _open_run(cfg, "train-sft")
        tr, ev = cfg.trainer, cfg.eval
        _banner("train-sft", ctx)
        options = _trainer_options(cfg)

        print("[1/4] Loading dataset...")
        dataset = _dataset(ctx)
        print(f"  {len(dataset):,} records")
        print()

        print(f"[2/4] Training base model ({tr.base_steps:,} DSM steps)...")
        base = _train_base(ctx, dataset, options)
        best = {"energy_distance": np.inf, "step": None}

        def consider(step: int, params: ScoreModelParams) -> None:
            checkpoint_id = "base" if step == 0 else f"sft-step{step:06d}"
            phase = "base" if step == 0 else "sft"
            report = _evaluate(ctx, params, checkpoint_id, phase, step=step, examples_seen=step * tr.batch_size)
            print(f"  step {step:>6}: {_describe(report)}")
            if report.aggregate.energy_distance < best["energy_distance"]:
                best.update(energy_distance=report.aggregate.energy_distance, step=step)
                ctx.log.checkpoint("best", params, kind="sft", step=step)

        if ev.during_training:
            consider(0, base)
        print()

        print(f"[3/4] Supervised fine-tuning ({tr.sft_steps:,} steps, {tr.sft_lr_shape} lr {tr.sft_lr:g})...")
        result = train_sft(
            base,
            dataset,
            ctx.schedule,
            _optimizer(cfg, tr.sft_lr, tr.sft_lr_shape),
            tr.sft_steps,
            np.random.default_rng([tr.seed, SFT_STREAM]),
            options,
            ctx.log,
            consider if ev.during_training else None,
        )
        ctx.log.checkpoint("sft-final", result.params, kind="sft", step=tr.sft_steps)
        if not ev.during_training:
            ctx.log.checkpoint("best", result.params, kind="sft", step=tr.sft_steps)
        print()

        print("[4/4] Selected checkpoint")
        if best["step"] is not None:
            print(f"  best.ckpt = step {best['step']} (energy distance {best['energy_distance']:.4f})")
        else:
            print("  best.ckpt = final parameters (evaluation during training is off)")
        _footer(start, ctx)
    return EXIT_OK


def _latest_iteration(checkpoint_dir: Path) -> int | None:
    matches = (ITERATION_CHECKPOINT.fullmatch(p.name) for p in checkpoint_dir.glob("spin-iter*.ckpt"))
    found = [int(m.group(1)) for m in matches if m]
    return max(found) if found else None


def _sft_opponent(ctx: RunContext) -> ScoreModelParams | None:
    if ctx.cfg.eval.sft_run_dir is None:
        return None
    checkpoints = Path(ctx.cfg.eval.sft_run_dir) / "checkpoints"
    path = checkpoints / "best.ckpt"
    if not path.exists():
        path = checkpoints / "sft-final.ckpt"
    return _load_model(ctx, path)


def cmd_train_spin(args) -> int:
    start = time.time()
    cfg = _load_run_config(args)
    check_paths(cfg)
    with RunLock(cfg.run_dir):
        ctx = _open_run(cfg, "train-spin")
        tr, loss, ev = cfg.trainer, cfg.loss, cfg.eval
        _banner("train-spin", ctx)
        options = _trainer_options(cfg)

        def make_loss(scale: float) -> SpinLossConfig:
            beta = beta_schedule(ctx.schedule, loss.beta_policy, scale)
            return SpinLossConfig(EllFunction(loss.ell), beta, loss.lam, loss.synthetic_pairs, loss.variant)

        try:
            for scale in loss.beta_scales:
                make_loss(scale)
        except ValueError as e:
            raise ConfigError(f"loss: {e}") from e
        plans = [IterationPlan(s, lr, b) for s, lr, b in zip(tr.spin_steps, tr.spin_lr, loss.beta_scales)]
        sft_opponent = _sft_opponent(ctx)

        print("[1/3] Loading dataset...")
        dataset = _dataset(ctx)
        print(f"  {len(dataset):,} records")
        print()

        checkpoints = ctx.run_dir / "checkpoints"
        latest = _latest_iteration(checkpoints) if args.resume else None
        if args.resume and latest is None:
            logger.warning("--resume given but %s holds no iteration checkpoint; starting fresh", checkpoints)
        if latest is not None:
            print(f"[2/3] Resuming after iteration {latest}...")
            logger.warning("resuming %s from spin-iter%d.ckpt", ctx.run_dir, latest)
            base = _load_model(ctx, checkpoints / "base.ckpt")
            init = _load_model(ctx, checkpoints / f"spin-iter{latest}.ckpt")
            first = latest
        else:
            print(f"[2/3] Training base model ({tr.base_steps:,} DSM steps)...")
            base = _train_base(ctx, dataset, options)
            init, first = base, 0
            if ev.during_training:
                report = _evaluate(ctx, base, "spin-iter0", "spin", iteration=0, examples_seen=0)
                print(f"  iteration 0: {_describe(report)}")
        print()

        if first >= tr.iterations:
            print(f"[3/3] All {tr.iterations} iterations already on disk, nothing to do")
            _footer(start, ctx)
            return EXIT_OK

        def after_iteration(k: int, params: ScoreModelParams) -> None:
            if not ev.during_training:
                return
            examples = sum(tr.spin_steps[:k]) * tr.batch_size
            report = _evaluate(ctx, params, f"spin-iter{k}", "spin", iteration=k, examples_seen=examples)
            line = f"  iteration {k}: {_describe(report)}"
            line += f", win rate vs base {_win_rate(ctx, params, base, 'base', k):.3f}"
            if sft_opponent is not None:
                line += f", vs SFT {_win_rate(ctx, params, sft_opponent, 'sft', k):.3f}"
            print(line)

        print(
            f"[3/3] SPIN iterations {first + 1}..{tr.iterations} "
            f"({loss.variant}, ell={loss.ell}, beta {loss.beta_policy} x {loss.beta_scales})..."
        )
        run_spin(
            init,
            dataset,
            ctx.schedule,
            make_loss,
            plans,
            _optimizer(cfg, tr.spin_lr[0], tr.spin_lr_shape),
            tr.seed,
            options,
            ctx.log,
            start=first,
            on_iteration=after_iteration,
        )
        _footer(start, ctx)
    return EXIT_OK


def cmd_sample(args) -> int:
    start = time.time()
    cfg = _load_run_config(args)
    with RunLock(cfg.run_dir):
        ctx = _open_run(cfg, "sample")
        _banner("sample", ctx)
        model = _load_model(ctx, args.checkpoint)
        try:
            ctx.spec.check_condition(args.condition)
        except ValueError as e:
            raise ConfigError(f"--condition: {e}") from e
        seed = cfg.eval.seed if args.seed is None else args.seed
        print(f"[1/1] Sampling {args.n} points on condition {args.condition} (seed {seed})...")
        rng = np.random.default_rng([seed, args.condition])
        traj = reverse_sample(model, args.condition, ctx.schedule, rng, n=args.n)
        stem = f"{Path(args.checkpoint).stem}-c{args.condition}"
        path = ctx.run_dir / "samples" / f"{stem}.csv"
        save_samples(path, traj.x0, traj.labels)
        ctx.written.append(path)
        if args.trajectory:
            path = ctx.run_dir / "samples" / f"{stem}-trajectory.csv"
            save_samples(path, traj.x0, traj.labels, traj.states)
            ctx.written.append(path)
        _footer(start, ctx)
    return EXIT_OK


def cmd_eval(args) -> int:
    start = time.time()
    cfg = _load_run_config(args)
    with RunLock(cfg.run_dir):
        ctx = _open_run(cfg, "eval")
        _banner("eval", ctx)
        n = len(args.checkpoint)
        for i, path in enumerate(args.checkpoint, start=1):
            print(f"[{i}/{n}] Evaluating {path}...")
            report = _evaluate(ctx, _load_model(ctx, path), Path(path).stem, "eval", checkpoint=str(path))
            print(f"  {_describe(report)}")
        _footer(start, ctx)
    return EXIT_OK


def cmd_report(args) -> int:
    start = time.time()
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"run directory {run_dir} does not exist")
    resolved = run_dir / "resolved_config.yaml"
    cfg = load_config(resolved) if resolved.exists() else check(RunConfig())
    with RunLock(run_dir):
        print(f"{'=' * 60}")
        print(f"spinlab report: {run_dir}")
        print(f"{'=' * 60}")
        print()
        print("[1/3] Reading metrics (DuckDB)...")
        metrics = read_metrics(run_dir / "metrics.jsonl")
        sft_metrics = None
        if cfg.eval.sft_run_dir is not None:
            sft_metrics = read_metrics(Path(cfg.eval.sft_run_dir) / "metrics.jsonl")
        print(f"  {len(metrics):,} records")
        print()

        print("[2/3] Rendering plots...")
        iterations = iteration_table(metrics)
        sft = sft_table(metrics if sft_metrics is None or sft_metrics.empty else sft_metrics)
        written = build_figures(run_dir / "plots", iterations, win_rate_table(metrics), sft)
        print(f"  {len(written)} figures")
        print()

        print("[3/3] Writing summary table...")
        written.append(write_summary(run_dir / "summary.txt", render_summary(run_dir.name, metrics, sft_metrics)))

        print()
        print(f"{'=' * 60}")
        print(f"Done in {time.time() - start:.1f}s")
        for path in written:
            print(f"  → {path}")
        print(f"{'=' * 60}")
    return EXIT_OK


# --- entrypoint --------------------------------------------------------------------


def build_parser() -> CliParser:
    parser = CliParser(prog="spinlab", description="Self-play fine-tuning of a toy conditional diffusion model.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler, help_text: str) -> CliParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="run config (YAML); built-in defaults when omitted")
        p.add_argument("--run-dir", type=Path, default=None, help="run directory (overrides output_dir)")
        p.set_defaults(handler=handler)
        return p

    command("gen-data", cmd_gen_data, "sample the training dataset")
    command("train-sft", cmd_train_sft, "train the base model, then the supervised baseline")
    spin = command("train-spin", cmd_train_spin, "train the base model, then K SPIN iterations")
    spin.add_argument("--resume", action="store_true", help="continue after the latest iteration checkpoint")

    sample = command("sample", cmd_sample, "draw samples from a checkpoint")
    sample.add_argument("--checkpoint", type=Path, required=True)
    sample.add_argument("--condition", type=int, required=True)
    sample.add_argument("--n", type=_positive_int, default=100)
    sample.add_argument("--seed", type=int, default=None)
    sample.add_argument("--trajectory", action="store_true", help="also dump every step of the reverse chain")

    ev = command("eval", cmd_eval, "evaluate checkpoints against the target")
    ev.add_argument("--checkpoint", type=Path, nargs="+", required=True)

    report = sub.add_parser("report", help="plots and summary table for a run directory")
    report.add_argument("run_dir", type=Path)
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except ConfigError as e:
        print(f"  CONFIG ERROR: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StorageError, SchemaError, SchemaErrors) as e:
        print(f"  STORAGE/VALIDATION ERROR: {e}", file=sys.stderr)
        return EXIT_STORAGE
    except DivergenceError as e:
        print(f"  DIVERGENCE: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (InvariantError, NonDifferentiableError) as e:
        print(f"  INTERNAL ERROR: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except OSError as e:
        print(f"  STORAGE ERROR: {e}", file=sys.stderr)
        return EXIT_STORAGE
    except ValueError as e:
        print(f"  INVALID INPUT: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
