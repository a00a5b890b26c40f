"""Command-line entry point: ``edgequery <subcommand> [flags]``.

Every subcommand accepts ``--config file.yaml`` whose keys (flag names with
underscores) provide defaults; explicit flags override them. Outputs go to
``--run-dir`` together with a ``manifest.json`` recording config, seeds and
code version.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from edgequery.estimator import EstimatorConfig, EstimatorModel, PretrainConfig, load_estimator, pretrain, save_estimator
from edgequery.metrics import (
    MetricsRecord,
    bin_table,
    read_records,
    records_from_episodes,
    records_from_trace,
    scatter_export,
    write_manifest,
    write_records,
)
from edgequery.policies import make_policy
from edgequery.sac.agent import RANGE_PRESETS
from edgequery.sim import EpisodeConfig, run_episodes
from edgequery.sim.agecurve import bernoulli_arrival_age_curve, utilization_grid
from edgequery.units import slots_to_seconds

log = logging.getLogger("edgequery")

COMMANDS = ("pretrain", "train", "eval-sim", "eval-trace", "age-curve", "bin-table", "sweep")


class CliError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser, run_dir: bool = True) -> None:
    p.add_argument("--config", type=Path, help="YAML file with default values for this subcommand")
    if run_dir:
        p.add_argument("--run-dir", type=Path, default=Path("runs/latest"))
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgequery", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="warm-start the estimator with q/2 Bernoulli querying")
    _add_common(p)
    p.add_argument("--updates", type=int, default=2000)
    p.add_argument("--episodes-per-round", type=int, default=16)
    p.add_argument("--episode-length", type=int, default=512)
    p.add_argument("--hidden-size", type=int, default=64)
    p.add_argument("--fc-size", type=int, default=64)

    p = sub.add_parser("train", help="train one range model (estimator + actor + critic)")
    _add_common(p)
    p.add_argument("--range", dest="range_id", choices=sorted(RANGE_PRESETS), default="high")
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--episode-length", type=int, default=2000)
    p.add_argument("--n-envs", type=int, default=16)
    p.add_argument("--obs-kind", choices=("qnet", "qnet-xhat", "qnet-lambda"), default="qnet")
    p.add_argument("--estimator", type=Path, help="pretrained estimator checkpoint")
    p.add_argument("--pretrain-updates", type=int, default=200)
    p.add_argument("--updates-per-step", type=int, default=1)
    p.add_argument("--learning-starts", type=int, default=1000)
    p.add_argument("--max-seconds", type=float)
    p.add_argument("--hidden-size", type=int, default=64)
    p.add_argument("--fc-size", type=int, default=64)

    p = sub.add_parser("eval-sim", help="evaluate policies in the queueing simulation")
    _add_common(p)
    p.add_argument("--policy", action="append", required=True, help="policy spec, e.g. 'kind=threshold delta=0.5'")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--episode-length", type=int, default=2000)
    p.add_argument("--q", type=float, help="fixed service probability (overrides --q-low/--q-high)")
    p.add_argument("--q-low", type=float, default=0.05)
    p.add_argument("--q-high", type=float, default=1.0)
    p.add_argument("--warmup", type=int, default=100)

    p = sub.add_parser("eval-trace", help="evaluate policies over trace-shaped links")
    _add_common(p)
    p.add_argument("--policy", action="append", required=True,
                   help="policy spec; give one for all agents or one per agent")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--traces", type=Path, help="directory of <category>/<trace> files")
    src.add_argument("--synthetic", choices=("constrained", "ample"), default=None)
    p.add_argument("--category", default=None, help="trace category subdirectory to draw from")
    p.add_argument("--n-agents", type=int, default=2)
    p.add_argument("--experiments", type=int, default=10)
    p.add_argument("--duration", type=float, default=120.0)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--brtt", choices=("any", "high", "low"), default="any",
                   help="keep only assignments whose probe RTT class matches")

    p = sub.add_parser("age-curve", help="average age vs utilization under Bernoulli arrivals")
    _add_common(p)
    p.add_argument("--q", type=float, action="append", required=True)
    p.add_argument("--slots", type=int, default=100_000)
    p.add_argument("--utilizations", type=float, nargs="+",
                   default=[round(0.05 * k, 2) for k in range(1, 20)])

    p = sub.add_parser("bin-table", help="age-binned mean/std error table from metrics CSVs")
    _add_common(p)
    p.add_argument("--input", type=Path, action="append", required=True)
    p.add_argument("--start", type=float, default=0.20)
    p.add_argument("--width", type=float, default=0.05)

    p = sub.add_parser("sweep", help="run a list of subcommand jobs across worker processes")
    _add_common(p)
    p.add_argument("--jobs", type=list, default=None, help=argparse.SUPPRESS)
    p.add_argument("--workers", type=int, default=max(1, (os.cpu_count() or 1)))
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise CliError(f"unknown command {command!r}")


def _config_path(argv) -> Path | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if tok.startswith("--config="):
            return Path(tok.split("=", 1)[1])
    return None


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    path = _config_path(argv)
    command = next((tok for tok in argv if tok in COMMANDS), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    try:
        cfg = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must be a mapping")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    sp = _subparser(parser, command)
    actions = {a.dest: a for a in sp._actions}
    unknown = sorted(k for k in cfg if k not in actions)
    if unknown:
        raise CliError(f"unknown config keys for {command}: {unknown}")
    for key in cfg:
        # satisfied by the file; explicit flags still override
        actions[key].required = False
    sp.set_defaults(**cfg)
    return parser.parse_args(argv)


def _manifest_config(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "command"}


# subcommands ---------------------------------------------------------------------


def cmd_pretrain(args, argv) -> int:
    run = args.run_dir
    est = EstimatorModel(EstimatorConfig(hidden_size=args.hidden_size, fc_size=args.fc_size, seed=args.seed))
    cfg = PretrainConfig(episodes_per_round=args.episodes_per_round, episode_length=args.episode_length,
                         updates=args.updates, seed=args.seed)
    model, report = pretrain(cfg, est)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    save_estimator(run / "checkpoints" / "estimator.eqck", model, {"updates": args.updates})
    with open(run / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["update", "loss"])
        for i, loss in enumerate(report.losses):
            w.writerow([i, repr(loss)])
    write_manifest(run, "pretrain", _manifest_config(args), [args.seed], argv)
    print(f"pretrained estimator: final loss {report.losses[-1]:.4f} -> {run / 'checkpoints' / 'estimator.eqck'}")
    return 0


def cmd_train(args, argv) -> int:
    from edgequery.sac.train import TrainConfig, train_qnet

    cfg = TrainConfig(
        range_id=args.range_id, episodes=args.episodes, episode_length=args.episode_length, n_envs=args.n_envs,
        seed=args.seed, obs_kind=args.obs_kind, learning_starts=args.learning_starts,
        updates_per_step=args.updates_per_step, pretrain_updates=args.pretrain_updates,
        max_seconds=args.max_seconds,
        hyper={"fc_size": args.fc_size},
        estimator=EstimatorConfig(hidden_size=args.hidden_size, fc_size=args.fc_size, seed=args.seed),
    )
    est = load_estimator(args.estimator) if args.estimator else None
    result = train_qnet(cfg, est, run_dir=args.run_dir)
    write_manifest(args.run_dir, "train", {**_manifest_config(args), "train_config": cfg.to_dict()}, [args.seed],
                   argv)
    if result.bundle.warning:
        print(f"warning: {result.bundle.warning}", file=sys.stderr)
    print(f"trained {args.range_id} model in {result.seconds:.0f} s -> {result.checkpoint_path}")
    return 0


def _summarize(records: list[MetricsRecord]) -> None:
    by_policy: dict[str, list[MetricsRecord]] = {}
    for r in records:
        by_policy.setdefault(r.policy, []).append(r)
    for name, rs in by_policy.items():
        print(f"{name}: n={len(rs)} query_rate={np.mean([r.query_rate for r in rs]):.4f} "
              f"avg_age_s={np.mean([r.avg_age_seconds for r in rs]):.4f} "
              f"mean_error={np.mean([r.mean_error for r in rs]):.4f}")


def cmd_eval_sim(args, argv) -> int:
    if args.q is not None and not 0 < args.q <= 1:
        raise CliError(f"--q must lie in (0, 1], got {args.q}")
    # a fixed q is passed per episode; the range only drives randomized draws
    q_range = EpisodeConfig.q_range if args.q is not None else (args.q_low, args.q_high)
    cfg = EpisodeConfig(q_range=q_range, episode_length=args.episode_length, seed=args.seed, warmup=args.warmup)
    seeds = [args.seed * 1_000_003 + i for i in range(args.episodes)]
    records: list[MetricsRecord] = []
    for spec in args.policy:
        policy = make_policy(spec)
        qs = [args.q] * len(seeds) if args.q is not None else None
        stats = run_episodes(cfg, policy, seeds, qs)
        records.extend(records_from_episodes(stats, f"sim-seed{args.seed}", spec))
    args.run_dir.mkdir(parents=True, exist_ok=True)
    write_records(args.run_dir / "metrics.csv", records)
    scatter_export(args.run_dir / "scatter.csv", records)
    write_manifest(args.run_dir, "eval-sim", _manifest_config(args), seeds, argv)
    _summarize(records)
    return 0


def _link_inputs(run_dir: Path, schedules_dir: Path | None) -> None:
    if schedules_dir is None:
        return
    link = run_dir / "traces"
    if not link.exists():
        link.symlink_to(schedules_dir.resolve(), target_is_directory=True)


def cmd_eval_trace(args, argv) -> int:
    from edgequery.trace import (
        TraceExperimentConfig,
        assign_traces,
        classify_brtt,
        load_trace_pool,
        run_trace_experiment,
        synthetic_trace_pool,
    )

    if len(args.policy) not in (1, args.n_agents):
        raise CliError(f"give 1 or {args.n_agents} policy specs, got {len(args.policy)}")
    if args.traces is not None:
        pools = load_trace_pool(args.traces)
        if not pools:
            raise CliError(f"no trace categories under {args.traces}")
        category = args.category or sorted(pools)[0]
        if category not in pools:
            raise CliError(f"category {category!r} not in {sorted(pools)}")
        pool = pools[category]
    else:
        category = args.synthetic or "constrained"
        pool = synthetic_trace_pool(category, n=4 * args.n_agents, duration_ms=int(args.duration * 1000),
                                    seed=args.seed)
    cfg = TraceExperimentConfig(duration_s=args.duration, warmup_slots=args.warmup)
    specs = args.policy * args.n_agents if len(args.policy) == 1 else args.policy
    records: list[MetricsRecord] = []
    used, attempt = 0, 0
    while used < args.experiments:
        if attempt > 20 * args.experiments:
            raise CliError(f"only {used} assignments matched --brtt {args.brtt}")
        seed = args.seed * 10_007 + attempt
        attempt += 1
        assignment = assign_traces(pool, seed, category, args.n_agents)
        if args.brtt != "any" and classify_brtt(assignment, cfg=cfg, seed=seed) != args.brtt:
            continue
        stats = run_trace_experiment(assignment, [make_policy(s) for s in specs], cfg, seed, policy_names=specs)
        records.extend(records_from_trace(stats, f"trace-{seed}"))
        used += 1
    args.run_dir.mkdir(parents=True, exist_ok=True)
    _link_inputs(args.run_dir, args.traces)
    write_records(args.run_dir / "metrics.csv", records)
    scatter_export(args.run_dir / "scatter.csv", records)
    write_manifest(args.run_dir, "eval-trace", _manifest_config(args), None, argv)
    _summarize(records)
    return 0


def cmd_age_curve(args, argv) -> int:
    bad = [q for q in args.q if not 0 < q <= 1]
    if bad:
        raise CliError(f"q must lie in (0, 1], got {bad}")
    args.run_dir.mkdir(parents=True, exist_ok=True)
    out = args.run_dir / "age_curve.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["q", "utilization", "avg_age_slots", "avg_age_s"])
        for q in args.q:
            for u, age in bernoulli_arrival_age_curve(q, utilization_grid(q, args.utilizations), args.slots,
                                                      args.seed):
                w.writerow([q, repr(u), repr(age), repr(slots_to_seconds(age))])
    write_manifest(args.run_dir, "age-curve", _manifest_config(args), [args.seed], argv)
    print(f"wrote {out}")
    return 0


def cmd_bin_table(args, argv) -> int:
    records = [r for path in args.input for r in read_records(path)]
    if not records:
        raise CliError("no records in the given inputs")
    table = bin_table(records, args.start, args.width)
    args.run_dir.mkdir(parents=True, exist_ok=True)
    table.write_csv(args.run_dir / "bin_table.csv")
    write_manifest(args.run_dir, "bin-table", _manifest_config(args), None, argv)
    for b in table.bins:
        print(f"{b.source:9s} [{b.lo:.2f},{b.hi:.2f}) n={b.count:4d} {b.mean:.3f} +- {b.std:.3f}")
    return 0


def _job_argv(job: dict, run_dir: Path, index: int) -> list[str]:
    if "command" not in job or job["command"] not in COMMANDS or job["command"] == "sweep":
        raise CliError(f"sweep job {index} needs a command among {COMMANDS[:-1]}")
    argv = [job["command"], "--run-dir", str(run_dir / f"job{index:03d}")]
    for key, value in (job.get("args") or {}).items():
        flag = "--" + key.replace("_", "-")
        values = value if isinstance(value, list) else [value]
        for v in values:
            argv += [flag, str(v)]
    return argv


def _run_job(argv: list[str]) -> int:
    return main(argv)


def cmd_sweep(args, argv) -> int:
    jobs = args.jobs or []
    if not jobs:
        raise CliError("sweep needs a config with a non-empty 'jobs' list")
    job_argvs = [_job_argv(j, args.run_dir, i) for i, j in enumerate(jobs)]
    args.run_dir.mkdir(parents=True, exist_ok=True)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            codes = list(pool.map(_run_job, job_argvs))
    else:
        codes = [_run_job(a) for a in job_argvs]
    # single-threaded reduce
    merged: list[MetricsRecord] = []
    for a in job_argvs:
        path = Path(a[2]) / "metrics.csv"
        if path.exists() and a[0] in ("eval-sim", "eval-trace"):
            merged.extend(read_records(path))
    write_records(args.run_dir / "metrics.csv", merged)
    write_manifest(args.run_dir, "sweep", {**_manifest_config(args), "job_argv": job_argvs}, None, argv)
    failed = [i for i, c in enumerate(codes) if c != 0]
    if failed:
        print(f"sweep jobs failed: {failed}", file=sys.stderr)
        return 1
    print(f"sweep: {len(jobs)} jobs, {len(merged)} records -> {args.run_dir / 'metrics.csv'}")
    return 0


HANDLERS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval-sim": cmd_eval_sim,
    "eval-trace": cmd_eval_trace,
    "age-curve": cmd_age_curve,
    "bin-table": cmd_bin_table,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse already printed the diagnostic
        return int(exc.code or 0)
    except CliError as exc:
        print(f"edgequery: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return HANDLERS[args.command](args, argv)
    except (CliError, ValueError, FileNotFoundError) as exc:
        print(f"edgequery {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
