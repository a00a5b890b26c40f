"""Per-run metrics records, age-binned error tables, scatter export and run manifests."""

from __future__ import annotations

import csv
import json
import math
import platform
import subprocess
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

import edgequery
from edgequery.units import slots_to_seconds

BIN_START_S = 0.20
BIN_WIDTH_S = 0.05


@dataclass(frozen=True)
class MetricsRecord:
    experiment: str
    policy: str
    source: str  # "simulated" or "trace"
    ids: str  # q value or joined trace ids
    avg_age_slots: float
    mean_error: float
    std_error: float
    query_rate: float
    mean_rtt_s: float = math.nan
    per: float = math.nan

    CSV_FIELDS = ("experiment", "policy", "source", "ids", "avg_age_s", "mean_error", "std_error",
                  "query_rate", "mean_rtt_s", "per")

    @property
    def avg_age_seconds(self) -> float:
        return slots_to_seconds(self.avg_age_slots)

    def row(self) -> dict:
        return {
            "experiment": self.experiment,
            "policy": self.policy,
            "source": self.source,
            "ids": self.ids,
            "avg_age_s": repr(self.avg_age_seconds),
            "mean_error": repr(self.mean_error),
            "std_error": repr(self.std_error),
            "query_rate": repr(self.query_rate),
            "mean_rtt_s": repr(self.mean_rtt_s),
            "per": repr(self.per),
        }

    @classmethod
    def from_row(cls, row: dict) -> "MetricsRecord":
        # stored in seconds; convert back through the single slot duration
        age_s = float(row["avg_age_s"])
        return cls(
            experiment=row["experiment"],
            policy=row["policy"],
            source=row["source"],
            ids=row["ids"],
            avg_age_slots=age_s / slots_to_seconds(1.0),
            mean_error=float(row["mean_error"]),
            std_error=float(row["std_error"]),
            query_rate=float(row["query_rate"]),
            mean_rtt_s=float(row["mean_rtt_s"]),
            per=float(row["per"]),
        )


def records_from_episodes(stats, experiment: str, policy: str) -> list[MetricsRecord]:
    return [
        MetricsRecord(experiment, policy, "simulated", repr(s.q), s.avg_age_slots, s.avg_err, s.err_std,
                      s.query_rate)
        for s in stats
    ]


def records_from_trace(exp, experiment: str) -> list[MetricsRecord]:
    """One record per agent of a trace experiment."""
    ids = "|".join(exp.trace_ids)
    return [
        MetricsRecord(experiment, a.policy, "trace", ids, a.avg_age_slots, a.avg_err, a.err_std, a.query_rate,
                      a.mean_rtt_s, a.per)
        for a in exp.agents
    ]


def write_records(path, records: Iterable[MetricsRecord]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MetricsRecord.CSV_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(r.row())
    return path


def read_records(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        return [MetricsRecord.from_row(r) for r in csv.DictReader(fh)]


# age-binned tables ---------------------------------------------------------------


def age_bin_index(age_s: float, start: float = BIN_START_S, width: float = BIN_WIDTH_S) -> int:
    # rounding guards against 0.25 landing in [0.20, 0.25) through float error
    return math.floor(round((age_s - start) / width, 9))


@dataclass(frozen=True)
class AgeBin:
    lo: float
    hi: float
    source: str
    count: int
    mean: float
    std: float


@dataclass
class AgeBinTable:
    bins: list[AgeBin]
    width: float = BIN_WIDTH_S

    CSV_FIELDS = ("source", "age_lo_s", "age_hi_s", "count", "mean_error", "std_error")

    def lookup(self, source: str) -> dict[float, AgeBin]:
        return {b.lo: b for b in self.bins if b.source == source}

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_FIELDS)
            for b in self.bins:
                w.writerow([b.source, f"{b.lo:.2f}", f"{b.hi:.2f}", b.count, repr(b.mean), repr(b.std)])
        return path


def bin_table(records: Sequence[MetricsRecord], start: float = BIN_START_S,
              width: float = BIN_WIDTH_S) -> AgeBinTable:
    """Mean and population std of per-record mean error, per source and age bin.

    Bins are half-open, anchored at ``start``; empty bins are omitted.
    """
    if not records:
        raise ValueError("bin_table needs at least one record")
    groups: dict[tuple[str, int], list[float]] = {}
    for r in records:
        groups.setdefault((r.source, age_bin_index(r.avg_age_seconds, start, width)), []).append(r.mean_error)
    bins = []
    for (source, k), errs in sorted(groups.items()):
        lo = round(start + k * width, 10)
        bins.append(AgeBin(lo, round(lo + width, 10), source, len(errs), float(np.mean(errs)),
                           float(np.std(errs))))
    return AgeBinTable(bins, width)


@dataclass(frozen=True)
class BinComparison:
    lo: float
    sim_mean: float
    sim_std: float
    trace_mean: float
    within: bool


def compare_bins(table: AgeBinTable, lo: float = 0.25, hi: float = 0.45, n_std: float = 2.0) -> list[BinComparison]:
    """Shared bins in [lo, hi): is the trace mean within ``n_std`` sim stds of the sim mean?"""
    sim, trace = table.lookup("simulated"), table.lookup("trace")
    out = []
    for key in sorted(set(sim) & set(trace)):
        if key < lo - 1e-9 or key >= hi - 1e-9:
            continue
        s, t = sim[key], trace[key]
        out.append(BinComparison(key, s.mean, s.std, t.mean, abs(t.mean - s.mean) <= n_std * s.std))
    return out


def scatter_export(path, records: Iterable[MetricsRecord]) -> Path:
    """One row per episode or per agent-experiment: age (s), error and source label."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["avg_age_s", "avg_error", "source", "policy", "experiment"])
        for r in records:
            w.writerow([repr(r.avg_age_seconds), repr(r.mean_error), r.source, r.policy, r.experiment])
    return path


# statistics ---------------------------------------------------------------------


def sign_test_greater(diffs: Sequence[float]) -> float:
    """One-sided exact sign test p-value for median(diffs) > 0; zeros dropped."""
    pos = sum(d > 0 for d in diffs)
    n = pos + sum(d < 0 for d in diffs)
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(pos, n + 1)) / 2**n


# manifests ----------------------------------------------------------------------


def code_version() -> dict:
    info = {"package": edgequery.__version__, "python": sys.version.split()[0],
            "numpy": np.__version__, "platform": platform.platform()}
    try:
        root = Path(__file__).resolve().parents[2]
        sha = subprocess.run(["git", "rev-parse", "HEAD"], cwd=root, capture_output=True, text=True, timeout=5)
        dirty = subprocess.run(["git", "status", "--porcelain"], cwd=root, capture_output=True, text=True,
                               timeout=5)
        if sha.returncode == 0:
            info["git_commit"] = sha.stdout.strip()
            info["git_dirty"] = bool(dirty.stdout.strip())
    except (OSError, subprocess.SubprocessError):
        pass
    return info


def write_manifest(run_dir, command: str, config: dict, seeds: Sequence[int] | None = None,
                   argv: Sequence[str] | None = None) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv) if argv is not None else None,
        "config": config,
        "seeds": list(seeds) if seeds is not None else None,
        "version": code_version(),
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable))
    return path


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.ndarray, tuple)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not serializable: {type(o).__name__}")
