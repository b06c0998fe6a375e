"""Run instrumentation: per-iteration records, time-to-target speedup, and
communication accounting.

The canonical CSV schema is
``k,sim_time_s,eta,loss,grad_norm_sq,consensus_err,active_workers,messages,bytes,epoch``;
floats are written with round-trip ``repr`` so reruns of the same seeded
config are byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .topology import Topology

__all__ = [
    "MetricsRecord",
    "EpochEdge",
    "MetricsSeries",
    "consensus_error",
    "speedup_at_target",
    "count_pathsearch_messages",
    "series_to_csv",
    "summary_to_csv",
    "epoch_trace_to_csv",
    "ergodic_grad_norm",
]

CSV_HEADER = "k,sim_time_s,eta,loss,grad_norm_sq,consensus_err,active_workers,messages,bytes,epoch"


@dataclass
class MetricsRecord:
    k: int
    sim_time: float
    eta: float
    loss: float
    grad_norm_sq: float
    consensus_err: float
    active_workers: int
    messages: int
    bytes: int
    epoch: int
    # Kept in memory (not in the CSV) so targets other than loss can be
    # evaluated after the fact.
    mean_param: np.ndarray | None = None

    def csv_row(self) -> str:
        return (
            f"{self.k},{self.sim_time!r},{self.eta!r},{self.loss!r},"
            f"{self.grad_norm_sq!r},{self.consensus_err!r},{self.active_workers},"
            f"{self.messages},{self.bytes},{self.epoch}"
        )


@dataclass(frozen=True)
class EpochEdge:
    """One committed edge in the epoch trace."""

    epoch: int
    edge: tuple[int, int]
    sim_time: float
    group: tuple[int, ...]


@dataclass
class MetricsSeries:
    algorithm: str
    seed: int
    config_hash: str
    n_workers: int
    records: list[MetricsRecord] = field(default_factory=list)
    epoch_trace: list[EpochEdge] = field(default_factory=list)
    epoch_lengths: list[int] = field(default_factory=list)
    matrices: list = field(default_factory=list)
    final_params: np.ndarray | None = None
    deadlocked: bool = False

    def append(self, record: MetricsRecord) -> None:
        if self.records and record.k <= self.records[-1].k:
            raise ValueError(f"records must be strictly ordered by k, got {record.k}")
        self.records.append(record)

    def final(self) -> MetricsRecord:
        if not self.records:
            raise ValueError("empty series")
        return self.records[-1]

    def realized_b(self) -> int:
        return max(self.epoch_lengths, default=0)


def consensus_error(workers) -> float:
    """Max over workers of the squared distance to the parameter average."""
    stack = np.asarray(workers, dtype=float)
    if stack.ndim != 2 or stack.shape[0] < 1:
        raise ValueError(f"need a (n_workers, d) stack of vectors, got shape {stack.shape}")
    mean = stack.mean(axis=0)
    diffs = stack - mean
    return float(np.max(np.einsum("jd,jd->j", diffs, diffs)))


class TargetUnreachable(ValueError):
    def __init__(self, which: str, target):
        super().__init__(f"{which} series never reaches target {target}")
        self.which = which


def _time_to_loss(series: MetricsSeries, threshold: float) -> float | None:
    """First simulated time at which the loss trajectory crosses threshold,
    linearly interpolated between the bracketing records."""
    prev = None
    for rec in series.records:
        if rec.loss <= threshold:
            if prev is None or prev.loss == rec.loss:
                return rec.sim_time
            frac = (prev.loss - threshold) / (prev.loss - rec.loss)
            return prev.sim_time + frac * (rec.sim_time - prev.sim_time)
        prev = rec
    return None


def _time_to_accuracy(series: MetricsSeries, threshold: float, problem) -> float | None:
    prev_t, prev_a = None, None
    for rec in series.records:
        if rec.mean_param is None:
            raise ValueError("accuracy targets need mean_param stored on the records")
        acc = problem.heldout_accuracy(rec.mean_param)
        if acc >= threshold:
            if prev_a is None or prev_a == acc:
                return rec.sim_time
            frac = (threshold - prev_a) / (acc - prev_a)
            return prev_t + frac * (rec.sim_time - prev_t)
        prev_t, prev_a = rec.sim_time, acc
    return None


def speedup_at_target(
    series_a: MetricsSeries,
    series_ref: MetricsSeries,
    target: float,
    kind: str = "loss",
    problem=None,
) -> float:
    """(reference time to target) / (candidate time to target); > 1 means the
    candidate run is faster. ``kind`` is "loss" (reach at most) or "accuracy"
    (reach at least, evaluated on the problem's held-out split)."""
    if kind == "loss":
        t_a = _time_to_loss(series_a, target)
        t_ref = _time_to_loss(series_ref, target)
    elif kind == "accuracy":
        if problem is None:
            raise ValueError("accuracy targets need the problem instance")
        t_a = _time_to_accuracy(series_a, target, problem)
        t_ref = _time_to_accuracy(series_ref, target, problem)
    else:
        raise ValueError(f"unknown target kind {kind!r}")
    if t_a is None:
        raise TargetUnreachable("candidate", target)
    if t_ref is None:
        raise TargetUnreachable("reference", target)
    return t_ref / t_a


def count_pathsearch_messages(epoch_trace, topology: Topology) -> int:
    """ID-broadcast messages for the committed edges of a traced epoch.

    Flood model: each committed edge triggers one broadcast origination per
    endpoint, and every worker relays each origination exactly once, so one
    edge costs 2N messages.
    """
    return 2 * topology.n_workers * len(list(epoch_trace))


def ergodic_grad_norm(series: MetricsSeries, k_total: int) -> float:
    """Mean of ||grad F(w_bar(k))||^2 over iterations 0 .. k_total-1."""
    vals = [rec.grad_norm_sq for rec in series.records if rec.k < k_total]
    if len(vals) != k_total:
        raise ValueError(f"series has {len(vals)} records below k={k_total}, expected {k_total}")
    return float(np.mean(vals))


def series_to_csv(series: MetricsSeries) -> str:
    lines = [CSV_HEADER]
    lines.extend(rec.csv_row() for rec in series.records)
    return "\n".join(lines) + "\n"


def epoch_trace_to_csv(series: MetricsSeries) -> str:
    lines = ["epoch,edge_i,edge_j,sim_time_s,group"]
    for entry in series.epoch_trace:
        group = "|".join(str(g) for g in entry.group)
        lines.append(f"{entry.epoch},{entry.edge[0]},{entry.edge[1]},{entry.sim_time!r},{group}")
    return "\n".join(lines) + "\n"


def summary_to_csv(series: MetricsSeries) -> str:
    """Per-run one-line summary next to the full series."""
    final = series.final()
    b_list = "|".join(str(b) for b in series.epoch_lengths)
    header = (
        "algorithm,seed,n_workers,final_k,final_sim_time_s,final_loss,final_grad_norm_sq,"
        "total_messages,total_bytes,max_realized_b,epoch_lengths,deadlocked"
    )
    row = (
        f"{series.algorithm},{series.seed},{series.n_workers},{final.k},{final.sim_time!r},"
        f"{final.loss!r},{final.grad_norm_sq!r},{final.messages},{final.bytes},"
        f"{series.realized_b()},{b_list},{int(series.deadlocked)}"
    )
    return header + "\n" + row + "\n"
