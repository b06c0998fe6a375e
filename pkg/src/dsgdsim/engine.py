"""Discrete-event simulation of decentralized SGD over heterogeneous
simulated compute times, with straggler injection.

Three run modes share the same seeded plumbing:

* ``aau``: adaptive asynchronous gossip. Finished workers wait in a pool;
  the path-search state machine decides which of them form a gossip group
  and when the connectivity epoch resets. One edge commit = one virtual
  iteration.
* ``sync``: full-participation gossip with a global barrier per iteration
  (the iteration cost is the slowest worker's compute time).
* ``async-pairwise``: a finisher immediately averages with one uniformly
  random neighbor and reschedules; the neighbor's in-flight computation
  keeps running against its old snapshot, so staleness is by design.

The event loop is strictly single threaded and everything downstream of the
config seed is deterministic: identical configs give byte-identical metric
series.
"""

from __future__ import annotations

import dataclasses
import hashlib
import heapq
from dataclasses import dataclass, field

import numpy as np

from . import consensus, pathsearch, problems
from .metrics import EpochEdge, MetricsRecord, MetricsSeries
from .topology import Topology, load_edge_list, random_connected_graph

__all__ = [
    "ConfigError",
    "EngineError",
    "ComputeModel",
    "ProblemConfig",
    "RunConfig",
    "WorkerState",
    "local_sgd_step",
    "gossip_commit",
    "sample_compute_time",
    "eta_schedule",
    "build_topology",
    "build_problem",
    "run",
    "run_dsgd_aau",
    "run_sync_dsgd",
    "run_async_pairwise",
]

ALGORITHMS = ("aau", "sync", "async-pairwise")
SCHEDULES = ("constant", "geometric", "linear_speedup")
DISTS = ("constant", "uniform", "exponential")


class ConfigError(ValueError):
    pass


class EngineError(RuntimeError):
    pass


@dataclass(frozen=True)
class ComputeModel:
    """Per-computation duration model in simulated seconds."""

    dist: str = "constant"
    base_time: float = 1.0  # constant value, or mean for exponential
    lo: float = 0.5
    hi: float = 1.5
    straggler_prob: float = 0.0
    slowdown: float = 1.0

    def __post_init__(self):
        if self.dist not in DISTS:
            raise ConfigError(f"base_time_dist must be one of {DISTS}, got {self.dist!r}")
        if self.dist == "uniform":
            if not (0.0 < self.lo <= self.hi):
                raise ConfigError(f"uniform bounds need 0 < lo <= hi, got ({self.lo}, {self.hi})")
        elif self.base_time <= 0.0:
            raise ConfigError(f"base_time must be positive, got {self.base_time}")
        if not (0.0 <= self.straggler_prob <= 1.0):
            raise ConfigError(f"straggler_prob out of range [0,1]: {self.straggler_prob}")
        if self.slowdown < 1.0:
            raise ConfigError(f"slowdown must be >= 1, got {self.slowdown}")


def sample_compute_time(model: ComputeModel, rng: np.random.Generator) -> float:
    """Draw one computation duration; stragglers are slowed multiplicatively."""
    if model.dist == "constant":
        base = model.base_time
    elif model.dist == "uniform":
        base = float(rng.uniform(model.lo, model.hi))
    else:
        base = float(rng.exponential(model.base_time))
        while base <= 0.0:
            base = float(rng.exponential(model.base_time))
    if rng.random() < model.straggler_prob:
        base *= model.slowdown
    return base


@dataclass(frozen=True)
class ProblemConfig:
    kind: str = "quadratic"
    d: int = 10
    noise_sigma: float = 0.0
    center_spread: float = 1.0
    centers: tuple | None = None  # explicit (n, d) nested tuples override the spread
    classes: int = 2
    samples_per_worker: int = 200
    non_iid: bool = False
    reg_lambda: float = 1e-3


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = "aau"
    n_workers: int = 4
    edge_prob: float = 0.3
    topology_file: str | None = None
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    compute: ComputeModel = field(default_factory=ComputeModel)
    batch_size: int = 128
    lr_schedule: str = "geometric"
    eta: float = 0.05
    eta0: float = 0.1
    delta: float = 0.95
    k_budget: int | None = 500
    time_budget: float | None = None
    seed: int = 0
    pathsearch_rule: str = "component"
    init: str = "zeros"
    init_scale: float = 1.0
    comm_latency: float = 0.0
    record_matrices: bool = False

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.n_workers < 2:
            raise ConfigError(f"n_workers must be >= 2, got {self.n_workers}")
        if not (0.0 <= self.edge_prob <= 1.0):
            raise ConfigError(f"edge_prob out of range [0,1]: {self.edge_prob}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}")
        if self.k_budget is None and self.time_budget is None:
            raise ConfigError("at most one stopping criterion may be unlimited: "
                              "set k_budget or time_budget")
        if self.k_budget is not None and self.k_budget < 1:
            raise ConfigError(f"k_budget must be >= 1, got {self.k_budget}")
        if self.time_budget is not None and self.time_budget <= 0.0:
            raise ConfigError(f"time_budget must be positive, got {self.time_budget}")
        if self.lr_schedule == "linear_speedup" and self.k_budget is None:
            raise ConfigError("lr_schedule = linear_speedup needs a k_budget")
        if self.lr_schedule == "constant" and self.eta <= 0.0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.eta0 <= 0.0 or not (0.0 < self.delta <= 1.0):
            raise ConfigError(f"geometric schedule needs eta0 > 0 and delta in (0,1], "
                              f"got eta0={self.eta0}, delta={self.delta}")
        if self.pathsearch_rule not in (pathsearch.COMPONENT_RULE, pathsearch.LITERAL_RULE):
            raise ConfigError(f"pathsearch_rule must be component or literal, "
                              f"got {self.pathsearch_rule!r}")
        if self.init not in ("zeros", "gaussian"):
            raise ConfigError(f"init must be zeros or gaussian, got {self.init!r}")
        if self.comm_latency < 0.0:
            raise ConfigError(f"comm_latency must be >= 0, got {self.comm_latency}")
        if self.problem.kind not in ("quadratic", "logistic"):
            raise ConfigError(f"problem must be quadratic or logistic, got {self.problem.kind!r}")

    def canonical_text(self) -> str:
        flat = _flatten("", dataclasses.asdict(self))
        return "\n".join(f"{k} = {v!r}" for k, v in sorted(flat.items()))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()[:12]


def _flatten(prefix: str, obj) -> dict[str, object]:
    out: dict[str, object] = {}
    for key, value in obj.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(name + ".", value))
        else:
            out[name] = value
    return out


@dataclass
class WorkerState:
    id: int
    w: np.ndarray
    rng: np.random.Generator
    snapshot: np.ndarray | None = None
    inflight_grad: np.ndarray | None = None
    busy_until: float = 0.0
    computations: int = 0
    local_updates: int = 0


def local_sgd_step(w: np.ndarray, g: np.ndarray, eta: float) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    g = np.asarray(g, dtype=float)
    if w.shape != g.shape:
        raise ValueError(f"shape mismatch: w {w.shape} vs g {g.shape}")
    return w - eta * g


def gossip_commit(
    group,
    workers: list[WorkerState],
    matrix: consensus.ConsensusMatrix,
    eta: float,
) -> list[WorkerState]:
    """Apply one gossip round to the group: local SGD step on each member's
    snapshot, then the weighted average under the mixing matrix. Non-members
    are untouched; members' snapshots clear so the caller can schedule their
    next computations."""
    idx = sorted(group)
    gset = set(idx)
    for i, j in matrix.support:
        if i not in gset or j not in gset:
            raise EngineError(f"matrix support edge ({i},{j}) leaves the group {idx}")
    tilde = []
    for j in idx:
        wk = workers[j]
        if wk.inflight_grad is None:
            raise EngineError(f"worker {j} has no in-flight gradient to commit")
        base = wk.snapshot if wk.snapshot is not None else wk.w
        tilde.append(local_sgd_step(base, wk.inflight_grad, eta))
    stack = np.stack(tilde)  # (g, d)
    sub = matrix.entries[np.ix_(idx, idx)]
    mixed = sub.T @ stack
    for pos, j in enumerate(idx):
        wk = workers[j]
        wk.w = mixed[pos]
        wk.snapshot = None
        wk.inflight_grad = None
        wk.local_updates += 1
    return workers


def eta_schedule(config: RunConfig, k: int) -> float:
    if k < 0:
        raise ValueError(f"iteration must be >= 0, got {k}")
    if config.lr_schedule == "constant":
        return config.eta
    if config.lr_schedule == "geometric":
        return config.eta0 * config.delta**k
    return float(np.sqrt(config.n_workers / config.k_budget))


def build_topology(config: RunConfig) -> Topology:
    if config.topology_file is not None:
        g = load_edge_list(config.topology_file)
        if g.n_workers != config.n_workers:
            raise ConfigError(
                f"topology_file has {g.n_workers} workers, config says {config.n_workers}"
            )
        return g
    return random_connected_graph(config.n_workers, config.edge_prob, config.seed)


def build_problem(config: RunConfig) -> problems.Problem:
    pc = config.problem
    if pc.kind == "quadratic":
        if pc.centers is not None:
            centers = np.asarray(pc.centers, dtype=float)
        else:
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA11CE]))
            centers = pc.center_spread * rng.normal(size=(config.n_workers, pc.d))
        return problems.quadratic_problem(config.n_workers, pc.d, centers, pc.noise_sigma)
    return problems.logistic_problem(
        config.n_workers,
        pc.samples_per_worker,
        pc.d,
        pc.classes,
        pc.non_iid,
        seed=config.seed,
        reg_lambda=pc.reg_lambda,
    )


def _init_workers(config: RunConfig, dimension: int) -> list[WorkerState]:
    children = np.random.SeedSequence(config.seed).spawn(config.n_workers + 1)
    init_rng = np.random.default_rng(children[config.n_workers])
    out = []
    for j in range(config.n_workers):
        if config.init == "zeros":
            w0 = np.zeros(dimension)
        else:
            w0 = config.init_scale * init_rng.normal(size=dimension)
        out.append(WorkerState(id=j, w=w0, rng=np.random.default_rng(children[j])))
    return out


class _Recorder:
    """Shared metrics bookkeeping for the three run modes."""

    def __init__(self, config: RunConfig, problem, workers):
        self.problem = problem
        self.workers = workers
        self.messages = 0
        self.bytes = 0
        self.series = MetricsSeries(
            algorithm=config.algorithm,
            seed=config.seed,
            config_hash=config.config_hash(),
            n_workers=config.n_workers,
        )

    def count_exchange(self, participants: int, dimension: int) -> None:
        self.messages += participants
        self.bytes += participants * dimension * 8

    def snap(self, k: int, t: float, eta: float, active: int, epoch: int) -> None:
        stack = np.stack([w.w for w in self.workers])
        wbar = stack.mean(axis=0)
        loss, grad = self.problem.global_objective(wbar)
        from .metrics import consensus_error

        self.series.append(
            MetricsRecord(
                k=k,
                sim_time=t,
                eta=eta,
                loss=loss,
                grad_norm_sq=float(grad @ grad),
                consensus_err=consensus_error(stack),
                active_workers=active,
                messages=self.messages,
                bytes=self.bytes,
                epoch=epoch,
                mean_param=wbar,
            )
        )

    def finish(self) -> MetricsSeries:
        self.series.final_params = np.stack([w.w for w in self.workers])
        return self.series


def _group_matrix(topology: Topology, group) -> consensus.ConsensusMatrix:
    """Metropolis matrix over the group's internal topology edges; each
    member waits for exactly its active neighbors."""
    gset = set(group)
    internal = {e for e in topology.edges if e[0] in gset and e[1] in gset}
    waits = {v: 0 for v in gset}
    for i, j in internal:
        waits[i] += 1
        waits[j] += 1
    m = consensus.metropolis_matrix(topology.n_workers, internal, waits)
    if not consensus.verify_doubly_stochastic(m, consensus.MATRIX_TOL):
        raise EngineError("generated mixing matrix is not doubly stochastic")
    return m


def run_dsgd_aau(
    config: RunConfig,
    *,
    problem: problems.Problem | None = None,
    topology: Topology | None = None,
    compute_time_fn=None,
) -> MetricsSeries:
    """Event loop for adaptive asynchronous gossip.

    A finished worker enters the waiting pool and stops computing; groups
    form whenever the pool contains an acceptable edge (most recent finisher
    scanned first, lexicographic edge tie-break). Group members gossip,
    leave the pool, and start fresh computations; everyone else's in-flight
    gradient stays valid because their own parameter has not moved.
    """
    config.validate()
    if config.algorithm != "aau":
        raise ConfigError(f"run_dsgd_aau needs algorithm = aau, got {config.algorithm!r}")
    topo = topology if topology is not None else build_topology(config)
    prob = problem if problem is not None else build_problem(config)
    if topo.n_workers != config.n_workers:
        raise ConfigError("topology size does not match n_workers")
    workers = _init_workers(config, prob.dimension)
    state = pathsearch.PathSearchState.for_topology(topo, config.pathsearch_rule)
    rec = _Recorder(config, prob, workers)

    heap: list[tuple[float, int]] = []

    def schedule(wk: WorkerState, now: float) -> None:
        wk.snapshot = wk.w.copy()
        wk.inflight_grad = prob.stochastic_gradient(wk.id, wk.snapshot, config.batch_size, wk.rng)
        if compute_time_fn is not None:
            dur = float(compute_time_fn(wk.id, wk.computations))
        else:
            dur = sample_compute_time(config.compute, wk.rng)
        wk.computations += 1
        wk.busy_until = now + dur
        heapq.heappush(heap, (wk.busy_until, wk.id))

    for wk in workers:
        schedule(wk, 0.0)
    rec.snap(k=0, t=0.0, eta=eta_schedule(config, 0), active=0, epoch=0)

    pool: dict[int, int] = {}  # worker id -> arrival index, most recent scanned first
    arrivals = 0
    k = 0
    t = 0.0
    out_of_budget = False

    while heap and not out_of_budget:
        if config.k_budget is not None and k >= config.k_budget:
            break
        ev_time, wid = heapq.heappop(heap)
        if config.time_budget is not None and ev_time > config.time_budget:
            break
        t = ev_time
        pool[wid] = arrivals
        arrivals += 1

        while True:
            found = None
            for cand in sorted(pool, key=lambda x: -pool[x]):
                found = pathsearch.group_for_finisher(state, cand, pool.keys(), topo)
                if found is not None:
                    break
            if found is None:
                break
            group, edge = found
            eta = eta_schedule(config, k)
            matrix = _group_matrix(topo, group)
            gossip_commit(group, workers, matrix, eta)
            k += 1
            pathsearch.commit_edge(state, edge, topo)
            rec.count_exchange(len(group), prob.dimension)
            rec.series.epoch_trace.append(
                EpochEdge(epoch=state.epoch_index, edge=edge, sim_time=t, group=tuple(sorted(group)))
            )
            rec.snap(k=k, t=t, eta=eta, active=len(group), epoch=state.epoch_index)
            if config.record_matrices:
                rec.series.matrices.append(matrix)
            if pathsearch.epoch_complete(state, topo):
                pathsearch.reset_epoch(state, topo)
            for g in group:
                del pool[g]
                schedule(workers[g], t + config.comm_latency)
            if config.k_budget is not None and k >= config.k_budget:
                out_of_budget = True
                break

    series = rec.finish()
    series.epoch_lengths = list(state.epoch_lengths)
    # The literal acceptance rule can strand every worker in the pool with no
    # acceptable edge left; report it instead of spinning.
    series.deadlocked = not heap and len(pool) == config.n_workers and not out_of_budget and (
        config.k_budget is None or k < config.k_budget
    )
    return series


def run_sync_dsgd(
    config: RunConfig,
    *,
    problem: problems.Problem | None = None,
    topology: Topology | None = None,
    compute_time_fn=None,
) -> MetricsSeries:
    """Synchronous baseline: one global barrier per iteration, every worker
    gossips over the full graph and then applies its own gradient."""
    config.validate()
    if config.algorithm != "sync":
        raise ConfigError(f"run_sync_dsgd needs algorithm = sync, got {config.algorithm!r}")
    topo = topology if topology is not None else build_topology(config)
    prob = problem if problem is not None else build_problem(config)
    if topo.n_workers != config.n_workers:
        raise ConfigError("topology size does not match n_workers")
    n = config.n_workers
    workers = _init_workers(config, prob.dimension)
    rec = _Recorder(config, prob, workers)
    waits = {j: topo.degree(j) for j in range(n)}
    matrix = consensus.metropolis_matrix(n, topo.edges, waits)
    if not consensus.verify_doubly_stochastic(matrix, consensus.MATRIX_TOL):
        raise EngineError("generated mixing matrix is not doubly stochastic")
    p = matrix.entries

    rec.snap(k=0, t=0.0, eta=eta_schedule(config, 0), active=0, epoch=0)
    t = 0.0
    k = 0
    while config.k_budget is None or k < config.k_budget:
        if compute_time_fn is not None:
            durations = [float(compute_time_fn(j, k)) for j in range(n)]
        else:
            durations = [sample_compute_time(config.compute, workers[j].rng) for j in range(n)]
        step = max(durations) + config.comm_latency
        if config.time_budget is not None and t + step > config.time_budget:
            break
        t += step
        eta = eta_schedule(config, k)
        grads = np.stack(
            [prob.stochastic_gradient(j, workers[j].w, config.batch_size, workers[j].rng)
             for j in range(n)]
        )
        stack = np.stack([wk.w for wk in workers])
        mixed = p.T @ stack
        new = mixed - eta * grads
        for j, wk in enumerate(workers):
            wk.w = new[j]
            wk.local_updates += 1
        k += 1
        rec.count_exchange(n, prob.dimension)
        rec.snap(k=k, t=t, eta=eta, active=n, epoch=k)
    return rec.finish()


def run_async_pairwise(
    config: RunConfig,
    *,
    problem: problems.Problem | None = None,
    topology: Topology | None = None,
    compute_time_fn=None,
) -> MetricsSeries:
    """Fully asynchronous baseline: a finisher applies its (possibly stale)
    gradient to its current parameter, averages half-half with one uniformly
    random neighbor, and immediately reschedules."""
    config.validate()
    if config.algorithm != "async-pairwise":
        raise ConfigError(
            f"run_async_pairwise needs algorithm = async-pairwise, got {config.algorithm!r}"
        )
    topo = topology if topology is not None else build_topology(config)
    prob = problem if problem is not None else build_problem(config)
    if topo.n_workers != config.n_workers:
        raise ConfigError("topology size does not match n_workers")
    workers = _init_workers(config, prob.dimension)
    rec = _Recorder(config, prob, workers)

    heap: list[tuple[float, int]] = []

    def schedule(wk: WorkerState, now: float) -> None:
        wk.snapshot = wk.w.copy()
        wk.inflight_grad = prob.stochastic_gradient(wk.id, wk.snapshot, config.batch_size, wk.rng)
        if compute_time_fn is not None:
            dur = float(compute_time_fn(wk.id, wk.computations))
        else:
            dur = sample_compute_time(config.compute, wk.rng)
        wk.computations += 1
        wk.busy_until = now + dur
        heapq.heappush(heap, (wk.busy_until, wk.id))

    for wk in workers:
        schedule(wk, 0.0)
    rec.snap(k=0, t=0.0, eta=eta_schedule(config, 0), active=0, epoch=0)

    k = 0
    t = 0.0
    while heap:
        if config.k_budget is not None and k >= config.k_budget:
            break
        ev_time, wid = heapq.heappop(heap)
        if config.time_budget is not None and ev_time > config.time_budget:
            break
        t = ev_time
        wk = workers[wid]
        eta = eta_schedule(config, k)
        wk.w = wk.w - eta * wk.inflight_grad
        nbrs = sorted(topo.neighbors(wid))
        other = workers[nbrs[int(wk.rng.integers(0, len(nbrs)))]]
        avg = 0.5 * (wk.w + other.w)
        wk.w = avg.copy()
        other.w = avg.copy()
        wk.local_updates += 1
        k += 1
        rec.count_exchange(2, prob.dimension)
        rec.snap(k=k, t=t, eta=eta, active=2, epoch=0)
        schedule(wk, t + config.comm_latency)
    return rec.finish()


_RUNNERS = {
    "aau": run_dsgd_aau,
    "sync": run_sync_dsgd,
    "async-pairwise": run_async_pairwise,
}


def run(config: RunConfig, **kwargs) -> MetricsSeries:
    """Dispatch on config.algorithm."""
    config.validate()
    return _RUNNERS[config.algorithm](config, **kwargs)
