import numpy as np
import pytest

from dsgdsim.consensus import metropolis_matrix
from dsgdsim.engine import (
    ComputeModel,
    ConfigError,
    EngineError,
    ProblemConfig,
    RunConfig,
    WorkerState,
    eta_schedule,
    gossip_commit,
    local_sgd_step,
    run,
    run_async_pairwise,
    run_dsgd_aau,
    run_sync_dsgd,
    sample_compute_time,
)
from dsgdsim.metrics import series_to_csv
from dsgdsim.topology import Topology


def worker(j, w, grad=None):
    w = np.asarray(w, dtype=float)
    wk = WorkerState(id=j, w=w.copy(), rng=np.random.default_rng(j))
    wk.snapshot = w.copy()
    wk.inflight_grad = None if grad is None else np.asarray(grad, dtype=float)
    return wk


def quad_config(**kw):
    defaults = dict(
        algorithm="aau",
        n_workers=2,
        edge_prob=0.0,
        problem=ProblemConfig(kind="quadratic", d=1, centers=((0.0,), (2.0,))),
        compute=ComputeModel(),
        lr_schedule="constant",
        eta=0.5,
        k_budget=10,
        seed=1,
    )
    defaults.update(kw)
    return RunConfig(**defaults)


# --- elementary operations ---------------------------------------------------

def test_local_sgd_step():
    out = local_sgd_step(np.array([1.0, 1.0]), np.array([1.0, 0.0]), 0.5)
    assert np.array_equal(out, [0.5, 1.0])
    w = np.array([2.0, 3.0])
    assert np.array_equal(local_sgd_step(w, np.zeros(2), 0.3), w)
    assert np.array_equal(local_sgd_step(w, np.ones(2), 0.0), w)


def test_local_sgd_step_shape_mismatch():
    with pytest.raises(ValueError):
        local_sgd_step(np.zeros(2), np.zeros(3), 0.1)


def test_gossip_commit_pair_average():
    m = metropolis_matrix(2, {(0, 1)}, {0: 1, 1: 1})
    workers = [worker(0, [0.0], grad=[0.0]), worker(1, [2.0], grad=[0.0])]
    gossip_commit({0, 1}, workers, m, eta=0.1)
    assert workers[0].w[0] == 1.0 and workers[1].w[0] == 1.0
    assert workers[0].snapshot is None and workers[0].inflight_grad is None


def test_gossip_commit_singleton_is_local_step():
    m = metropolis_matrix(3, set(), {})
    workers = [worker(0, [1.0, 1.0], grad=[1.0, 0.0]), worker(1, [5.0, 5.0]), worker(2, [6.0, 6.0])]
    gossip_commit({0}, workers, m, eta=0.5)
    assert np.array_equal(workers[0].w, [0.5, 1.0])
    assert np.array_equal(workers[1].w, [5.0, 5.0])


def test_gossip_commit_three_workers_matches_matrix_vector_oracle():
    m = metropolis_matrix(3, {(0, 1), (1, 2)}, {0: 1, 1: 2, 2: 1})
    vals = [np.array([1.0, -2.0]), np.array([0.5, 4.0]), np.array([3.0, 0.0])]
    grads = [np.array([0.2, 0.0]), np.array([0.0, -1.0]), np.array([1.0, 1.0])]
    eta = 0.25
    workers = [worker(j, vals[j], grad=grads[j]) for j in range(3)]
    gossip_commit({0, 1, 2}, workers, m, eta=eta)
    tilde = [vals[j] - eta * grads[j] for j in range(3)]
    for j in range(3):
        expected = sum(m.entries[i, j] * tilde[i] for i in range(3))
        assert np.allclose(workers[j].w, expected, atol=1e-15)


def test_gossip_commit_requires_gradients():
    m = metropolis_matrix(2, {(0, 1)}, {0: 1, 1: 1})
    workers = [worker(0, [0.0], grad=[0.0]), worker(1, [2.0])]
    with pytest.raises(EngineError):
        gossip_commit({0, 1}, workers, m, eta=0.1)


def test_gossip_commit_rejects_support_outside_group():
    m = metropolis_matrix(3, {(0, 1), (1, 2)}, {0: 1, 1: 2, 2: 1})
    workers = [worker(j, [float(j)], grad=[0.0]) for j in range(3)]
    with pytest.raises(EngineError):
        gossip_commit({0, 1}, workers, m, eta=0.1)


def test_gossip_commit_conserves_mass_at_zero_eta():
    m = metropolis_matrix(4, {(0, 1), (1, 2), (2, 3)}, {0: 1, 1: 2, 2: 2, 3: 1})
    rng = np.random.default_rng(3)
    vals = rng.normal(size=(4, 5))
    workers = [worker(j, vals[j], grad=rng.normal(size=5)) for j in range(4)]
    before = sum(wk.w for wk in workers)
    gossip_commit({0, 1, 2, 3}, workers, m, eta=0.0)
    after = sum(wk.w for wk in workers)
    assert np.allclose(before, after, atol=1e-12)


def test_sample_compute_time_constant_and_straggler():
    rng = np.random.default_rng(0)
    model = ComputeModel(dist="constant", base_time=1.0)
    assert all(sample_compute_time(model, rng) == 1.0 for _ in range(5))
    always_slow = ComputeModel(dist="constant", base_time=1.0, straggler_prob=1.0, slowdown=6.0)
    assert all(sample_compute_time(always_slow, rng) == 6.0 for _ in range(5))


def test_sample_compute_time_monte_carlo_mean():
    # 10% stragglers slowed 10x on a unit base: mean 0.9 + 0.1 * 10 = 1.9.
    model = ComputeModel(dist="constant", base_time=1.0, straggler_prob=0.1, slowdown=10.0)
    rng = np.random.default_rng(42)
    draws = 100_000
    mean = sum(sample_compute_time(model, rng) for _ in range(draws)) / draws
    assert abs(mean - 1.9) < 0.05


def test_sample_compute_time_positive():
    rng = np.random.default_rng(1)
    for model in (
        ComputeModel(dist="uniform", lo=0.1, hi=0.2),
        ComputeModel(dist="exponential", base_time=0.5),
    ):
        assert all(sample_compute_time(model, rng) > 0.0 for _ in range(200))


def test_eta_schedule_values():
    geo = quad_config(lr_schedule="geometric", eta0=0.1, delta=0.95)
    assert eta_schedule(geo, 0) == 0.1
    assert eta_schedule(geo, 2) == pytest.approx(0.09025)
    lin = quad_config(n_workers=4, edge_prob=0.5, lr_schedule="linear_speedup", k_budget=400,
                      problem=ProblemConfig(kind="quadratic", d=1))
    assert eta_schedule(lin, 7) == pytest.approx(0.1)
    const = quad_config(lr_schedule="constant", eta=0.3)
    assert eta_schedule(const, 123) == 0.3


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        quad_config(n_workers=1, problem=ProblemConfig(kind="quadratic", d=1)).validate()
    with pytest.raises(ConfigError):
        quad_config(k_budget=None, time_budget=None).validate()
    with pytest.raises(ConfigError):
        quad_config(eta=0.0).validate()
    with pytest.raises(ConfigError):
        ComputeModel(straggler_prob=1.5)
    with pytest.raises(ConfigError):
        quad_config(algorithm="magic").validate()


# --- adaptive asynchronous runs ------------------------------------------------

def test_aau_two_worker_alternation_matches_replay():
    cfg = quad_config()
    series = run_dsgd_aau(cfg)
    # Standalone replay: both workers always finish together, so each virtual
    # iteration is a local step on both followed by the half-half average.
    w0 = w1 = 0.0
    for _ in range(10):
        t0 = w0 - 0.5 * (w0 - 0.0)
        t1 = w1 - 0.5 * (w1 - 2.0)
        w0 = w1 = 0.5 * t0 + 0.5 * t1
    assert series.final().k == 10
    assert series.final_params[0][0] == w0
    assert series.final_params[1][0] == w1
    # Every commit involved both workers and completed an epoch.
    assert series.epoch_lengths == [1] * 10


def test_aau_rejects_single_worker():
    with pytest.raises(ConfigError):
        run_dsgd_aau(quad_config(n_workers=1, problem=ProblemConfig(kind="quadratic", d=1)))


def test_aau_scripted_timeline_first_group():
    # Four heterogeneous workers on a complete graph. Worker 3 finishes
    # first, then worker 0; they gossip as the first pair and their edge is
    # the first recorded one. Workers 1 and 2 pair up next.
    topo = Topology.from_edges(4, [(i, j) for i in range(4) for j in range(i + 1, 4)])
    first = {3: 1.0, 0: 2.0, 1: 3.0, 2: 3.5}

    def scripted(wid, count):
        return first[wid] if count == 0 else 100.0

    cfg = quad_config(
        n_workers=4,
        problem=ProblemConfig(kind="quadratic", d=1, centers=((0.0,), (1.0,), (2.0,), (3.0,))),
        k_budget=2,
    )
    series = run_dsgd_aau(cfg, topology=topo, compute_time_fn=scripted)
    assert series.epoch_trace[0].edge == (0, 3)
    assert series.epoch_trace[0].group == (0, 3)
    assert series.epoch_trace[0].sim_time == 2.0
    assert series.epoch_trace[1].edge == (1, 2)
    assert series.epoch_trace[1].group == (1, 2)


def test_aau_noise_free_consensus_invariant():
    centers = tuple((0.5,) * 6 for _ in range(4))
    cfg = quad_config(
        n_workers=4,
        edge_prob=0.5,
        problem=ProblemConfig(kind="quadratic", d=6, centers=centers),
        compute=ComputeModel(dist="uniform", lo=0.5, hi=1.5),
        eta=0.05,
        k_budget=3000,
        seed=5,
    )
    series = run_dsgd_aau(cfg)
    assert series.final().consensus_err < 1e-8
    assert series.final().grad_norm_sq < 1e-6


def test_aau_deterministic_byte_identical():
    cfg = quad_config(
        n_workers=5,
        edge_prob=0.4,
        problem=ProblemConfig(kind="quadratic", d=3, noise_sigma=0.2),
        compute=ComputeModel(dist="exponential", base_time=1.0, straggler_prob=0.2, slowdown=4.0),
        k_budget=200,
        seed=9,
    )
    a = series_to_csv(run_dsgd_aau(cfg))
    b = series_to_csv(run_dsgd_aau(cfg))
    assert a == b


def test_aau_staleness_gap_within_epoch():
    cfg = quad_config(
        n_workers=6,
        edge_prob=0.4,
        problem=ProblemConfig(kind="quadratic", d=2, noise_sigma=0.1),
        compute=ComputeModel(dist="uniform", lo=0.5, hi=1.5, straggler_prob=0.1, slowdown=10.0),
        k_budget=400,
        seed=17,
    )
    series = run_dsgd_aau(cfg)
    last: dict[int, tuple[int, int]] = {}
    for idx, entry in enumerate(series.epoch_trace):
        k = idx + 1
        for member in entry.group:
            if member in last:
                prev_k, prev_epoch = last[member]
                if prev_epoch == entry.epoch:
                    assert k - prev_k <= cfg.n_workers - 1
            last[member] = (k, entry.epoch)


def test_aau_literal_rule_can_deadlock():
    topo = Topology.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    first = {0: 1.0, 1: 1.5, 2: 2.0, 3: 2.5}

    def scripted(wid, count):
        return first[wid] if count == 0 else 3.0

    cfg = quad_config(
        n_workers=4,
        pathsearch_rule="literal",
        problem=ProblemConfig(kind="quadratic", d=1, centers=((0.0,), (1.0,), (2.0,), (3.0,))),
        k_budget=50,
    )
    series = run_dsgd_aau(cfg, topology=topo, compute_time_fn=scripted)
    # (0,1) then (2,3) commit; afterwards every vertex is known so the
    # bridging edge (1,2) is rejected by the literal rule and the run stalls.
    assert series.deadlocked
    assert series.final().k == 2
    cfg_component = quad_config(
        n_workers=4,
        pathsearch_rule="component",
        problem=ProblemConfig(kind="quadratic", d=1, centers=((0.0,), (1.0,), (2.0,), (3.0,))),
        k_budget=50,
    )
    ok = run_dsgd_aau(cfg_component, topology=topo, compute_time_fn=scripted)
    assert not ok.deadlocked
    assert ok.final().k == 50


# --- synchronous runs ----------------------------------------------------------

def test_sync_converges_to_center_mean():
    cfg = quad_config(algorithm="sync", eta=0.2, k_budget=300)
    series = run_sync_dsgd(cfg)
    assert series.final().grad_norm_sq < 1e-12
    assert abs(series.final().mean_param[0] - 1.0) < 1e-6


def test_sync_constant_times_accumulate_exactly():
    cfg = quad_config(algorithm="sync", k_budget=7)
    series = run_sync_dsgd(cfg)
    times = [rec.sim_time for rec in series.records]
    assert times == [float(i) for i in range(8)]


def test_sync_permanent_straggler_costs_every_barrier():
    def scripted(wid, k):
        return 10.0 if wid == 0 else 1.0

    cfg = quad_config(algorithm="sync", n_workers=4, edge_prob=0.5, k_budget=5,
                      problem=ProblemConfig(kind="quadratic", d=1))
    series = run_sync_dsgd(cfg, compute_time_fn=scripted)
    assert series.final().sim_time == 50.0


def test_sync_mass_conserved_with_zero_gradients():
    centers = ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0))
    cfg = quad_config(
        algorithm="sync",
        n_workers=3,
        edge_prob=1.0,
        problem=ProblemConfig(kind="quadratic", d=2, centers=centers),
        init="gaussian",
        k_budget=20,
        eta=0.5,
    )
    series = run_sync_dsgd(cfg)
    # All-equal centers at the initial mean make every gradient pull toward
    # zero; with eta > 0 mass shrinks, so rerun with the gradient disabled
    # via eta -> tiny to check pure mixing preserves the average.
    tiny = quad_config(
        algorithm="sync",
        n_workers=3,
        edge_prob=1.0,
        problem=ProblemConfig(kind="quadratic", d=2, centers=centers),
        init="gaussian",
        k_budget=20,
        eta=1e-300,
    )
    s2 = run_sync_dsgd(tiny)
    first = s2.records[0].mean_param
    lastp = s2.records[-1].mean_param
    assert np.allclose(first, lastp, atol=1e-12)
    assert series.final().consensus_err < 1e-6


# --- asynchronous pairwise runs -------------------------------------------------

def test_async_pairwise_converges_with_diminishing_eta():
    cfg = quad_config(
        algorithm="async-pairwise",
        lr_schedule="geometric",
        eta0=0.1,
        delta=0.998,
        k_budget=8000,
    )
    series = run_async_pairwise(cfg)
    assert abs(series.final().mean_param[0] - 1.0) < 1e-6


def test_async_pairwise_bitwise_deterministic():
    cfg = quad_config(
        algorithm="async-pairwise",
        n_workers=4,
        edge_prob=0.6,
        problem=ProblemConfig(kind="quadratic", d=2, noise_sigma=0.3),
        compute=ComputeModel(dist="constant", base_time=1.0, straggler_prob=0.3, slowdown=5.0),
        k_budget=300,
        seed=23,
    )
    assert series_to_csv(run_async_pairwise(cfg)) == series_to_csv(run_async_pairwise(cfg))


def test_async_records_pair_participation():
    cfg = quad_config(algorithm="async-pairwise", k_budget=5)
    series = run_async_pairwise(cfg)
    assert all(rec.active_workers == 2 for rec in series.records[1:])
    d = 1
    assert series.final().bytes == 5 * 2 * d * 8


def test_run_dispatches_on_algorithm():
    series = run(quad_config(algorithm="sync", k_budget=3))
    assert series.algorithm == "sync"
    with pytest.raises(ConfigError):
        run_sync_dsgd(quad_config(algorithm="aau"))
