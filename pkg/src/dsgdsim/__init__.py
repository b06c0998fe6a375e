"""Desk-scale simulator and numerical toolkit for decentralized SGD with
adaptive asynchronous gossip updates."""

from .consensus import (
    ConsensusMatrix,
    MatrixProduct,
    extract_beta,
    metropolis_matrix,
    mixing_deviation_bound,
    phi_product,
    phi_uniform_deviation,
    verify_doubly_stochastic,
)
from .engine import (
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
from .metrics import (
    MetricsRecord,
    MetricsSeries,
    consensus_error,
    count_pathsearch_messages,
    speedup_at_target,
)
from .pathsearch import (
    PathSearchState,
    acceptable_edge,
    commit_edge,
    epoch_complete,
    group_for_finisher,
    reset_epoch,
)
from .problems import (
    DataShard,
    LogisticProblem,
    Problem,
    QuadraticProblem,
    global_objective,
    logistic_problem,
    quadratic_problem,
    stochastic_gradient,
)
from .theory import (
    MixingConstants,
    ParameterRangeError,
    TheoryParams,
    ergodic_grad_bound,
    eta_max,
    linear_speedup_eta,
    linear_speedup_k_threshold,
    mixing_constants,
)
from .topology import Topology, is_connected, neighbors, random_connected_graph

__version__ = "0.1.0"
