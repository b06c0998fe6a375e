"""Optimization objectives with per-worker local functions and stochastic
gradient oracles.

Two families cover the desk-scale experiments:

* quadratic: F_j(w) = 0.5 ||w - c_j||^2 with optional isotropic gradient
  noise. Smoothness, noise level and heterogeneity are exact closed forms,
  which makes it the instance of choice for convergence-theory checks.
* logistic: softmax cross-entropy with L2 regularization on synthetic
  Gaussian class-conditional data, with i.i.d. or label-sorted non-i.i.d.
  shards and a held-out split for accuracy targets.

Gradient oracles take an explicit numpy Generator so concurrent workers
never share mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DataShard",
    "Problem",
    "QuadraticProblem",
    "LogisticProblem",
    "quadratic_problem",
    "logistic_problem",
    "stochastic_gradient",
    "global_objective",
    "measure_varsigma_sq",
    "shards_to_csv",
]


@dataclass(frozen=True)
class DataShard:
    """One worker's local dataset."""

    worker_id: int
    features: np.ndarray
    labels: np.ndarray
    class_counts: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.features.shape[0]


class Problem:
    """Common interface for the engine and the test harnesses."""

    n_workers: int
    dimension: int
    lipschitz: float
    iid: bool

    def local_loss(self, j: int, w: np.ndarray) -> float:
        raise NotImplementedError

    def local_gradient(self, j: int, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def stochastic_gradient(
        self, j: int, w: np.ndarray, batch_size: int, rng: np.random.Generator
    ) -> np.ndarray:
        raise NotImplementedError

    def global_objective(self, w: np.ndarray) -> tuple[float, np.ndarray]:
        """Exact average of local losses and local gradients."""
        w = np.asarray(w, dtype=float)
        loss = 0.0
        grad = np.zeros_like(w)
        for j in range(self.n_workers):
            loss += self.local_loss(j, w)
            grad += self.local_gradient(j, w)
        return loss / self.n_workers, grad / self.n_workers

    def optimum(self) -> np.ndarray | None:
        return None

    def _check_dim(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dimension,):
            raise ValueError(f"expected parameter of shape ({self.dimension},), got {w.shape}")
        return w


class QuadraticProblem(Problem):
    """Per-worker quadratics around centers c_j; global optimum is mean(c)."""

    def __init__(self, centers: np.ndarray, noise_sigma: float):
        centers = np.asarray(centers, dtype=float)
        if centers.ndim != 2:
            raise ValueError(f"centers must be a (n_workers, d) array, got shape {centers.shape}")
        if noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
        self.centers = centers
        self.noise_sigma = float(noise_sigma)
        self.n_workers, self.dimension = centers.shape
        self.lipschitz = 1.0
        self._mean_center = centers.mean(axis=0)
        spread = centers - self._mean_center
        # Gradient heterogeneity is constant in w for quadratics.
        self.varsigma_sq = float(np.max(np.einsum("jd,jd->j", spread, spread))) if self.n_workers else 0.0
        self.sigma_l_sq = self.dimension * self.noise_sigma**2
        self.iid = self.varsigma_sq == 0.0

    def local_loss(self, j, w):
        w = self._check_dim(w)
        diff = w - self.centers[j]
        return 0.5 * float(diff @ diff)

    def local_gradient(self, j, w):
        w = self._check_dim(w)
        return w - self.centers[j]

    def stochastic_gradient(self, j, w, batch_size, rng):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        g = self.local_gradient(j, w)
        if self.noise_sigma > 0.0:
            g = g + rng.normal(0.0, self.noise_sigma, size=self.dimension)
        return g

    def global_objective(self, w):
        w = self._check_dim(w)
        diffs = w - self.centers
        loss = 0.5 * float(np.einsum("jd,jd->j", diffs, diffs).mean())
        return loss, w - self._mean_center

    def optimum(self):
        return self._mean_center.copy()

    def optimal_value(self) -> float:
        return self.global_objective(self._mean_center)[0]


class LogisticProblem(Problem):
    """Regularized softmax cross-entropy on synthetic Gaussian class data.

    The parameter vector is the row-major flattening of the (classes x d)
    weight matrix. The regularizer makes the objective strongly convex, so
    the optimum found by the full-gradient solver is unique.
    """

    def __init__(
        self,
        shards: list[DataShard],
        heldout: DataShard,
        n_features: int,
        classes: int,
        reg_lambda: float,
        iid: bool,
    ):
        if not shards:
            raise ValueError("need at least one shard")
        self.shards = shards
        self.heldout = heldout
        self.n_features = n_features
        self.classes = classes
        self.reg_lambda = float(reg_lambda)
        self.iid = iid
        self.n_workers = len(shards)
        self.dimension = classes * n_features
        self._x_all = np.concatenate([s.features for s in shards], axis=0)
        self._y_all = np.concatenate([s.labels for s in shards], axis=0)
        # Softmax Hessian norm is at most half the feature second moment.
        per_worker = [
            0.5 * float(np.einsum("md,md->", s.features, s.features)) / max(len(s), 1)
            for s in shards
        ]
        self.lipschitz = max(per_worker) + 2.0 * self.reg_lambda
        self._w_star: np.ndarray | None = None

    def _weights(self, w: np.ndarray) -> np.ndarray:
        return self._check_dim(w).reshape(self.classes, self.n_features)

    def _ce_loss_grad(self, wm, x, y) -> tuple[float, np.ndarray]:
        logits = x @ wm.T
        shift = logits - logits.max(axis=1, keepdims=True)
        expl = np.exp(shift)
        norm = expl.sum(axis=1, keepdims=True)
        logp = shift - np.log(norm)
        loss = -float(logp[np.arange(len(y)), y].mean())
        probs = expl / norm
        probs[np.arange(len(y)), y] -= 1.0
        grad = probs.T @ x / len(y)
        return loss, grad

    def local_loss(self, j, w):
        wm = self._weights(w)
        s = self.shards[j]
        loss, _ = self._ce_loss_grad(wm, s.features, s.labels)
        return loss + self.reg_lambda * float(np.sum(wm * wm))

    def local_gradient(self, j, w):
        wm = self._weights(w)
        s = self.shards[j]
        _, grad = self._ce_loss_grad(wm, s.features, s.labels)
        return (grad + 2.0 * self.reg_lambda * wm).ravel()

    def stochastic_gradient(self, j, w, batch_size, rng):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        wm = self._weights(w)
        s = self.shards[j]
        m = len(s)
        if m == 0:
            raise ValueError(f"worker {j} has an empty shard")
        # Uniform without replacement; fall back to with-replacement when the
        # requested batch exceeds the shard.
        idx = rng.choice(m, size=batch_size, replace=batch_size > m)
        _, grad = self._ce_loss_grad(wm, s.features[idx], s.labels[idx])
        return (grad + 2.0 * self.reg_lambda * wm).ravel()

    def global_objective(self, w):
        # All shards have equal size, so the global average equals the
        # cross-entropy over the pooled samples plus the regularizer.
        wm = self._weights(w)
        loss, grad = self._ce_loss_grad(wm, self._x_all, self._y_all)
        loss += self.reg_lambda * float(np.sum(wm * wm))
        return loss, (grad + 2.0 * self.reg_lambda * wm).ravel()

    def gradient_variance(self, j: int, w: np.ndarray, batch_size: int) -> float:
        """Exact E||g_j - grad F_j||^2 for the mini-batch sampling design."""
        wm = self._weights(w)
        s = self.shards[j]
        m = len(s)
        logits = s.features @ wm.T
        shift = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shift)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(m), s.labels] -= 1.0
        grads = probs[:, :, None] * s.features[:, None, :]
        mean = grads.mean(axis=0)
        scatter = float(np.sum((grads - mean) ** 2) / m)
        b = batch_size
        if b >= m:
            return scatter / b  # with-replacement sampling
        return scatter / b * (m - b) / (m - 1)  # finite population correction

    def heldout_accuracy(self, w: np.ndarray) -> float:
        wm = self._weights(w)
        pred = np.argmax(self.heldout.features @ wm.T, axis=1)
        return float(np.mean(pred == self.heldout.labels))

    def optimum(self, tol: float = 1e-10, max_iter: int = 200_000) -> np.ndarray:
        """Full-gradient descent (with strong-convexity momentum) to the
        unique minimizer; cached after the first solve."""
        if self._w_star is not None:
            return self._w_star.copy()
        lip = self.lipschitz
        mu = 2.0 * self.reg_lambda
        kappa = lip / mu
        momentum = (np.sqrt(kappa) - 1.0) / (np.sqrt(kappa) + 1.0)
        x = np.zeros(self.dimension)
        y = x.copy()
        for _ in range(max_iter):
            _, g = self.global_objective(y)
            x_next = y - g / lip
            y = x_next + momentum * (x_next - x)
            x = x_next
            if np.linalg.norm(self.global_objective(x)[1]) <= tol:
                break
        self._w_star = x
        return x.copy()


def quadratic_problem(n: int, d: int, centers, noise_sigma: float) -> QuadraticProblem:
    """Quadratic instance with explicit per-worker centers."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    centers = np.asarray(centers, dtype=float)
    if centers.shape != (n, d):
        raise ValueError(f"centers must have shape ({n}, {d}), got {centers.shape}")
    return QuadraticProblem(centers=centers, noise_sigma=noise_sigma)


def logistic_problem(
    n: int,
    samples_per_worker: int,
    d: int,
    classes: int,
    non_iid: bool,
    seed: int,
    reg_lambda: float = 1e-3,
    classes_per_worker: int | None = None,
    class_sep: float = 2.0,
) -> LogisticProblem:
    """Synthesize a logistic instance and partition it across workers.

    i.i.d. mode shuffles the pooled samples uniformly. Non-i.i.d. mode sorts
    by label, splits every class into equal pieces, and deals each worker
    ``classes_per_worker`` pieces (default: half the classes), so shards have
    skewed class histograms while still partitioning the dataset exactly.
    A class-balanced held-out split (20% of all generated data) accompanies
    the shards for accuracy targets.
    """
    if classes < 2:
        raise ValueError(f"classes must be >= 2, got {classes}")
    if n < 1 or samples_per_worker < 1:
        raise ValueError("need n >= 1 and samples_per_worker >= 1")
    total = n * samples_per_worker
    if total % classes != 0:
        raise ValueError(
            f"n * samples_per_worker = {total} is not divisible by classes = {classes}"
        )
    per_class = total // classes
    if per_class % 4 != 0:
        raise ValueError(f"per-class count {per_class} must be divisible by 4 for the 20% held-out split")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10615]))
    means = rng.normal(size=(classes, d))
    means *= class_sep / np.linalg.norm(means, axis=1, keepdims=True)
    feats = np.concatenate([means[c] + rng.normal(size=(per_class, d)) for c in range(classes)])
    labels = np.repeat(np.arange(classes), per_class)
    held_per_class = per_class // 4
    held_x = np.concatenate([means[c] + rng.normal(size=(held_per_class, d)) for c in range(classes)])
    held_y = np.repeat(np.arange(classes), held_per_class)
    heldout = DataShard(-1, held_x, held_y, _class_counts(held_y))

    if non_iid:
        assign = _non_iid_assignment(n, classes, per_class, classes_per_worker, rng)
    else:
        perm = rng.permutation(total)
        assign = [perm[j * samples_per_worker : (j + 1) * samples_per_worker] for j in range(n)]

    shards = [
        DataShard(j, feats[idx], labels[idx], _class_counts(labels[idx]))
        for j, idx in enumerate(assign)
    ]
    return LogisticProblem(
        shards=shards,
        heldout=heldout,
        n_features=d,
        classes=classes,
        reg_lambda=reg_lambda,
        iid=not non_iid,
    )


def _class_counts(labels: np.ndarray) -> dict[int, int]:
    vals, counts = np.unique(labels, return_counts=True)
    return {int(v): int(c) for v, c in zip(vals, counts)}


def _non_iid_assignment(n, classes, per_class, classes_per_worker, rng) -> list[np.ndarray]:
    """Label-sorted split: equal pieces per class, dealt randomly to workers."""
    cpw = classes_per_worker if classes_per_worker is not None else max(1, classes // 2)
    if (n * cpw) % classes != 0:
        raise ValueError(
            f"classes_per_worker = {cpw} does not tile {classes} classes over {n} workers"
        )
    pieces_per_class = n * cpw // classes
    if per_class % pieces_per_class != 0:
        raise ValueError(
            f"samples_per_worker not divisible by required splits: "
            f"{per_class} samples per class cannot split into {pieces_per_class} pieces"
        )
    piece_size = per_class // pieces_per_class
    pieces = []
    for c in range(classes):
        start = c * per_class
        for p in range(pieces_per_class):
            lo = start + p * piece_size
            pieces.append(np.arange(lo, lo + piece_size))
    order = rng.permutation(len(pieces))
    return [
        np.concatenate([pieces[order[j * cpw + t]] for t in range(cpw)]) for j in range(n)
    ]


def stochastic_gradient(
    p: Problem, j: int, w: np.ndarray, batch_size: int, rng: np.random.Generator
) -> np.ndarray:
    return p.stochastic_gradient(j, w, batch_size, rng)


def global_objective(p: Problem, w: np.ndarray) -> tuple[float, np.ndarray]:
    return p.global_objective(w)


def measure_varsigma_sq(p: Problem, w: np.ndarray) -> float:
    """Max over workers of ||grad F_j(w) - grad F(w)||^2 at the given point."""
    _, g = p.global_objective(w)
    worst = 0.0
    for j in range(p.n_workers):
        diff = p.local_gradient(j, w) - g
        worst = max(worst, float(diff @ diff))
    return worst


def shards_to_csv(p: LogisticProblem) -> str:
    """One row per sample: worker id, label, feature values."""
    header = "worker_id,label," + ",".join(f"x{i}" for i in range(p.n_features))
    lines = [header]
    for s in p.shards:
        for row, label in zip(s.features, s.labels):
            lines.append(f"{s.worker_id},{int(label)}," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"
