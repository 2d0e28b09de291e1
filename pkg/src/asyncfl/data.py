"""Synthetic datasets, Dirichlet non-IID partitioning, heterogeneity constants."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .objectives import DataShard, GlobalObjective, as_params, smoothness_constant


@dataclass
class SyntheticDataset:
    features: np.ndarray
    labels: np.ndarray
    class_means: np.ndarray

    @property
    def n(self):
        return int(self.labels.shape[0])

    @property
    def num_classes(self):
        return int(self.class_means.shape[0])

    def shards(self, plan: "PartitionPlan") -> list[DataShard]:
        return [
            DataShard(self.features[idx], self.labels[idx], client_id=c)
            for c, idx in sorted(plan.assignment.items())
        ]


@dataclass
class PartitionPlan:
    assignment: dict[int, list[int]]
    concentration: float
    moved: int = 0  # indices relocated by the min-shard rebalancing

    @property
    def num_clients(self):
        return len(self.assignment)

    def sizes(self) -> list[int]:
        return [len(self.assignment[c]) for c in sorted(self.assignment)]

    def class_histograms(self, labels, num_classes) -> np.ndarray:
        labels = np.asarray(labels)
        return np.stack([
            np.bincount(labels[self.assignment[c]], minlength=num_classes)
            for c in sorted(self.assignment)
        ])


@dataclass
class HeterogeneityReport:
    sigma2: float
    nu2: float
    beta_star2: float
    L: float
    L_exact: bool = True
    reference_point: np.ndarray = field(default=None, repr=False)
    reference_grad_norm: float = 0.0
    reference_closed_form: bool = True

    def __post_init__(self):
        for name in ("sigma2", "nu2", "beta_star2", "L"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


def generate_synthetic(seed, n: int, d: int, num_classes: int, class_separation: float) -> SyntheticDataset:
    """Gaussian class clusters with unit within-class spread.

    Class means lie on a sphere of radius ``class_separation``; labels are drawn
    uniformly over classes.
    """
    if n < num_classes or num_classes < 1:
        raise ConfigError(f"need n >= num_classes >= 1, got n={n}, num_classes={num_classes}")
    if d < 1:
        raise ConfigError("d must be >= 1")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(num_classes, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = class_separation * directions
    labels = rng.integers(0, num_classes, size=n)
    features = means[labels] + rng.normal(size=(n, d))
    return SyntheticDataset(features, labels, means)


def dirichlet_partition(labels, C: int, concentration: float, min_shard: int = 1, seed=0) -> PartitionPlan:
    """Class-wise Dirichlet split of sample indices across ``C`` clients.

    For each class a proportion vector is drawn from a symmetric
    Dirichlet(``concentration``) and that class's (shuffled) indices are cut
    accordingly. Clients left below ``min_shard`` receive indices moved one at
    a time from the currently largest shard.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if C < 1:
        raise ConfigError("C must be >= 1")
    if not concentration > 0:
        raise ConfigError("Dirichlet concentration must be > 0")
    if n < C * min_shard:
        raise ConfigError(f"cannot give {C} clients {min_shard} samples each from {n} samples")
    rng = np.random.default_rng(seed)
    shards: list[list[int]] = [[] for _ in range(C)]
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(C, float(concentration)))
        cuts = np.round(np.cumsum(props)[:-1] * idx.shape[0]).astype(int)
        for c, part in enumerate(np.split(idx, cuts)):
            shards[c].extend(int(i) for i in part)
    moved = 0
    while True:
        sizes = [len(s) for s in shards]
        small = int(np.argmin(sizes))
        if sizes[small] >= min_shard:
            break
        big = int(np.argmax(sizes))
        shards[small].append(shards[big].pop())
        moved += 1
    return PartitionPlan({c: sorted(s) for c, s in enumerate(shards)}, float(concentration), moved)


def max_tv_distance(plan: PartitionPlan, labels, num_classes) -> float:
    """Largest total-variation gap between a shard's class mix and the global mix."""
    hist = plan.class_histograms(labels, num_classes).astype(float)
    glob = np.bincount(np.asarray(labels), minlength=num_classes).astype(float)
    glob /= glob.sum()
    local = hist / hist.sum(axis=1, keepdims=True)
    return float(0.5 * np.abs(local - glob).sum(axis=1).max())


def population_variance(vectors) -> float:
    """``(1/m) Σ‖θ_k - θ̄‖²`` for the rows of ``vectors``."""
    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    return float(np.mean(np.sum((v - v.mean(axis=0)) ** 2, axis=1)))


def gradient_noise_variance(obj, theta, batch_size=None, draws: int = 2000, seed=0) -> float:
    """Monte Carlo ``E‖q - ∇ℒ_c(θ)‖²`` for one client."""
    rng = np.random.default_rng(seed)
    g = obj.full_gradient(theta)
    acc = 0.0
    for _ in range(draws):
        q = obj.stochastic_gradient(theta, batch_size, rng).vector
        acc += float(np.sum((q - g) ** 2))
    return acc / draws


def measure_heterogeneity(objectives, theta_ref=None, batch_size=None, draws: int = 2000, seed=0,
                          max_iter: int = 200_000) -> HeterogeneityReport:
    """Estimate ``(σ², ν², β*², L)`` for a federation of client objectives.

    ``theta_ref`` defaults to the global minimizer (closed form on quadratics,
    gradient descent to ``‖∇ℒ‖ <= 1e-8`` otherwise); ``beta_star2`` is only the
    optimum heterogeneity constant when evaluated there.
    """
    glob = GlobalObjective(objectives)
    closed = True
    if theta_ref is None:
        theta_ref, gnorm, closed = glob.minimizer(max_iter=max_iter)
    else:
        theta_ref = as_params(theta_ref, glob.dim)
        gnorm = float(np.linalg.norm(glob.full_gradient(theta_ref)))
    grads = glob.client_gradients(theta_ref)
    nu2 = population_variance(grads)
    beta_star2 = float(np.mean(np.sum(grads ** 2, axis=1)))
    sigma2 = max(
        gradient_noise_variance(obj, theta_ref, batch_size, draws, seed=(seed, c))
        for c, obj in enumerate(objectives)
    )
    ests = [smoothness_constant(obj) for obj in objectives]
    return HeterogeneityReport(
        sigma2=sigma2,
        nu2=nu2,
        beta_star2=beta_star2,
        L=max(e.value for e in ests),
        L_exact=all(e.exact for e in ests),
        reference_point=theta_ref,
        reference_grad_norm=gnorm,
        reference_closed_form=closed,
    )
