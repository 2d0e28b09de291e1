"""Problem construction for the three objective families.

The quadratic suite is built so that every analytical constant is known
exactly: a shared Hessian ``A`` with spectrum in ``[eig_min, eig_max]``,
client optima ``m_c`` whose gradient dispersion equals ``nu2`` to machine
precision, and isotropic Gaussian gradient noise with total variance
``sigma2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import SimConfig
from .data import (HeterogeneityReport, PartitionPlan, SyntheticDataset, dirichlet_partition,
                   generate_synthetic, gradient_noise_variance, measure_heterogeneity, population_variance)
from .errors import ConfigError
from .objectives import ClassifierObjective, DataShard, GlobalObjective, NonconvexObjective, QuadraticObjective


@dataclass
class Problem:
    kind: str
    clients: list
    theta0: np.ndarray
    glob: GlobalObjective
    exact: bool = False
    dataset: SyntheticDataset | None = None
    plan: PartitionPlan | None = None
    _constants: HeterogeneityReport | None = field(default=None, repr=False)
    _loss_star: float | None = None
    _measure_batch: int | None = None

    @property
    def sizes(self):
        return [c.n for c in self.clients]

    def constants(self) -> HeterogeneityReport:
        """``(σ², ν², β*², L)``; exact for the quadratic suite, estimated otherwise."""
        if self._constants is None:
            rep = measure_heterogeneity(self.clients, batch_size=self._measure_batch, draws=500,
                                        max_iter=20_000)
            self._constants = rep
            self._loss_star = self.glob.loss(rep.reference_point)
        return self._constants

    def loss_star(self) -> float:
        if self._loss_star is None:
            self.constants()
        return self._loss_star


def _rotation(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def _quadratic_family(cfg: SimConfig, nonconvex: bool) -> Problem:
    p = cfg.problem
    d, C = p.d, cfg.C
    rng = np.random.default_rng([cfg.seeds.data, 0])
    Q = _rotation(rng, d)
    eigs = np.linspace(p.eig_min, p.eig_max, d)
    A = (Q * eigs) @ Q.T
    A = 0.5 * (A + A.T)

    center = rng.normal(size=d)
    dev = rng.normal(size=(C, d))
    dev -= dev.mean(axis=0)
    grad_dev = dev @ A
    raw = population_variance(grad_dev) if C > 1 else 0.0
    scale = math.sqrt(p.nu2 / raw) if raw > 0 else 0.0
    optima = center + scale * dev

    noise_std = math.sqrt(p.sigma2 / d)
    clients = []
    for c in range(C):
        rows = np.tile(A @ optima[c], (p.samples_per_client, 1))
        if p.sample_spread > 0 and p.samples_per_client > 1:
            jitter = rng.normal(scale=p.sample_spread, size=rows.shape)
            rows += jitter - jitter.mean(axis=0)
        shard = DataShard(rows, np.zeros(p.samples_per_client, dtype=int), client_id=c)
        if nonconvex:
            clients.append(NonconvexObjective(A, shard=shard, eps=p.eps, noise_std=noise_std))
        else:
            clients.append(QuadraticObjective(A, shard=shard, noise_std=noise_std))

    theta0 = center + p.init_scale * rng.normal(size=d)
    glob = GlobalObjective(clients)
    prob = Problem(kind=p.kind, clients=clients, theta0=theta0, glob=glob)

    sampling_noise = p.samples_per_client > 1 and p.sample_spread > 0 and not cfg.full_batch
    prob._measure_batch = cfg.effective_batch
    if not nonconvex:
        theta_star = center.copy()
        grads = glob.client_gradients(theta_star)
        exact = not sampling_noise
        sigma2 = p.sigma2
        if sampling_noise:
            sigma2 = max(gradient_noise_variance(o, theta_star, cfg.effective_batch, 500, seed=(cfg.seeds.data, c))
                         for c, o in enumerate(clients))
        prob._constants = HeterogeneityReport(
            sigma2=sigma2,
            nu2=population_variance(grads),
            beta_star2=float(np.mean(np.sum(grads ** 2, axis=1))),
            L=float(p.eig_max),
            L_exact=True,
            reference_point=theta_star,
            reference_grad_norm=float(np.linalg.norm(glob.full_gradient(theta_star))),
            reference_closed_form=True,
        )
        prob._loss_star = glob.loss(theta_star)
        prob.exact = exact
    return prob


def _classifier(cfg: SimConfig) -> Problem:
    p = cfg.problem
    data = generate_synthetic([cfg.seeds.data, 0], p.n, p.d, p.num_classes, p.class_separation)
    plan = dirichlet_partition(data.labels, cfg.C, cfg.dirichlet_alpha, cfg.effective_min_shard,
                               seed=[cfg.seeds.data, 1])
    clients = [ClassifierObjective(s, hidden=p.hidden, num_classes=p.num_classes, noise_std=p.noise_std)
               for s in data.shards(plan)]
    theta0 = clients[0].init_params(np.random.default_rng([cfg.seeds.data, 2]), scale=p.init_scale)
    prob = Problem(kind="classifier", clients=clients, theta0=theta0, glob=GlobalObjective(clients),
                   dataset=data, plan=plan)
    prob._measure_batch = cfg.effective_batch
    return prob


def build_problem(cfg: SimConfig) -> Problem:
    kind = cfg.problem.kind
    if kind == "quadratic":
        return _quadratic_family(cfg, nonconvex=False)
    if kind == "nonconvex":
        return _quadratic_family(cfg, nonconvex=True)
    if kind == "classifier":
        return _classifier(cfg)
    raise ConfigError(f"unknown problem kind {kind!r}")
