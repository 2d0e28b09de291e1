"""Client selection and finite-population sampling statistics.

Covers the with/without-replacement sample-mean variance formulas, a Monte
Carlo checker for them, the martingale-difference variance identity, and the
permutation-sum inequality used by the drift analysis.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

WITH = "with_replacement"
WITHOUT = "without_replacement"


@dataclass(frozen=True)
class SelectionPolicy:
    mode: str = WITHOUT

    def __post_init__(self):
        if self.mode not in (WITH, WITHOUT):
            raise ConfigError(f"unknown selection mode {self.mode!r}")

    @property
    def replace(self):
        return self.mode == WITH


def _policy(policy) -> SelectionPolicy:
    if isinstance(policy, SelectionPolicy):
        return policy
    return SelectionPolicy(str(policy))


def is_permutation(order, C=None) -> bool:
    order = list(order)
    n = len(order) if C is None else C
    return len(order) == n and sorted(order) == list(range(n))


def select_clients(C: int, J: int, policy, rng) -> list[int]:
    """Uniformly choose ``J`` of ``C`` client ids under ``policy``."""
    policy = _policy(policy)
    if J < 1:
        raise ConfigError("J must be >= 1")
    if not policy.replace and J > C:
        raise ConfigError(f"cannot select J={J} of C={C} clients without replacement")
    if policy.replace:
        return [int(c) for c in rng.integers(0, C, size=J)]
    return [int(c) for c in rng.choice(C, size=J, replace=False)]


def closed_form_sample_mean_variance(m: int, s: int, nu2: float, policy) -> float:
    """``E‖x̄_ψ - θ̄‖²`` for a size-``s`` sample from ``m`` vectors with variance ``nu2``."""
    policy = _policy(policy)
    if s < 1:
        raise ConfigError("sample size s must be >= 1")
    if policy.replace:
        return nu2 / s
    if m < 2:
        raise ValueError("without-replacement variance needs a population of at least 2")
    if s > m:
        raise ConfigError(f"cannot draw s={s} of m={m} without replacement")
    return (m - s) / (s * (m - 1)) * nu2


@dataclass
class SampleMeanMC:
    variance: float
    variance_se: float
    mean: np.ndarray
    mean_se: np.ndarray
    trials: int


def _sample_indices(m, s, replace, trials, rng):
    if replace:
        return rng.integers(0, m, size=(trials, s))
    return np.argsort(rng.random((trials, m)), axis=1)[:, :s]


def monte_carlo_sample_mean_variance(vectors, s: int, policy, trials: int, rng, chunk: int = 20_000) -> SampleMeanMC:
    """Empirical variance and mean of the sample mean over ``trials`` draws."""
    policy = _policy(policy)
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    X = np.atleast_2d(np.asarray(vectors, dtype=float))
    m = X.shape[0]
    if not policy.replace and s > m:
        raise ConfigError(f"cannot draw s={s} of m={m} without replacement")
    center = X.mean(axis=0)
    dev = np.empty(trials)
    means = np.empty((trials, X.shape[1]))
    for start in range(0, trials, chunk):
        n = min(chunk, trials - start)
        idx = _sample_indices(m, s, policy.replace, n, rng)
        xbar = X[idx].mean(axis=1)
        means[start:start + n] = xbar
        dev[start:start + n] = np.sum((xbar - center) ** 2, axis=1)
    return SampleMeanMC(
        variance=float(dev.mean()),
        variance_se=float(dev.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0,
        mean=means.mean(axis=0),
        mean_se=means.std(axis=0, ddof=1) / math.sqrt(trials) if trials > 1 else np.zeros(X.shape[1]),
        trials=trials,
    )


# -- martingale difference sequences -----------------------------------------

@dataclass
class MartingaleReport:
    m: int
    delta2: float
    total_variance: float        # E‖Σ(θ_k - e_k)‖²
    total_variance_se: float
    sum_of_variances: float      # Σ E‖θ_k - e_k‖²
    identity_gap: float
    identity_gap_se: float
    bound: float                 # m·δ²
    identity_holds: bool
    bound_holds: bool

    def to_dict(self):
        return {k: (float(v) if not isinstance(v, (bool, int)) else v) for k, v in self.__dict__.items()}


def iid_sequence(v: float, d: int):
    """Generator of ``m`` i.i.d. ``N(0, v·I_d)`` vectors (conditional mean zero)."""

    def gen(rng, trials, m):
        theta = rng.normal(0.0, math.sqrt(v), size=(trials, m, d))
        return theta, np.zeros_like(theta)

    return gen


def adaptive_sequence(delta2: float, d: int):
    """History-dependent scale in ``[0.25, 1]·δ²`` with a mean that tracks past draws."""

    def gen(rng, trials, m):
        theta = np.empty((trials, m, d))
        e = np.empty((trials, m, d))
        prev = np.zeros((trials, d))
        for i in range(m):
            mean_i = 0.5 * prev
            frac = 0.25 + 0.75 / (1.0 + np.sum(prev ** 2, axis=1, keepdims=True))
            xi = rng.normal(size=(trials, d)) * np.sqrt(frac * delta2 / d)
            e[:, i] = mean_i
            theta[:, i] = mean_i + xi
            prev = theta[:, i]
        return theta, e

    return gen


def deterministic_sequence(d: int):
    def gen(rng, trials, m):
        e = np.broadcast_to(np.arange(m, dtype=float)[None, :, None], (trials, m, d)).copy()
        return e.copy(), e

    return gen


def verify_martingale_bound(generator, m: int, delta2: float, trials: int, rng, z: float = 3.0) -> MartingaleReport:
    """Check ``E‖Σ(θ_k - e_k)‖² = Σ E‖θ_k - e_k‖² <= m δ²`` by simulation.

    ``generator(rng, trials, m)`` returns ``(theta, e)`` arrays of shape
    ``(trials, m, d)``. Both checks allow ``z`` standard errors.
    """
    theta, e = generator(rng, trials, m)
    diff = theta - e
    total = np.sum(diff.sum(axis=1) ** 2, axis=1)
    terms = np.sum(np.sum(diff ** 2, axis=2), axis=1)
    gap = total - terms

    def se(x):
        return float(x.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0

    tv, tv_se = float(total.mean()), se(total)
    g, g_se = float(gap.mean()), se(gap)
    bound = m * delta2
    tol = 1e-12 * max(1.0, tv)
    return MartingaleReport(
        m=m,
        delta2=delta2,
        total_variance=tv,
        total_variance_se=tv_se,
        sum_of_variances=float(terms.mean()),
        identity_gap=g,
        identity_gap_se=g_se,
        bound=bound,
        identity_holds=abs(g) <= z * g_se + tol,
        bound_holds=tv <= bound + z * tv_se + tol,
    )


# -- permutation-sum inequality -----------------------------------------------

def p_index(c: int, i: int, k: int, I: int) -> int:
    """Upper index of the inner sum: ``I-1`` for earlier clients, ``i-1`` for client ``c``.

    ``-1`` denotes an empty sum.
    """
    if not (1 <= k <= c):
        raise ValueError(f"need 1 <= k <= c, got k={k}, c={c}")
    if not (0 <= i <= I - 1):
        raise ValueError(f"need 0 <= i <= I-1, got i={i}, I={I}")
    return I - 1 if k < c else i - 1


@dataclass
class PermutationReport:
    C: int
    J: int
    I: int
    nu2: float
    lhs: float
    lhs_se: float
    rhs: float
    n_orders: int
    exhaustive: bool

    @property
    def holds(self):
        return self.lhs <= self.rhs + 1e-12 * max(1.0, self.rhs)

    def to_dict(self):
        d = dict(self.__dict__)
        d["holds"] = self.holds
        return d


def permutation_lhs(U, orders, I) -> np.ndarray:
    """Per-order value of ``Σ_c Σ_i ‖Σ_k (p_{c,i}(k)+1)·u_{ψ_k}‖²``.

    ``U`` holds the centred vectors, ``orders`` is ``(n, J)`` client indices.
    """
    Up = U[orders]                      # (n, J, d)
    prefix = np.cumsum(Up, axis=1) - Up  # Σ_{k<c} u_{ψ_k}
    out = np.zeros(orders.shape[0])
    for i in range(I):
        w = I * prefix + i * Up
        out += np.sum(w ** 2, axis=(1, 2))
    return out


def verify_permutation_inequality(vectors, J: int, I: int, trials: int | None, rng=None) -> PermutationReport:
    """Compare the permutation-sum expectation against ``½ J² I³ ν²``.

    ``trials=None`` enumerates every ordered ``J``-prefix exactly; otherwise
    ``trials`` uniform random permutations are drawn.
    """
    X = np.atleast_2d(np.asarray(vectors, dtype=float))
    C = X.shape[0]
    if C < 2:
        raise ConfigError("need C >= 2")
    if not (1 <= J <= C):
        raise ConfigError(f"need 1 <= J <= C, got J={J}, C={C}")
    U = X - X.mean(axis=0)
    nu2 = float(np.mean(np.sum(U ** 2, axis=1)))
    if trials is None:
        orders = np.array(list(itertools.permutations(range(C), J)), dtype=int).reshape(-1, J)
    else:
        orders = np.argsort(rng.random((trials, C)), axis=1)[:, :J]
    vals = permutation_lhs(U, orders, I)
    n = vals.shape[0]
    se = 0.0 if trials is None or n < 2 else float(vals.std(ddof=1) / math.sqrt(n))
    return PermutationReport(
        C=C, J=J, I=I, nu2=nu2,
        lhs=float(vals.mean()), lhs_se=se,
        rhs=0.5 * J * J * I ** 3 * nu2,
        n_orders=n, exhaustive=trials is None,
    )
