"""Local client objectives with exact and stochastic gradients.

Three kinds are provided:

* ``QuadraticObjective``  -- per-sample loss ``0.5 θᵀAθ - b_kᵀθ``; exact smoothness.
* ``NonconvexObjective``  -- the quadratic plus ``eps * Σ sin(θ_k)``; smoothness
  bounded exactly by ``λ_max(A) + eps``.
* ``ClassifierObjective`` -- a two-layer tanh network with softmax cross-entropy
  and hand-written backprop.

All parameters travel as flat float64 vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class DataShard:
    """Rows of features and integer labels held by one client."""

    features: np.ndarray
    labels: np.ndarray
    client_id: int = 0

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ConfigError(
                f"shard {self.client_id}: {self.features.shape[0]} feature rows "
                f"but {self.labels.shape[0]} labels"
            )

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class GradSample:
    vector: np.ndarray
    client: int = 0
    local_step: int = 0
    round: int = 0


@dataclass
class SmoothnessEstimate:
    value: float
    exact: bool


def as_params(theta, dim=None) -> np.ndarray:
    """Validate and copy ``theta`` into a finite float vector."""
    theta = np.array(theta, dtype=float).reshape(-1)
    if dim is not None and theta.shape[0] != dim:
        raise ConfigError(f"parameter dimension {theta.shape[0]} does not match objective dimension {dim}")
    if not np.all(np.isfinite(theta)):
        raise ConfigError("parameter vector has non-finite entries")
    return theta


class Objective:
    """Base class: subclasses implement ``_loss`` and ``_grad`` over a row subset."""

    kind = "abstract"

    def __init__(self, shard: DataShard, noise_std: float = 0.0):
        if noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        self.shard = shard
        self.noise_std = float(noise_std)

    @property
    def dim(self) -> int:
        raise NotImplementedError

    @property
    def n(self) -> int:
        return self.shard.n

    def _loss(self, theta, idx=None) -> float:
        raise NotImplementedError

    def _grad(self, theta, idx=None) -> np.ndarray:
        raise NotImplementedError

    def loss(self, theta) -> float:
        return float(self._loss(as_params(theta, self.dim)))

    def full_gradient(self, theta) -> np.ndarray:
        return self._grad(as_params(theta, self.dim))

    def batch_indices(self, batch_size, rng):
        """Uniform with-replacement batch; ``None`` for the full shard."""
        if self.n < 1:
            raise ConfigError(f"client {self.shard.client_id} has an empty shard")
        if batch_size is None or batch_size >= self.n:
            return None
        if batch_size < 1:
            raise ConfigError("batch_size must be positive")
        return rng.integers(0, self.n, size=int(batch_size))

    def stochastic_gradient(self, theta, batch_size, rng, client=None, local_step=0, round=0) -> GradSample:
        theta = as_params(theta, self.dim)
        idx = self.batch_indices(batch_size, rng)
        g = self._grad(theta, idx)
        if self.noise_std > 0:
            g = g + rng.normal(0.0, self.noise_std, size=g.shape[0])
        if client is None:
            client = self.shard.client_id
        return GradSample(g, client=client, local_step=local_step, round=round)


class QuadraticObjective(Objective):
    """Mean over rows ``b_k`` of ``0.5 θᵀAθ - b_kᵀθ``.

    The shard's feature rows are the per-sample linear terms. Passing ``b``
    instead builds a one-row shard, so the loss is ``0.5 θᵀAθ - bᵀθ``.
    """

    kind = "quadratic"

    def __init__(self, A, b=None, shard: DataShard | None = None, noise_std: float = 0.0):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError("A must be a square matrix")
        if not np.allclose(A, A.T, atol=1e-12):
            raise ConfigError("A must be symmetric")
        if shard is None:
            if b is None:
                b = np.zeros(A.shape[0])
            b = np.asarray(b, dtype=float).reshape(1, -1)
            shard = DataShard(b, np.zeros(1, dtype=int))
        if shard.features.shape[1] != A.shape[0]:
            raise ConfigError("shard feature width must equal the dimension of A")
        super().__init__(shard, noise_std)
        self.A = A
        self._bbar = shard.features.mean(axis=0)

    @property
    def dim(self):
        return self.A.shape[0]

    @property
    def b(self) -> np.ndarray:
        return self._bbar

    def minimizer(self) -> np.ndarray:
        return np.linalg.solve(self.A, self._bbar)

    def _lin(self, idx):
        return self._bbar if idx is None else self.shard.features[idx].mean(axis=0)

    def _loss(self, theta, idx=None):
        return 0.5 * theta @ self.A @ theta - self._lin(idx) @ theta

    def _grad(self, theta, idx=None):
        return self.A @ theta - self._lin(idx)


class NonconvexObjective(QuadraticObjective):
    """Quadratic plus a small sinusoidal perturbation ``eps * Σ sin(θ_k)``."""

    kind = "nonconvex"

    def __init__(self, A, b=None, shard=None, eps: float = 0.1, noise_std: float = 0.0):
        super().__init__(A, b, shard, noise_std)
        if eps < 0:
            raise ConfigError("eps must be >= 0")
        self.eps = float(eps)

    def minimizer(self):
        raise NotImplementedError("no closed-form minimizer for the perturbed quadratic")

    def _loss(self, theta, idx=None):
        return super()._loss(theta, idx) + self.eps * np.sin(theta).sum()

    def _grad(self, theta, idx=None):
        return super()._grad(theta, idx) + self.eps * np.cos(theta)


class ClassifierObjective(Objective):
    """Two-layer network ``softmax(W2 tanh(W1 x + b1) + b2)`` with cross-entropy.

    Parameter layout is ``[W1 (h×d), b1 (h), W2 (k×h), b2 (k)]`` flattened
    row-major.
    """

    kind = "classifier"

    def __init__(self, shard: DataShard, hidden: int = 16, num_classes: int | None = None, noise_std: float = 0.0):
        super().__init__(shard, noise_std)
        self.d_in = shard.features.shape[1]
        self.hidden = int(hidden)
        if num_classes is None:
            num_classes = int(shard.labels.max()) + 1
        self.num_classes = int(num_classes)
        if shard.n and (shard.labels.min() < 0 or shard.labels.max() >= self.num_classes):
            raise ConfigError("labels must lie in [0, num_classes)")
        h, d, k = self.hidden, self.d_in, self.num_classes
        self._splits = np.cumsum([h * d, h, k * h])
        self._dim = h * d + h + k * h + k

    @property
    def dim(self):
        return self._dim

    @property
    def layer_sizes(self):
        return (self.d_in, self.hidden, self.num_classes)

    def unpack(self, theta):
        h, d, k = self.hidden, self.d_in, self.num_classes
        w1, b1, w2, b2 = np.split(theta, self._splits)
        return w1.reshape(h, d), b1, w2.reshape(k, h), b2

    def init_params(self, rng, scale: float = 0.5) -> np.ndarray:
        h, d, k = self.hidden, self.d_in, self.num_classes
        w1 = rng.normal(0.0, scale / np.sqrt(d), size=(h, d))
        w2 = rng.normal(0.0, scale / np.sqrt(h), size=(k, h))
        return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(k)])

    def _forward(self, theta, idx):
        x = self.shard.features if idx is None else self.shard.features[idx]
        y = self.shard.labels if idx is None else self.shard.labels[idx]
        w1, b1, w2, b2 = self.unpack(theta)
        a = np.tanh(x @ w1.T + b1)
        z = a @ w2.T + b2
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return x, y, a, logp

    def _loss(self, theta, idx=None):
        _, y, _, logp = self._forward(theta, idx)
        return -logp[np.arange(y.shape[0]), y].mean()

    def _grad(self, theta, idx=None):
        x, y, a, logp = self._forward(theta, idx)
        m = y.shape[0]
        w1, b1, w2, b2 = self.unpack(theta)
        dz = np.exp(logp)
        dz[np.arange(m), y] -= 1.0
        dz /= m
        gw2 = dz.T @ a
        gb2 = dz.sum(axis=0)
        da = (dz @ w2) * (1.0 - a * a)
        gw1 = da.T @ x
        gb1 = da.sum(axis=0)
        return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


# -- module-level operations -------------------------------------------------

def loss(obj: Objective, theta) -> float:
    return obj.loss(theta)


def full_gradient(obj: Objective, theta) -> np.ndarray:
    return obj.full_gradient(theta)


def stochastic_gradient(obj: Objective, theta, batch_size, rng, **kw) -> GradSample:
    return obj.stochastic_gradient(theta, batch_size, rng, **kw)


def finite_difference_gradient(obj: Objective, theta, fd_step: float) -> np.ndarray:
    """Central-difference gradient of the full-shard loss."""
    theta = as_params(theta, obj.dim)
    grad = np.empty_like(theta)
    x = theta.copy()
    for j in range(theta.shape[0]):
        x[j] = theta[j] + fd_step
        fplus = obj._loss(x)
        x[j] = theta[j] - fd_step
        fminus = obj._loss(x)
        x[j] = theta[j]
        grad[j] = (fplus - fminus) / (2.0 * fd_step)
    return grad


def check_gradient(obj: Objective, theta, fd_step: float = 1e-5) -> float:
    """Max coordinate-wise relative error between analytic and central-difference gradients.

    The denominator is ``max(|analytic|, |fd|, 1e-12)``.
    """
    if not fd_step > 0:
        raise ConfigError("fd_step must be > 0")
    analytic = obj.full_gradient(theta)
    fd = finite_difference_gradient(obj, theta, fd_step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-12)
    return float(np.max(np.abs(analytic - fd) / denom))


def power_iteration(A, tol: float = 1e-10, max_iter: int = 100_000, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix."""
    A = np.asarray(A, dtype=float)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        lam_new = float(v @ A @ v)
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new
        lam = lam_new
    return lam


def smoothness_constant(obj: Objective, n_pairs: int = 200, scale: float = 1.0, seed: int = 0) -> SmoothnessEstimate:
    """Gradient-Lipschitz constant: exact for the quadratic kinds, sampled otherwise.

    For the classifier the estimate is the largest ratio
    ``‖∇ℒ(θ₁) - ∇ℒ(θ₂)‖ / ‖θ₁ - θ₂‖`` over ``n_pairs`` independent pairs drawn
    from ``N(0, scale²)`` plus ``n_pairs`` nearby pairs (separation 1e-4).
    """
    if isinstance(obj, NonconvexObjective):
        return SmoothnessEstimate(power_iteration(obj.A) + obj.eps, exact=True)
    if isinstance(obj, QuadraticObjective):
        return SmoothnessEstimate(power_iteration(obj.A), exact=True)
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_pairs):
        t1 = rng.normal(0.0, scale, obj.dim)
        t2 = rng.normal(0.0, scale, obj.dim)
        u = rng.normal(size=obj.dim)
        t3 = t1 + 1e-4 * u / np.linalg.norm(u)
        g1 = obj._grad(t1)
        for t in (t2, t3):
            r = np.linalg.norm(g1 - obj._grad(t)) / np.linalg.norm(t1 - t)
            best = max(best, float(r))
    return SmoothnessEstimate(best, exact=False)


class GlobalObjective:
    """``ℒ(θ) = (1/C) Σ_c ℒ_c(θ)`` over a list of client objectives."""

    def __init__(self, clients):
        if not clients:
            raise ConfigError("at least one client objective is required")
        self.clients = list(clients)
        dims = {c.dim for c in self.clients}
        if len(dims) != 1:
            raise ConfigError(f"client objectives disagree on dimension: {sorted(dims)}")

    @property
    def dim(self):
        return self.clients[0].dim

    def loss(self, theta) -> float:
        theta = as_params(theta, self.dim)
        return float(np.mean([c._loss(theta) for c in self.clients]))

    def full_gradient(self, theta) -> np.ndarray:
        theta = as_params(theta, self.dim)
        return np.mean([c._grad(theta) for c in self.clients], axis=0)

    def client_gradients(self, theta) -> np.ndarray:
        theta = as_params(theta, self.dim)
        return np.stack([c._grad(theta) for c in self.clients])

    def is_quadratic(self) -> bool:
        return all(type(c) is QuadraticObjective for c in self.clients)

    def minimizer(self, tol: float = 1e-8, max_iter: int = 200_000, theta0=None):
        """Global minimizer: closed form on quadratics, gradient descent otherwise.

        Returns ``(theta, grad_norm, closed_form)``.
        """
        if self.is_quadratic():
            A = np.mean([c.A for c in self.clients], axis=0)
            b = np.mean([c.b for c in self.clients], axis=0)
            theta = np.linalg.solve(A, b)
            return theta, float(np.linalg.norm(self.full_gradient(theta))), True
        L = max(smoothness_constant(c).value for c in self.clients)
        theta = np.zeros(self.dim) if theta0 is None else as_params(theta0, self.dim)
        step = 1.0 / L
        gnorm = np.inf
        for _ in range(max_iter):
            g = self.full_gradient(theta)
            gnorm = float(np.linalg.norm(g))
            if gnorm <= tol:
                break
            theta = theta - step * g
        return theta, gnorm, False
