"""Server-side combination of client models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .scheduling import StalenessWeighting


@dataclass
class ClientUpdate:
    params: np.ndarray
    n: int
    staleness: int = 0
    client: int = 0


def aggregation_weights(updates, weighting: StalenessWeighting) -> np.ndarray:
    """Normalized ``n_c · s(τ_c)`` weights."""
    if not updates:
        raise ConfigError("cannot aggregate an empty update list")
    raw = np.array([u.n * weighting.weight(u.staleness) for u in updates], dtype=float)
    if np.any(raw <= 0):
        raise ConfigError("every update needs n >= 1")
    return raw / raw.sum()


def aggregate(updates, weighting: StalenessWeighting, tau_max: int | None = None) -> np.ndarray:
    """Dataset-size and staleness weighted average of client parameters."""
    w = aggregation_weights(updates, weighting)
    P = np.stack([np.asarray(u.params, dtype=float) for u in updates])
    if not np.all(np.isfinite(P)):
        bad = [u.client for u in updates if not np.all(np.isfinite(u.params))]
        raise ConfigError(f"non-finite parameters from clients {bad}")
    if tau_max is not None:
        over = [(u.client, u.staleness) for u in updates if u.staleness > tau_max]
        if over:
            raise AssertionError(f"updates exceed tau_max={tau_max}: {over}")
    return w @ P


def convergence_check(theta_new, theta_old, kappa: float) -> bool:
    """``‖θ_new - θ_old‖ <= κ`` (inclusive)."""
    if not kappa > 0:
        raise ConfigError("kappa must be > 0")
    return bool(np.linalg.norm(np.asarray(theta_new) - np.asarray(theta_old)) <= kappa)
