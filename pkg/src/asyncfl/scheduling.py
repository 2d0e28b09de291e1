"""Step-size schedules and staleness weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError

SCHEDULE_KINDS = ("constant", "lemma_capped", "delay_aware")
WEIGHTING_KINDS = ("uniform", "penalized")


def delay_aware_rate(gamma0: float, t: int, delay: float, alpha: float) -> float:
    """``γ₀ / (√(t+1) · (1 + α·d_t))``."""
    if not gamma0 > 0:
        raise ConfigError("gamma0 must be > 0")
    if t < 0 or delay < 0 or alpha < 0:
        raise ConfigError("t, delay and alpha must be nonnegative")
    return gamma0 / (math.sqrt(t + 1) * (1.0 + alpha * delay))


def lemma1_step_cap(L: float, J: int, I: int, beta2: float) -> float:
    """Largest per-step rate admitted by the one-round recursion: ``1/(6LJI(1+β²/J))``."""
    if not L > 0:
        raise ConfigError("L must be > 0")
    return 1.0 / (6.0 * L * J * I * (1.0 + beta2 / J))


def effective_rate(gamma: float, J: int, I: int) -> float:
    return gamma * J * I


def staleness_weight(weighting, tau: int) -> float:
    if tau < 0:
        raise ConfigError("staleness must be >= 0")
    return weighting.weight(tau)


def lemma3_average_bound(d0, b, a1, a2, zeta0, alpha, delays, T) -> float:
    """Upper bound on the running average gradient norm Ψ_T under the delay-aware rate.

    The ``log(T+1)/T`` factor of the third term is taken as 0 at ``T = 0``.
    """
    if not b > 0:
        raise ConfigError("b must be > 0")
    if a1 < 0 or a2 < 0:
        raise ConfigError("a1 and a2 must be >= 0")
    if not zeta0 > 0:
        raise ConfigError("zeta0 must be > 0")
    T = int(T)
    first = d0 / (b * zeta0 * (T + 1)) * (math.sqrt(T + 1) + alpha * float(sum(delays)))
    second = a1 * zeta0 / b * math.log(T + 1) / math.sqrt(T + 1)
    third = 0.0 if T == 0 else a2 * zeta0 ** 2 / b * math.log(T + 1) / T
    return first + second + third


@dataclass(frozen=True)
class StalenessWeighting:
    kind: str = "penalized"
    lam: float = 0.5

    def __post_init__(self):
        if self.kind not in WEIGHTING_KINDS:
            raise ConfigError(f"unknown weighting kind {self.kind!r}")
        if self.lam < 0:
            raise ConfigError("staleness penalty lambda must be >= 0")

    def weight(self, tau: int) -> float:
        if self.kind == "uniform":
            return 1.0
        return 1.0 / (1.0 + self.lam * tau)


@dataclass(frozen=True)
class LRSchedule:
    """Per-task step size.

    ``lemma_capped`` needs the recursion cap supplied by the caller (it depends
    on L, J, I, β² which the schedule does not own).
    """

    kind: str = "delay_aware"
    gamma: float = 0.01
    gamma0: float = 1e-3
    delay_alpha: float = 0.01
    safety: float = 0.9

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "constant" and not self.gamma > 0:
            raise ConfigError("constant schedule needs gamma > 0")
        if self.kind == "lemma_capped" and not (0 < self.safety <= 1):
            raise ConfigError("safety must lie in (0, 1]")
        if self.kind == "delay_aware":
            if not self.gamma0 > 0:
                raise ConfigError("gamma0 must be > 0")
            if self.delay_alpha < 0:
                raise ConfigError("delay_alpha must be >= 0")

    def rate(self, t: int, delay: float = 0.0, cap: float | None = None) -> float:
        if self.kind == "constant":
            return self.gamma
        if self.kind == "lemma_capped":
            if cap is None:
                raise ConfigError("lemma_capped schedule needs the step-size cap")
            return self.safety * cap
        return delay_aware_rate(self.gamma0, t, delay, self.delay_alpha)
