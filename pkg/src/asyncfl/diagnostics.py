"""Analytical bounds and their empirical counterparts.

Bound calculators are plain formula evaluations. The certifier runs a
configuration across many seeds (fixed problem instance, independent
selection/training/delay streams), uses the seed average as the expectation
proxy, and compares against the bounds with a relative slack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import Seeds, SimConfig
from .errors import ConfigError, UnavailableError
from .scheduling import lemma1_step_cap


@dataclass
class BoundInputs:
    L: float
    sigma2: float
    nu2: float
    beta2: float
    gamma: float
    C: int
    J: int
    I: int
    rounds: int = 1
    delta0: float = 0.0           # ℒ(θ⁰) − ℒ*
    gamma_tilde: float | None = None
    exact: bool = True
    descent_coef: float = 1.0 / 6.0   # b in the one-round descent term -b·JIγ·‖∇ℒ‖²

    def __post_init__(self):
        for name in ("L", "sigma2", "nu2", "beta2", "gamma", "delta0"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ConfigError(f"{name} must be finite, got {v}")
        if self.gamma_tilde is None:
            self.gamma_tilde = self.gamma * self.J * self.I
        if not self.descent_coef > 0:
            raise ConfigError("descent_coef must be > 0")

    @property
    def cap(self):
        return lemma1_step_cap(self.L, self.J, self.I, self.beta2)

    @property
    def within_cap(self):
        return self.gamma <= self.cap * (1 + 1e-12)

    @property
    def theorem_cap(self):
        return 1.0 / (6.0 * self.L * (1.0 + self.beta2 / self.C))

    def sampling_factor(self):
        """``(C−J)/(J(C−1))``; 0 for a single client."""
        if self.C == 1:
            return 0.0
        return (self.C - self.J) / (self.J * (self.C - 1))


def lemma1_terms(inputs: BoundInputs, grad_sq: float, drift_sum: float) -> dict:
    p = inputs
    return {
        "descent": -p.descent_coef * p.J * p.I * p.gamma * grad_sq,
        "noise": 2 * p.L * p.gamma ** 2 * p.J * p.I * p.sigma2,
        "sampling": 2 * p.L * p.gamma ** 2 * p.J ** 2 * p.I ** 2 * p.sampling_factor() * p.nu2,
        "drift": (5.0 / 6.0) * p.L ** 2 * p.gamma * drift_sum,
    }


def lemma1_rhs(inputs: BoundInputs, grad_sq: float, drift_sum: float) -> float:
    """Upper bound on the expected one-round change of the global loss."""
    return float(sum(lemma1_terms(inputs, grad_sq, drift_sum).values()))


def lemma2_terms(inputs: BoundInputs, grad_sq: float) -> dict:
    p = inputs
    g2 = p.gamma ** 2
    return {
        "noise": 2.25 * p.J ** 2 * p.I ** 2 * g2 * p.sigma2,
        "heterogeneity": 2.25 * p.J ** 2 * p.I ** 3 * g2 * p.nu2,
        "gradient": 2.25 * (p.beta2 / p.J + 1) * p.J ** 3 * p.I ** 3 * g2 * grad_sq,
    }


def lemma2_drift_bound(inputs: BoundInputs, grad_sq: float) -> float:
    """Bound on ``E_j = Σ_c Σ_i E‖θ_{c,i} − θ^(j)‖²``.

    σ² multiplies ``J²I²`` and ν² multiplies ``J²I³`` (the order obtained at
    the end of the derivation; the short statement of the result swaps them).
    """
    return float(sum(lemma2_terms(inputs, grad_sq).values()))


def theorem1_terms(inputs: BoundInputs, form: str = "stated") -> dict:
    """Every term is a descent-recursion term divided by ``b``; the printed
    constants correspond to ``b = 1/6`` and scale by ``1/(6b)`` otherwise."""
    p = inputs
    gt, L = p.gamma_tilde, p.L
    if not gt > 0 or p.rounds < 1:
        raise ConfigError("need gamma_tilde > 0 and rounds >= 1")
    if form == "stated":
        n = p.C
        terms = {
            "initial": 6 * p.delta0 / (gt * p.rounds),
            "noise": 12 * L * gt * p.sigma2 / (n * p.I),
            "noise_sq": 45 * L ** 2 * gt ** 2 * p.sigma2 / (4 * n * p.I),
            "heterogeneity_sq": 45 * L ** 2 * gt ** 2 * p.nu2 / (4 * n),
        }
    elif form == "general":
        n = p.J
        terms = {
            "initial": 6 * p.delta0 / (gt * p.rounds),
            "noise": 12 * L * gt * p.sigma2 / (n * p.I),
            "sampling": 12 * L * gt * p.nu2 * p.sampling_factor(),
            "noise_sq": 45 * L ** 2 * gt ** 2 * p.sigma2 / (4 * n * p.I),
            "heterogeneity_sq": 45 * L ** 2 * gt ** 2 * p.nu2 / (4 * n),
        }
    else:
        raise ConfigError(f"unknown theorem form {form!r}")
    scale = 1.0 / (6.0 * p.descent_coef)
    return {k: v * scale for k, v in terms.items()}


def theorem1_bound(inputs: BoundInputs, form: str = "stated") -> tuple[float, bool]:
    """Gradient-norm bound and whether ``γ̃ <= 1/(6L(1+β²/C))`` holds.

    ``form="general"`` keeps ``J`` in the denominators and adds the
    client-sampling term; it reduces to the stated form at ``J = C``.
    """
    value = float(sum(theorem1_terms(inputs, form).values()))
    return value, inputs.gamma_tilde <= inputs.theorem_cap * (1 + 1e-12)


# -- combinatorial checks ------------------------------------------------------------

@dataclass
class IndexSumReport:
    J: int
    I: int
    sum_y: int
    sum_y2: int
    bound_y: float
    bound_y2: float

    @property
    def holds(self):
        # integer comparisons: 2Σ𝒴 <= J²I², 3Σ𝒴² <= J³I³
        return 2 * self.sum_y <= (self.J * self.I) ** 2 and 3 * self.sum_y2 <= (self.J * self.I) ** 3


def index_value(c: int, i: int, I: int) -> int:
    """``𝒴_{c,i} = (c−1)I + i`` for 1-based client position ``c``."""
    return (c - 1) * I + i


def index_sum_checks(J: int, I: int) -> IndexSumReport:
    if J < 1 or I < 1:
        raise ConfigError("need J, I >= 1")
    s1 = s2 = 0
    for c in range(1, J + 1):
        for i in range(I):
            y = index_value(c, i, I)
            s1 += y
            s2 += y * y
    return IndexSumReport(J, I, s1, s2, 0.5 * (J * I) ** 2, (J * I) ** 3 / 3.0)


def appendix_coefficient_check(beta2_grid=None, J_grid=None) -> dict:
    """Grid check of ``−16(1+β²/J)+5 <= −11`` and of the normalized coefficient.

    The normalized gradient coefficient ``(−11 − 16β²/J)/(96(1+β²/J))`` lies in
    ``(−1/6, −11/96]``, so the claim that it is at most ``−1/6`` does not hold;
    ``coefficient_le_minus_sixth`` reports that.
    """
    b = np.linspace(0.0, 100.0, 401) if beta2_grid is None else np.asarray(beta2_grid, dtype=float)
    Js = np.arange(1, 65) if J_grid is None else np.asarray(J_grid, dtype=float)
    r = b[:, None] / Js[None, :]
    numer = -16 * (1 + r) + 5
    coef = (-11 - 16 * r) / (96 * (1 + r))
    return {
        "numerator_le_minus_11": bool(np.all(numer <= -11 + 1e-12)),
        "max_numerator": float(numer.max()),
        "coefficient_max": float(coef.max()),
        "coefficient_min": float(coef.min()),
        "coefficient_le_minus_sixth": bool(np.all(coef <= -1.0 / 6.0)),
        "coefficient_negative": bool(np.all(coef < 0)),
    }


# -- log replay ------------------------------------------------------------------------

def measured_drift_sum(log, j: int) -> float:
    """``Σ_c Σ_{i<I} ‖θ_{c,i} − θ^(j)‖²`` for round ``j`` (0-based start index)."""
    if not (0 <= j < len(log.records)):
        raise ConfigError(f"round {j} outside the log (0..{len(log.records) - 1})")
    rec = log.records[j]
    if rec.trajectories is None:
        raise UnavailableError("per-step local parameters were not recorded; enable diagnostics")
    ref = log.params[j]
    I = log.config.I
    return float(sum(np.sum((traj[:I] - ref) ** 2) for traj in rec.trajectories))


def average_iterates(log) -> np.ndarray:
    """Unweighted mean of the logged global parameters ``θ^(0..T)``."""
    params = log.params if hasattr(log, "params") else log
    if len(params) < 1:
        raise ConfigError("need at least one parameter vector")
    return np.mean(np.stack(params), axis=0)


def gradient_norm_trace(log, objective) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``‖∇ℒ(θ^(j))‖²`` for every logged global model and the running average Ψ."""
    params = log.params if hasattr(log, "params") else log
    g = np.array([float(np.sum(objective.full_gradient(p) ** 2)) for p in params])
    psi = np.cumsum(g) / np.arange(1, g.size + 1)
    return g, psi


# -- certification ---------------------------------------------------------------------

@dataclass
class BoundReport:
    constants: dict
    provenance: str
    inputs: dict
    sections: dict = field(default_factory=dict)
    n_seeds: int = 0
    slack: float = 0.05

    @property
    def certified(self) -> bool:
        flags = [s["holds"] for s in self.sections.values() if s.get("certifiable", True)]
        return self.provenance == "exact" and bool(flags) and all(flags)

    def to_dict(self):
        return {
            "constants": self.constants,
            "provenance": self.provenance,
            "inputs": self.inputs,
            "n_seeds": self.n_seeds,
            "slack": self.slack,
            "certified": self.certified,
            "sections": self.sections,
        }


def seed_configs(cfg: SimConfig, n_seeds: int, base_seed: int = 0) -> list[SimConfig]:
    """``n_seeds`` copies of ``cfg`` sharing the data seed, other streams split per seed."""
    out = []
    for k in range(n_seeds):
        s = Seeds.from_master(base_seed + k)
        out.append(cfg.replace(seeds=Seeds(cfg.seeds.data, s.selection, s.training, s.delay)))
    return out


def bound_inputs(cfg: SimConfig, problem, gamma: float) -> BoundInputs:
    k = problem.constants()
    L = cfg.L if cfg.L > 0 else k.L
    beta2 = cfg.beta2 if cfg.beta2 >= 0 else k.beta_star2
    return BoundInputs(
        L=L, sigma2=k.sigma2, nu2=k.nu2, beta2=beta2, gamma=gamma,
        C=cfg.C, J=cfg.J, I=cfg.I, rounds=cfg.rounds,
        delta0=problem.glob.loss(problem.theta0) - problem.loss_star(),
        exact=bool(problem.exact and k.L_exact),
    )


def certify(cfg: SimConfig, n_seeds: int = 20, base_seed: int = 0, slack: float = 0.05,
            form: str | None = None) -> tuple[BoundReport, list]:
    """Seed-averaged check of the drift, recursion and gradient-norm bounds.

    Requires a constant per-step rate (``constant`` or ``lemma_capped``
    schedule) so that a single γ describes every round.
    """
    from .engine import run
    from .suites import build_problem

    if cfg.schedule == "delay_aware":
        raise ConfigError("bound certification needs a constant or lemma_capped schedule")
    cfg = cfg.replace(diagnostics=True)
    problem = build_problem(cfg)
    logs = [run(c, problem) for c in seed_configs(cfg, n_seeds, base_seed)]
    T = min(lg.rounds for lg in logs)
    gamma = logs[0].records[0].rates[0]
    inp = bound_inputs(cfg, problem, gamma)
    inp.rounds = T
    form = form or ("stated" if cfg.J == cfg.C else "general")

    g = np.mean([gradient_norm_trace(lg, problem.glob)[0][:T + 1] for lg in logs], axis=0)
    E = np.mean([[measured_drift_sum(lg, j) for j in range(T)] for lg in logs], axis=0)
    losses = np.mean([[problem.glob.loss(p) for p in lg.params[:T + 1]] for lg in logs], axis=0)

    thm_value, thm_pre = theorem1_bound(inp, form)
    avg_g = float(g[:T].mean())
    sections = {
        "theorem1": {
            "form": form,
            "terms": theorem1_terms(inp, form),
            "bound": thm_value,
            "empirical": avg_g,
            "precondition_holds": thm_pre,
            "holds": bool(thm_pre and avg_g <= thm_value * (1 + slack)),
        },
    }
    stated_value, _ = theorem1_bound(inp, "stated")
    sections["theorem1"]["stated_form_bound"] = stated_value

    l2_bounds = np.array([lemma2_drift_bound(inp, gj) for gj in g[:T]])
    worst = int(np.argmax(E - l2_bounds * (1 + slack)))
    sections["lemma2"] = {
        "bound_per_round": l2_bounds.tolist(),
        "empirical_per_round": E.tolist(),
        "worst_round": worst,
        "worst_ratio": float(E[worst] / l2_bounds[worst]) if l2_bounds[worst] > 0 else math.inf,
        "precondition_holds": inp.within_cap,
        "holds": bool(inp.within_cap and np.all(E <= l2_bounds * (1 + slack))),
    }

    l1_rhs = np.array([lemma1_rhs(inp, g[j], E[j]) for j in range(T)])
    dl = np.diff(losses)
    sections["lemma1"] = {
        "rhs_per_round": l1_rhs.tolist(),
        "empirical_per_round": dl.tolist(),
        "precondition_holds": inp.within_cap,
        "holds": bool(inp.within_cap and np.all(dl <= l1_rhs + slack * np.abs(l1_rhs))),
        "certifiable": False,
    }
    sections["index_sums"] = {**index_sum_checks(cfg.J, cfg.I).__dict__,
                              "holds": index_sum_checks(cfg.J, cfg.I).holds}
    sections["appendix_coefficient"] = {**appendix_coefficient_check(), "certifiable": False}
    sections["appendix_coefficient"]["holds"] = sections["appendix_coefficient"]["numerator_le_minus_11"]

    k = problem.constants()
    report = BoundReport(
        constants={"L": inp.L, "sigma2": k.sigma2, "nu2": k.nu2, "beta_star2": k.beta_star2,
                   "beta2_used": inp.beta2, "loss_star": problem.loss_star(),
                   "loss_star_closed_form": bool(k.reference_closed_form)},
        provenance="exact" if inp.exact else "estimated",
        inputs={"gamma": inp.gamma, "gamma_tilde": inp.gamma_tilde, "step_cap": inp.cap,
                "theorem_cap": inp.theorem_cap, "C": inp.C, "J": inp.J, "I": inp.I,
                "rounds": T, "delta0": inp.delta0, "gamma_tilde_convention": "gamma*J*I",
                "descent_coef": inp.descent_coef},
        sections=sections,
        n_seeds=n_seeds,
        slack=slack,
    )
    return report, logs
