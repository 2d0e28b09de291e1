"""Simulation engines: round-based asynchronous rounds, a synchronous FedAvg
baseline, and an event-driven mode where staleness emerges from task durations.

Every client task is a pure function of (snapshot, shard, per-task seed), the
per-task seed being ``[training_seed, round, client, k]`` with ``k`` the
number of earlier dispatches of that client. Updates are merged in canonical
order (completion time, then client id), so logs do not depend on execution
order.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .aggregation import ClientUpdate, aggregate, aggregation_weights, convergence_check
from .config import SimConfig
from .errors import ConfigError, DivergenceError
from .sampling import WITHOUT, SelectionPolicy, select_clients
from .scheduling import LRSchedule, StalenessWeighting, lemma1_step_cap

ROUNDS_EXHAUSTED = "rounds_exhausted"
KAPPA_CONVERGED = "kappa_converged"


@dataclass
class LocalResult:
    params: np.ndarray
    steps: int
    loss_trace: list
    trajectory: np.ndarray | None = None   # (steps+1, dim) when recorded


def local_train(objective, theta_init, I: int, rate: float, batch_size, patience, rng,
                client=None, round=None, record: bool = False) -> LocalResult:
    """Up to ``I`` SGD steps from ``theta_init`` at a fixed ``rate``.

    Stops once the full local loss has failed to improve for ``patience``
    consecutive steps (``patience`` of 0 or None never stops early).
    """
    if I < 1:
        raise ConfigError("I must be >= 1")
    if not rate > 0:
        raise ConfigError("learning rate must be > 0")
    theta = np.array(theta_init, dtype=float, copy=True)
    traj = [theta.copy()] if record else None
    best = objective.loss(theta)
    if not math.isfinite(best):
        raise DivergenceError("non-finite initial local loss", client=client, step=0, round=round)
    bad = 0
    trace = []
    steps = 0
    for i in range(I):
        g = objective.stochastic_gradient(theta, batch_size, rng, client=client, local_step=i, round=round or 0)
        with np.errstate(over="ignore", invalid="ignore"):
            theta = theta - rate * g.vector
        steps = i + 1
        if not np.all(np.isfinite(theta)):
            raise DivergenceError("non-finite local parameters", client=client, step=steps, round=round)
        if record:
            traj.append(theta.copy())
        with np.errstate(over="ignore", invalid="ignore"):
            cur = objective.loss(theta)
        if not math.isfinite(cur):
            raise DivergenceError("non-finite local loss", client=client, step=steps, round=round)
        trace.append(cur)
        if cur < best:
            best, bad = cur, 0
        else:
            bad += 1
            if patience and bad >= patience:
                break
    return LocalResult(theta, steps, trace, np.stack(traj) if record else None)


@dataclass
class RoundRecord:
    round: int                 # 1-based; reports the model after this aggregation
    sim_clock: float
    server_loss: float
    grad_norm_sq: float
    clients: list
    staleness: list
    delays: list
    rates: list
    steps: list
    weights: list
    drift_norms: list
    effective_lr: float
    aggregate_update_norm: float
    discarded: int = 0
    trajectories: list | None = field(default=None, repr=False)

    @property
    def mean_staleness(self):
        return float(np.mean(self.staleness))

    @property
    def max_staleness(self):
        return int(max(self.staleness))

    @property
    def mean_delay(self):
        return float(np.mean(self.delays))

    @property
    def max_drift_norm(self):
        return float(max(self.drift_norms))


@dataclass
class RunLog:
    config: SimConfig
    engine: str
    records: list
    params: list               # θ^(0), ..., θ^(T)
    termination: str
    discards: list = field(default_factory=list)
    step_cap: float | None = None

    @property
    def final_params(self) -> np.ndarray:
        return self.params[-1]

    @property
    def rounds(self) -> int:
        return len(self.records)

    def losses(self) -> np.ndarray:
        return np.array([r.server_loss for r in self.records])

    def to_dict(self) -> dict:
        from .config import to_dict
        return {
            "engine": self.engine,
            "termination": self.termination,
            "rounds": self.rounds,
            "step_cap": self.step_cap,
            "final_params": [float(x) for x in self.final_params],
            "discards": self.discards,
            "records": [
                {
                    "round": r.round,
                    "sim_clock": r.sim_clock,
                    "server_loss": r.server_loss,
                    "grad_norm_sq": r.grad_norm_sq,
                    "clients": r.clients,
                    "staleness": r.staleness,
                    "delays": r.delays,
                    "rates": r.rates,
                    "steps": r.steps,
                    "weights": r.weights,
                    "drift_norms": r.drift_norms,
                    "effective_lr": r.effective_lr,
                    "aggregate_update_norm": r.aggregate_update_norm,
                    "discarded": r.discarded,
                }
                for r in self.records
            ],
            "config": to_dict(self.config),
        }


# -- shared plumbing -------------------------------------------------------------

class _Context:
    def __init__(self, config: SimConfig, problem):
        from .suites import build_problem
        config.validate()
        self.cfg = config
        self.problem = problem if problem is not None else build_problem(config)
        if len(self.problem.clients) != config.C:
            raise ConfigError(f"problem has {len(self.problem.clients)} clients, config says C={config.C}")
        self.glob = self.problem.glob
        self.schedule = LRSchedule(config.schedule, config.gamma, config.gamma0, config.delay_alpha, config.safety)
        self.weighting = StalenessWeighting(config.weighting, config.lam)
        self.policy = SelectionPolicy(config.selection)
        self.cap = self._cap() if config.schedule == "lemma_capped" else None
        s = config.seeds
        self.rng_sel = np.random.default_rng(s.selection)
        self.rng_delay = np.random.default_rng([s.delay, 0])
        self.rng_stale = np.random.default_rng([s.delay, 1])
        self.dispatches = [0] * config.C

    def _cap(self):
        cfg = self.cfg
        if cfg.L > 0 and cfg.beta2 >= 0:
            L, beta2 = cfg.L, cfg.beta2
        else:
            k = self.problem.constants()
            L = cfg.L if cfg.L > 0 else k.L
            beta2 = cfg.beta2 if cfg.beta2 >= 0 else k.beta_star2
        return lemma1_step_cap(L, cfg.J, cfg.I, beta2)

    def duration(self, c: int) -> float:
        cfg = self.cfg
        if cfg.delay_model == "constant":
            return float(cfg.delay_value)
        if cfg.delay_model == "per_client":
            return float(cfg.durations[c])
        return float(self.rng_delay.uniform(0.0, cfg.d_max))

    def task_rng(self, t: int, c: int):
        k = self.dispatches[c]
        self.dispatches[c] += 1
        return np.random.default_rng([self.cfg.seeds.training, t, c, k])

    def rate(self, t: int, delay: float) -> float:
        return self.schedule.rate(t, delay, self.cap)

    def train(self, c, init, rate, rng, t):
        cfg = self.cfg
        return local_train(self.problem.clients[c], init, cfg.I, rate, cfg.effective_batch,
                           cfg.early_stop_patience, rng, client=c, round=t, record=cfg.diagnostics)

    def finish_round(self, t, clock, theta_old, updates, tasks, drifts):
        """Aggregate ``updates`` and build the round record."""
        cfg = self.cfg
        w = aggregation_weights(updates, self.weighting)
        theta_new = aggregate(updates, self.weighting, tau_max=cfg.tau_max)
        if not np.all(np.isfinite(theta_new)):
            raise DivergenceError("non-finite global parameters after aggregation", round=t)
        rates = [task["rate"] for task in tasks]
        rec = RoundRecord(
            round=t + 1,
            sim_clock=float(clock),
            server_loss=self.glob.loss(theta_new),
            grad_norm_sq=float(np.sum(self.glob.full_gradient(theta_new) ** 2)),
            clients=[u.client for u in updates],
            staleness=[u.staleness for u in updates],
            delays=[task["delay"] for task in tasks],
            rates=rates,
            steps=[task["result"].steps for task in tasks],
            weights=[float(x) for x in w],
            drift_norms=drifts,
            effective_lr=float(np.mean(rates)) * cfg.J * cfg.I,
            aggregate_update_norm=float(np.linalg.norm(theta_new - theta_old)),
        )
        if cfg.diagnostics:
            rec.trajectories = [task["result"].trajectory for task in tasks]
        return theta_new, rec


# -- engines -----------------------------------------------------------------------

def run_round_based(config: SimConfig, problem=None) -> RunLog:
    """Rounds of ``J`` clients, each training from a snapshot ``τ_c`` rounds old."""
    ctx = _Context(config, problem)
    cfg = ctx.cfg
    theta = np.array(ctx.problem.theta0, dtype=float, copy=True)
    history = deque([theta], maxlen=cfg.tau_max + 1)
    params = [theta]
    records = []
    clock = 0.0
    reason = ROUNDS_EXHAUSTED
    for t in range(cfg.rounds):
        chosen = select_clients(cfg.C, cfg.J, ctx.policy, ctx.rng_sel)
        tasks = []
        for c in chosen:
            limit = min(t, cfg.tau_max)
            if cfg.staleness_model == "fixed":
                tau = min(int(cfg.staleness_offsets[c]), limit)
            else:
                tau = int(ctx.rng_stale.integers(0, limit + 1))
            delay = ctx.duration(c)
            tasks.append({"client": c, "tau": tau, "delay": delay, "rng": ctx.task_rng(t, c)})
        tasks.sort(key=lambda k: (k["delay"], k["client"]))
        updates, drifts = [], []
        for task in tasks:
            c, tau = task["client"], task["tau"]
            init = history[-1 - tau]
            task["rate"] = ctx.rate(t, task["delay"])
            task["result"] = ctx.train(c, init, task["rate"], task["rng"], t)
            updates.append(ClientUpdate(task["result"].params, ctx.problem.clients[c].n, tau, c))
            drifts.append(float(np.linalg.norm(theta - init)))
        clock += max(task["delay"] for task in tasks)
        theta_new, rec = ctx.finish_round(t, clock, theta, updates, tasks, drifts)
        records.append(rec)
        params.append(theta_new)
        history.append(theta_new)
        done = convergence_check(theta_new, theta, cfg.kappa)
        theta = theta_new
        if done:
            reason = KAPPA_CONVERGED
            break
    return RunLog(cfg, "round_based", records, params, reason, step_cap=ctx.cap)


def run_synchronous(config: SimConfig, problem=None) -> RunLog:
    """FedAvg: every selected client trains from the current model, dataset-size weights."""
    log = run_round_based(config.replace(tau_max=0, weighting="uniform", engine="synchronous"), problem)
    log.engine = "synchronous"
    return log


def run_event_driven(config: SimConfig, problem=None) -> RunLog:
    """Logical-clock simulation with ``concurrency`` in-flight client tasks.

    The server aggregates as soon as ``J`` updates are buffered. Updates older
    than ``tau_max`` versions are dropped and their client restarted from the
    current model.
    """
    ctx = _Context(config, problem)
    cfg = ctx.cfg
    if cfg.selection != WITHOUT:
        raise ConfigError("event_driven engine requires without_replacement selection")
    K = cfg.concurrency or cfg.J
    if K > cfg.C:
        raise ConfigError(f"concurrency {K} exceeds the number of clients C={cfg.C}")
    theta = np.array(ctx.problem.theta0, dtype=float, copy=True)
    params = [theta]
    records, discards = [], []
    version = 0
    clock = 0.0
    heap = []
    seq = 0
    inflight = set()
    buffer = []
    pending_discards = 0
    reason = ROUNDS_EXHAUSTED

    def dispatch(c, now):
        nonlocal seq
        delay = ctx.duration(c)
        rate = ctx.rate(version, delay)
        result = ctx.train(c, theta, rate, ctx.task_rng(version, c), version)
        task = {"client": c, "snap": version, "snap_theta": theta, "delay": delay, "rate": rate, "result": result}
        heapq.heappush(heap, (now + delay, c, seq, task))
        seq += 1
        inflight.add(c)

    def refill(now):
        busy = inflight | {task["client"] for task in buffer}
        need = K - len(inflight) - len(buffer)
        if need <= 0:
            return
        idle = [c for c in range(cfg.C) if c not in busy]
        for i in select_clients(len(idle), need, ctx.policy, ctx.rng_sel):
            dispatch(idle[i], now)

    refill(0.0)
    guard = 0
    max_events = 1000 * cfg.rounds * K + 1000
    while len(records) < cfg.rounds and reason == ROUNDS_EXHAUSTED:
        if not heap:
            raise RuntimeError("event queue drained before the round budget was spent")
        now = heap[0][0]
        while heap and heap[0][0] == now:
            _, c, _, task = heapq.heappop(heap)
            inflight.discard(c)
            buffer.append(task)
            guard += 1
        if guard > max_events:
            raise RuntimeError("event budget exceeded; check the delay model")
        clock = now
        while True:
            keep = []
            for task in buffer:
                lag = version - task["snap"]
                if lag > cfg.tau_max:
                    discards.append({"client": task["client"], "staleness": lag, "time": float(now),
                                     "version": version})
                    pending_discards += 1
                    dispatch(task["client"], now)
                else:
                    keep.append(task)
            buffer = keep
            if len(buffer) < cfg.J or len(records) >= cfg.rounds:
                break
            batch, buffer = buffer[:cfg.J], buffer[cfg.J:]
            updates, drifts = [], []
            for task in batch:
                c = task["client"]
                updates.append(ClientUpdate(task["result"].params, ctx.problem.clients[c].n, version - task["snap"], c))
                drifts.append(float(np.linalg.norm(theta - task["snap_theta"])))
            theta_new, rec = ctx.finish_round(version, clock, theta, updates, batch, drifts)
            rec.discarded = pending_discards
            pending_discards = 0
            records.append(rec)
            params.append(theta_new)
            done = convergence_check(theta_new, theta, cfg.kappa)
            theta = theta_new
            version += 1
            if done:
                reason = KAPPA_CONVERGED
                break
        if reason == ROUNDS_EXHAUSTED and len(records) < cfg.rounds:
            refill(now)
    return RunLog(cfg, "event_driven", records, params, reason, discards, step_cap=ctx.cap)


def run(config: SimConfig, problem=None) -> RunLog:
    engines = {"round_based": run_round_based, "synchronous": run_synchronous, "event_driven": run_event_driven}
    return engines[config.engine](config, problem)


@dataclass
class DriftReport:
    max_drift: list
    violations: list          # (round, client, drift)
    cap: float


def drift_trace(log: RunLog) -> DriftReport:
    """Per-round max drift ``‖θ^(t) − θ^(t−τ)‖`` and rounds exceeding ``drift_cap``."""
    cap = log.config.drift_cap
    viol = []
    for r in log.records:
        for c, dn in zip(r.clients, r.drift_norms):
            if dn > cap:
                viol.append((r.round, c, dn))
    return DriftReport([r.max_drift_norm for r in log.records], viol, cap)
