import math

import numpy as np
import pytest

from asyncfl.config import ProblemConfig, SimConfig
from asyncfl.engine import (KAPPA_CONVERGED, ROUNDS_EXHAUSTED, drift_trace, local_train, run_event_driven,
                            run_round_based, run_synchronous)
from asyncfl.errors import ConfigError, DivergenceError
from asyncfl.suites import build_problem

from conftest import make_quadratic, quad_config


def test_local_train_single_exact_step(rng):
    q = make_quadratic(np.eye(2))
    res = local_train(q, np.array([1.0, 0.0]), 1, 0.1, None, 0, rng)
    np.testing.assert_allclose(res.params, [0.9, 0.0])
    assert res.steps == 1


def test_local_train_small_rate_bounded_displacement(rng):
    q = make_quadratic(np.eye(3), [1.0, 2.0, 3.0])
    theta = np.array([0.5, 0.5, 0.5])
    rate, I = 1e-9, 4
    res = local_train(q, theta, I, rate, None, 0, rng)
    assert np.linalg.norm(res.params - theta) <= I * rate * np.linalg.norm(q.full_gradient(theta)) * (1 + 1e-6)
    with pytest.raises(ConfigError):
        local_train(q, theta, I, 0.0, None, 0, rng)


def test_local_train_initial_point_exact(rng):
    q = make_quadratic(np.eye(2))
    theta = np.array([0.1 + 0.2, 1 / 3])
    res = local_train(q, theta, 3, 0.1, None, 0, rng, record=True)
    assert res.trajectory[0].tobytes() == theta.tobytes()


def test_patience_one_stops_after_first_bad_step(rng):
    q = make_quadratic(np.eye(2))
    res = local_train(q, np.array([1.0, 1.0]), 10, 3.0, None, 1, rng)
    assert res.steps == 1 and res.loss_trace[0] > q.loss([1.0, 1.0])


def test_divergence_names_client_and_step(rng):
    q = make_quadratic(np.eye(2))
    with pytest.raises(DivergenceError) as exc:
        local_train(q, np.array([1.0, 1.0]), 5, 1e200, None, 0, rng, client=4, round=7)
    assert exc.value.client == 4 and exc.value.round == 7 and exc.value.step in (1, 2)
    assert "client 4" in str(exc.value)


def test_run_divergence_propagates_round():
    cfg = quad_config(schedule="constant", gamma=1e160, rounds=5)
    with pytest.raises(DivergenceError) as exc:
        run_round_based(cfg)
    assert exc.value.round is not None


def test_full_participation_matches_centralized_gd():
    cfg = quad_config(J=10, rounds=15, schedule="constant", gamma=0.05,
                      problem=ProblemConfig(kind="quadratic", d=6, sigma2=0.0, nu2=2.0))
    prob = build_problem(cfg)
    log = run_round_based(cfg, prob)
    theta = prob.theta0.copy()
    for t in range(cfg.rounds):
        for _ in range(cfg.I):
            theta = theta - cfg.gamma * prob.glob.full_gradient(theta)
        np.testing.assert_allclose(log.params[t + 1], theta, rtol=1e-10, atol=1e-12)


def test_huge_kappa_stops_at_round_one():
    log = run_round_based(quad_config(kappa=1e6))
    assert log.rounds == 1 and log.termination == KAPPA_CONVERGED
    assert run_round_based(quad_config(rounds=3)).termination == ROUNDS_EXHAUSTED


def _same(a, b):
    da, db = a.to_dict(), b.to_dict()
    da.pop("config"), db.pop("config")
    da.pop("engine"), db.pop("engine")
    return da == db and all(x.tobytes() == y.tobytes() for x, y in zip(a.params, b.params))


def test_round_based_deterministic():
    cfg = quad_config(tau_max=3, schedule="constant", gamma=0.01)
    assert _same(run_round_based(cfg), run_round_based(cfg))


def test_synchronous_equals_round_based_tau0_uniform():
    cfg = quad_config(tau_max=4, weighting="penalized", schedule="constant", gamma=0.01, batch_size=0)
    sync = run_synchronous(cfg)
    rb = run_round_based(cfg.replace(tau_max=0, weighting="uniform"))
    assert sync.engine == "synchronous"
    assert _same(sync, rb)


def test_single_client_is_plain_sgd():
    cfg = quad_config(C=1, J=1, I=3, rounds=6, schedule="constant", gamma=0.05, batch_size=0,
                      problem=ProblemConfig(kind="quadratic", d=4, sigma2=0.3, nu2=0.0))
    prob = build_problem(cfg)
    log = run_synchronous(cfg, prob)
    obj = prob.clients[0]
    theta = prob.theta0.copy()
    for t in range(cfg.rounds):
        rng = np.random.default_rng([cfg.seeds.training, t, 0, t])
        for _ in range(cfg.I):
            theta = theta - cfg.gamma * obj.stochastic_gradient(theta, None, rng).vector
        assert log.params[t + 1].tobytes() == theta.tobytes()


def test_sync_loss_nonincreasing_exact_gradients():
    cfg = quad_config(rounds=40, schedule="constant", gamma=0.4,
                      problem=ProblemConfig(kind="quadratic", d=8, sigma2=0.0, nu2=0.0, eig_max=2.0))
    losses = run_synchronous(cfg).losses()
    assert np.all(np.diff(losses) <= 1e-12)


def test_event_driven_equal_durations_matches_round_based():
    cfg = quad_config(schedule="delay_aware", gamma0=0.01, delay_model="constant", delay_value=1.5,
                      rounds=25, batch_size=0)
    ev = run_event_driven(cfg.replace(engine="event_driven"))
    rb = run_round_based(cfg)
    assert _same(ev, rb)
    assert [r.sim_clock for r in ev.records] == [r.sim_clock for r in rb.records]


def test_event_driven_discards_slow_client():
    cfg = quad_config(C=3, J=1, concurrency=2, tau_max=2, engine="event_driven", delay_model="per_client",
                      durations=[10.0, 1.0, 1.0], rounds=30, schedule="constant", gamma=0.01,
                      problem=ProblemConfig(kind="quadratic", d=3, sigma2=0.0, nu2=1.0))
    log = run_event_driven(cfg)
    assert log.discards and all(d["client"] == 0 and d["staleness"] > 2 for d in log.discards)
    assert all(max(r.staleness) <= 2 for r in log.records)
    assert sum(r.discarded for r in log.records) <= len(log.discards)
    assert _same(log, run_event_driven(cfg))


def test_event_driven_rejects_with_replacement():
    with pytest.raises(ConfigError):
        run_event_driven(quad_config(engine="event_driven", selection="with_replacement"))


def test_staleness_bounded_and_init_exact():
    cfg = quad_config(tau_max=3, rounds=20, schedule="constant", gamma=0.01, diagnostics=True)
    log = run_round_based(cfg)
    for t, r in enumerate(log.records):
        assert max(r.staleness) <= min(t, 3)
        for tau, traj in zip(r.staleness, r.trajectories):
            assert traj[0].tobytes() == log.params[t - tau].tobytes()


def test_drift_trace_zero_without_staleness():
    rep = drift_trace(run_round_based(quad_config()))
    assert all(d == 0.0 for d in rep.max_drift) and rep.violations == []


def test_drift_replay_fixed_offsets():
    cfg = quad_config(tau_max=1, staleness_model="fixed", staleness_offsets=[1] * 10, rounds=10,
                      schedule="constant", gamma=0.02)
    log = run_round_based(cfg)
    for t, r in enumerate(log.records):
        want = float(np.linalg.norm(log.params[t] - log.params[t - 1])) if t >= 1 else 0.0
        assert r.drift_norms == [want] * cfg.J
    assert drift_trace(log).violations == []
    capped = run_round_based(cfg.replace(drift_cap=1e-6))
    viol = drift_trace(capped).violations
    assert viol and all(v[2] > 1e-6 for v in viol)
    np.testing.assert_array_equal(capped.params[-1], log.params[-1])


def test_classifier_run_smoke():
    cfg = SimConfig(rounds=3, batch_size=16, gamma0=0.5, problem=ProblemConfig(kind="classifier", n=400))
    log = run_round_based(cfg)
    assert log.rounds == 3 and all(math.isfinite(r.server_loss) for r in log.records)
    assert log.records[-1].server_loss < log.records[0].server_loss + 1.0
