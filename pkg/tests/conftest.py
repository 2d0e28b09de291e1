import numpy as np
import pytest

from asyncfl.config import ProblemConfig, SimConfig
from asyncfl.objectives import ClassifierObjective, DataShard, QuadraticObjective


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_classifier():
    r = np.random.default_rng(7)
    shard = DataShard(r.normal(size=(4, 3)), np.array([0, 1, 2, 1]), client_id=0)
    return ClassifierObjective(shard, hidden=5, num_classes=3)


def quad_config(**kw):
    base = dict(C=10, J=5, I=5, rounds=30, batch_size=0, schedule="lemma_capped", tau_max=0,
                early_stop_patience=0, kappa=1e-12,
                problem=ProblemConfig(kind="quadratic", d=20, sigma2=0.1, nu2=0.5))
    base.update(kw)
    return SimConfig(**base)


def make_quadratic(A, b=None, noise_std=0.0):
    return QuadraticObjective(np.asarray(A, dtype=float), b, noise_std=noise_std)


# -- acceptance reporting --------------------------------------------------------------

_VERDICTS: dict[int, str] = {}


def record_verdict(n: int, ok: bool, detail: str) -> str:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
    _VERDICTS[n] = line
    print(line)
    return line


@pytest.fixture
def verdict():
    def check(n, ok, detail):
        line = record_verdict(n, bool(ok), detail)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
