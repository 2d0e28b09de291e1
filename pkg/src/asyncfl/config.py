"""Run configuration: dataclasses mirrored one-to-one by the TOML config file.

Top-level keys are ``SimConfig`` fields; ``[seeds]``, ``[problem]`` and
``[study]`` are nested sections. Unknown keys and ill-typed values raise
``ConfigError`` carrying the offending line number.
"""

from __future__ import annotations

import dataclasses
import math
import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .sampling import WITH, WITHOUT
from .scheduling import SCHEDULE_KINDS, WEIGHTING_KINDS

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENGINES = ("round_based", "event_driven", "synchronous")
DELAY_MODELS = ("uniform", "constant", "per_client")
STALENESS_MODELS = ("uniform", "fixed")
PROBLEM_KINDS = ("quadratic", "nonconvex", "classifier")
STUDY_KINDS = ("single", "seed_sweep", "vary_J", "compare_sync_async", "verify_bounds", "verify_sampling", "verify_gradients")

# Values used by the reference experiments (MNIST/CIFAR-10 runs).
REFERENCE_DEFAULTS = {
    "C": 10,
    "J": 5,
    "I": 10,
    "gamma0": 1e-3,
    "batch_size": 64,
    "early_stop_patience": 10,
    "dirichlet_alpha": 0.5,
    "delay_alpha": 0.01,
}


@dataclass
class Seeds:
    data: int = 0
    selection: int = 1
    training: int = 2
    delay: int = 3

    @classmethod
    def from_master(cls, seed: int) -> "Seeds":
        """Split one master seed into the four streams via ``SeedSequence(seed)``."""
        data, selection, training, delay = (int(x) for x in np.random.SeedSequence(int(seed)).generate_state(4))
        return cls(data, selection, training, delay)


@dataclass
class ProblemConfig:
    kind: str = "classifier"
    d: int = 10
    # quadratic / nonconvex suites
    sigma2: float = 0.0
    nu2: float = 1.0
    eig_min: float = 1.0
    eig_max: float = 2.0
    eps: float = 0.1
    samples_per_client: int = 1
    sample_spread: float = 0.0
    init_scale: float = 1.0
    # classifier suite
    n: int = 2000
    num_classes: int = 5
    class_separation: float = 3.0
    hidden: int = 16
    noise_std: float = 0.0

    def validate(self):
        if self.kind not in PROBLEM_KINDS:
            raise ConfigError(f"problem.kind must be one of {PROBLEM_KINDS}, got {self.kind!r}")
        if self.d < 1:
            raise ConfigError("problem.d must be >= 1")
        if self.sigma2 < 0 or self.nu2 < 0 or self.noise_std < 0:
            raise ConfigError("problem.sigma2, problem.nu2 and problem.noise_std must be >= 0")
        if not (0 < self.eig_min <= self.eig_max):
            raise ConfigError("need 0 < problem.eig_min <= problem.eig_max")
        if self.samples_per_client < 1:
            raise ConfigError("problem.samples_per_client must be >= 1")
        if self.kind == "classifier" and self.n < self.num_classes:
            raise ConfigError("problem.n must be >= problem.num_classes")


@dataclass
class SimConfig:
    C: int = 10
    J: int = 5
    I: int = 10
    rounds: int = 100
    batch_size: int = 64            # 0 = full shard
    schedule: str = "delay_aware"
    gamma0: float = 1e-3
    gamma: float = 0.01
    safety: float = 0.9
    delay_alpha: float = 0.01
    weighting: str = "penalized"
    lam: float = 0.5
    tau_max: int = 5
    kappa: float = 1e-10
    drift_cap: float = math.inf
    early_stop_patience: int = 10   # 0 disables early stopping
    dirichlet_alpha: float = 0.5
    min_shard: int = 0              # 0 = 2 * batch_size
    selection: str = WITHOUT
    staleness_model: str = "uniform"
    staleness_offsets: list = field(default_factory=list)
    engine: str = "round_based"
    delay_model: str = "uniform"
    d_max: float = 2.0
    delay_value: float = 1.0
    durations: list = field(default_factory=list)
    concurrency: int = 0            # event-driven in-flight tasks; 0 = J
    diagnostics: bool = False
    L: float = 0.0                  # lemma_capped overrides; 0 = use problem constants
    beta2: float = -1.0             # < 0 = use problem constants
    seeds: Seeds = field(default_factory=Seeds)
    problem: ProblemConfig = field(default_factory=ProblemConfig)

    @property
    def full_batch(self):
        return self.batch_size <= 0

    @property
    def effective_batch(self):
        return None if self.full_batch else self.batch_size

    @property
    def effective_min_shard(self):
        if self.min_shard > 0:
            return self.min_shard
        return max(1, 2 * self.batch_size) if not self.full_batch else 1

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def with_seed(self, seed: int) -> "SimConfig":
        return self.replace(seeds=Seeds.from_master(seed))

    def validate(self) -> "SimConfig":
        if self.C < 1:
            raise ConfigError("C must be >= 1")
        if self.J < 1 or (self.selection == WITHOUT and self.J > self.C):
            raise ConfigError(f"need 1 <= J <= C, got J={self.J}, C={self.C}")
        if self.I < 1:
            raise ConfigError("I must be >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.tau_max < 0:
            raise ConfigError("tau_max must be >= 0")
        if not self.kappa > 0:
            raise ConfigError("kappa must be > 0")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")
        if not self.dirichlet_alpha > 0:
            raise ConfigError("dirichlet_alpha must be > 0")
        if self.schedule not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule must be one of {SCHEDULE_KINDS}")
        if self.weighting not in WEIGHTING_KINDS:
            raise ConfigError(f"weighting must be one of {WEIGHTING_KINDS}")
        if self.selection not in (WITH, WITHOUT):
            raise ConfigError(f"selection must be {WITH!r} or {WITHOUT!r}")
        if self.engine not in ENGINES:
            raise ConfigError(f"engine must be one of {ENGINES}")
        if self.engine == "event_driven" and self.selection == WITH:
            raise ConfigError("event_driven engine dispatches distinct idle clients; use without_replacement")
        if self.delay_model not in DELAY_MODELS:
            raise ConfigError(f"delay_model must be one of {DELAY_MODELS}")
        if self.delay_model == "per_client" and len(self.durations) != self.C:
            raise ConfigError("per_client delay model needs one duration per client")
        if self.d_max < 0 or self.delay_value < 0 or any(d < 0 for d in self.durations):
            raise ConfigError("delays must be >= 0")
        if self.staleness_model not in STALENESS_MODELS:
            raise ConfigError(f"staleness_model must be one of {STALENESS_MODELS}")
        if self.staleness_model == "fixed" and len(self.staleness_offsets) != self.C:
            raise ConfigError("fixed staleness model needs one offset per client")
        if self.concurrency < 0:
            raise ConfigError("concurrency must be >= 0")
        if self.concurrency and self.concurrency < self.J:
            raise ConfigError("concurrency must be >= J")
        self.problem.validate()
        return self


@dataclass
class StudyConfig:
    kind: str = "single"
    n_seeds: int = 10
    base_seed: int = 0
    J_list: list = field(default_factory=lambda: [3, 4, 5, 6, 7, 8])
    loss_threshold: float = 0.0     # vary_J rounds-to-threshold; 0 = derived from the runs
    async_tau_max: int = 5
    trials: int = 100_000


@dataclass
class ExperimentSpec:
    sim: SimConfig = field(default_factory=SimConfig)
    study: StudyConfig = field(default_factory=StudyConfig)

    def validate(self):
        self.sim.validate()
        if self.study.kind not in STUDY_KINDS:
            raise ConfigError(f"study.kind must be one of {STUDY_KINDS}")
        if self.study.kind == "vary_J" and any(not (1 <= j <= self.sim.C) for j in self.study.J_list):
            raise ConfigError(f"study.J_list entries must lie in [1, {self.sim.C}]")
        if self.study.n_seeds < 1:
            raise ConfigError("study.n_seeds must be >= 1")
        return self


# -- TOML ingestion --------------------------------------------------------------

_SECTIONS = {"seeds": Seeds, "problem": ProblemConfig, "study": StudyConfig}


def _locate(text: str, section: str | None, key: str) -> int | None:
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.]+)\s*\]", line)
        if m:
            current = m.group(1)
            continue
        if current == section and re.match(rf"^{re.escape(key)}\s*=", line):
            return lineno
    return None


def _coerce(value, default, name, line):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean", line)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer", line)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number", line)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string", line)
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be an array", line)
        return value
    return value


def _build(cls, data: dict, text: str, section: str | None):
    obj = cls()
    known = {f.name: f for f in fields(cls)}
    for key, value in data.items():
        where = section if section else None
        if key in _SECTIONS and cls is not ExperimentSpec and section is None:
            continue
        if key not in known:
            name = f"{section}.{key}" if section else key
            raise ConfigError(f"unknown key {name!r}", _locate(text, where, key))
        default = getattr(obj, key)
        line = _locate(text, where, key)
        name = f"{section}.{key}" if section else key
        setattr(obj, key, _coerce(value, default, name, line))
    return obj


def parse_experiment(text: str) -> ExperimentSpec:
    """Parse TOML text into a validated ``ExperimentSpec``."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        if line is None:
            m = re.search(r"line (\d+)", str(exc))
            line = int(m.group(1)) if m else None
        raise ConfigError(f"malformed config: {exc}", line) from None
    top = {k: v for k, v in data.items() if k not in _SECTIONS}
    for k, v in data.items():
        if k in _SECTIONS and not isinstance(v, dict):
            raise ConfigError(f"{k} must be a section", _locate(text, None, k))
    sim = _build(SimConfig, top, text, None)
    sim.seeds = _build(Seeds, data.get("seeds", {}), text, "seeds")
    sim.problem = _build(ProblemConfig, data.get("problem", {}), text, "problem")
    study = _build(StudyConfig, data.get("study", {}), text, "study")
    spec = ExperimentSpec(sim, study)
    try:
        spec.validate()
    except ConfigError as exc:
        if exc.line is None:
            line = _guess_line(text, str(exc))
            if line is not None:
                raise ConfigError(str(exc), line) from None
        raise
    return spec


def _guess_line(text, message):
    for section, cls in [(None, SimConfig), ("seeds", Seeds), ("problem", ProblemConfig), ("study", StudyConfig)]:
        for f in fields(cls):
            token = f"{section}.{f.name}" if section else f.name
            if re.search(rf"(?<![\w.]){re.escape(token)}(?![\w])", message):
                line = _locate(text, section, f.name)
                if line is not None:
                    return line
    return None


def load_experiment(path) -> ExperimentSpec:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    return parse_experiment(path.read_text())


def to_dict(obj) -> dict:
    out = dataclasses.asdict(obj)

    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, list):
            return [clean(x) for x in v]
        if isinstance(v, float) and not math.isfinite(v):
            return str(v)
        return v

    return clean(out)
