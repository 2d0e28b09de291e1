"""Command-line experiment runner.

Verbs: run, sweep, vary-j, compare, verify-bounds, verify-sampling,
verify-gradients. Exit codes: 0 success, 2 configuration error, 3 numerical
divergence, 4 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import report
from .config import REFERENCE_DEFAULTS, ExperimentSpec, SimConfig, load_experiment, to_dict
from .errors import ConfigError, DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_UNCERTIFIED = 0, 2, 3, 4


def summary_base(spec: ExperimentSpec, kind: str) -> dict:
    sim = spec.sim
    overrides = {k: getattr(sim, k) for k, v in REFERENCE_DEFAULTS.items() if getattr(sim, k) != v}
    return {
        "study": kind,
        "reference_defaults": dict(REFERENCE_DEFAULTS),
        "overrides": overrides,
        "config": to_dict(sim),
        "study_config": to_dict(spec.study),
    }


def rounds_to_threshold(losses, threshold: float) -> int:
    """First 1-based round whose loss is <= ``threshold``; ``len+1`` if never reached."""
    hit = np.flatnonzero(np.asarray(losses) <= threshold)
    return int(hit[0]) + 1 if hit.size else len(losses) + 1


def _run_one(cfg: SimConfig, problem=None):
    from .engine import run
    return run(cfg, problem)


def _write_run(log, out: Path, stem: str):
    report.write_metrics_csv(log, out / f"metrics{stem}.csv")
    counts = report.emit_selection_histogram(log)
    report.write_histogram_csv(counts, out / f"selection_histogram{stem}.csv")
    return counts


# -- studies ---------------------------------------------------------------------------

def study_single(spec, out: Path) -> int:
    from .diagnostics import average_iterates, gradient_norm_trace
    from .engine import drift_trace
    from .suites import build_problem

    sim = spec.sim
    problem = build_problem(sim)
    log = _run_one(sim, problem)
    counts = _write_run(log, out, "")
    report.write_json(log.to_dict(), out / "runlog.json")
    g, psi = gradient_norm_trace(log, problem.glob)
    drift = drift_trace(log)
    diag = {
        "grad_norm_sq": g.tolist(),
        "psi": psi.tolist(),
        "average_iterate_loss": problem.glob.loss(average_iterates(log)),
        "drift": {"max_per_round": drift.max_drift, "cap": drift.cap,
                  "violations": [list(v) for v in drift.violations]},
        "discards": log.discards,
    }
    report.write_json(diag, out / "diagnostics.json")
    if problem.dataset is not None:
        report.write_dataset_csv(problem.dataset, out / "dataset.csv")
        report.write_partition_csv(problem.plan, problem.dataset.labels, out / "partition.csv")
    summary = summary_base(spec, "single")
    summary.update({"rounds": log.rounds, "termination": log.termination,
                    "final_loss": log.records[-1].server_loss, "selection_counts": counts})
    report.write_json(summary, out / "summary.json")
    x = [r.round for r in log.records]
    report.plot_loss_curves({"server loss": (x, log.losses())}, out / "loss.png")
    report.plot_histogram(counts, out / "selection_histogram.png")
    return EXIT_OK


def study_sweep(spec, out: Path) -> int:
    from .diagnostics import seed_configs
    from .suites import build_problem

    sim = spec.sim
    problem = build_problem(sim)
    finals, curves = [], {}
    for k, cfg in enumerate(seed_configs(sim, spec.study.n_seeds, spec.study.base_seed)):
        log = _run_one(cfg, problem)
        _write_run(log, out, f"_seed{k}")
        finals.append(log.records[-1].server_loss)
        curves[f"seed {k}"] = ([r.round for r in log.records], log.losses())
    summary = summary_base(spec, "seed_sweep")
    summary.update({"final_losses": finals, "final_loss_mean": float(np.mean(finals)),
                    "final_loss_std": float(np.std(finals))})
    report.write_json(summary, out / "summary.json")
    report.plot_loss_curves(curves, out / "loss_sweep.png", title="Server loss across seeds")
    return EXIT_OK


def default_threshold(traces: dict) -> float:
    """Midpoint between the highest seed-mean first-round loss and the highest
    seed-mean final loss, both taken over J."""
    first = max(float(np.mean([t[0] for t in ts])) for ts in traces.values())
    worst = max(float(np.mean([t[-1] for t in ts])) for ts in traces.values())
    return worst + 0.5 * (first - worst)


def vary_j(spec, problem=None):
    """Loss traces per J; returns ``({J: [trace per seed]}, {J: [RunLog per seed]})``."""
    from .diagnostics import seed_configs
    from .suites import build_problem

    sim = spec.sim
    problem = problem or build_problem(sim)
    traces, logs = {}, {}
    for J in spec.study.J_list:
        runs = [_run_one(cfg, problem) for cfg in seed_configs(sim.replace(J=J), spec.study.n_seeds, spec.study.base_seed)]
        traces[J] = [lg.losses() for lg in runs]
        logs[J] = runs
    return traces, logs


def study_vary_j(spec, out: Path) -> int:
    from scipy.stats import spearmanr

    traces, logs = vary_j(spec)
    threshold = spec.study.loss_threshold
    if threshold <= 0:
        threshold = default_threshold(traces)
    rtt, curves = {}, {}
    for J, ts in traces.items():
        report.write_metrics_csv(logs[J][0], out / f"metrics_J{J}.csv")
        rtt[J] = float(np.mean([rounds_to_threshold(t, threshold) for t in ts]))
        n = min(len(t) for t in ts)
        curves[f"J={J}"] = (np.arange(1, n + 1), np.mean([t[:n] for t in ts], axis=0))
    Js = sorted(rtt)
    summary = summary_base(spec, "vary_J")
    summary.update({"threshold": threshold, "rounds_to_threshold": {str(J): rtt[J] for J in Js}})
    if len(Js) >= 3:
        r = spearmanr(Js, [rtt[J] for J in Js])
        summary["spearman_rho"], summary["spearman_p"] = float(r.statistic), float(r.pvalue)
    report.write_json(summary, out / "summary.json")
    report.plot_loss_curves(curves, out / "loss_vary_j.png", title="Seed-mean server loss by J")
    report.plot_points(Js, [rtt[J] for J in Js], out / "rounds_to_threshold.png",
                       "Rounds to loss threshold", "J (clients per round)", "rounds")
    return EXIT_OK


def study_compare(spec, out: Path) -> int:
    from .diagnostics import seed_configs
    from .suites import build_problem

    sim = spec.sim
    problem = build_problem(sim)
    cfgs = seed_configs(sim.replace(engine="round_based", tau_max=spec.study.async_tau_max),
                        spec.study.n_seeds, spec.study.base_seed)
    A = [_run_one(c, problem) for c in cfgs]
    S = [_run_one(c.replace(engine="synchronous"), problem) for c in cfgs]
    report.write_metrics_csv(A[0], out / "metrics_async.csv")
    report.write_metrics_csv(S[0], out / "metrics_sync.csv")
    stats = parity_stats([a.losses() for a in A], [s.losses() for s in S])
    summary = summary_base(spec, "compare_sync_async")
    summary.update(stats)
    report.write_json(summary, out / "summary.json")
    n = min(len(a.records) for a in A + S)
    x = np.arange(1, n + 1)
    report.plot_loss_curves({"asynchronous": (x, np.mean([a.losses()[:n] for a in A], axis=0)),
                             "synchronous": (x, np.mean([s.losses()[:n] for s in S], axis=0))},
                            out / "loss_compare.png", title="Asynchronous vs synchronous")
    return EXIT_OK


def parity_stats(async_traces, sync_traces) -> dict:
    """Final-loss gap and early-round variability of two families of seeded traces.

    Variability is the across-seed standard deviation of the round-to-round
    loss change, averaged over the first quartile of rounds.
    """
    n = min(len(t) for t in list(async_traces) + list(sync_traces))
    A = np.array([t[:n] for t in async_traces])
    S = np.array([t[:n] for t in sync_traces])
    q = max(2, n // 4)
    def spread(X):
        return float(np.mean(np.std(np.diff(X[:, :q], axis=1), axis=0, ddof=1)))
    fa, fs = float(A[:, -1].mean()), float(S[:, -1].mean())
    return {
        "final_loss_async": fa,
        "final_loss_sync": fs,
        "relative_gap": abs(fa - fs) / abs(fs),
        "early_change_std_async": spread(A),
        "early_change_std_sync": spread(S),
        "early_change_std_ratio": spread(A) / spread(S),
        "quartile_rounds": q,
    }


def study_verify_bounds(spec, out: Path) -> int:
    from .diagnostics import certify

    rep, logs = certify(spec.sim, spec.study.n_seeds, spec.study.base_seed)
    report.write_json(rep.to_dict(), out / "diagnostics.json")
    l2 = rep.sections["lemma2"]
    T = len(l2["bound_per_round"])
    report.plot_bound_comparison(np.arange(T), l2["empirical_per_round"], l2["bound_per_round"],
                                 out / "drift_bound.png", "Local drift vs bound", "drift sum")
    summary = summary_base(spec, "verify_bounds")
    summary.update({"certified": rep.certified, "provenance": rep.provenance})
    report.write_json(summary, out / "summary.json")
    if rep.provenance != "exact":
        return EXIT_OK
    return EXIT_OK if rep.certified else EXIT_UNCERTIFIED


def sampling_suite(trials: int = 100_000, seed: int = 0) -> dict:
    """Sample-mean variance, martingale, permutation and index-sum checks."""
    from .diagnostics import index_sum_checks
    from .sampling import (WITH, WITHOUT, adaptive_sequence, closed_form_sample_mean_variance,
                           iid_sequence, monte_carlo_sample_mean_variance, verify_martingale_bound,
                           verify_permutation_inequality)

    rng = np.random.default_rng(seed)
    X = rng.normal(size=(10, 5))
    nu2 = float(np.mean(np.sum((X - X.mean(axis=0)) ** 2, axis=1)))
    variance = []
    for s in (1, 3, 7, 10):
        row = {"s": s}
        for pol in (WITH, WITHOUT):
            mc = monte_carlo_sample_mean_variance(X, s, pol, trials, rng)
            cf = closed_form_sample_mean_variance(10, s, nu2, pol)
            tol = max(0.03 * cf, 3 * mc.variance_se)
            row[pol] = {"mc": mc.variance, "se": mc.variance_se, "closed_form": cf,
                        "holds": abs(mc.variance - cf) <= tol if cf > 0 else mc.variance <= 1e-24}
        variance.append(row)
    mart = [verify_martingale_bound(g, m, 1.0, 20_000, rng).to_dict()
            for g, m in ((iid_sequence(1.0 / 3, 3), 8), (adaptive_sequence(1.0, 3), 8))]
    perm = [verify_permutation_inequality(rng.normal(size=(C, 3)), J, I, None).to_dict()
            for C, J, I in ((4, 2, 3), (6, 3, 2), (8, 4, 3))]
    idx = all(index_sum_checks(J, I).holds for J in range(1, 33) for I in range(1, 33))
    ok = (all(r[p]["holds"] for r in variance for p in (WITH, WITHOUT))
          and all(m["identity_holds"] and m["bound_holds"] for m in mart)
          and all(p["holds"] for p in perm) and idx)
    return {"sample_mean_variance": variance, "nu2": nu2, "martingale": mart,
            "permutation": perm, "index_sums_hold": idx, "holds": ok}


def study_verify_sampling(spec, out: Path) -> int:
    res = sampling_suite(spec.study.trials, spec.sim.seeds.selection)
    report.write_json(res, out / "sampling_report.json")
    var = res["sample_mean_variance"]
    from .sampling import WITH, WITHOUT
    plt = report._pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    s = [r["s"] for r in var]
    for pol, mk in ((WITH, "o"), (WITHOUT, "s")):
        ax.plot(s, [r[pol]["closed_form"] for r in var], linestyle="--", label=f"{pol} (closed form)")
        ax.plot(s, [r[pol]["mc"] for r in var], marker=mk, linestyle="none", label=f"{pol} (Monte Carlo)")
    ax.set_xlabel("sample size s")
    ax.set_ylabel("variance of sample mean")
    ax.legend(fontsize=8)
    fig.tight_layout()
    report._save(fig, out / "sample_mean_variance.png")
    return EXIT_OK if res["holds"] else EXIT_UNCERTIFIED


def gradient_suite(sim: SimConfig, points: int = 20, seed: int = 0) -> dict:
    from .objectives import check_gradient
    from .suites import build_problem

    problem = build_problem(sim.replace(problem=sim.problem.__class__(**{**sim.problem.__dict__, "sigma2": 0.0,
                                                                        "noise_std": 0.0})))
    rng = np.random.default_rng(seed)
    # central differences are exact on quadratics, so a wider step only trims rounding error
    tol, step = (1e-4, 1e-5) if problem.kind == "classifier" else (1e-9, 1e-3)
    errs = []
    for k in range(points):
        obj = problem.clients[k % len(problem.clients)]
        theta = problem.theta0 + rng.normal(size=problem.theta0.shape)
        errs.append(check_gradient(obj, theta, step))
    return {"kind": problem.kind, "errors": errs, "max_error": max(errs), "tolerance": tol,
            "holds": max(errs) <= tol}


def study_verify_gradients(spec, out: Path) -> int:
    res = gradient_suite(spec.sim, seed=spec.sim.seeds.training)
    report.write_json(res, out / "gradient_report.json")
    report.plot_points(np.arange(len(res["errors"])), res["errors"], out / "gradient_errors.png",
                       "Finite-difference relative error", "point", "relative error")
    return EXIT_OK if res["holds"] else EXIT_UNCERTIFIED


STUDIES = {
    "run": ("single", study_single),
    "sweep": ("seed_sweep", study_sweep),
    "vary-j": ("vary_J", study_vary_j),
    "compare": ("compare_sync_async", study_compare),
    "verify-bounds": ("verify_bounds", study_verify_bounds),
    "verify-sampling": ("verify_sampling", study_verify_sampling),
    "verify-gradients": ("verify_gradients", study_verify_gradients),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asyncfl", description="Asynchronous federated learning simulator")
    p.add_argument("verb", choices=sorted(STUDIES), help="study to run")
    p.add_argument("--config", type=Path, help="TOML config file (defaults used when omitted)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--seed", type=int, help="master seed; replaces all four seed streams")
    return p


def run_experiment(verb: str, spec: ExperimentSpec, out: Path) -> int:
    kind, fn = STUDIES[verb]
    spec.study.kind = kind
    spec.validate()
    out.mkdir(parents=True, exist_ok=True)
    return fn(spec, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = load_experiment(args.config) if args.config else ExperimentSpec()
        if args.seed is not None:
            spec.sim = spec.sim.with_seed(args.seed)
        try:
            args.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {str(args.out)!r} is not writable: {exc}") from None
        return run_experiment(args.verb, spec, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
