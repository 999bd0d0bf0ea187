"""``cme-rates`` batch runner.

Usage::

    cme-rates <rates|bias|lowerbound|concentration|diagnostics> [--config PATH]
              [--out-dir PATH] [--seed N] [--threads N]

Each run writes its CSV tables plus ``<subcommand>_manifest.json`` into the
output directory and prints one PASS/FAIL line per check.  Exit status is 0
when every check passes, 2 when a check fails and 1 on usage errors.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConstructionError, DomainError, InvariantViolation, UsageError
from .kernelspace import (
    Kernel,
    SpectralBasis,
    effective_dimension,
    effective_dimension_constant,
    embedding_constant,
    emb_ratio_max,
)
from .lowerbound import (
    bernstein_check,
    build_packing,
    kl_bound_check,
    kl_divergence,
    adversarial_family,
    minimax_probe,
    schedule_learner,
)
from .norms import bias_gamma_norm, estimate_coefficients, gamma_norm, population_coefficients, variance_bound_quantities
from .rates import (
    DEFAULT_NS,
    ScheduleSpec,
    calibrate_c_lambda,
    run_experiment,
    select_regime,
)
from .estimator import fit
from .synthetic import make_problem, make_source, sample_dataset, true_cme_coefficients, zero_source
from .tables import write_csv

SUBCOMMANDS = ("rates", "bias", "lowerbound", "concentration", "diagnostics")

# documented keys: dotted name -> (default, accepted types)
_NUM = (int, float)
DEFAULTS: dict[str, tuple] = {
    "seed": (0, (int,)),
    "spectrum.p": (0.5, _NUM),
    "spectrum.n_trunc": (2048, (int,)),
    "source.beta": (1.0, _NUM),
    "source.B_bar": (1.0, _NUM),
    "source.B_inf": (1.0, _NUM),
    "source.profile": ("sharp", (str,)),
    "source.count": (5, (int,)),
    "schedule.regime": ("auto", (str,)),
    "schedule.alpha": (0.55, _NUM),
    "schedule.r": (2.0, _NUM),
    "schedule.c_lambda": (1.0, _NUM),
    "schedule.calibrate": (False, (bool,)),
    "experiment.ns": (list(DEFAULT_NS), (list,)),
    "experiment.replicates": (20, (int,)),
    "experiment.gamma": (0.0, _NUM),
    "experiment.slope_tol": (0.15, _NUM),
    "bias.lambdas": (np.logspace(-4, 0, 9).tolist(), (list,)),
    "bias.gammas": (None, (list, type(None))),
    "variance.n": (512, (int,)),
    "variance.lambda": (0.25, _NUM),
    "variance.tau": (2.0, _NUM),
    "variance.alpha": (1.0, _NUM),
    "variance.gamma": (0.0, _NUM),
    "variance.replicates": (500, (int,)),
    "lowerbound.gamma": (0.5, _NUM),
    "lowerbound.m": (16, (int,)),
    "lowerbound.epsilon": (1e-3, _NUM),
    "lowerbound.max_members": (16, (int,)),
    "lowerbound.budget": (10_000, (int,)),
    "lowerbound.quad_nodes": (256, (int,)),
    "lowerbound.probe_ns": ([128, 256, 512, 1024], (list,)),
    "lowerbound.probe_replicates": (3, (int,)),
    "concentration.ns": ([16, 64, 256], (list,)),
    "concentration.taus": ([1.0, 2.0, 3.0], (list,)),
    "concentration.trials": (2000, (int,)),
    "diagnostics.lambda_min": (1e-6, _NUM),
    "diagnostics.lambda_max": (1.0, _NUM),
    "diagnostics.grid": (50, (int,)),
    "diagnostics.alpha": (1.0, _NUM),
}


def _type_name(types) -> str:
    names = {int: "integer", float: "number", str: "string", bool: "boolean", list: "list", type(None): "null"}
    return " or ".join(dict.fromkeys(names[t] for t in types))


def _flatten(obj, prefix="") -> dict:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def resolve_config(raw: dict) -> dict:
    """Validate a (nested or dotted) mapping and fill defaults; returns dotted keys."""
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    flat = _flatten(raw)
    unknown = sorted(set(flat) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(sorted(DEFAULTS))}")
    cfg = {}
    for key, (default, types) in DEFAULTS.items():
        value = flat.get(key, copy.deepcopy(default))
        # bool is an int subclass; keep them apart
        bad_bool = isinstance(value, bool) and bool not in types
        if bad_bool or not isinstance(value, types):
            raise UsageError(f"config key {key!r} expects {_type_name(types)}, got {type(value).__name__}")
        if float in types and isinstance(value, int):
            value = float(value)
        cfg[key] = value
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    p, beta, alpha = cfg["spectrum.p"], cfg["source.beta"], cfg["schedule.alpha"]
    if not 0 < p <= 1:
        raise UsageError("spectrum.p must lie in (0, 1]")
    if not 0 < beta <= 2:
        raise UsageError("source.beta must lie in (0, 2]")
    if not p < alpha <= 1:
        raise UsageError("schedule.alpha must satisfy p < alpha <= 1")
    regime = cfg["schedule.regime"]
    if regime not in ("auto", "log_regime", "poly_regime"):
        raise UsageError("schedule.regime must be auto, log_regime or poly_regime")
    if regime != "auto" and regime != select_regime(alpha, beta, p):
        raise UsageError(
            f"schedule.regime {regime!r} is inconsistent with beta={beta}, p={p}, alpha={alpha}: "
            "log_regime requires beta + p <= alpha, poly_regime requires beta + p > alpha"
        )
    if not cfg["schedule.r"] > 1:
        raise UsageError("schedule.r must exceed 1")
    if not 0 <= cfg["experiment.gamma"] < beta:
        raise UsageError("experiment.gamma must satisfy 0 <= gamma < beta")
    if not 0 <= cfg["lowerbound.gamma"] < beta:
        raise UsageError("lowerbound.gamma must satisfy 0 <= gamma < beta")
    for key in ("experiment.ns", "lowerbound.probe_ns", "concentration.ns"):
        if not all(isinstance(n, int) and not isinstance(n, bool) and n >= 1 for n in cfg[key]):
            raise UsageError(f"{key} must be a list of positive integers")
    for key in ("bias.lambdas", "concentration.taus"):
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0 for v in cfg[key]):
            raise UsageError(f"{key} must be a list of positive numbers")


def parse_config(path) -> dict:
    if path is None:
        return resolve_config({})
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    return resolve_config(raw)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


class _Run:
    """Collects check lines and output files for one subcommand."""

    def __init__(self, name, cfg, out_dir: Path, threads: int):
        self.name, self.cfg, self.out_dir, self.threads = name, cfg, out_dir, threads
        self.outputs: list[str] = []
        self.columns: dict[str, list[str]] = {}
        self.failed = False
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat()

    def csv(self, filename, header, rows):
        path = self.out_dir / filename
        write_csv(path, header, rows)
        self.outputs.append(str(path))
        self.columns[filename] = list(header)

    def check(self, label: str, ok: bool, detail: str):
        print(f"{label}: {detail} {'PASS' if ok else 'FAIL'}")
        self.failed |= not ok

    def info(self, label: str, detail: str):
        print(f"{label}: {detail} INFO")

    def manifest(self):
        path = self.out_dir / f"{self.name}_manifest.json"
        doc = {
            "subcommand": self.name,
            "config_hash": config_hash(self.cfg),
            "config": self.cfg,
            "seed": self.cfg["seed"],
            "version": __version__,
            "started": self.started,
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "output_paths": self.outputs,
            "columns": self.columns,
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _basis(cfg):
    return SpectralBasis.polynomial(cfg["spectrum.p"], cfg["spectrum.n_trunc"])


def _source(cfg, basis, seed):
    return make_source(
        basis,
        cfg["source.beta"],
        B_bar=cfg["source.B_bar"],
        B_inf=cfg["source.B_inf"],
        seed=seed,
        profile=cfg["source.profile"],
    )


def _schedule(cfg, c_lambda=None):
    return ScheduleSpec.auto(
        cfg["schedule.alpha"],
        cfg["source.beta"],
        cfg["spectrum.p"],
        cfg["schedule.r"],
        cfg["schedule.c_lambda"] if c_lambda is None else c_lambda,
    )


def cmd_rates(run: _Run):
    cfg = run.cfg
    basis = _basis(cfg)
    problem = make_problem(_source(cfg, basis, cfg["seed"]))
    spec = _schedule(cfg)
    ns = cfg["experiment.ns"]
    if cfg["schedule.calibrate"]:
        c = calibrate_c_lambda(problem, spec, min(ns), gamma=cfg["experiment.gamma"], seed=cfg["seed"])
        spec = _schedule(cfg, c)
        run.info("calibration", f"c_lambda = {c:g}")
    res = run_experiment(
        problem,
        spec,
        ns,
        cfg["experiment.replicates"],
        cfg["experiment.gamma"],
        cfg["seed"],
        threads=run.threads,
    )
    run.csv(
        "rates_records.csv",
        ["n", "replicate", "lambda", "gamma", "err_sq", "guard_ok"],
        [(r.n, r.replicate, r.lam, r.gamma, r.err_sq, r.guard_ok) for r in res.records],
    )
    lam_by_n = {r.n: r.lam for r in res.records}
    run.csv(
        "rates_medians.csv",
        ["n", "lambda", "median_err_sq"],
        [(n, lam_by_n[n], v) for n, v in res.medians().items()],
    )
    tol = cfg["experiment.slope_tol"]
    ok = res.within(tol)
    run.csv(
        "rates_summary.csv",
        ["regime", "slope", "slope_se", "theoretical", "tolerance", "degenerate", "pass"],
        [(spec.regime, res.slope, res.slope_se, res.theoretical, tol, res.degenerate, ok)],
    )
    run.check("rate slope", ok, f"slope {res.slope:.2f} ± {res.slope_se:.2f} vs {res.theoretical:.3f}")


def cmd_bias(run: _Run):
    cfg = run.cfg
    basis = _basis(cfg)
    beta = cfg["source.beta"]
    gammas = cfg["bias.gammas"] if cfg["bias.gammas"] is not None else [0.0, beta / 2.0]
    rows, violations = [], 0
    for s in range(cfg["source.count"]):
        truth = true_cme_coefficients(make_problem(_source(cfg, basis, cfg["seed"] + s)))
        for lam in cfg["bias.lambdas"]:
            for g in gammas:
                value, bound = bias_gamma_norm(truth, float(lam), float(g), beta)
                ok = value <= bound
                violations += not ok
                rows.append((s, float(lam), float(g), value, bound, ok))
    run.csv("bias.csv", ["source", "lambda", "gamma", "value", "bound", "ok"], rows)
    run.check("bias bound", violations == 0, f"{violations} violations of {len(rows)}")

    reps = cfg["variance.replicates"]
    if reps > 0:
        _variance_coverage(run, basis, reps)


def _variance_coverage(run: _Run, basis, reps):
    cfg = run.cfg
    n, lam, tau = cfg["variance.n"], cfg["variance.lambda"], cfg["variance.tau"]
    alpha, gamma = cfg["variance.alpha"], cfg["variance.gamma"]
    problem = make_problem(_source(cfg, basis, cfg["seed"]))
    truth = true_cme_coefficients(problem)
    A = embedding_constant(basis, alpha, grid_size=2)[1]
    q = variance_coverage(problem, truth, n, lam, tau, alpha, A, gamma, reps, cfg["seed"])
    run.csv(
        "variance.csv",
        ["replicate", "variance_sq", "rhs", "exceeds"],
        [(i, v, q["rhs"], v > q["rhs"]) for i, v in enumerate(q["values"])],
    )
    allowed = 4.0 * math.exp(-tau)
    slack = 3.0 * math.sqrt(min(allowed, 1.0) * (1 - min(allowed, 1.0)) / reps)
    frac = q["exceed"] / reps
    run.check("variance guard", q["guard_ok"], f"n={n} lambda={lam:g} tau={tau:g}")
    run.check("variance coverage", frac <= allowed + slack, f"fraction {frac:.4f} vs {allowed:.4f} + {slack:.4f}")


def variance_coverage(problem, truth, n, lam, tau, alpha, A, gamma, reps, seed) -> dict:
    """Variance terms over ``reps`` replicates at fixed ``(n, lam)`` against the high-probability bound."""
    base = variance_bound_quantities(truth, n, lam, tau, alpha, A, gamma, problem.kappa_y)
    kx = Kernel.designed(truth.basis)
    f_lam = population_coefficients(truth, lam)
    values = []
    for rep in range(reps):
        xs, ys = sample_dataset(problem, n, [seed, n, rep])
        model = fit(xs, ys, lam, kx, problem.ky)
        values.append(gamma_norm(estimate_coefficients(model, problem) - f_lam, gamma) ** 2)
    exceed = int(sum(v > base.rhs for v in values))
    return {"values": values, "rhs": base.rhs, "exceed": exceed, "guard_ok": base.guard_ok, "report": base}


def cmd_lowerbound(run: _Run):
    cfg = run.cfg
    basis = _basis(cfg)
    beta, gamma = cfg["source.beta"], cfg["lowerbound.gamma"]
    fam = build_packing(
        basis,
        beta,
        gamma,
        epsilon=cfg["lowerbound.epsilon"],
        m=cfg["lowerbound.m"],
        seed=cfg["seed"],
        budget=cfg["lowerbound.budget"],
        max_members=cfg["lowerbound.max_members"],
        B_bar=cfg["source.B_bar"],
        B_inf=cfg["source.B_inf"],
        alpha=cfg["schedule.alpha"],
    )
    run.info("packing", f"M={fam.M} eps={fam.epsilon:.6g} C^gamma={fam.C_gamma:.6g}")
    sep = fam.pair_norms_sq(gamma)
    l2 = fam.pair_norms_sq(0.0)
    rows, sep_bad, l2_bad = [], 0, 0
    for i in range(fam.M):
        for j in range(fam.M):
            if i == j:
                continue
            s_ok = sep[i, j] >= 4 * fam.epsilon * (1 - 1e-12)
            l_ok = l2[i, j] <= fam.l2_bound() * (1 + 1e-12)
            sep_bad += not s_ok
            l2_bad += not l_ok
            rows.append((i, j, sep[i, j], 4 * fam.epsilon, l2[i, j], fam.l2_bound(), s_ok, l_ok))
    run.csv(
        "packing.csv",
        ["i", "j", "sep_gamma_sq", "sep_floor", "l2_sq", "l2_bound", "sep_ok", "l2_ok"],
        rows,
    )
    run.check("packing separation", sep_bad == 0, f"{sep_bad} violations")
    run.check("packing proximity", l2_bad == 0, f"{l2_bad} violations")

    template = make_problem(fam.members[0], B_inf=fam.B_inf)
    reports = kl_bound_check(fam, template, cfg["lowerbound.quad_nodes"])
    problems = adversarial_family(fam, template)
    drift = 0.0
    kl_rows = []
    for r in reports:
        i, j = r.pair
        fine = 0.0 if i == j else kl_divergence(problems[i], problems[j], 2 * cfg["lowerbound.quad_nodes"])
        drift = max(drift, abs(fine - r.kl))
        kl_rows.append((i, j, r.kl, fine, r.bound, r.ok))
    run.csv("kl.csv", ["i", "j", "kl", "kl_fine", "bound", "ok"], kl_rows)
    bad = sum(not r.ok for r in reports)
    run.check("kl bound", bad == 0, f"{bad} violations, max kl {max(r.kl for r in reports):.4g} vs {reports[0].bound:.4g}")
    run.check("kl quadrature", drift <= 1e-9, f"max drift {drift:.2e}")

    probe_ns = cfg["lowerbound.probe_ns"]
    if probe_ns:
        res = minimax_probe(
            fam,
            schedule_learner(_schedule(cfg)),
            probe_ns,
            cfg["lowerbound.probe_replicates"],
            gamma,
            cfg["seed"],
            template,
        )
        run.csv("risk.csv", ["member", "n", "median_err_sq", "failures"], res.rows)
        run.csv("risk_worst.csv", ["n", "worst_median_err_sq"], sorted(res.worst_case.items()))
        run.info(
            "worst-case risk",
            f"slope {res.worst_slope:.3f}, exponents {res.lower_exponent:.3f} (lower) {res.upper_exponent:.3f} (upper)",
        )


def cmd_concentration(run: _Run):
    cfg = run.cfg
    basis = _basis(cfg)
    problem = make_problem(zero_source(basis, cfg["source.beta"], cfg["source.B_inf"]))
    rows = []
    for n in cfg["concentration.ns"]:
        for tau in cfg["concentration.taus"]:
            r = bernstein_check(problem, n, float(tau), cfg["concentration.trials"], cfg["seed"])
            rows.append((r.n, r.tau, r.trials, r.exceed, r.fraction, r.threshold, r.allowed, r.slack, r.ok))
            run.check(
                f"bernstein n={n} tau={tau:g}", r.ok, f"fraction {r.fraction:.4f} vs {r.allowed:.4f} + {r.slack:.4f}"
            )
    run.csv(
        "concentration.csv",
        ["n", "tau", "trials", "exceed", "fraction", "threshold", "allowed", "slack", "ok"],
        rows,
    )


def cmd_diagnostics(run: _Run):
    cfg = run.cfg
    basis = _basis(cfg)
    lo, hi, k = cfg["diagnostics.lambda_min"], cfg["diagnostics.lambda_max"], cfg["diagnostics.grid"]
    coarse = np.logspace(math.log10(lo), math.log10(hi), 5)
    c = effective_dimension_constant(basis, coarse)
    rows, bad = [], 0
    for lam in np.logspace(math.log10(lo), math.log10(hi), k):
        N = effective_dimension(basis, lam)
        bound = c * lam ** (-basis.p)
        bad += N > bound
        rows.append((float(lam), N, bound, N <= bound))
    run.csv("effective_dimension.csv", ["lambda", "N_lambda", "bound", "ok"], rows)
    run.check("effective dimension", bad == 0, f"c={c:.6g}, {bad} violations on {k} points")

    alpha = cfg["diagnostics.alpha"]
    A_grid, A_analytic = embedding_constant(basis, alpha)
    run.check("embedding constant", A_grid <= A_analytic * (1 + 1e-12), f"A_grid {A_grid:.6g} <= A_analytic {A_analytic:.6g}")
    ratio = emb_ratio_max(basis, alpha, [1e-4, 1e-2, 1.0])
    run.check("emb h-bound", ratio <= 1 + 1e-12, f"max ratio {ratio:.4f}")
    run.csv(
        "spectrum.csv",
        ["quantity", "value"],
        [
            ("p", basis.p),
            ("n_trunc", basis.n_trunc),
            ("kappa_sq", Kernel.designed(basis).kappa_sq),
            ("tail_mass", basis.tail_mass()),
            ("alpha", alpha),
            ("A_grid", A_grid),
            ("A_analytic", A_analytic),
            ("effdim_constant", c),
        ],
    )


_COMMANDS = {
    "rates": cmd_rates,
    "bias": cmd_bias,
    "lowerbound": cmd_lowerbound,
    "concentration": cmd_concentration,
    "diagnostics": cmd_diagnostics,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cme-rates", description="Conditional mean embedding rate experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--out-dir", default=".", help="directory for CSV and manifest output")
    parser.add_argument("--seed", type=int, default=None, help="master seed (overrides config and CME_SEED)")
    parser.add_argument("--threads", type=int, default=None, help="replicate worker threads (overrides CME_THREADS)")
    return parser


def _env_int(name):
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"environment variable {name} must be an integer, got {raw!r}") from None


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = parse_config(args.config)
        seed = args.seed if args.seed is not None else _env_int("CME_SEED")
        if seed is not None:
            if seed < 0:
                raise UsageError("seed must be non-negative")
            cfg["seed"] = seed
        threads = args.threads if args.threads is not None else _env_int("CME_THREADS")
        threads = 1 if threads is None else threads
        if threads < 1:
            raise UsageError("threads must be at least 1")
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        run = _Run(args.subcommand, cfg, out_dir, threads)
        _COMMANDS[args.subcommand](run)
        run.manifest()
    except (UsageError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConstructionError, InvariantViolation) as exc:
        print(f"FAIL: {exc}", file=sys.stderr)
        return 2
    return 2 if run.failed else 0


if __name__ == "__main__":
    sys.exit(main())
