"""Experiment runner: INI configuration, named recipes, seeded streams and CSV/JSON output.

Configuration schema (all sections optional except where an experiment needs them)::

    [experiment]
    name = lln               ; simulate | kinetic | cluster | dyson | lln | partition
    seed = 0                 ; master seed, unsigned 64-bit
    members = 200            ; ensemble size (simulate, lln)
    samples = 10000          ; Monte Carlo samples (kinetic, cluster, dyson, partition)
    times = 0.5, 1.0         ; comma-separated observation times
    phi0 = cosine            ; perturbation preset
    observable = cos         ; observable preset
    out = results            ; output directory

    [params]
    mu = 200
    lam = 10
    beta = 1.0
    dim = 2
    epsilon =                ; optional; empty means the Boltzmann-Grad value mu**(1/(1-dim))

    [options]                ; recipe-specific integers
    k = 4                    ; cluster order, or Dyson collision count
    points = 5               ; Dyson phase points
    p_max = 8                ; partition series order
    k_max = 4                ; partition cumulant order
    grid_points = 32         ; kinetic grid resolution per axis

Every random stream is derive_stream(seed, <module>, <index>), so a given
configuration and seed reproduce identical CSV and JSON bytes.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .cluster import (CUMULANT_ORDER_CAP, GRAPH_ORDER_CAP, SERIES_LAM_CAP, SERIES_MU_CAP, SERIES_ORDER_CAP,
                      cumulant_bound, cumulant_tail_bound, enumerate_trees, integral_abs_cumulant,
                      partition_function_cumulant, partition_function_series, sample_cumulant_table,
                      series_tail_bound)
from .core import CapExceeded, ContractError, ScalingParams, derive_stream, maxwellian
from .duhamel import MAX_DYSON_ORDER, product_initial_data, sample_dyson_term
from .dynamics import evolve
from .ensemble import PRESETS, GrandCanonicalSampler, estimate_partition_function, perturbation_preset, sample_tagged
from .kinetic import VelocityGrid, first_duhamel_iterate, simulate_test_particles, solve_rb_grid
from .stats import (OBSERVABLES, EnsembleReport, LLNConfig, empirical_measure, lln_experiment, observable_preset,
                    tagged_empirical_measure)

EXPERIMENTS = ("simulate", "kinetic", "cluster", "dyson", "lln", "partition")
EXIT_OK, EXIT_INVALID, EXIT_CAP, EXIT_VERDICT = 0, 2, 3, 4

DEFAULT_OPTIONS = {"k": 4, "points": 5, "p_max": 8, "k_max": 4, "grid_points": 32}


@dataclass
class ExperimentConfig:
    experiment: str = "simulate"
    mu: float = 20.0
    lam: float = 2.0
    beta: float = 1.0
    dim: int = 2
    epsilon: float | None = None
    phi0: str = "cosine"
    observable: str = "cos"
    times: tuple[float, ...] = (0.5,)
    members: int = 10
    samples: int = 10_000
    seed: int = 0
    out: str = "results"
    options: dict = field(default_factory=lambda: dict(DEFAULT_OPTIONS))

    def params(self) -> ScalingParams:
        if self.epsilon is None:
            return ScalingParams.from_mu(self.mu, self.lam, self.beta, self.dim)
        return ScalingParams.decoupled(self.epsilon, self.mu, self.lam, self.beta, self.dim)

    def validate(self) -> list[str]:
        errors = []
        if self.experiment not in EXPERIMENTS:
            errors.append(f"experiment: {self.experiment!r} not in {list(EXPERIMENTS)}")
        if self.phi0 not in PRESETS:
            errors.append(f"phi0: {self.phi0!r} not in {sorted(PRESETS)}")
        if self.observable not in OBSERVABLES:
            errors.append(f"observable: {self.observable!r} not in {sorted(OBSERVABLES)}")
        if not self.times or any(not math.isfinite(t) or t < 0 for t in self.times):
            errors.append("times: need one or more finite nonnegative values")
        if self.members < 1:
            errors.append("members: must be positive")
        if self.samples < 2:
            errors.append("samples: must be at least 2")
        if not 0 <= self.seed < 2**64:
            errors.append("seed: must be an unsigned 64-bit integer")
        if self.dim not in (2, 3):
            errors.append("dim: must be 2 or 3")
        else:
            try:
                self.params()
            except ContractError as exc:
                errors.append(f"params: {exc}")
        k = self.options.get("k", DEFAULT_OPTIONS["k"])
        if self.experiment == "cluster" and not 2 <= k <= GRAPH_ORDER_CAP:
            errors.append(f"options.k: cluster order must lie in [2, {GRAPH_ORDER_CAP}]")
        if self.experiment == "dyson" and not 1 <= k <= MAX_DYSON_ORDER:
            errors.append(f"options.k: Dyson order must lie in [1, {MAX_DYSON_ORDER}]")
        if self.experiment in ("kinetic", "dyson", "lln") and self.dim != 2:
            errors.append(f"dim: the {self.experiment} recipe is two-dimensional")
        if self.experiment == "partition":
            if self.mu > SERIES_MU_CAP or self.lam > SERIES_LAM_CAP:
                errors.append(f"params: the partition recipe needs mu <= {SERIES_MU_CAP:g} "
                              f"and lam <= {SERIES_LAM_CAP:g}")
            if not 1 <= self.options.get("p_max", 8) <= SERIES_ORDER_CAP:
                errors.append(f"options.p_max: must lie in [1, {SERIES_ORDER_CAP}]")
            if not 1 <= self.options.get("k_max", 4) <= CUMULANT_ORDER_CAP:
                errors.append(f"options.k_max: must lie in [1, {CUMULANT_ORDER_CAP}]")
        if self.experiment == "lln" and self.lam <= 0:
            errors.append("lam: the lln recipe needs tagged particles")
        return errors

    def echo(self) -> dict:
        d = asdict(self)
        d["times"] = list(self.times)
        return d


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(s) for s in text.replace(",", " ").split())


def load_config(path) -> tuple[ExperimentConfig, list[str]]:
    """Read an INI file; returns the config and a list of parse errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not parser.read(path):
        return ExperimentConfig(), [f"config: cannot read {path}"]
    cfg = ExperimentConfig()
    errors = []
    readers = {
        ("experiment", "name"): ("experiment", str), ("experiment", "seed"): ("seed", int),
        ("experiment", "members"): ("members", int), ("experiment", "samples"): ("samples", int),
        ("experiment", "times"): ("times", _floats), ("experiment", "phi0"): ("phi0", str),
        ("experiment", "observable"): ("observable", str), ("experiment", "out"): ("out", str),
        ("params", "mu"): ("mu", float), ("params", "lam"): ("lam", float),
        ("params", "beta"): ("beta", float), ("params", "dim"): ("dim", int),
        ("params", "epsilon"): ("epsilon", lambda s: float(s) if s.strip() else None),
    }
    known_sections = {"experiment", "params", "options"}
    for section in parser.sections():
        if section not in known_sections:
            errors.append(f"[{section}]: unknown section")
            continue
        for key, raw in parser.items(section):
            if section == "options":
                try:
                    cfg.options[key] = int(raw)
                except ValueError:
                    errors.append(f"options.{key}: expected an integer, got {raw!r}")
                continue
            target = readers.get((section, key))
            if target is None:
                errors.append(f"{section}.{key}: unknown key")
                continue
            name, convert = target
            try:
                setattr(cfg, name, convert(raw))
            except ValueError:
                errors.append(f"{section}.{key}: cannot parse {raw!r}")
    return cfg, errors


class Run:
    """Output directory bookkeeping: every file written goes into the manifest."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.verdicts: list[tuple[str, bool]] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def write_json(self, name: str, payload) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return p

    def write_csv(self, name: str, header, rows) -> Path:
        p = self.path(name)
        with p.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(float(c)) if isinstance(c, (float, np.floating)) else c for c in row])
        return p

    def verdict(self, label: str, passed: bool, detail: str = ""):
        self.verdicts.append((label, bool(passed)))
        print(f"{label}: {'PASS' if passed else 'FAIL'}" + (f" ({detail})" if detail else ""))

    def stream(self, module: str, index: int = 0) -> np.random.Generator:
        return derive_stream(self.cfg.seed, module, index)


def run_simulate(run: Run):
    cfg = run.cfg
    params = cfg.params()
    phi0 = perturbation_preset(cfg.phi0)
    H = observable_preset(cfg.observable)
    times = sorted(cfg.times)
    sampler = GrandCanonicalSampler(params, phi0)
    rows, values, tagged_values = [], {t: [] for t in times}, {t: [] for t in times}
    for i in range(cfg.members):
        state = sampler.sample(run.stream("simulate", i))
        energy0 = state.kinetic_energy()
        events = 0
        for t in times:
            if t > state.time:
                state, log = evolve(state, t, params)
                events += len(log)
                if i == 0 and t == times[-1] and len(log):
                    log.to_csv(run.path("events_member0_last_segment.csv"))
            measure = empirical_measure(state, H, params.mu)
            tagged = tagged_empirical_measure(state, H, params.lam) if params.lam > 0 else 0.0
            values[t].append(measure)
            tagged_values[t].append(tagged)
            rows.append((i, t, state.n, int(state.tags.sum()), events, state.kinetic_energy() - energy0,
                         measure, tagged))
    run.write_csv("simulate.csv", ["member", "t", "particles", "tagged", "events", "energy_drift",
                                   f"measure_{H.name}", f"tagged_measure_{H.name}"], rows)
    seeds = {"master": cfg.seed, "module": "simulate", "members": f"0..{cfg.members - 1}"}
    reports = [EnsembleReport.from_values(t, {f"measure_{H.name}": values[t],
                                              f"tagged_measure_{H.name}": tagged_values[t]}, seeds).to_dict()
               for t in times]
    run.write_json("ensemble_report.json", reports)
    drift = max(abs(r[5]) for r in rows)
    run.verdict("energy conservation", drift <= 1e-9 * max(1.0, max(r[2] for r in rows)), f"max drift {drift:.2e}")


def run_kinetic(run: Run):
    cfg = run.cfg
    params = cfg.params()
    phi0 = perturbation_preset(cfg.phi0)
    H = observable_preset(cfg.observable)
    times = sorted(set(cfg.times) | {0.0})
    solution = solve_rb_grid(phi0, times, params.beta,
                             VelocityGrid.for_beta(params.beta, cfg.options.get("grid_points", 32)))
    solution.to_csv(run.path("grid_solution.csv"))
    mass = phi0.mass(params.beta, params.dim)
    rows = []
    ok = True
    for t in times:
        rng = run.stream("kinetic", int(round(t * 1e6)))
        x0, v0 = sample_tagged(phi0, params.beta, params.dim, cfg.samples, rng)
        x, v, _ = simulate_test_particles(x0, v0, t, params.beta, rng) if t > 0 else (x0, v0, None)
        h = mass * H(x, v, np.ones(len(x), dtype=np.int8))
        mc, se = float(h.mean()), float(h.std(ddof=1) / math.sqrt(len(h)))
        grid = solution.expectation(t, H)
        z = (mc - grid) / se if se > 0 else 0.0
        ok &= abs(z) <= 3
        rows.append((t, solution.mass(t), grid, mc, se, z))
    run.write_csv("kinetic.csv", ["t", "grid_mass", "grid_value", "mc_value", "mc_std_error", "z"], rows)
    run.verdict("kinetic grid vs test-particle Monte Carlo", ok,
                ", ".join(f"t={r[0]:g}: z={r[5]:+.2f}" for r in rows))


def run_cluster(run: Run):
    cfg = run.cfg
    params = cfg.params()
    k = cfg.options.get("k", 4)
    trees = len(enumerate_trees(k))
    table = sample_cumulant_table(k, params.epsilon, params.dim, cfg.samples, run.stream("cluster", 0))
    table.to_csv(run.path(f"cumulants_k{k}.csv"))
    est, se = integral_abs_cumulant(k, params.epsilon, params.dim, cfg.samples, run.stream("cluster", 1),
                                    method="tree")
    bound = cumulant_bound(k, params.epsilon, params.dim)
    summary = {"k": k, "tree_count": trees, "cayley": k ** (k - 2), "tree_violations": table.violations,
               "integral_abs_cumulant": est, "std_error": se, "integral_bound": bound,
               "epsilon": params.epsilon, "dim": params.dim}
    run.write_json("cluster_summary.json", summary)
    print(f"tree count {trees} for k={k}")
    run.verdict("cluster", trees == k ** (k - 2) and table.violations == 0 and est <= bound + 3 * se,
                f"{table.violations} tree-bound violations, integral {est:.4g} +- {se:.2g} vs {bound:.4g}")


def run_dyson(run: Run):
    cfg = run.cfg
    params = cfg.params()
    phi0 = perturbation_preset(cfg.phi0)
    k = cfg.options.get("k", 1)
    points = cfg.options.get("points", 5)
    data = product_initial_data(phi0, params.beta)
    rows = []
    ok = True
    point_rng = run.stream("dyson.points")
    for t in sorted(cfg.times):
        for a in range(points):
            x = point_rng.random(2)
            v = point_rng.normal(size=2) / math.sqrt(params.beta)
            est = sample_dyson_term(1, k, t, data, (x, v), params, samples=cfg.samples,
                                    rng=run.stream("dyson", a), end_tags=[1])
            oracle = math.nan
            if k == 1 and t > 0:
                oracle = first_duhamel_iterate(phi0, x, v, t, params.beta) * float(maxwellian(v, params.beta))
                if est.std_error > 0:
                    ok &= abs(est.estimate - oracle) <= 3 * est.std_error
            rows.append((t, a, x[0], x[1], v[0], v[1], est.estimate, est.std_error, oracle))
    run.write_csv(f"dyson_k{k}.csv", ["t", "point", "x_0", "x_1", "v_0", "v_1", "estimate", "std_error",
                                      "quadrature"], rows)
    if k == 1:
        run.verdict("Dyson first term vs quadrature", ok)


def run_lln(run: Run):
    cfg = run.cfg
    result = lln_experiment(LLNConfig(cfg.params(), perturbation_preset(cfg.phi0), observable_preset(cfg.observable),
                                      tuple(cfg.times), cfg.members, cfg.seed,
                                      cfg.options.get("grid_points", 32)))
    result.to_json(run.path("lln.json"))
    for rep in result.reports:
        rep.to_json(run.path(f"ensemble_report_t{rep.t:g}.json"))
    line = result.verdict_line()
    print(line)
    run.verdicts.append(("lln", result.passed))


def run_partition(run: Run):
    cfg = run.cfg
    params = cfg.params()
    phi0 = perturbation_preset(cfg.phi0)
    p_max = cfg.options.get("p_max", 8)
    k_max = cfg.options.get("k_max", 4)
    series = partition_function_series(params, phi0, p_max, cfg.samples, run.stream("partition", 0))
    cumulant = partition_function_cumulant(params, phi0, k_max, cfg.samples, run.stream("partition", 1))
    direct = estimate_partition_function(params, phi0, cfg.samples, run.stream("partition", 2))
    tails = {"series": series_tail_bound(params, phi0, p_max),
             "cumulant": cumulant[0] * math.expm1(cumulant_tail_bound(params, phi0, k_max)), "direct": 0.0}
    rows = [(name, val, se, tails[name]) for name, (val, se) in
            (("series", series), ("cumulant", cumulant), ("direct", direct))]
    run.write_csv("partition.csv", ["method", "estimate", "std_error", "truncation_bound"], rows)
    gap = abs(series[0] - cumulant[0])
    allowed = 3 * math.hypot(series[1], cumulant[1]) + tails["series"] + tails["cumulant"]
    run.verdict("partition series vs cumulant form", gap <= allowed, f"gap {gap:.4g} vs allowed {allowed:.4g}")


RECIPES = {"simulate": run_simulate, "kinetic": run_kinetic, "cluster": run_cluster, "dyson": run_dyson,
           "lln": run_lln, "partition": run_partition}


def run(cfg: ExperimentConfig, strict: bool = False) -> int:
    errors = cfg.validate()
    if errors:
        for e in errors:
            print(f"invalid {e}", file=sys.stderr)
        return EXIT_INVALID
    r = Run(cfg)
    start = time.perf_counter()
    status = EXIT_OK
    error = None
    try:
        RECIPES[cfg.experiment](r)
    except CapExceeded as exc:
        error, status = f"cap exceeded in {exc}", EXIT_CAP
    except ContractError as exc:
        error, status = f"invalid: {exc}", EXIT_INVALID
    if error:
        print(error, file=sys.stderr)
    elif strict and not all(ok for _, ok in r.verdicts):
        status = EXIT_VERDICT
    manifest = {
        "config": cfg.echo(),
        "seed": cfg.seed,
        "seed_rule": "numpy SeedSequence([seed, crc32(module), index])",
        "versions": {"rayleigh_gas": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "wall_time_seconds": time.perf_counter() - start,
        "files": sorted(r.files),
        "verdicts": {label: ok for label, ok in r.verdicts},
        "exit_status": status,
        "error": error,
    }
    (r.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rayleigh-gas", description="Run a named Rayleigh gas experiment.")
    p.add_argument("--config", type=Path, help="INI configuration file")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--experiment", choices=EXPERIMENTS, help="recipe name, overrides the config")
    p.add_argument("--members", type=int, help="ensemble size")
    p.add_argument("--samples", type=int, help="Monte Carlo sample count")
    p.add_argument("--strict", action="store_true", help="exit with status 4 when a verdict fails")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg, errors = (load_config(args.config) if args.config else (ExperimentConfig(), []))
    for name in ("seed", "out", "experiment", "members", "samples"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if errors:
        for e in errors:
            print(f"invalid {e}", file=sys.stderr)
        return EXIT_INVALID
    return run(cfg, strict=args.strict)


if __name__ == "__main__":
    sys.exit(main())
