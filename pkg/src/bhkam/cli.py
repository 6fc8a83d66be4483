"""Command line entry point: validated JSON config in, CSV/JSON artifacts and a manifest out."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .lattice import CapacityError, ChainGeometry, ModelParams, TruncatedFockSpace
from .operators import RangeError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_CAPACITY = 0, 1, 2, 3
SUBCOMMANDS = ("kam-verify", "geometry-suite", "current-decompose", "nekhoroshev",
               "integrated-current")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    N: int = 3
    n_max: int = 6
    g: float = 0.5
    mu: float = 0.3
    delta: float = 0.3
    gamma: float = 0.75
    n1: int = 1
    n0: int = 1
    max_range: int = 8
    max_dim: int = 2_000_000
    seed: int = 0
    # geometry
    L: int = 64
    n2: int = 2
    n3: int = 1
    r: int = 1
    quad_samples: int = 2 ** 14
    # kam-verify
    homological_ops: int = 200
    identity_tests: int = 2
    tol: float = 1e-8
    # geometry-suite
    trials: int = 1000
    indicator_samples: int = 200
    indicator_mus: list = field(default_factory=lambda: [0.2, 0.3])
    # current-decompose
    a: int = 1
    mc_samples: int = 100_000
    cancellation_samples: int = 200
    window_mus: list = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.4])
    window_samples: int = 100_000
    window_const: float = 1.0
    # time grids
    interval: list = field(default_factory=lambda: [0, 2])
    t_max: float = 50.0
    t_points: int = 51
    mus: list = field(default_factory=lambda: [0.5])

    def validate(self) -> None:
        try:
            self.model()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("N", "n_max", "n1", "n0", "L", "n2", "n3", "r", "t_points", "trials"):
            if getattr(self, name) < (0 if name == "n_max" else 1):
                raise ConfigError(f"{name} out of range")
        if self.g < 0:
            raise ConfigError("g must be >= 0")
        if not 0 <= self.a < self.N - 1 and self.N > 1:
            raise ConfigError("bond a must lie inside the chain")
        if len(self.interval) != 2 or not 0 <= self.interval[0] < self.interval[1] < self.N:
            raise ConfigError("interval must be [a1, a2] with 0 <= a1 < a2 < N")

    def model(self) -> ModelParams:
        return ModelParams(self.g, self.mu, self.delta, self.gamma)

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_max, self.t_points)


KNOWN = {f.name for f in fields(RunConfig)}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str], seed: int | None) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        raw[k.strip()] = _parse_value(v)
    if seed is not None:
        raw["seed"] = seed
    unknown = sorted(set(raw) - KNOWN)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    defaults = RunConfig()
    for k, v in raw.items():
        want = type(getattr(defaults, k))
        if want is float and isinstance(v, int) and not isinstance(v, bool):
            raw[k] = float(v)
        elif not isinstance(raw[k], want) or isinstance(v, bool):
            raise ConfigError(f"config key {k!r} expects {want.__name__}, got {v!r}")
    cfg = RunConfig(**raw)
    cfg.validate()
    return cfg


# ------------------------------------------------------------------ pipelines

def _check(value: float, tol: float, **extra) -> dict:
    return {"value": float(value), "tolerance": float(tol), "passed": bool(value <= tol), **extra}


def run_kam_verify(cfg: RunConfig, out: Path) -> tuple[dict, dict, dict]:
    from .kam import (build_kam, random_operator, required_cap, verify_adjointness,
                      verify_conservation, verify_formal_inverse, verify_homological,
                      verify_normal_form, verify_resonance_purity)
    from .operators import Box, FormalSeries, move_set
    p = cfg.model()
    box = Box(cfg.N, required_cap(cfg.n_max, cfg.n1))
    st = build_kam(cfg.n1, p, box, cfg.max_range)
    rng = np.random.default_rng(cfg.seed)
    moves = [m for m in move_set(1, ChainGeometry(cfg.N)) if any(m)]
    tests = [FormalSeries([random_operator(box, p.delta, rng, moves) for _ in range(cfg.n1 + 1)], cfg.n1)
             for _ in range(cfg.identity_tests)]
    reports = verify_adjointness(st, cfg.n_max) + [verify_resonance_purity(st, cfg.n_max),
                                                    verify_conservation(st)]
    reports += verify_normal_form(st, cfg.n_max, tests, cfg.tol)
    if tests:
        reports.append(verify_formal_inverse(st, tests[0], cfg.n_max))
    reports.append(verify_homological(p, cfg.N, cfg.n_max, cfg.homological_ops, cfg.seed))
    rows = [{"check": r["check"], "max_violation": r["max_violation"], "tolerance": r["tolerance"],
             "passed": r["passed"]} for r in reports]
    io.write_csv(out / "kam_checks.csv", rows)
    io.write_json(out / "kam_report.json", reports)
    checks = {r["check"]: {"value": r["max_violation"], "tolerance": r["tolerance"],
                           "passed": r["passed"]} for r in reports}
    replay = [r for r in reports if not r["passed"]]
    return checks, {"kam_checks.csv": None, "kam_report.json": None}, {"replay": replay}


def _geometry(cfg: RunConfig, delta: float | None = None):
    from .geometry import GeometryParams, ResonanceGeometry
    gp = GeometryParams(L=cfg.L, delta=cfg.delta if delta is None else delta, gamma=cfg.gamma,
                        n2=cfg.n2, n3=cfg.n3, r=cfg.r)
    return ResonanceGeometry(ChainGeometry(cfg.N), gp)


def run_geometry_suite(cfg: RunConfig, out: Path):
    from .geometry import Quadrature, geometry_property_suites, indicator_checks
    geom = _geometry(cfg)
    rep = geometry_property_suites(geom, cfg.seed, cfg.trials)
    checks = {}
    for name in ("proximity", "invariance", "extension"):
        v = rep[name]["violations"]
        checks[f"geometry {name}"] = {"value": v, "tolerance": 0, "passed": v == 0}
    rows = []
    quad = Quadrature(samples=cfg.quad_samples, seed=cfg.seed)
    replay = {"geometry": {k: rep[k].get("counterexamples", []) for k in ("proximity", "invariance", "extension")}}
    for i, mu in enumerate(cfg.indicator_mus):
        g = _geometry(cfg, mu)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
        etas = rng.geometric(-np.expm1(-mu), size=(cfg.indicator_samples, cfg.N)) - 1
        stats = indicator_checks(g, etas, list(range(cfg.N)), quad)
        rows.append({"mu": mu, **{k: v for k, v in stats.items() if k != "replay"}})
        for kind, label in (("vanish", "indicator vanishes near resonances"),
                            ("flat", "indicator flat along resonant hops")):
            v = stats[f"{kind}_violations"]
            checks[f"{label} mu={mu}"] = {"value": v, "tolerance": 0, "passed": v == 0}
        replay[f"indicator mu={mu}"] = stats["replay"]
    io.write_json(out / "geometry_report.json", rep)
    io.write_csv(out / "indicator_stats.csv", rows)
    return checks, {"geometry_report.json": None, "indicator_stats.csv": None}, {"replay": replay}


def run_current_decompose(cfg: RunConfig, out: Path):
    from .currents import (build_decomposition, cancellation_check, decomposition_residual_matrix,
                           gibbs_moments, loglog_slope, sector_gibbs_samples, theta_tables,
                           window_event_probabilities)
    from .geometry import Quadrature
    from .kam import build_kam, required_cap
    from .operators import Box
    p = cfg.model()
    box = Box(cfg.N, required_cap(cfg.n_max, cfg.n1))
    st = build_kam(cfg.n1, p, box, cfg.max_range)
    geom = _geometry(cfg)
    sites = [y for y in range(cfg.N) if abs(y - cfg.a) <= cfg.n3]
    quad = Quadrature(samples=cfg.quad_samples, seed=cfg.seed)
    dec = build_decomposition(st, cfg.a, cfg.n0, cfg.n3, p.mu, theta_tables(geom, box, sites, quad))
    space = TruncatedFockSpace(ChainGeometry(cfg.N), cfg.n_max, cfg.max_dim)
    checks = {}
    for name, mask in (("sector-complete", space.sector_mask()), ("buffered", space.buffered_mask(2))):
        v, where = decomposition_residual_matrix(dec, space, mask)
        checks[f"decomposition identity ({name})"] = _check(v, 1e-9, location=where)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    etas = sector_gibbs_samples(rng, p.mu, cfg.N, cfg.n_max, cfg.mc_samples)
    gm = gibbs_moments(dec.g, etas)
    checks["omega(g_a) = 0"] = {"value": abs(gm["mean"]), "tolerance": 3 * gm["mean_stderr"],
                                "passed": abs(gm["mean"]) <= 3 * gm["mean_stderr"]}
    um, Gm = gibbs_moments(dec.U, etas), gibbs_moments(dec.G, etas)
    samp = rng.geometric(-np.expm1(-p.mu), size=(cfg.cancellation_samples, cfg.N)) - 1
    canc = cancellation_check(p, geom, samp, cfg.a, cfg.n3, p.mu, quad)
    checks["cancellation (weighted cuts)"] = {"value": canc.violations, "tolerance": 0,
                                              "passed": canc.violations == 0,
                                              "checked_pairs": canc.checked_pairs}
    checks["split commutator inside Z"] = {"value": canc.split_nonzero_outside_Z, "tolerance": 0,
                                           "passed": canc.split_nonzero_outside_Z == 0,
                                           "nonzero": canc.split_nonzero}
    rows = [{"quantity": "omega_g", "value": gm["mean"], "stderr": gm["mean_stderr"]},
            {"quantity": "omega_g2", "value": gm["square"], "stderr": gm["square_stderr"]},
            {"quantity": "omega_U2", "value": um["square"], "stderr": um["square_stderr"]},
            {"quantity": "omega_G2", "value": Gm["square"], "stderr": Gm["square_stderr"]}]
    prob_rows = []
    wrng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    for mu in cfg.window_mus:
        prob_rows.append(window_event_probabilities(_geometry(cfg, mu), cfg.a, mu, cfg.window_samples, wrng,
                                                    cfg.window_const, s=cfg.r))
    if len(prob_rows) >= 2:
        mus = [r["mu"] for r in prob_rows]
        for key, target, tol in (("P_W", 1 - cfg.gamma, 0.3), ("P_Zs", 2 * (1 - cfg.gamma), 0.5)):
            vals = [r[key] for r in prob_rows]
            slope = loglog_slope(mus, vals) if min(vals) > 0 else float("nan")
            checks[f"slope {key}"] = {"value": slope, "target": target, "tolerance": tol,
                                      "passed": bool(abs(slope - target) <= tol),
                                      "max_probability": max(vals)}
    io.write_csv(out / "moments.csv", rows)
    io.write_csv(out / "window_probabilities.csv", prob_rows)
    io.write_json(out / "cancellation.json", asdict(canc))
    extra = {"omega_shift": dec.omega_shift, "omega_tail_weight": dec.omega_tail,
             "replay": canc.replay}
    return checks, {"moments.csv": None, "window_probabilities.csv": None,
                    "cancellation.json": None}, extra


def run_nekhoroshev(cfg: RunConfig, out: Path):
    from .dynamics import nekhoroshev_experiment
    res = nekhoroshev_experiment(tuple(cfg.interval), cfg.times(), cfg.mus, cfg.g, cfg.N,
                                 cfg.n_max, cfg.delta, cfg.gamma)
    io.write_csv(out / "nekhoroshev.csv", res.rows, list(res.COLUMNS))
    checks = {"sum rule": _check(res.column("sum_rule_residual").max(), 1e-8)}
    if cfg.g == 0:
        checks["g=0 drift vanishes"] = _check(np.abs(res.column("drift")).max(), 0.0)
    return checks, {"nekhoroshev.csv": None}, {"provenance": res.provenance}


def run_integrated_current(cfg: RunConfig, out: Path):
    from .currents import build_decomposition, theta_tables
    from .dynamics import integrated_current_experiment
    from .geometry import Quadrature
    from .kam import build_kam, required_cap
    from .operators import Box
    p = cfg.model()
    box = Box(cfg.N, required_cap(cfg.n_max, cfg.n1))
    st = build_kam(cfg.n1, p, box, cfg.max_range)
    sites = [y for y in range(cfg.N) if abs(y - cfg.a) <= cfg.n3]
    th = theta_tables(_geometry(cfg), box, sites, Quadrature(samples=cfg.quad_samples, seed=cfg.seed))
    dec = build_decomposition(st, cfg.a, cfg.n0, cfg.n3, p.mu, th)
    space = TruncatedFockSpace(ChainGeometry(cfg.N), cfg.n_max, cfg.max_dim)
    res = integrated_current_experiment(dec, space, cfg.times())
    io.write_csv(out / "integrated_current.csv", res.rows, list(res.COLUMNS))
    bt, bb = res.column("boundary_term"), res.column("boundary_bound")
    checks = {"integrated identity": _check(res.column("integrated_identity_residual").max(), 1e-7),
              "quadrature cross-check": _check(res.column("quadrature_residual").max(), 1e-7),
              "boundary term bound": {"value": float((bt - bb).max()), "tolerance": 0.0,
                                      "passed": bool(np.all(bt <= bb * (1 + 1e-12)))}}
    return checks, {"integrated_current.csv": None}, {"provenance": res.provenance}


PIPELINES = {"kam-verify": run_kam_verify, "geometry-suite": run_geometry_suite,
             "current-decompose": run_current_decompose, "nekhoroshev": run_nekhoroshev,
             "integrated-current": run_integrated_current}


# ------------------------------------------------------------------ entry

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bhkam", description=__doc__)
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--out", default="bhkam_out", help="output directory")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for BLAS")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.override, args.seed)
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from .kam import prescribed_orders
    n1_ref, n2_ref = prescribed_orders(cfg.n0, cfg.gamma)
    out = Path(args.out)
    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            checks, artifacts, extra = PIPELINES[args.subcommand](cfg, out)
    except (CapacityError, RangeError, MemoryError) as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    elapsed = time.perf_counter() - t0
    passed = all(c["passed"] for c in checks.values())
    names = list(artifacts)
    if not passed and extra.get("replay"):
        io.write_json(out / "replay.json", extra["replay"])
        names.append("replay.json")
    extra = {k: v for k, v in extra.items() if k != "replay"}
    extra["orders"] = {"n1_prescribed": n1_ref, "n2_prescribed": n2_ref,
                       "n1_used": cfg.n1, "n2_used": cfg.n2}
    extra["threads"] = args.threads
    man = io.manifest(asdict(cfg), args.subcommand, names, checks, {"total_seconds": elapsed}, extra)
    io.write_json(out / "manifest.json", man)
    for name, c in checks.items():
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {name}: {c['value']:.3g} (tol {c['tolerance']:.3g})")
    return EXIT_OK if passed else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
