"""Acceptance criteria 1-10, one PASS/FAIL line each.

Lines are printed as the tests run and repeated in the terminal summary.
Run directly with ``pytest tests/test_acceptance.py -v``.
"""

import time

import numpy as np
import pytest

from bhkam.currents import (build_decomposition, cancellation_check, decomposition_residual_matrix,
                            gibbs_moments, loglog_slope, sector_gibbs_samples, sector_trace_average,
                            theta_tables, window_event_probabilities)
from bhkam.dynamics import integrated_current_experiment, nekhoroshev_experiment
from bhkam.geometry import (GeometryParams, Quadrature, ResonanceGeometry, geometry_property_suites,
                            planted_boundary_samples, indicator_checks)
from bhkam.kam import (build_kam, buffered_max, conjugation_oracle, random_operator, required_cap,
                       verify_adjointness, verify_formal_inverse, verify_homological, verify_normal_form)
from bhkam.lattice import ChainGeometry, ModelParams, TruncatedFockSpace
from bhkam.operators import Box, FormalSeries, move_set

from conftest import ACCEPTANCE_LINES

SEED = 20240601
GAMMA = 0.75


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def _geom(N, delta, **kw):
    return ResonanceGeometry(ChainGeometry(N), GeometryParams(delta=delta, gamma=GAMMA, **kw))


@pytest.fixture(scope="module")
def kam_states():
    params = ModelParams(0.5, 0.3, 0.3, GAMMA)
    out = {}
    for n1 in (1, 2, 3):
        t = time.perf_counter()
        out[n1] = (build_kam(n1, params, Box(3, required_cap(8, n1))), time.perf_counter() - t)
    return out


def test_criterion_1_homological():
    t = time.perf_counter()
    rep = verify_homological(ModelParams(0.5, 0.3, 0.3, GAMMA), N=3, n_max=6, count=1000, seed=SEED)
    dt = time.perf_counter() - t
    ok = rep["max_violation"] <= 1e-10 and dt <= 120
    report(1, ok, f"max residual {rep['max_violation']:.2e} over 1000 operators (tol 1e-10), {dt:.1f}s")
    assert ok


def test_criterion_2_normal_form(kam_states):
    rng = np.random.default_rng(SEED)
    space = TruncatedFockSpace(ChainGeometry(3), 8)
    worst_coef = worst_inv = worst_oracle = 0.0
    t = time.perf_counter()
    for n1, (st, build_time) in kam_states.items():
        moves = [m for m in move_set(1, ChainGeometry(3)) if any(m)]
        f = FormalSeries([random_operator(st.box, 0.3, rng, moves) for _ in range(n1 + 1)], n1)
        worst_coef = max([worst_coef] + [r["max_violation"] for r in verify_normal_form(st, 8, [f])])
        worst_inv = max(worst_inv, verify_formal_inverse(st, f, 8)["max_violation"])
        # independent matrix route: conjugating d + mu v by the generators gives htilde
        series = conjugation_oracle(st, space)
        for k in range(n1 + 1):
            diff = series[k] - st.htilde[k].to_matrix(space).data
            worst_oracle = max(worst_oracle, buffered_max(diff, space, 2 * k + 1)[0])
    dt = time.perf_counter() - t + sum(b for _, b in kam_states.values())
    ok = worst_coef <= 1e-8 and worst_oracle <= 1e-8 and worst_inv <= 1e-9 and dt <= 600
    report(2, ok, f"n1=1..3 coefficients {worst_coef:.2e}, matrix oracle {worst_oracle:.2e} "
                  f"(tol 1e-8), formal inverse {worst_inv:.2e} (tol 1e-9), {dt:.1f}s")
    assert ok


def test_criterion_3_adjointness(kam_states):
    st = kam_states[3][0]
    reps = verify_adjointness(st, 8, tol=1e-10)
    worst = max(r["max_violation"] for r in reps)
    ok = all(r["passed"] for r in reps)
    report(3, ok, f"u^(1..3) skew and htilde^(0..3) self-adjoint, max defect {worst:.2e} (tol 1e-10)")
    assert ok


def test_criterion_4_geometry_suites():
    t = time.perf_counter()
    rep = geometry_property_suites(_geom(6, 0.3, L=64.0, n2=2, r=1), SEED, 10_000, p_values=(1, 2))
    dt = time.perf_counter() - t
    v = {k: rep[k]["violations"] for k in ("proximity", "invariance", "extension")}
    ok = rep["passed"] and dt <= 300
    report(4, ok, f"10^4 trials each, violations {v}, {dt:.1f}s")
    assert ok


def test_criterion_5_indicator():
    parts, ok = [], True
    for mu in (0.2, 0.3):
        rng = np.random.default_rng(np.random.SeedSequence([SEED, int(mu * 10)]))
        etas = rng.geometric(-np.expm1(-mu), size=(10_000, 6)) - 1
        s = indicator_checks(_geom(6, mu), etas, range(6), Quadrature(seed=SEED))
        ok &= s["passed"]
        parts.append(f"mu={mu}: vanish {s['vanish_violations']}, flat {s['flat_violations']} "
                     f"(theta mid {s['theta_mid']})")
    # the desk regime has theta = 0 everywhere; the stress regime exercises the boundary
    geom = _geom(6, 1e-12)
    etas = planted_boundary_samples(geom, np.random.default_rng(SEED), 2000, 1e14)
    s = indicator_checks(geom, etas, range(6), Quadrature(seed=SEED))
    nonvac = s["theta_mid"] > 0 and s["flat_nontrivial"] > 0
    ok &= s["passed"] and nonvac
    parts.append(f"stress delta=1e-12: vanish {s['vanish_violations']}, flat {s['flat_violations']}, "
                 f"theta mid {s['theta_mid']}, nontrivial hops {s['flat_nontrivial']}")
    report(5, ok, "; ".join(parts))
    assert ok


def test_criterion_6_cancellation():
    params = ModelParams(0.5, 0.3, 0.3, GAMMA)
    rng = np.random.default_rng(np.random.SeedSequence([SEED, 6]))
    etas = rng.geometric(-np.expm1(-0.3), size=(1000, 4)) - 1
    desk = cancellation_check(params, _geom(4, 0.3), etas, 1, 1, 0.3, Quadrature(seed=SEED))
    # stress regime: planted resonances (theta = 0) plus generic points (theta = 1 nearby)
    tiny = 1e-12
    geom = _geom(5, tiny)
    srng = np.random.default_rng(SEED + 1)
    pts = np.vstack([planted_boundary_samples(geom, srng, 100, 1e13),
                     np.round(srng.exponential(1e13, size=(200, 5)))])
    stress = cancellation_check(ModelParams(0.5, tiny, tiny, GAMMA), geom, pts, 2, 1, tiny,
                                Quadrature(seed=SEED))
    # the unweighted cuts at desk scale show the 1e-9 check is able to fire
    ok = desk.passed and stress.passed and stress.checked_pairs > 0 and desk.max_norm_unweighted > 1e-9
    report(6, ok, f"desk 10^3 samples: violations {desk.violations}, split commutator nonzero "
                  f"{desk.split_nonzero} (outside Z {desk.split_nonzero_outside_Z}), weighted cuts "
                  f"{desk.checked_pairs}, unweighted cut norm up to {desk.max_norm_unweighted:.2f}; "
                  f"stress 300 samples: weighted cuts {stress.checked_pairs}, violations "
                  f"{stress.violations}, max weighted norm {stress.max_norm_when_weighted:.1e}")
    assert ok


def test_criterion_7_decomposition():
    params = ModelParams(0.5, 0.3, 0.3, GAMMA)
    box = Box(4, required_cap(6, 1))
    st = build_kam(1, params, box)
    sites = [0, 1, 2]
    th = theta_tables(_geom(4, 0.3), box, sites, Quadrature(seed=SEED))
    dec = build_decomposition(st, 1, 1, 1, 0.3, th)
    space = TruncatedFockSpace(ChainGeometry(4), 6)
    res_sec = decomposition_residual_matrix(dec, space, space.sector_mask())[0]
    res_buf = decomposition_residual_matrix(dec, space, space.buffered_mask(2))[0]
    etas = sector_gibbs_samples(np.random.default_rng(SEED), 0.3, 4, 6, 100_000)
    gm = gibbs_moments(dec.g, etas)
    exact = sector_trace_average(dec.g, 0.3, 6)
    ok = max(res_sec, res_buf) <= 1e-9 and abs(gm["mean"]) <= 3 * gm["mean_stderr"]
    report(7, ok, f"residual {max(res_sec, res_buf):.2e} (tol 1e-9); omega(g_a) = {gm['mean']:.2e} "
                  f"+- {gm['mean_stderr']:.1e} (10^5 samples), exact sector trace {exact:.1e}")
    assert ok


def _window_rows(mus, samples, seed):
    rng = np.random.default_rng(seed)
    return [window_event_probabilities(_geom(5, mu, n2=2, n3=1, r=1), 2, mu, samples, rng)
            for mu in mus]


def test_criterion_8_probability_scalings():
    t = time.perf_counter()
    mus = [0.05, 0.1, 0.2, 0.4]
    rows = _window_rows(mus, 1_000_000, SEED)
    dt = time.perf_counter() - t
    sw = loglog_slope(mus, [r["P_W"] for r in rows])
    sz = loglog_slope(mus, [r["P_Zs"] for r in rows])
    saturated = max(max(r["P_W"], r["P_Zs"]) for r in rows) > 0.5
    ok = abs(sw - (1 - GAMMA)) <= 0.3 and abs(sz - 2 * (1 - GAMMA)) <= 0.5 and dt <= 900
    flag = " [saturated: probabilities near 1 on this grid, see asymptotic check]" if saturated else ""
    report(8, ok, f"slope P_W {sw:.3f} (target 0.25+-0.3), slope P_Zs {sz:.3f} "
                  f"(target 0.5+-0.5), 10^6 samples, {dt:.1f}s{flag}")
    assert ok


def test_probability_scalings_asymptotic_grid():
    # far from saturation the estimator sees the predicted exponents
    mus = [1e-8, 1e-7, 1e-6, 1e-5]
    rows = _window_rows(mus, 1_000_000, SEED + 8)
    sw = loglog_slope(mus, [r["P_W"] for r in rows])
    sz = loglog_slope(mus, [r["P_Zs"] for r in rows])
    print(f"asymptotic grid: slope P_W {sw:.3f}, slope P_Zs {sz:.3f}")
    assert abs(sw - 0.25) <= 0.05 and abs(sz - 0.5) <= 0.1


def test_criterion_9_dynamics():
    times = np.linspace(0, 50, 51)
    zero = nekhoroshev_experiment((0, 2), times, [0.5], 0.0, 4, 6)
    drift0 = float(np.abs(zero.column("drift")).max())
    live = nekhoroshev_experiment((0, 2), times, [0.5], 0.5, 4, 6)
    sum_rule = float(live.column("sum_rule_residual").max())
    params = ModelParams(0.5, 0.3, 0.3, GAMMA)
    box = Box(3, required_cap(6, 1))
    st = build_kam(1, params, box)
    th = theta_tables(_geom(3, 0.3), box, [0, 1, 2], Quadrature(seed=SEED))
    dec = build_decomposition(st, 1, 1, 1, 0.3, th)
    ic = integrated_current_experiment(dec, TruncatedFockSpace(ChainGeometry(3), 6), times)
    integ = float(max(ic.column("integrated_identity_residual").max(),
                      ic.column("quadrature_residual").max()))
    ok = drift0 == 0.0 and sum_rule <= 1e-8 and integ <= 1e-7
    report(9, ok, f"g=0 drift max {drift0:g} (exact 0); sum rule {sum_rule:.2e} (tol 1e-8); "
                  f"integrated identity {integ:.2e} (tol 1e-7)")
    assert ok


def test_criterion_10_localization_trend():
    times = np.linspace(0, 100, 201)
    vals = {}
    for g in (0.05, 0.1):
        res = nekhoroshev_experiment((0, 2), times, [0.5], g, 4, 8)
        vals[g] = float(res.column("drift_time_average")[-1])
    ratio = vals[0.05] / vals[0.1]
    ok = ratio <= 0.6
    report(10, ok, f"time-averaged drift ratio g=0.05/g=0.1 = {ratio:.3f} (<= 0.6; heuristic, "
                   f"n_max=8 as specified)")
    assert ok
