import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from bhkam.currents import build_decomposition
from bhkam.dynamics import (ExperimentResult, GibbsSampler, TimeEvolver, cap_weight,
                            drift_moments, evolve_heisenberg, expectation,
                            finite_difference_sum_rule, integrated_current_experiment,
                            interval_operator, nekhoroshev_experiment, suggested_cap)
from bhkam.kam import build_kam, required_cap
from bhkam.lattice import (ChainGeometry, ModelParams, OperatorMatrix, TruncatedFockSpace,
                           build_bose_hubbard, number_squared)
from bhkam.operators import Box


def _space(N, n):
    return TruncatedFockSpace(ChainGeometry(N), n)


# sampling ------------------------------------------------------------------

def test_mean_occupation_closed_form():
    assert GibbsSampler(np.log(2)).mean_occupation() == pytest.approx(1.0)
    s = GibbsSampler(0.1, seed=3)
    x = s.sample(200_000, 1).ravel()
    assert s.mean_occupation() == pytest.approx(9.508, abs=1e-3)
    assert abs(x.mean() - s.mean_occupation()) <= 3 * x.std() / np.sqrt(len(x))


def test_truncated_sampler_chi2():
    s = GibbsSampler(0.3, n_max=12, seed=1)
    x = s.sample(100_000, 1)
    assert x.max() <= 12 and x.min() >= 0
    assert s.chi2_test(x) > 0.01


def test_occupation_scales_like_inverse_mu():
    mus = np.array([0.01, 0.02, 0.04])
    means = [GibbsSampler(m).mean_occupation() for m in mus]
    slope = np.polyfit(np.log(mus), np.log(means), 1)[0]
    assert slope == pytest.approx(-1.0, abs=0.02)


def test_sampler_rejects_bad_mu():
    with pytest.raises(ValueError):
        GibbsSampler(0.0)


# expectations -------------------------------------------------------------

def test_identity_expectation_all_modes():
    space = _space(2, 5)
    I = OperatorMatrix(sp.identity(space.dim, format="csr"), space)
    for mode in ("exact-diagonal", "truncated-trace", "mc"):
        assert expectation(I, 0.4, mode, samples=500)[0] == pytest.approx(1.0, abs=1e-15)


def test_number_expectation_log2():
    space = _space(1, 40)
    n = OperatorMatrix(sp.diags(space.configs[:, 0].astype(float), format="csr"), space)
    assert expectation(n, np.log(2), "exact-diagonal")[0] == pytest.approx(1.0, abs=1e-9)
    assert expectation(n, np.log(2), "truncated-trace")[0] == pytest.approx(1.0, abs=1e-9)


def test_energy_at_g_zero():
    space = _space(3, 30)
    mu = 0.7
    H = build_bose_hubbard(ModelParams(0.0, mu, 0.3, 0.75), space)
    n = np.arange(31)
    w = np.exp(-mu * n)
    second = (n ** 2) @ w / w.sum()
    assert expectation(H, mu, "exact-diagonal")[0] == pytest.approx(3 * second, rel=1e-12)


def test_mode_mismatch():
    space = _space(2, 3)
    H = build_bose_hubbard(ModelParams(0.5, 0.3, 0.3, 0.75), space)
    with pytest.raises(ValueError):
        expectation(H, 0.3, "exact-diagonal")
    with pytest.raises(ValueError):
        expectation(H, 0.3, "nonsense")


def test_cap_rule():
    assert suggested_cap(0.5) == 10
    assert cap_weight(0.5, suggested_cap(0.5), 1) < np.exp(-3)


# evolution ---------------------------------------------------------------

@pytest.fixture(scope="module")
def small_H():
    space = _space(3, 4)
    return build_bose_hubbard(ModelParams(0.7, 0.3, 0.3, 0.75), space)


def test_evolution_matches_expm(small_H):
    space = small_H.space
    O = number_squared(space, 1)
    Hd = small_H.toarray()
    for t in (0.0, 0.37, 2.5):
        U = sla.expm(-1j * Hd * t)
        want = U.conj().T @ O.toarray() @ U
        got = evolve_heisenberg(OperatorMatrix(O, space), small_H, t).toarray()
        assert np.abs(got - want).max() <= 1e-8
    assert np.abs(evolve_heisenberg(OperatorMatrix(O, space), small_H, 0.0).toarray()
                  - O.toarray()).max() <= 1e-12


def test_hamiltonian_invariant(small_H):
    ev = TimeEvolver(small_H)
    Ht = ev.evolve_operator(small_H.data, 13.0)
    assert abs(Ht - small_H.data).max() <= 1e-10
    assert ev.unitarity_defect <= 1e-9


def test_krylov_matches_eig(small_H, rng):
    ev = TimeEvolver(small_H)
    psi = rng.normal(size=small_H.space.dim) + 0j
    a = ev.propagate(psi, 1.3)
    b = ev.propagate(psi, 1.3, method="krylov")
    assert np.abs(a - b).max() <= 1e-8
    assert np.linalg.norm(a) == pytest.approx(np.linalg.norm(psi))


def test_drift_closed_form_matches_direct(small_H):
    space = small_H.space
    p = ModelParams(0.7, 0.3, 0.3, 0.75)
    A = interval_operator(p, space, 0, 1)
    ev = TimeEvolver(small_H)
    times = np.array([0.0, 0.8, 3.0])
    dm = drift_moments(ev, A, 0.3, times)
    w = np.exp(-0.3 * space.configs.sum(axis=1))
    w /= w.sum()
    for t, v in zip(times, dm["value"]):
        D = (ev.evolve_operator(A, t) - A).toarray()
        assert v == pytest.approx(float(np.real(w @ np.diag(D.conj().T @ D))), abs=1e-10)
    assert dm["value"][0] == 0


def test_gibbs_state_time_invariant(small_H):
    ev = TimeEvolver(small_H)
    space = small_H.space
    O = number_squared(space, 0)
    vals = [expectation(OperatorMatrix(ev.evolve_operator(O, t), space), 0.3)[0] for t in (0, 1, 7)]
    assert np.ptp(vals) <= 1e-10


# experiments ------------------------------------------------------------------

def test_nekhoroshev_g_zero_exact():
    res = nekhoroshev_experiment((0, 2), np.linspace(0, 50, 11), [0.5], 0.0, 4, 5)
    assert np.all(res.column("drift") == 0) and np.all(res.column("drift_time_average") == 0)


def test_nekhoroshev_sum_rule():
    res = nekhoroshev_experiment((0, 2), np.linspace(0, 50, 6), [0.5], 0.3, 4, 6)
    assert res.column("sum_rule_residual").max() <= 1e-8
    assert res.column("drift").max() > 0
    assert set(res.rows[0]) == set(ExperimentResult.COLUMNS)
    assert "params_hash" in res.provenance


def test_finite_difference_cross_check():
    space = _space(3, 3)
    p = ModelParams(0.3, 0.5, 0.3, 0.75)
    H = build_bose_hubbard(p, space)
    ev = TimeEvolver(H)
    from bhkam.dynamics import bond_current
    from bhkam.lattice import right_part
    A = interval_operator(p, space, 0, 1)
    J = (bond_current(H.data, right_part(p, space, 0, reduced=False))
         - bond_current(H.data, right_part(p, space, 1, reduced=False)))
    assert finite_difference_sum_rule(ev, A, J, 0.7) <= 1e-6


def test_integrated_current_identity():
    params = ModelParams(0.5, 0.3, 0.3, 0.75)
    st = build_kam(1, params, Box(3, required_cap(6, 1)))
    dec = build_decomposition(st, 1, 1, 1, 0.3, np.zeros(st.box.shape + (3,)))
    res = integrated_current_experiment(dec, _space(3, 6), np.linspace(0, 5, 6))
    assert res.column("integrated_identity_residual").max() <= 1e-7
    assert res.column("integrated_identity_residual")[0] == 0
    assert res.column("quadrature_residual").max() <= 1e-7
    assert np.all(res.column("boundary_term") <= res.column("boundary_bound"))
