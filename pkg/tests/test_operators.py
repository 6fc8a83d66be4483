import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bhkam.lattice import (CapacityError, ChainGeometry, ModelParams, TruncatedFockSpace,
                           build_reduced_hamiltonian, local_pieces)
from bhkam.operators import (Box, ClassSOperator, CutoffFunction, DiagonalFunction, FormalSeries,
                             box_region, commutator, delta_E, discrete_derivative,
                             hamiltonian_pieces, max_difference, move_range, move_set,
                             series_apply, series_commutator, series_truncate, smooth_step, total,
                             xi, zeta)
from bhkam.kam import random_operator


def _space(N, n):
    return TruncatedFockSpace(ChainGeometry(N), n)


def _dense(op, space):
    return op.to_matrix(space).toarray()


# moves ---------------------------------------------------------------

def test_move_set_r1_n2():
    moves = set(move_set(1, ChainGeometry(2)))
    assert {(1, -1), (-1, 1), (1, 0), (0, 1), (1, 1)} <= moves
    assert all(max(abs(v) for v in m) <= 1 for m in moves)
    assert all(np.dot(m, m) <= 2 for m in moves)


def test_move_set_brute_force():
    brute = set()
    for m in itertools.product(range(-2, 3), repeat=5):
        nz = [i for i, v in enumerate(m) if v]
        if nz and nz[-1] - nz[0] <= 4:
            brute.add(m)
    assert set(move_set(2, ChainGeometry(5))) == brute
    assert all(move_range(m) <= 2 for m in brute)


def test_delta_E_examples():
    assert delta_E((3, 1), (-1, 1)) == -2
    assert delta_E((5, 5), (1, -1)) == 2


@given(st.lists(st.integers(0, 50), min_size=3, max_size=3),
       st.lists(st.integers(-2, 2), min_size=3, max_size=3))
def test_delta_E_brute(eta, rho):
    new = np.add(eta, rho)
    assert delta_E(eta, rho) == int(np.sum(new ** 2) - np.sum(np.square(eta)))


# cutoff --------------------------------------------------------------

def test_cutoff_examples():
    # delta^-gamma = 3
    delta, gamma = 3.0 ** (-1 / 0.75), 0.75
    assert zeta((1, -1), (0, 10), delta, gamma) == 0.0      # Delta E = -18
    assert zeta((1, -1), (0, 0), delta, gamma) == 1.0       # Delta E = 2
    v = zeta((1, 0), (1.75, 0), delta, gamma)               # Delta E = 4.5
    assert 0 < v < 1 and v == pytest.approx(xi(1.5)) and v == pytest.approx(0.5)


@given(st.floats(-5, 5))
def test_xi_properties(x):
    assert 0 <= xi(x) <= 1
    assert xi(x) == xi(-x)
    if abs(x) <= 1:
        assert xi(x) == 1
    if abs(x) >= 2:
        assert xi(x) == 0


def test_smooth_step_monotone():
    t = np.linspace(-0.5, 1.5, 401)
    s = smooth_step(t)
    assert np.all(np.diff(s) >= 0) and s[0] == 0 and s[-1] == 1
    assert CutoffFunction(3.0)(4.5) == pytest.approx(0.5)


# diagonal functions ------------------------------------------------------

def test_discrete_derivative():
    E = DiagonalFunction.energy(3)
    rho = np.array([1, -1, 0])
    eta = np.array([[4, 2, 7], [0, 3, 1]])
    assert np.array_equal(discrete_derivative(E, rho)(eta), [delta_E(e, rho) for e in eta])
    c = discrete_derivative(DiagonalFunction.constant(2.0), rho)(eta)
    assert np.all(c == 0)
    occ = discrete_derivative(DiagonalFunction.occupation(0), rho)(eta)
    assert np.all(occ == 1)


# class S algebra ------------------------------------------------------------

@pytest.fixture
def setup(params):
    box = Box(3, 10)
    space = _space(3, 10)
    moves = [m for m in move_set(1, ChainGeometry(3)) if any(m)]
    return box, space, moves


def test_v_matches_matrix_builder(params):
    box = Box(3, 6)
    ds, vs = hamiltonian_pieces(box, params)
    space = _space(3, 6)
    mds, mvs, _ = local_pieces(params, space, reduced=True)
    for op, m in zip(vs + ds, mvs + mds):
        assert np.abs(_dense(op, space) - m.toarray()).max() < 1e-14
    h = total(ds, box, params.delta) + total(vs, box, params.delta).scale(params.mu)
    assert np.abs(_dense(h, space) - build_reduced_hamiltonian(params, space).toarray()).max() < 1e-14


def test_compose_matches_matrix_product(setup, rng):
    box, space, moves = setup
    f = random_operator(box, 0.3, rng, moves)
    g = random_operator(box, 0.3, rng, moves)
    fg = f @ g
    inner = _space(3, 7)
    mask = inner.buffered_mask(2)
    F, G = _dense(f, space), _dense(g, space)
    FG = _dense(fg, inner)
    # restrict the big product to configurations of the small space
    idx = space.index_of(inner.configs[mask])
    assert np.abs((F @ G)[np.ix_(idx, idx)] - FG[np.ix_(mask, mask)]).max() < 1e-12


def test_adjoint_matches_conjugate_transpose(setup, rng):
    box, space, moves = setup
    f = random_operator(box, 0.3, rng, moves, hermitian=False)
    F = _dense(f, space)
    Fd = _dense(f.adjoint(), space)
    mask = space.buffered_mask(1)
    assert np.abs((F.conj().T - Fd)[np.ix_(mask, mask)]).max() < 1e-13
    h = f + f.adjoint()
    assert max_difference(h, h.adjoint(), box_region(box, 9))[0] < 1e-14


def test_commutator_with_diagonal_sign(params):
    # [d, A_rho b] carries the factor E(eta + rho) - E(eta) of d's symbol
    box = Box(2, 6)
    d = total(hamiltonian_pieces(box, params)[0], box, params.delta)
    rho = (1, -1)
    f = ClassSOperator.from_coefficients(box, params.delta, {rho: DiagonalFunction.constant(1.0)})
    c = commutator(d, f)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = c.terms[rho] / f.terms[rho]
    dE = box.energy_difference(rho) * params.delta ** 2
    ok = np.isfinite(ratio) & (f.terms[rho] != 0)
    assert np.abs(ratio[ok] - dE[ok]).max() < 1e-12
    space = _space(2, 4)
    D, F, C = (_dense(o, space) for o in (d, f, c))
    assert np.abs((D @ F - F @ D) - C).max() < 1e-12


def test_self_commutator_vanishes(setup, rng):
    box, space, moves = setup
    f = random_operator(box, 0.3, rng, moves)
    assert commutator(f, f).max_abs(box_region(box, 8)) < 1e-12


def test_local_pieces_commute_far_apart(params):
    box = Box(6, 4)
    ds, vs = hamiltonian_pieces(box, params)
    h = [ds[x] + vs[x] for x in range(6)]
    region = box_region(box, 3)
    for x in range(6):
        for y in range(6):
            if abs(x - y) > 2:
                assert commutator(h[x], h[y]).max_abs(region) == 0


def test_resonant_part(setup, rng, params):
    box, space, moves = setup
    f = random_operator(box, params.delta, rng, moves)
    diag = ClassSOperator(box, {(0, 0, 0): np.arange(box.points.size // 3).reshape(box.shape)},
                          params.delta)
    assert max_difference(diag.resonant_part(params.gamma), diag)[0] == 0
    R = _dense(f.resonant_part(params.gamma), space)
    F = _dense(f, space)
    # elementwise zeta weighting: zeta of (target - source) at the source configuration
    for j in range(0, space.dim, 37):
        eta = space.configs[j]
        for i in np.flatnonzero(F[:, j]):
            rho = space.configs[i] - eta
            assert R[i, j] == pytest.approx(F[i, j] * zeta(rho, eta, params.delta, params.gamma))


def test_resonant_part_kills_far_hop():
    box = Box(2, 6)
    delta = 0.5
    f = ClassSOperator.from_coefficients(box, delta, {(2, -2): DiagonalFunction.constant(1.0)})
    # on this box Delta E = 4(eta0 - eta1) + 8; choose gamma so the cutoff window is tiny
    r = f.resonant_part(0.51)
    dE = np.abs(box.energy_difference((2, -2)))
    assert np.all(r.terms.get((2, -2), np.zeros(box.shape))[dE >= 2 * delta ** -0.51] == 0)


def test_kam_solve_properties(setup, rng, params):
    box, space, moves = setup
    diag = ClassSOperator(box, {(0, 0, 0): np.ones(box.shape)}, params.delta)
    assert diag.kam_solve(params.gamma).terms == {}
    f = random_operator(box, params.delta, rng, moves)
    u = f.kam_solve(params.gamma)
    assert max_difference(u, -u.adjoint(), box_region(box, 9))[0] <= 1e-12
    d = total(hamiltonian_pieces(box, params)[0], box, params.delta)
    resid = max_difference(commutator(d, u), f - f.resonant_part(params.gamma), box_region(box, 9))
    assert resid[0] < 1e-10


def test_homological_identity_on_v_matrix(params):
    box = Box(3, 8)
    ds, vs = hamiltonian_pieces(box, params)
    d, v = total(ds, box, params.delta), total(vs, box, params.delta)
    u = v.kam_solve(params.gamma)
    space = _space(3, 6)
    D, U, Vn = (_dense(o, space) for o in (d, u, v - v.resonant_part(params.gamma)))
    mask = space.buffered_mask(2)
    assert np.abs((D @ U - U @ D - Vn)[np.ix_(mask, mask)]).max() <= 1e-10


def test_to_matrix_loss_and_capacity(params):
    box = Box(2, 6)
    f = ClassSOperator.from_coefficients(box, 0.3, {(2, 0): DiagonalFunction.constant(1.0)})
    m = f.to_matrix(_space(2, 3))
    assert m.truncation_loss > 0
    with pytest.raises(CapacityError):
        f.to_matrix(_space(2, 7))


def test_unknown_cells_raise():
    box = Box(2, 4)
    f = ClassSOperator.from_coefficients(box, 0.3, {(1, 0): DiagonalFunction.constant(1.0)})
    g = f @ f @ f @ f @ f
    with pytest.raises(CapacityError):
        max_difference(g, ClassSOperator.zero(box, 0.3))


def test_box_around_origin():
    eta = (10 ** 12, 10 ** 12 + 3)
    box = Box.around(eta, 2)
    assert box.cell(eta) == (2, 2)
    with pytest.raises(IndexError):
        box.cell((0, 0))
    f = ClassSOperator.from_coefficients(box, 1e-12, {(1, -1): DiagonalFunction.constant(1.0)})
    col = f.column(eta)
    ((tgt, val),) = col.items()
    assert tgt == (eta[0] + 1, eta[1] - 1)
    # amplitude delta * sqrt((eta0 + 1) eta1) computed exactly
    assert val.real == pytest.approx(1e-12 * np.sqrt((eta[0] + 1.0) * eta[1]), rel=1e-14)


def test_dump_roundtrip(tmp_path, params):
    box = Box(2, 3)
    _, vs = hamiltonian_pieces(box, params)
    recs = vs[0].dump()
    assert {tuple(r["move"]) for r in recs} == {(1, -1), (-1, 1)}
    for r in recs:
        assert r["window"] == [] and len(r["table"]) == 1
        for cfg, re, im in r["table"]:
            assert re == pytest.approx(params.g) and im == 0
    vs[0].dump_json(tmp_path / "v.json")


# series ---------------------------------------------------------------

def test_series_truncate_and_commutator(setup, rng):
    box, space, moves = setup
    A0, A1, B = (random_operator(box, 0.3, rng, moves) for _ in range(3))
    s = FormalSeries([A0, A1, B], 2)
    assert series_truncate(s, 1).order == 1 and series_truncate(s, 1)[2] is None
    t = FormalSeries([A0, A1], 1)
    c = series_commutator(t, t)
    region = box_region(box, 8)
    assert c[0].max_abs(region) < 1e-12 and c[1].max_abs(region) < 1e-12


def test_series_apply_matches_numeric(setup, rng):
    box, space, moves = setup
    f0, f1 = (random_operator(box, 0.3, rng, moves) for _ in range(2))
    u = random_operator(box, 0.3, rng, moves).kam_solve(0.75)
    maps = [lambda g: g, lambda g: commutator(u, g)]
    out = series_apply(maps, FormalSeries([f0, f1], 1), 1)
    mu = 1e-3
    lhs = out.evaluate(mu)
    rhs = (f0 + f1.scale(mu)) + commutator(u, f0 + f1.scale(mu)).scale(mu)
    region = box_region(box, 8)
    # the two differ by the mu^2 term only
    assert max_difference(lhs, rhs, region)[0] <= 10 * mu ** 2 * commutator(u, f1).max_abs(region) + 1e-12
