"""Gibbs sampling, expectations and exact time evolution on truncated spaces."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import scipy.stats

from .lattice import (ChainGeometry, ModelParams, OperatorMatrix, TruncatedFockSpace,
                      build_bose_hubbard, build_reduced_hamiltonian, right_part)


# ------------------------------------------------------------------ Gibbs measure

@dataclass
class GibbsSampler:
    """Product law p(n) ~ exp(-mu n) per site, on {0..n_max} or on all n >= 0."""

    mu: float
    n_max: int | None = None
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        self.rng = np.random.default_rng(self.seed)

    def pmf(self, n_max: int | None = None) -> np.ndarray:
        n_max = self.n_max if n_max is None else n_max
        if n_max is None:
            raise ValueError("pmf needs a cutoff for the untruncated law")
        w = np.exp(-self.mu * np.arange(n_max + 1))
        return w / w.sum()

    def mean_occupation(self) -> float:
        if self.n_max is None:
            return 1.0 / np.expm1(self.mu)
        return float(np.arange(self.n_max + 1) @ self.pmf())

    def sample(self, size: int, N: int) -> np.ndarray:
        q = -np.expm1(-self.mu)
        if self.n_max is None:
            return self.rng.geometric(q, size=(size, N)) - 1
        # inverse CDF of the truncated geometric law
        u = self.rng.random((size, N))
        tail = -np.expm1(-self.mu * (self.n_max + 1))
        n = np.floor(np.log1p(-u * tail) / -self.mu).astype(np.int64)
        return np.minimum(n, self.n_max)

    def sample_config(self, N: int) -> tuple[int, ...]:
        return tuple(int(v) for v in self.sample(1, N)[0])

    def chi2_test(self, samples: np.ndarray) -> float:
        """p-value of the pooled per-site histogram against the truncated law."""
        if self.n_max is None:
            raise ValueError("chi-square test needs the truncated law")
        counts = np.bincount(np.asarray(samples).ravel(), minlength=self.n_max + 1)
        expected = self.pmf() * counts.sum()
        keep = expected >= 5
        obs = np.append(counts[keep], counts[~keep].sum())
        exp = np.append(expected[keep], expected[~keep].sum())
        if exp[-1] == 0:
            obs, exp = obs[:-1], exp[:-1]
        return float(scipy.stats.chisquare(obs, exp).pvalue)


def gibbs_weights(space: TruncatedFockSpace, mu: float) -> np.ndarray:
    w = np.exp(-mu * space.configs.sum(axis=1))
    return w / w.sum()


def cap_weight(mu: float, n_max: int, N: int) -> float:
    """Gibbs weight of configurations with some occupancy above n_max."""
    return float(1.0 - (-np.expm1(-mu * (n_max + 1))) ** N)


def suggested_cap(mu: float) -> int:
    return int(np.ceil(3.0 / mu)) + 4


def _is_diagonal(m: sp.spmatrix) -> bool:
    coo = sp.coo_matrix(m)
    return bool(np.all(coo.row[coo.data != 0] == coo.col[coo.data != 0]))


def expectation(O: OperatorMatrix, mu: float, mode: str = "truncated-trace",
                sampler: GibbsSampler | None = None, samples: int = 10_000) -> tuple[float, float]:
    """Gibbs expectation of O as (value, stderr)."""
    space = O.space
    diag = O.data.diagonal()
    if mode == "exact-diagonal":
        if not _is_diagonal(O.data):
            raise ValueError("exact-diagonal mode needs a diagonal observable")
        site = GibbsSampler(mu, space.n_max).pmf()
        w = np.prod(site[space.configs], axis=1)
        return float(np.real(w @ diag)), 0.0
    if mode == "truncated-trace":
        return float(np.real(gibbs_weights(space, mu) @ diag)), 0.0
    if mode == "mc":
        sampler = sampler or GibbsSampler(mu, space.n_max)
        if sampler.n_max is None or sampler.n_max > space.n_max:
            raise ValueError("sampler must stay inside the truncated space")
        idx = space.index_of(sampler.sample(samples, space.N))
        vals = np.real(diag[idx])
        return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(samples))
    raise ValueError(f"unknown expectation mode {mode!r}")


# ------------------------------------------------------------------ evolution

class TimeEvolver:
    """Exact evolution under a particle-conserving Hamiltonian, one eigendecomposition per sector."""

    def __init__(self, H: OperatorMatrix, sectors: np.ndarray | None = None, tol: float = 1e-9):
        self.H = H
        self.space = H.space
        totals = self.space.configs.sum(axis=1)
        keep = np.ones(self.space.dim, bool) if sectors is None else np.isin(totals, sectors)
        self.blocks = []
        M = H.data.tocsr()
        for s in np.unique(totals[keep]):
            idx = np.flatnonzero((totals == s) & keep)
            block = M[idx][:, idx].toarray()
            if not np.allclose(block, block.conj().T, atol=1e-12, rtol=0):
                raise ValueError("Hamiltonian block is not hermitian")
            if _is_diagonal(sp.csr_matrix(block)):
                E = np.real(np.diag(block)).copy()
                V = np.eye(len(idx))
            else:
                E, V = np.linalg.eigh(block)
            defect = np.abs(V.conj().T @ V - np.eye(len(idx))).max(initial=0.0)
            if defect > tol:
                raise ValueError(f"eigenbasis unitarity defect {defect:.2e}")
            self.blocks.append((int(s), idx, E, V))
        self.unitarity_defect = max((np.abs(V.conj().T @ V - np.eye(len(i))).max(initial=0.0)
                                     for _, i, _, V in self.blocks), default=0.0)

    def rotate(self, O: sp.spmatrix):
        """Sector blocks of V^dagger O V (O must conserve particle number)."""
        O = sp.csr_matrix(O)
        out = []
        for s, idx, E, V in self.blocks:
            out.append(V.conj().T @ O[idx][:, idx].toarray() @ V)
        return out

    def evolve_operator(self, O: sp.spmatrix, t: float) -> sp.csr_matrix:
        """e^{iHt} O e^{-iHt} on the covered sectors."""
        dim = self.space.dim
        rows, cols, vals = [], [], []
        for (s, idx, E, V), A in zip(self.blocks, self.rotate(O)):
            ph = np.exp(1j * E * t)
            B = V @ (ph[:, None] * A * ph.conj()[None, :]) @ V.conj().T
            r, c = np.meshgrid(idx, idx, indexing="ij")
            rows.append(r.ravel()); cols.append(c.ravel()); vals.append(B.ravel())
        if not rows:
            return sp.csr_matrix((dim, dim), dtype=complex)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(dim, dim))

    def propagate(self, psi: np.ndarray, t: float, method: str = "eig") -> np.ndarray:
        if method == "krylov":
            return spla.expm_multiply(-1j * t * self.H.data.tocsc(), psi)
        out = np.zeros_like(psi, dtype=complex)
        for s, idx, E, V in self.blocks:
            out[idx] = V @ (np.exp(-1j * E * t) * (V.conj().T @ psi[idx]))
        return out


def evolve_heisenberg(O: OperatorMatrix, H: OperatorMatrix, t: float) -> OperatorMatrix:
    if O.space.dim != H.space.dim:
        raise ValueError("operator and Hamiltonian live on different spaces")
    return OperatorMatrix(TimeEvolver(H).evolve_operator(O.data, t), O.space, O.kind)


def sector_probabilities(ev: TimeEvolver, mu: float) -> list[float]:
    """Gibbs weight per configuration, one number per covered sector."""
    Z = sum(len(idx) * np.exp(-mu * s) for s, idx, _, _ in ev.blocks)
    return [np.exp(-mu * s) / Z for s, idx, _, _ in ev.blocks]


def drift_moments(ev: TimeEvolver, A: sp.spmatrix, mu: float, times: np.ndarray) -> dict:
    """omega((A(t) - A(0))^dagger (A(t) - A(0))) on a grid and its running time average."""
    times = np.asarray(times, dtype=float)
    value = np.zeros_like(times)
    average = np.zeros_like(times)
    for p, (s, idx, E, V), At in zip(sector_probabilities(ev, mu), ev.blocks, ev.rotate(A)):
        w = np.abs(At) ** 2
        om = (E[:, None] - E[None, :]).ravel()
        w = w.ravel()
        nz = (w != 0) & (om != 0)
        om, w = om[nz], w[nz]
        if not len(w):
            continue
        value += p * (2.0 * w[None, :] * (1.0 - np.cos(np.outer(times, om)))).sum(axis=1)
        x = np.outer(times, om)
        sinc = np.where(x == 0, 1.0, np.sin(x) / np.where(x == 0, 1.0, x))
        average += p * (2.0 * w[None, :] * (1.0 - sinc)).sum(axis=1)
    return {"t": times, "value": value, "time_average": average}


# ------------------------------------------------------------------ results

@dataclass
class ExperimentResult:
    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    COLUMNS = ("t", "mu", "g", "observable", "value", "stderr")

    def add(self, t, mu, g, observable, value, stderr=0.0):
        self.rows.append({"t": float(t), "mu": float(mu), "g": float(g), "observable": observable,
                          "value": float(value), "stderr": float(stderr)})

    def column(self, observable: str, key: str = "value") -> np.ndarray:
        return np.array([r[key] for r in self.rows if r["observable"] == observable])


def params_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def interval_operator(params: ModelParams, space: TruncatedFockSpace, a1: int, a2: int,
                      reduced: bool = False) -> sp.csr_matrix:
    """H_I = H_{>a1} - H_{>a2}, the sites a1 < x <= a2 with their right bonds."""
    if not a1 < a2:
        raise ValueError("interval needs a1 < a2")
    return (right_part(params, space, a1, reduced) - right_part(params, space, a2, reduced)).tocsr()


def bond_current(H: sp.spmatrix, right: sp.spmatrix) -> sp.csr_matrix:
    return sp.csr_matrix(1j * (H @ right - right @ H))


def nekhoroshev_experiment(interval: tuple[int, int], times, mus, g: float, N: int, n_max: int,
                           delta: float = 0.3, gamma: float = 0.75) -> ExperimentResult:
    """Energy drift omega((H_I(t) - H_I(0))^2) for the physical chain, plus the sum rule.

    The sum rule compares the spectral time derivative of H_I(t) with the evolved
    currents J_{a1}(t) - J_{a2}(t), both in the sector eigenbases.
    """
    a1, a2 = interval
    times = np.asarray(times, dtype=float)
    space = TruncatedFockSpace(ChainGeometry(N), n_max)
    res = ExperimentResult()
    p = ModelParams(g, float(mus[0]), delta, gamma)
    H = build_bose_hubbard(p, space)
    H.data.eliminate_zeros()
    HI = interval_operator(p, space, a1, a2)
    HI.eliminate_zeros()
    ev = TimeEvolver(H)
    right = lambda a: right_part(p, space, a, reduced=False)
    J = bond_current(H.data, right(a1)) - bond_current(H.data, right(a2))
    worst = _sum_rule_residual(ev, HI, J, times)
    for mu in mus:
        dm = drift_moments(ev, HI, float(mu), times)
        for t, v, av, r in zip(times, dm["value"], dm["time_average"], worst):
            res.add(t, mu, g, "drift", v)
            res.add(t, mu, g, "drift_time_average", av)
            res.add(t, mu, g, "sum_rule_residual", r)
    res.provenance = {"interval": [a1, a2], "N": N, "n_max": n_max, "g": g,
                      "mus": [float(m) for m in mus], "truncation_loss": H.truncation_loss,
                      "cap_weight": {str(float(m)): cap_weight(float(m), n_max, N) for m in mus},
                      "unitarity_defect": ev.unitarity_defect}
    res.provenance["params_hash"] = params_hash(res.provenance)
    return res


def _sum_rule_residual(ev: TimeEvolver, A: sp.spmatrix, J: sp.spmatrix, times) -> np.ndarray:
    """max |d/dt A(t) - J(t)| elementwise in the sector eigenbases at each time."""
    out = np.zeros(len(times))
    for (s, idx, E, V), At, Jt in zip(ev.blocks, ev.rotate(A), ev.rotate(J)):
        om = E[:, None] - E[None, :]
        for k, t in enumerate(times):
            ph = np.exp(1j * om * t)
            diff = (1j * om * At - Jt) * ph
            out[k] = max(out[k], float(np.abs(diff).max(initial=0.0)))
    return out


def finite_difference_sum_rule(ev: TimeEvolver, A: sp.spmatrix, J: sp.spmatrix, t: float,
                               h: float = 1e-3) -> float:
    """Fourth-order central difference of A(t) against J(t), max elementwise."""
    f = lambda s: ev.evolve_operator(A, s).toarray()
    d = (-f(t + 2 * h) + 8 * f(t + h) - 8 * f(t - h) + f(t - 2 * h)) / (12 * h)
    return float(np.abs(d - ev.evolve_operator(J, t).toarray()).max())


# ------------------------------------------------------------------ integrated current

def integrated_current_experiment(dec, space: TruncatedFockSpace, times,
                                  quadrature_checks: int = 2) -> ExperimentResult:
    """Check int_0^t j_a = u_a(t) - u_a(0) + mu^(n0+1) int_0^t g_a in reduced units.

    Evolution uses the reduced Hamiltonian on the complete particle-number sectors,
    where the truncated matrices coincide with the untruncated operators.
    Time integrals are done in closed form in the eigenbasis and cross-checked by
    adaptive quadrature at a few grid times.
    """
    from .currents import current_operator
    st = dec.state
    p = ModelParams(st.params.g, dec.mu, st.params.delta, st.params.gamma)
    H = build_reduced_hamiltonian(p, space)
    ev = TimeEvolver(H, sectors=np.arange(space.n_max + 1))
    j = current_operator(p, space, dec.a, reduced=True).data
    u = dec.u.to_matrix(space).data
    g = dec.g.to_matrix(space).data
    U = dec.U.to_matrix(space).data
    c = dec.mu ** (dec.n0 + 1)
    times = np.asarray(times, dtype=float)
    res = ExperimentResult()
    probs = sector_probabilities(ev, dec.mu)
    rot = list(zip(ev.blocks, ev.rotate(j), ev.rotate(u), ev.rotate(g), ev.rotate(U), probs))
    U2 = sum(p_s * float(np.sum(np.abs(Ut) ** 2)) for _, _, _, _, Ut, p_s in rot)
    for t in times:
        worst = 0.0
        boundary = 0.0
        for (s, idx, E, V), jt, ut, gt, Ut, p_s in rot:
            om = E[:, None] - E[None, :]
            ph = np.exp(1j * om * t)
            integ = np.where(om == 0, t, (ph - 1) / np.where(om == 0, 1.0, 1j * om))
            lhs = jt * integ
            rhs = ut * (ph - 1) + c * gt * integ
            worst = max(worst, float(np.abs(lhs - rhs).max(initial=0.0)))
            boundary += p_s * float(np.sum(np.abs(Ut) ** 2 * np.abs(ph - 1) ** 2))
        res.add(t, dec.mu, p.g, "integrated_identity_residual", worst)
        res.add(t, dec.mu, p.g, "boundary_term", boundary)
        res.add(t, dec.mu, p.g, "boundary_bound", 4 * U2)
    if quadrature_checks:
        picks = times[np.linspace(0, len(times) - 1, min(quadrature_checks, len(times))).astype(int)]
        for t in picks:
            res.add(t, dec.mu, p.g, "quadrature_residual", _quadrature_residual(ev, j, u, g, c, t))
    res.provenance = {"a": dec.a, "n0": dec.n0, "mu": dec.mu, "N": space.N, "n_max": space.n_max,
                      "sectors": [int(b[0]) for b in ev.blocks], "unitarity_defect": ev.unitarity_defect}
    res.provenance["params_hash"] = params_hash(res.provenance)
    return res


def _quadrature_residual(ev, j, u, g, c, t) -> float:
    """Same identity with the time integral done by adaptive quadrature in the number basis."""
    if t == 0:
        return 0.0
    idx = np.concatenate([b[1] for b in ev.blocks])

    def integrand(s):
        return (ev.evolve_operator(j, s) - c * ev.evolve_operator(g, s))[idx][:, idx].toarray()

    integral, _ = scipy.integrate.quad_vec(integrand, 0.0, t, epsabs=1e-11, epsrel=1e-11)
    du = (ev.evolve_operator(u, t) - sp.csr_matrix(u))[idx][:, idx].toarray()
    return float(np.abs(integral - du).max())
