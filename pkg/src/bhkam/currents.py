"""Energy currents and the state-dependent split of the resonant Hamiltonian."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import Quadrature, ResonanceGeometry, rank
from .kam import KamState, build_kam
from .lattice import (CapacityError, ChainGeometry, ModelParams, OperatorMatrix, TruncatedFockSpace,
                      build_reduced_hamiltonian, right_part)
from .operators import Box, ClassSOperator, FormalSeries, box_region, commutator


# ------------------------------------------------------------------ currents

def current_operator(params: ModelParams, space: TruncatedFockSpace, a: int,
                     reduced: bool = True) -> OperatorMatrix:
    """i [H, H_{>a}] for the physical or reduced Hamiltonian."""
    if reduced:
        H = build_reduced_hamiltonian(params, space).data
    else:
        from .lattice import build_bose_hubbard
        H = build_bose_hubbard(params, space).data
    right = right_part(params, space, a, reduced)
    J = 1j * (H @ right - right @ H)
    return OperatorMatrix(sp.csr_matrix(J), space, "hermitian")


# ------------------------------------------------------------------ split weights

@dataclass
class SplitWeights:
    sites: tuple
    vartheta: np.ndarray   # (..., len(sites))
    star: np.ndarray
    norm: np.ndarray


def split_weights(thetas: np.ndarray, sites, a: int) -> SplitWeights:
    """Partition of unity built from the indicators theta_y, y in B(a, n3).

    ``thetas`` has the sites along its last axis, in the order of ``sites``.
    """
    th = np.asarray(thetas, dtype=float)
    sites = tuple(sites)
    prod = np.prod(th, axis=-1)
    prod_c = np.prod(1.0 - th, axis=-1)
    norm = prod + (1.0 - prod) * th.sum(axis=-1) + prod_c
    kron = np.array([1.0 if y == a else 0.0 for y in sites])
    num = prod[..., None] * kron + (1.0 - prod)[..., None] * th
    return SplitWeights(sites, num / norm[..., None], prod_c / norm, norm)


# ------------------------------------------------------------------ decomposition

@dataclass
class CurrentDecomposition:
    a: int
    n0: int
    n3: int
    mu: float
    state: KamState
    weights: SplitWeights          # tables on the box
    split_series: FormalSeries     # htilde_{>a} by order
    h_right: ClassSOperator        # T(R htilde_{>a}) at mu
    h_right_original: ClassSOperator
    u: ClassSOperator              # reduced u_a
    g: ClassSOperator              # reduced g_a
    omega_shift: float
    omega_tail: float
    info: dict = field(default_factory=dict)

    @property
    def U(self) -> ClassSOperator:
        return self.u.scale(self.mu ** -2)

    @property
    def G(self) -> ClassSOperator:
        return self.g.scale(self.mu ** -4)

    def hamiltonian(self) -> ClassSOperator:
        st = self.state
        return st.d + st.v.scale(self.mu)


def theta_tables(geom: ResonanceGeometry, box: Box, sites, quad: Quadrature = Quadrature()) -> np.ndarray:
    """theta_y on every box cell, sites along the last axis."""
    pts = box.points.reshape(-1, box.N).astype(float)
    cols = [geom.theta_many(pts, y, quad) for y in sites]
    return np.stack(cols, axis=-1).reshape(box.shape + (len(sites),))


def split_resonant_hamiltonian(st: KamState, a: int, weights: SplitWeights
                               ) -> tuple[FormalSeries, FormalSeries]:
    """Order-by-order (htilde_{<=a}, htilde_{>a}).

    htilde_{>a} = sum_x (sum_{y>x} h_y) w_x + (sum_{y>a} h_y) w_* and the left part
    uses the complementary partial sums, so the two add up to htilde.
    """
    N = st.box.N
    left, right = [], []
    for k in range(st.n1 + 1):
        pieces = st.htilde_local[k]
        tail, head = {}, {}
        acc = st.zero()
        for y in range(N - 1, -1, -1):
            tail[y] = acc
            acc = acc + pieces[y]
        acc = st.zero()
        for y in range(N):
            acc = acc + pieces[y]
            head[y] = acc
        lo, hi = st.zero(), st.zero()
        for i, x in enumerate(weights.sites):
            lo = lo + head[x].times_diagonal(weights.vartheta[..., i])
            hi = hi + tail[x].times_diagonal(weights.vartheta[..., i])
        lo = lo + head[a].times_diagonal(weights.star)
        hi = hi + tail[a].times_diagonal(weights.star)
        left.append(lo)
        right.append(hi)
    return FormalSeries(left, st.n1), FormalSeries(right, st.n1)


def split_series(st: KamState, a: int, weights: SplitWeights) -> FormalSeries:
    return split_resonant_hamiltonian(st, a, weights)[1]


def right_original(st: KamState, a: int, mu: float) -> ClassSOperator:
    acc = st.zero()
    for x in range(st.box.N):
        if x > a:
            acc = acc + st.ds[x] + st.vs[x].scale(mu)
    return acc


def _evaluate(series: FormalSeries, mu: float, zero: ClassSOperator) -> ClassSOperator:
    got = series.evaluate(mu)
    return zero if got is None else got


def gibbs_weight_table(box: Box, mu: float) -> np.ndarray:
    return np.exp(-mu * box.points.sum(axis=-1).astype(float))


def truncated_average(op: ClassSOperator, mu: float, region: np.ndarray) -> tuple[float, float]:
    """Gibbs average of the diagonal part over a box region, and the weight left outside."""
    w = gibbs_weight_table(op.box, mu)
    diag = op.terms.get((0,) * op.box.N)
    z_full = (1.0 / (1.0 - np.exp(-mu))) ** op.box.N
    inside = float(w[region].sum())
    if diag is None:
        return 0.0, 1.0 - inside / z_full
    vals = diag[region]
    if np.isnan(vals).any():
        raise CapacityError("diagonal part unknown inside the averaging region")
    return float(np.real(np.sum(w[region] * vals)) / inside), 1.0 - inside / z_full


def build_decomposition(st: KamState, a: int, n0: int, n3: int, mu: float,
                        thetas: np.ndarray, average_region: np.ndarray | None = None
                        ) -> CurrentDecomposition:
    """u_a and g_a for the bond (a, a+1) from a KAM state and theta tables on its box.

    ``thetas`` holds theta_y for y in B(a, n3) (sites along the last axis).
    """
    N = st.box.N
    sites = tuple(y for y in range(N) if abs(y - a) <= n3)
    if thetas.shape[-1] != len(sites):
        raise ValueError("theta tables do not match B(a, n3)")
    weights = split_weights(thetas, sites, a)
    ht_gt = split_series(st, a, weights)
    zero = st.zero()
    key = ("split", a, id(weights))
    R_gt = st.R_series(ht_gt, key_prefix=key)
    h_right = _evaluate(R_gt, mu, zero)
    hO = right_original(st, a, mu)
    X = hO - h_right
    if average_region is None:
        average_region = box_region(st.box, st.box.cap - 2 * st.n1 - 2)
    shift, tail = truncated_average(X, mu, average_region)
    u = X - _identity(st).scale(shift)
    # mu^(n0+1) g = i T(R ad_htilde htilde_{>a}) + i mu^(n1+1) ad_v sum_k R^(n1-k) htilde^(k)_{>a}
    ht = st.htilde_series()
    adf = []
    for k in range(st.n1 + 1):
        acc = zero
        for i in range(k + 1):
            acc = acc + commutator(ht[i], ht_gt[k - i])
        adf.append(acc)
    first = _evaluate(st.R_series(FormalSeries(adf, st.n1), key_prefix=key + ("ad",)), mu, zero)
    last = R_gt[st.n1] if R_gt[st.n1] is not None else zero
    second = commutator(st.v, last).scale(mu ** (st.n1 + 1))
    g = (first + second).scale(1j / mu ** (n0 + 1))
    st.forget(key)
    st.forget(key + ("ad",))
    info = {"sites": list(sites), "theta_min": float(np.nanmin(thetas)) if thetas.size else None,
            "theta_max": float(np.nanmax(thetas)) if thetas.size else None}
    return CurrentDecomposition(a, n0, n3, mu, st, weights, ht_gt, h_right, hO, u, g, shift, tail, info)


def _identity(st: KamState) -> ClassSOperator:
    return ClassSOperator(st.box, {(0,) * st.box.N: np.ones(st.box.shape)}, st.params.delta)


def decomposition_residual_classS(dec: CurrentDecomposition, region: np.ndarray) -> float:
    """max |j_a - i ad_h u_a - mu^(n0+1) g_a| over box tables."""
    from .operators import max_difference
    h = dec.hamiltonian()
    j = commutator(h, dec.h_right_original).scale(1j)
    rhs = commutator(h, dec.u).scale(1j) + dec.g.scale(dec.mu ** (dec.n0 + 1))
    return max_difference(j, rhs, region)


def decomposition_residual_matrix(dec: CurrentDecomposition, space: TruncatedFockSpace,
                                  mask: np.ndarray) -> tuple[float, tuple | None]:
    """Same residual with independently assembled matrices, restricted to ``mask`` rows/cols."""
    params = dec.state.params
    p = ModelParams(params.g, dec.mu, params.delta, params.gamma)
    H = build_reduced_hamiltonian(p, space).data
    j = current_operator(p, space, dec.a, reduced=True).data
    U = dec.u.to_matrix(space).data
    G = dec.g.to_matrix(space).data
    res = j - 1j * (H @ U - U @ H) - dec.mu ** (dec.n0 + 1) * G
    keep = np.flatnonzero(mask)
    sub = sp.csr_matrix(res)[keep][:, keep].tocoo()
    if sub.nnz == 0:
        return 0.0, None
    k = int(np.argmax(np.abs(sub.data)))
    return float(abs(sub.data[k])), (space.config_at(keep[sub.row[k]]), space.config_at(keep[sub.col[k]]))


# ------------------------------------------------------------------ pointwise tools

def apply_to_vector(op: ClassSOperator, vec: dict) -> dict:
    out: dict = {}
    for eta, amp in vec.items():
        for tgt, val in op.column(eta).items():
            out[tgt] = out.get(tgt, 0.0) + val * amp
    return out


def _norm(vec: dict) -> float:
    return float(np.sqrt(sum(abs(v) ** 2 for v in vec.values())))


def commutator_column(A: ClassSOperator, B_of, eta) -> dict:
    """[A, B]|eta> where B_of(config) returns the column B|config> as a dict."""
    eta = tuple(int(v) for v in eta)
    left = apply_to_vector(A, B_of(eta))
    right: dict = {}
    for tgt, amp in A.column(eta).items():
        for t2, val in B_of(tgt).items():
            right[t2] = right.get(t2, 0.0) + val * amp
    out = dict(left)
    for t, v in right.items():
        out[t] = out.get(t, 0.0) - v
    return out


@dataclass
class CancellationReport:
    samples: int = 0
    checked_pairs: int = 0
    violations: int = 0
    max_norm_when_weighted: float = 0.0
    max_norm_unweighted: float = 0.0
    split_nonzero: int = 0
    split_nonzero_outside_Z: int = 0
    weighted_fraction: float = 0.0
    replay: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.split_nonzero_outside_Z == 0


def cancellation_check(params: ModelParams, geom: ResonanceGeometry, etas, a: int, n3: int,
                       mu: float, quad: Quadrature = Quadrature(), tol: float = 1e-9,
                       half_width: int = 4) -> CancellationReport:
    """Check that the resonance-free cut carries no resonant current.

    For every sample eta and x in B(a, n3) with vartheta_{a,x}(eta) > 0 the column
    [htilde, sum_{y>x} htilde_y]|eta> must vanish.  Independently, whenever the split
    commutator [htilde, htilde_{>a}]|eta> is nonzero, eta must lie in Z.
    Tolerances are absolute, in reduced units.
    """
    N = geom.chain.N
    sites = tuple(y for y in range(N) if abs(y - a) <= n3)
    rep = CancellationReport()
    weighted = 0
    theta_cache: dict = {}

    def weights_at(cfg):
        if cfg not in theta_cache:
            th = np.array([geom.theta(np.asarray(cfg, dtype=float), y, quad) for y in sites])
            theta_cache[cfg] = split_weights(th, sites, a)
        return theta_cache[cfg]

    for eta in np.asarray(etas):
        eta = tuple(int(v) for v in eta)
        rep.samples += 1
        box = Box.around(eta, half_width)
        st = build_kam(1, params, box)
        h_tilde = st.htilde[0] + st.htilde[1].scale(mu)
        local = [st.htilde_local[0][y] + st.htilde_local[1][y].scale(mu) for y in range(N)]
        tails = {}
        acc = st.zero()
        for y in range(N - 1, -1, -1):
            tails[y] = acc
            acc = acc + local[y]
        scale = 1.0
        w = weights_at(eta)
        any_weight = False
        for i, x in enumerate(sites):
            col = commutator_column(h_tilde, tails[x].column, eta)
            nrm = _norm(col)
            if w.vartheta[i] <= 0:
                rep.max_norm_unweighted = max(rep.max_norm_unweighted, nrm / scale)
            else:
                any_weight = True
                rep.checked_pairs += 1
                rep.max_norm_when_weighted = max(rep.max_norm_when_weighted, nrm / scale)
                if nrm > tol * scale:
                    rep.violations += 1
                    rep.replay.append({"eta": list(eta), "x": x, "norm": nrm})
        weighted += any_weight

        def split_col(cfg):
            ww = weights_at(cfg)
            out: dict = {}
            for i, x in enumerate(sites):
                if ww.vartheta[i] > 0:
                    for t, v in tails[x].column(cfg).items():
                        out[t] = out.get(t, 0.0) + v * ww.vartheta[i]
            if ww.star > 0:
                for t, v in tails[a].column(cfg).items():
                    out[t] = out.get(t, 0.0) + v * ww.star
            return out

        col = commutator_column(h_tilde, split_col, eta)
        if _norm(col) > tol * scale:
            rep.split_nonzero += 1
            if not geom.in_Z(np.asarray(eta, dtype=float), a):
                rep.split_nonzero_outside_Z += 1
                rep.replay.append({"eta": list(eta), "split_norm": _norm(col)})
    rep.weighted_fraction = weighted / max(rep.samples, 1)
    rep.replay = rep.replay[:20]
    return rep


# ------------------------------------------------------------------ probabilities

def window_event_probabilities(geom: ResonanceGeometry, a: int, mu: float, samples: int,
                               rng: np.random.Generator, window_const: float = 1.0,
                               s: float = 1.0, chunk: int = 200_000) -> dict:
    """Gibbs probabilities of the single-resonance window event W' and of Z_s.

    W': some move of M_r supported in B(a, n3) has |rho.eta| <= c a.
    Z_s: within distance s of n2 independent moves in B(a, 2 n3) with |rho.eta| <= c a.
    Here c replaces the constant L^(n2+1); a = delta^-gamma with delta = mu.
    """
    p = geom.params
    avals = mu ** (-p.gamma)
    thr = window_const * avals
    MW = geom.window_moves(a, p.n3)
    MZ = geom.window_moves(a, 2 * p.n3)
    sites = sorted({y for y in range(geom.chain.N) if abs(y - a) <= 2 * p.n3})
    MW = MW[:, sites]
    MZ = MZ[:, sites]
    q = 1.0 - np.exp(-mu)
    hits_w = hits_z = 0
    done = 0
    pairs = None
    if p.n2 == 2:
        pairs = [(i, j) for i, j in itertools.combinations(range(len(MZ)), 2)
                 if rank(MZ[[i, j]]) == 2]
    while done < samples:
        n = min(chunk, samples - done)
        eta = (rng.geometric(q, size=(n, len(sites))) - 1).astype(float)
        dw = np.abs(eta @ MW.T) <= thr
        hits_w += int(dw.any(axis=1).sum())
        if pairs is not None:
            hits_z += int(_z_s_pairs(eta, MZ, pairs, thr, s).sum())
        else:
            for e in eta:
                full = np.zeros(geom.chain.N)
                full[sites] = e
                hits_z += geom.in_Z_s(full, a, s, threshold=thr)
        done += n
    pw, pz = hits_w / samples, hits_z / samples
    return {"mu": mu, "P_W": pw, "P_W_stderr": np.sqrt(pw * (1 - pw) / samples),
            "P_Zs": pz, "P_Zs_stderr": np.sqrt(pz * (1 - pz) / samples), "samples": samples}


def _z_s_pairs(eta: np.ndarray, M: np.ndarray, pairs, thr: float, s: float) -> np.ndarray:
    """Vectorized Z_s membership for pairs of independent moves (n2 = 2)."""
    dots = eta @ M.T
    norms = np.linalg.norm(M, axis=1)
    near = np.abs(dots) - thr <= s * norms
    out = np.zeros(len(eta), dtype=bool)
    for i, j in pairs:
        cand = near[:, i] & near[:, j] & ~out
        if not cand.any():
            continue
        idx = np.flatnonzero(cand)
        R = M[[i, j]]
        Ginv = np.linalg.inv(R @ R.T)
        c = dots[idx][:, [i, j]]
        lo, hi = -thr - c, thr - c
        inside = np.all((lo <= 0) & (hi >= 0), axis=1)
        best = np.where(inside, 0.0, np.inf)
        g11, g12, g22 = Ginv[0, 0], Ginv[0, 1], Ginv[1, 1]
        for b1 in (lo[:, 0], hi[:, 0]):
            y2 = np.clip(-g12 * b1 / g22, lo[:, 1], hi[:, 1])
            best = np.minimum(best, g11 * b1 ** 2 + 2 * g12 * b1 * y2 + g22 * y2 ** 2)
        for b2 in (lo[:, 1], hi[:, 1]):
            y1 = np.clip(-g12 * b2 / g11, lo[:, 0], hi[:, 0])
            best = np.minimum(best, g11 * y1 ** 2 + 2 * g12 * y1 * b2 + g22 * b2 ** 2)
        out[idx] |= best <= s * s
    return out


def verify_cancellation(params: ModelParams, geom: ResonanceGeometry, etas, a: int, n3: int,
                        mu: float, **kw) -> CancellationReport:
    return cancellation_check(params, geom, etas, a, n3, mu, **kw)


def loglog_slope(x, y) -> float:
    x, y = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


# ------------------------------------------------------------------ Gibbs moments

def sector_gibbs_samples(rng: np.random.Generator, mu: float, N: int, total_max: int,
                         samples: int) -> np.ndarray:
    """Gibbs configurations conditioned on total occupation <= total_max."""
    q = 1.0 - np.exp(-mu)
    out = []
    have = 0
    while have < samples:
        eta = rng.geometric(q, size=(max(2 * (samples - have), 1024), N)) - 1
        eta = eta[eta.sum(axis=1) <= total_max]
        out.append(eta)
        have += len(eta)
    return np.concatenate(out)[:samples]


def gibbs_moments(op: ClassSOperator, etas: np.ndarray) -> dict:
    """MC estimates of omega(op) and omega(op^dagger op) from sampled configurations."""
    idx = tuple((etas - np.asarray(op.box.origin)).T)
    diag = op.terms.get((0,) * op.box.N)
    first = np.real(diag[idx]) if diag is not None else np.zeros(len(etas))
    second = np.zeros(len(etas))
    for F in op.terms.values():
        second += np.abs(F[idx]) ** 2
    if np.isnan(first).any() or np.isnan(second).any():
        raise CapacityError("sampled configurations reach unknown table cells")
    n = len(etas)
    return {"mean": float(first.mean()), "mean_stderr": float(first.std(ddof=1) / np.sqrt(n)),
            "square": float(second.mean()), "square_stderr": float(second.std(ddof=1) / np.sqrt(n)),
            "samples": n}


def sector_trace_average(op: ClassSOperator, mu: float, total_max: int) -> float:
    """Gibbs average of op restricted to the complete sectors |eta|_1 <= total_max."""
    region = box_region(op.box, op.box.cap) & (op.box.points.sum(axis=-1) <= total_max)
    val, _ = truncated_average(op, mu, region)
    return val


def moment_estimates(g: float, N: int, n_max: int, a: int, mus, mc_samples: int,
                     window_samples: int, seed: int = 0, n1: int = 1, n0: int = 1, n3: int = 1,
                     gamma: float = 0.75, L: int = 64, n2: int = 2, r: int = 1,
                     window_const: float = 1.0) -> dict:
    """Per mu (with delta = mu): omega(g_a), omega(u_a^2), omega(g_a^2), omega(U_a^2), P_W, P_Zs.

    Moments use Gibbs samples conditioned on complete sectors |eta|_1 <= n_max.
    """
    from .geometry import GeometryParams
    from .kam import required_cap
    root = np.random.SeedSequence(seed)
    rows = []
    for mu, child in zip(mus, root.spawn(len(mus))):
        rng = np.random.default_rng(child)
        params = ModelParams(g, mu, mu, gamma)
        box = Box(N, required_cap(n_max, n1))
        st = build_kam(n1, params, box)
        geom = ResonanceGeometry(ChainGeometry(N), GeometryParams(L=L, delta=mu, gamma=gamma,
                                                                  n2=n2, n3=n3, r=r))
        sites = [y for y in range(N) if abs(y - a) <= n3]
        dec = build_decomposition(st, a, n0, n3, mu, theta_tables(geom, box, sites))
        etas = sector_gibbs_samples(rng, mu, N, n_max, mc_samples)
        gm, um, Um = gibbs_moments(dec.g, etas), gibbs_moments(dec.u, etas), gibbs_moments(dec.U, etas)
        win = window_event_probabilities(geom, a, mu, window_samples, rng, window_const, s=r)
        rows.append({"mu": mu, "omega_g": gm["mean"], "omega_g_stderr": gm["mean_stderr"],
                     "omega_g2": gm["square"], "omega_u2": um["square"], "omega_U2": Um["square"],
                     "P_W": win["P_W"], "P_W_stderr": win["P_W_stderr"],
                     "P_Zs": win["P_Zs"], "P_Zs_stderr": win["P_Zs_stderr"]})
    out = {"rows": rows}
    if len(rows) >= 2:
        m = [row["mu"] for row in rows]
        for key in ("P_W", "P_Zs", "omega_u2"):
            vals = [row[key] for row in rows]
            out[f"slope_{key}"] = loglog_slope(m, vals) if min(vals) > 0 else float("nan")
    out["expected"] = {"slope_P_W": 1 - gamma, "slope_P_Zs": n2 * (1 - gamma)}
    return out
