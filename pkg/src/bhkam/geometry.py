"""Clusters of moves, flattened-cylinder sets and smoothed resonance indicators.

Configurations are treated as real vectors.  A B-set depends on a cluster
only through the span of its moves, so everything below is keyed by an
exact canonical form of that span.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import lsq_linear
from scipy.stats import qmc

from .lattice import CapacityError, ChainGeometry
from .operators import move_set, support, xi


@dataclass(frozen=True)
class GeometryParams:
    L: float = 64.0
    delta: float = 0.3
    gamma: float = 0.75
    n2: int = 2
    n3: int = 1
    r: int = 1
    K: float | None = None

    def __post_init__(self):
        if self.L <= 1:
            raise ValueError("L must exceed 1")
        if self.n2 < 1 or self.n3 < 1 or self.r < 1:
            raise ValueError("n2, n3 and r must be >= 1")

    @property
    def a(self) -> float:
        return self.delta ** (-self.gamma)

    @property
    def K_value(self) -> float:
        return 8 * self.r ** 2 + 2 if self.K is None else self.K


def canonical_sign(rho) -> tuple:
    rho = tuple(int(v) for v in rho)
    for v in rho:
        if v:
            return rho if v > 0 else tuple(-w for w in rho)
    return rho


def span_key(moves) -> tuple:
    """Reduced row echelon form of the move matrix, in exact arithmetic."""
    rows = [[Fraction(int(v)) for v in m] for m in moves]
    n = len(rows[0]) if rows else 0
    out, lead = [], 0
    for c in range(n):
        piv = next((i for i in range(lead, len(rows)) if rows[i][c] != 0), None)
        if piv is None:
            continue
        rows[lead], rows[piv] = rows[piv], rows[lead]
        pv = rows[lead][c]
        rows[lead] = [v / pv for v in rows[lead]]
        for i in range(len(rows)):
            if i != lead and rows[i][c] != 0:
                f = rows[i][c]
                rows[i] = [a - f * b for a, b in zip(rows[i], rows[lead])]
        lead += 1
        if lead == len(rows):
            break
    for row in rows[:lead]:
        out.append(tuple(row))
    return tuple(out)


def rank(moves) -> int:
    if len(moves) == 0:
        return 0
    return int(np.linalg.matrix_rank(np.asarray(moves, dtype=float)))


def orthonormal_basis(moves) -> np.ndarray:
    """Columns form an orthonormal basis of span(moves)."""
    A = np.asarray(moves, dtype=float).T
    q, rr = np.linalg.qr(A)
    keep = np.abs(np.diag(rr)) > 1e-10
    return q[:, keep]


def _percolates(moves) -> bool:
    sups = [set(support(m)) for m in moves]
    parent = list(range(len(moves)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in itertools.combinations(range(len(moves)), 2):
        if sups[i] & sups[j]:
            parent[find(i)] = find(j)
    return len({find(i) for i in range(len(moves))}) == 1


def is_cluster(moves, x: int, r: int) -> bool:
    moves = [tuple(m) for m in moves]
    if not moves:
        return False
    if rank(moves) != len(moves):
        return False
    if not _percolates(moves):
        return False
    return any(all(abs(s - x) <= 4 * r for s in support(m)) for m in moves)


@dataclass(frozen=True)
class ResonanceCluster:
    moves: tuple
    anchor: int

    @property
    def p(self) -> int:
        return len(self.moves)

    def basis(self) -> np.ndarray:
        return orthonormal_basis(self.moves)


def project(eta, moves) -> np.ndarray:
    """Projection of eta onto the intersection of the hyperplanes orthogonal to the moves."""
    Q = orthonormal_basis(moves)
    eta = np.asarray(eta, dtype=float)
    return eta - (eta @ Q) @ Q.T


@dataclass
class SpanData:
    key: tuple
    p: int
    Q: np.ndarray              # N x p orthonormal basis
    members: np.ndarray        # moves of M_r lying in the span (m x N)
    sub_bases: list            # orthonormal bases of proper subspaces F, with their dimension
    support: tuple

    def __post_init__(self):
        self.l1 = np.abs(self.members).sum(axis=1)
        self.norms = np.linalg.norm(self.members, axis=1)


@dataclass(frozen=True)
class Quadrature:
    kind: str = "sobol"         # sobol | gauss | auto (gauss when the tensor grid fits)
    nodes: int = 8
    samples: int = 2 ** 14
    seed: int = 0
    budget: int = 2 ** 18


class ResonanceGeometry:
    """Cluster enumeration and set membership on a chain of N sites."""

    def __init__(self, chain: ChainGeometry, params: GeometryParams, max_clusters: int = 200_000):
        self.chain = chain
        self.params = params
        self.max_clusters = max_clusters
        full = move_set(params.r, chain)
        self.moves = sorted({canonical_sign(m) for m in full})
        self._move_arr = np.asarray(self.moves, dtype=float)
        self._spans: dict = {}
        self._clusters: dict = {}
        self._anchor_spans: dict = {}
        self._nodes: dict = {}

    # ---------------------------------------------------------------- spans
    def span(self, moves) -> SpanData:
        key = span_key(moves)
        got = self._spans.get(key)
        if got is not None:
            return got
        Q = orthonormal_basis(moves)
        p = Q.shape[1]
        sup = tuple(sorted(set().union(*(support(m) for m in moves))))
        cand = [m for m in self.moves if set(support(m)) <= set(sup)]
        members = []
        for m in cand:
            v = np.asarray(m, dtype=float)
            if np.linalg.norm(v - Q @ (Q.T @ v)) <= 1e-9:
                members.append(m)
        subs = {}
        for pp in range(1, p):
            for combo in itertools.combinations(members, pp):
                if rank(combo) != pp:
                    continue
                k = span_key(combo)
                if k not in subs:
                    subs[k] = (orthonormal_basis(combo), pp)
        got = SpanData(key, p, Q, np.asarray(members, dtype=float), list(subs.values()), sup)
        self._spans[key] = got
        return got

    # ---------------------------------------------------------------- clusters
    def clusters(self, x: int, size: int | None = None, max_size: int | None = None) -> list:
        """Clusters around x (as tuples of canonical moves), by exact size or up to max_size."""
        top = self.params.n2 if max_size is None else max_size
        if size is not None:
            top = size
        key = (x, top)
        if key not in self._clusters:
            self._clusters[key] = self._enumerate(x, top)
        found = self._clusters[key]
        if size is not None:
            return [c for c in found if len(c) == size]
        return found

    def _enumerate(self, x: int, top: int) -> list:
        r = self.params.r
        sups = [set(support(m)) for m in self.moves]
        anchored = [i for i, s in enumerate(sups) if all(abs(y - x) <= 4 * r for y in s)]
        seen = set()
        layer = set()
        for i in anchored:
            layer.add(frozenset([i]))
        out = [tuple(sorted(c)) for c in layer]
        seen |= layer
        for _ in range(1, top):
            nxt = set()
            for c in layer:
                cover = set().union(*(sups[i] for i in c))
                base = [self.moves[i] for i in c]
                for j, s in enumerate(sups):
                    if j in c or not (s & cover):
                        continue
                    cand = c | {j}
                    if cand in seen or cand in nxt:
                        continue
                    if rank(base + [self.moves[j]]) == len(cand):
                        nxt.add(cand)
            seen |= nxt
            out.extend(tuple(sorted(c)) for c in nxt)
            if len(seen) > self.max_clusters:
                raise CapacityError(f"more than {self.max_clusters} clusters around site {x}")
            layer = nxt
        return sorted((tuple(self.moves[i] for i in c) for c in out), key=lambda t: (len(t), t))

    def spans_around(self, x: int) -> list[SpanData]:
        got = self._anchor_spans.get(x)
        if got is None:
            keys = {}
            for c in self.clusters(x):
                k = span_key(c)
                if k not in keys:
                    keys[k] = self.span(c)
            got = list(keys.values())
            self._anchor_spans[x] = got
        return got

    def window(self, x: int) -> tuple[int, ...]:
        sites = set()
        for s in self.spans_around(x):
            sites |= set(s.support)
        return tuple(sorted(sites))

    # ---------------------------------------------------------------- membership
    def _in_span_set(self, etas: np.ndarray, s: SpanData) -> np.ndarray:
        L, a = self.params.L, self.params.a
        cE = etas @ s.Q
        nE2 = np.einsum("ij,ij->i", cE, cE)
        ok = nE2 <= (L ** s.p * a) ** 2
        for QF, pp in s.sub_bases:
            if not ok.any():
                break
            cF = etas @ QF
            gap = np.maximum(nE2 - np.einsum("ij,ij->i", cF, cF), 0.0)
            ok &= gap <= ((L ** s.p - L ** pp) * a) ** 2
        return ok

    def in_B(self, eta, moves) -> bool | np.ndarray:
        etas = np.atleast_2d(np.asarray(eta, dtype=float))
        got = self._in_span_set(etas, self.span(moves))
        return bool(got[0]) if np.ndim(eta) == 1 else got

    def in_R(self, eta, x: int) -> bool | np.ndarray:
        etas = np.atleast_2d(np.asarray(eta, dtype=float))
        got = np.zeros(len(etas), dtype=bool)
        for s in self.spans_around(x):
            rest = ~got
            if not rest.any():
                break
            got[rest] |= self._in_span_set(etas[rest], s)
        return bool(got[0]) if np.ndim(eta) == 1 else got

    def in_S(self, eta, x: int) -> bool | np.ndarray:
        etas = np.atleast_2d(np.asarray(eta, dtype=float))
        thr = self.params.L ** (self.params.n2 + 1) * self.params.a
        small = np.abs(etas @ self._move_arr.T) <= thr
        index = {m: i for i, m in enumerate(self.moves)}
        got = np.zeros(len(etas), dtype=bool)
        for c in self.clusters(x, size=self.params.n2):
            idx = [index[m] for m in c]
            got |= np.all(small[:, idx], axis=1)
        return bool(got[0]) if np.ndim(eta) == 1 else got

    # ---------------------------------------------------------------- smoothed indicator
    def kernel_nodes(self, dim: int, quad: Quadrature) -> tuple[np.ndarray, np.ndarray]:
        """Nodes (in units of a) and weights for the normalized product bump density."""
        kind = quad.kind
        if kind == "auto":
            kind = "gauss" if quad.nodes ** dim <= quad.budget else "sobol"
        key = (dim, kind, quad.nodes, quad.samples, quad.seed)
        got = self._nodes.get(key)
        if got is not None:
            return got
        if kind == "gauss":
            if quad.nodes ** dim > quad.budget:
                raise CapacityError(f"{quad.nodes}^{dim} quadrature nodes exceed the budget")
            z, w = np.polynomial.legendre.leggauss(quad.nodes)
            z = 2.0 * z
            w = w * xi(z)
            w = w / w.sum()
            grids = np.meshgrid(*([z] * dim), indexing="ij")
            nodes = np.stack([g.ravel() for g in grids], axis=1)
            wg = np.meshgrid(*([w] * dim), indexing="ij")
            weights = np.prod(np.stack([g.ravel() for g in wg], axis=1), axis=1)
        elif kind == "sobol":
            if quad.samples > quad.budget * 64:
                raise CapacityError("sample count exceeds the quadrature budget")
            u = qmc.Sobol(d=dim, scramble=True, seed=quad.seed).random(quad.samples)
            nodes = _bump_quantile(u)
            weights = np.full(len(nodes), 1.0 / len(nodes))
        else:
            raise ValueError(f"unknown quadrature kind {kind!r}")
        self._nodes[key] = (nodes, weights)
        return nodes, weights

    def _classify(self, etas: np.ndarray, s: SpanData) -> np.ndarray:
        """Per point: +1 if the whole kernel box lies in B, -1 if it misses B, 0 otherwise."""
        L, a = self.params.L, self.params.a
        half = 2.0 * a
        dots = np.abs(etas @ s.members.T)
        l1, nrm = s.l1, s.norms
        out = np.zeros(len(etas), dtype=np.int8)
        out[np.any(dots - half * l1 > nrm * L ** s.p * a, axis=1)] = -1
        if s.p == 1:
            inside = dots[:, 0] + half * l1[0] <= nrm[0] * L * a
        else:
            reach = half * math.sqrt(len(s.support))
            cE = etas @ s.Q
            inside = np.sqrt(np.einsum("ij,ij->i", cE, cE)) + reach <= (L ** s.p - L ** (s.p - 1)) * a
        out[inside] = 1
        return out

    def theta(self, eta, x: int, quad: Quadrature = Quadrature()) -> float:
        """1 minus the bump-kernel average of the indicator of R(x) around eta."""
        return float(self.theta_many(np.asarray(eta, dtype=float)[None, :], x, quad)[0])

    def theta_many(self, etas, x: int, quad: Quadrature = Quadrature()) -> np.ndarray:
        etas = np.atleast_2d(np.asarray(etas, dtype=float))
        spans = self.spans_around(x)
        status = np.zeros((len(etas), len(spans)), dtype=np.int8)
        inside = np.zeros(len(etas), dtype=bool)
        for j, s in enumerate(spans):
            rest = np.flatnonzero(~inside)
            if not len(rest):
                break
            status[rest, j] = self._classify(etas[rest], s)
            inside[rest] = status[rest, j] == 1
        missed = (status == -1).all(axis=1)
        out = np.where(inside, 0.0, np.where(missed, 1.0, np.nan))
        W = self.window(x)
        for i in np.flatnonzero(np.isnan(out)):
            undecided = [spans[j] for j in np.flatnonzero(status[i] == 0)]
            out[i] = self._theta_quadrature(etas[i], W, undecided, quad)
        return out

    def _theta_quadrature(self, eta, W, spans, quad) -> float:
        nodes, weights = self.kernel_nodes(len(W), quad)
        a = self.params.a
        inside = np.zeros(len(nodes), dtype=bool)
        chunk = 65536
        for lo in range(0, len(nodes), chunk):
            pts = np.repeat(eta[None, :], min(chunk, len(nodes) - lo), axis=0)
            pts[:, list(W)] += a * nodes[lo:lo + chunk]
            hit = np.zeros(len(pts), dtype=bool)
            for s in spans:
                rest = ~hit
                if not rest.any():
                    break
                hit[rest] |= self._in_span_set(pts[rest], s)
            inside[lo:lo + chunk] = hit
        val = 1.0 - float(np.sum(weights[inside]))
        return min(max(val, 0.0), 1.0)

    def theta_difference(self, eta, rho, x: int, quad: Quadrature = Quadrature()) -> float:
        """theta(eta + rho) - theta(eta) evaluated on common nodes."""
        eta = np.asarray(eta, dtype=float)
        return self.theta(eta + np.asarray(rho, dtype=float), x, quad) - self.theta(eta, x, quad)

    # ---------------------------------------------------------------- exceptional sets
    def window_moves(self, a_site: int, radius: int) -> np.ndarray:
        keep = [m for m in self.moves if all(abs(y - a_site) <= radius for y in support(m))]
        return np.asarray(keep, dtype=float)

    def in_Z(self, eta, a_site: int, threshold: float | None = None) -> bool:
        p = self.params
        thr = p.L ** (p.n2 + 1) * p.a if threshold is None else threshold
        M = self.window_moves(a_site, 2 * p.n3)
        eta = np.asarray(eta, dtype=float)
        close = M[np.abs(M @ eta) <= thr]
        return rank(close) >= p.n2

    def in_Z_s(self, eta, a_site: int, s: float, threshold: float | None = None) -> bool:
        p = self.params
        thr = p.L ** (p.n2 + 1) * p.a if threshold is None else threshold
        M = self.window_moves(a_site, 2 * p.n3)
        eta = np.asarray(eta, dtype=float)
        dots = M @ eta
        norms = np.linalg.norm(M, axis=1)
        if rank(M[np.abs(dots) <= thr]) >= p.n2:
            return True
        cand = M[(np.abs(dots) - thr) <= s * norms]
        if rank(cand) < p.n2:
            return False
        for combo in itertools.combinations(range(len(cand)), p.n2):
            R = cand[list(combo)]
            if rank(R) < p.n2:
                continue
            if distance_to_slab_intersection(eta, R, thr) <= s:
                return True
        return False


def distance_to_slab_intersection(eta, R: np.ndarray, thr: float) -> float:
    """Euclidean distance from eta to {y : |R y| <= thr entrywise} (R of full row rank)."""
    c = R @ eta
    lo, hi = -thr - c, thr - c
    if np.all(lo <= 0) and np.all(hi >= 0):
        return 0.0
    G = R @ R.T
    Ginv = np.linalg.inv(G)
    M = np.linalg.cholesky(Ginv).T
    res = lsq_linear(M, np.zeros(len(c)), bounds=(lo, hi), method="bvls")
    y = res.x
    return float(math.sqrt(max(y @ Ginv @ y, 0.0)))


def _bump_cdf_table(n: int = 4001):
    z = np.linspace(-2.0, 2.0, n)
    dens = xi(z)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(z))])
    return z, cdf / cdf[-1]


_BUMP_Z, _BUMP_CDF = _bump_cdf_table()


def _bump_quantile(u: np.ndarray) -> np.ndarray:
    """Inverse CDF of the normalized bump density on [-2, 2]."""
    return np.interp(u, _BUMP_CDF, _BUMP_Z)


def sample_bump(rng: np.random.Generator, size) -> np.ndarray:
    return _bump_quantile(rng.random(size))


# -------------------------------------------------------------------- property suites

def _zeta_real(eta, rho, a):
    rho = np.asarray(rho, dtype=float)
    return xi((2.0 * (eta @ rho) + rho @ rho) / a)


def local_moves(geom: ResonanceGeometry, x: int, radius: int) -> list:
    """Moves of M_r (both signs) supported in B(x, radius)."""
    out = []
    for m in geom.moves:
        if all(abs(y - x) <= radius for y in support(m)):
            out.append(m)
            out.append(tuple(-v for v in m))
    return out


def _random_in_span(rng, Q, radius):
    c = rng.normal(size=Q.shape[1])
    c /= np.linalg.norm(c)
    return Q @ (c * radius)


def _radius_draw(rng, outer, p):
    # half the draws hug the outer boundary of the disc
    if rng.random() < 0.5:
        return outer * (1.0 - 10.0 ** rng.uniform(-6, 0)) if rng.random() < 0.5 else outer
    return outer * rng.random() ** (1.0 / p)


def geometry_property_suites(geom: ResonanceGeometry, seed: int, trials: int,
                          p_values=(1, 2), t_samples: int = 5) -> dict:
    """Randomized checks of subspace proximity, B-set invariance and B-set extension."""
    params = geom.params
    L, a, K = params.L, params.a, params.K_value
    N = geom.chain.N
    children = np.random.SeedSequence(seed).spawn(3)
    report = {"params": {"L": L, "a": a, "K": K, "N": N, "r": params.r, "trials": trials}}

    # proximity -------------------------------------------------------
    rng = np.random.default_rng(children[0])
    moves = np.asarray(geom.moves, dtype=float)
    worst_ratio, worst_cert, viol, counter = 0.0, 0.0, 0, []
    uniform = {}
    for p in p_values:
        uniform[p] = _uniform_proximity_constant(moves, p)
    for t in range(trials):
        p = int(rng.choice(p_values))
        while True:
            idx = rng.choice(len(moves), size=p + 1, replace=False)
            tup = moves[idx]
            if rank(tup) == p + 1:
                break
        V = orthonormal_basis(tup[:p])
        rho = tup[p]
        w = rho - V @ (V.T @ rho)
        cert = 1.0 + np.linalg.norm(rho) / np.linalg.norm(w)
        eta = rng.normal(size=N) * a * 10.0 ** rng.uniform(0, 4)
        if rng.random() < 0.5:
            # start near the intersection of the first p hyperplanes
            eta = eta - V @ (V.T @ eta) + V @ rng.normal(size=p) * a * 10.0 ** rng.uniform(-3, 1)
        full = orthonormal_basis(tup)
        lhs = np.linalg.norm(eta @ full)
        rhs = abs(rho @ eta) + np.linalg.norm(eta @ V)
        ratio = lhs / rhs if rhs > 0 else 0.0
        worst_ratio = max(worst_ratio, ratio)
        worst_cert = max(worst_cert, cert)
        if lhs > uniform[p] * rhs * (1 + 1e-12) + 1e-9:
            viol += 1
            counter.append({"moves": tup.tolist(), "eta": eta.tolist()})
    report["proximity"] = {"violations": viol, "max_ratio": worst_ratio,
                           "max_instance_constant": worst_cert,
                           "uniform_constant": {str(k): v for k, v in uniform.items()},
                           "counterexamples": counter[:10]}

    # invariance ------------------------------------------------------
    rng = np.random.default_rng(children[1])
    viol, counter, tried, rejected, max_slack = 0, [], 0, 0, 0.0
    while tried < trials:
        C, x = _random_cluster(geom, rng, p_values)
        s = geom.span(C)
        rho = s.members[rng.integers(len(s.members))] * rng.choice([-1, 1])
        rhat = rho / np.linalg.norm(rho)
        spanpart = _random_in_span(rng, s.Q, _radius_draw(rng, L ** s.p * a, s.p))
        target = rng.uniform(-K * a, K * a)
        if rng.random() < 0.25:
            target = K * a * rng.choice([-1.0, 1.0])
        spanpart = spanpart - (spanpart @ rhat) * rhat + rhat * (target / np.linalg.norm(rho))
        ortho = rng.normal(size=N) * a * 10.0 ** rng.uniform(0, 3)
        ortho -= s.Q @ (s.Q.T @ ortho)
        eta = spanpart + ortho
        if not geom.in_B(eta, C):
            rejected += 1
            continue
        tried += 1
        ts = np.concatenate([[-a, a, 0.0], rng.uniform(-a, a, size=t_samples)])
        pts = eta[None, :] + ts[:, None] * rho[None, :]
        ok = geom.in_B(pts, C)
        nrm = np.linalg.norm(pts @ s.Q, axis=1) / (L ** s.p * a)
        max_slack = max(max_slack, float(nrm.max()))
        if not ok.all():
            viol += 1
            counter.append({"cluster": [list(m) for m in C], "anchor": x, "eta": eta.tolist(),
                            "rho": rho.tolist(), "t": ts[~ok].tolist()})
    report["invariance"] = {"violations": viol, "trials": tried, "rejected_draws": rejected,
                            "max_relative_radius": max_slack, "counterexamples": counter[:10]}

    # extension -------------------------------------------------------
    rng = np.random.default_rng(children[2])
    viol, counter, tried, rejected, max_slack = 0, [], 0, 0, 0.0
    while tried < trials:
        C, x = _random_cluster(geom, rng, p_values)
        ext = _extensions(geom, C)
        if not ext:
            continue
        rho = np.asarray(ext[rng.integers(len(ext))], dtype=float) * rng.choice([-1, 1])
        s = geom.span(C)
        spanpart = _random_in_span(rng, s.Q, _radius_draw(rng, L ** s.p * a, s.p))
        w = rho - s.Q @ (s.Q.T @ rho)
        what = w / np.linalg.norm(w)
        target = rng.uniform(-K * a, K * a)
        if rng.random() < 0.25:
            target = K * a * rng.choice([-1.0, 1.0])
        beta = (target - rho @ spanpart) / (rho @ what)
        both = orthonormal_basis(list(C) + [tuple(rho)])
        ortho = rng.normal(size=N) * a * 10.0 ** rng.uniform(0, 3)
        ortho -= both @ (both.T @ ortho)
        eta = spanpart + beta * what + ortho
        if not geom.in_B(eta, C):
            rejected += 1
            continue
        tried += 1
        bigger = list(C) + [tuple(int(v) for v in rho)]
        ok = geom.in_B(eta, bigger)
        nrm = np.linalg.norm(eta @ both) / (L ** (s.p + 1) * a)
        max_slack = max(max_slack, float(nrm))
        if not ok:
            viol += 1
            counter.append({"cluster": [list(m) for m in C], "anchor": x, "eta": eta.tolist(),
                            "rho": rho.tolist()})
    report["extension"] = {"violations": viol, "trials": tried, "rejected_draws": rejected,
                           "max_relative_radius": max_slack, "counterexamples": counter[:10]}
    report["passed"] = all(report[k]["violations"] == 0
                           for k in ("proximity", "invariance", "extension"))
    return report


def _uniform_proximity_constant(moves: np.ndarray, p: int) -> float:
    """max over independent (p+1)-tuples of 1 + |rho_{p+1}| / |rho_{p+1} off span(rho_1..rho_p)|."""
    best = 0.0
    for base in itertools.combinations(range(len(moves)), p):
        B = moves[list(base)]
        if rank(B) != p:
            continue
        V = orthonormal_basis(B)
        W = moves - (moves @ V) @ V.T
        wn = np.linalg.norm(W, axis=1)
        ok = wn > 1e-9
        if ok.any():
            best = max(best, float(np.max(1.0 + np.linalg.norm(moves[ok], axis=1) / wn[ok])))
    return best


def _random_cluster(geom: ResonanceGeometry, rng, p_values):
    x = int(rng.integers(geom.chain.N))
    p = int(rng.choice(p_values))
    pool = geom.clusters(x, size=p, max_size=max(p_values))
    return pool[rng.integers(len(pool))], x


def _extensions(geom: ResonanceGeometry, C) -> list:
    cover = set().union(*(support(m) for m in C))
    out = []
    for m in geom.moves:
        if set(support(m)) & cover and rank(list(C) + [m]) == len(C) + 1:
            out.append(m)
    return out


def indicator_checks(geom: ResonanceGeometry, etas: np.ndarray, sites, quad: Quadrature,
                        tol: float = 1e-3) -> dict:
    """Sampled checks of the smoothed indicator.

    vanish: theta_x > 0 forces every local zeta to vanish.
    flat: outside S(x), theta_x is unchanged along every resonant move.
    """
    a = geom.params.a
    r = geom.params.r
    etas = np.asarray(etas, dtype=float)
    all_moves = np.asarray(local_moves(geom, 0, geom.chain.N), dtype=float)
    zeta_all = xi((2.0 * etas @ all_moves.T + (all_moves ** 2).sum(axis=1)) / a)
    stats = {"samples": int(len(etas)), "vanish_violations": 0, "flat_violations": 0,
             "flat_exempt_in_S": 0, "theta_zero": 0, "theta_one": 0, "theta_mid": 0,
             "resonant_pairs": 0, "flat_nontrivial": 0, "replay": []}
    pi, mi = np.nonzero(zeta_all != 0)
    stats["resonant_pairs"] = int(len(pi)) * len(list(sites))
    for x in sites:
        th = geom.theta_many(etas, x, quad)
        stats["theta_zero"] += int(np.sum(th == 0.0))
        stats["theta_one"] += int(np.sum(th == 1.0))
        stats["theta_mid"] += int(np.sum((th > 0) & (th < 1)))
        loc = np.asarray(local_moves(geom, x, 4 * r), dtype=float)
        zl = xi((2.0 * etas @ loc.T + (loc ** 2).sum(axis=1)) / a) != 0
        for i in np.flatnonzero((th > 0) & zl.any(axis=1)):
            stats["vanish_violations"] += 1
            j = int(np.flatnonzero(zl[i])[0])
            stats["replay"].append({"check": "vanish", "x": x, "eta": etas[i].tolist(),
                                    "rho": loc[j].astype(int).tolist(), "theta": float(th[i])})
        if not len(pi):
            continue
        th2 = geom.theta_many(etas[pi] + all_moves[mi], x, quad)
        th1 = th[pi]
        stats["flat_nontrivial"] += int(np.sum((th2 != th1) | ((th1 > 0) & (th1 < 1))))
        bad = np.flatnonzero(np.abs(th2 - th1) > tol)
        if len(bad):
            in_s = geom.in_S(etas[pi[bad]], x)
            stats["flat_exempt_in_S"] += int(in_s.sum())
            stats["flat_violations"] += int((~in_s).sum())
            for k in bad[~in_s]:
                stats["replay"].append({"check": "flat", "x": x, "eta": etas[pi[k]].tolist(),
                                        "rho": all_moves[mi[k]].astype(int).tolist(),
                                        "delta_theta": float(th2[k] - th1[k])})
    stats["replay"] = stats["replay"][:20]
    stats["passed"] = stats["vanish_violations"] == 0 and stats["flat_violations"] == 0
    return stats


def planted_boundary_samples(geom: ResonanceGeometry, rng: np.random.Generator, n: int,
                             scale: float) -> np.ndarray:
    """Configurations with one resonant move and a second move near its slab boundary.

    Starting from i.i.d. exponential occupations of the given scale, the smallest
    correction is applied so that rho1.eta sits inside the resonance window and
    |rho2.eta| / |rho2| lies within a few a of L a.  Such points have
    0 < theta < 1 for some site and resonant hops that cross the boundary region.
    """
    L, a = geom.params.L, geom.params.a
    moves = np.asarray(geom.moves, dtype=float)
    out = []
    while len(out) < n:
        eta = rng.exponential(scale, size=geom.chain.N)
        i, j = rng.choice(len(moves), size=2, replace=False)
        R = moves[[i, j]]
        if rank(R) < 2:
            continue
        target = np.array([rng.uniform(-0.5, 0.5) * a - 0.5 * R[0] @ R[0],
                           np.linalg.norm(R[1]) * (L * a + rng.uniform(-3, 3) * a)])
        eta = eta + np.linalg.lstsq(R, target - R @ eta, rcond=None)[0]
        eta = np.round(eta)
        if np.all(eta >= 0):
            out.append(eta)
    return np.asarray(out)
