"""Recursive construction of generators and of the resonant Hamiltonian.

Nested ad's inside a partition term are applied right to left as written:
for Q the generator u_1 acts first, for R the highest-order generator acts
first.  Chains are memoized per (base operand, generator sequence).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .lattice import CapacityError, ChainGeometry, ModelParams, TruncatedFockSpace
from .operators import (Box, ClassSOperator, FormalSeries, RangeError, box_region, commutator, move_set,
                        hamiltonian_pieces, max_difference, total)


def partitions(k: int) -> list[tuple[int, ...]]:
    """All k-tuples (j_1..j_k) of non-negative integers with sum l*j_l = k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    out = []

    def rec(l, remaining, acc):
        if l == 0:
            if remaining == 0:
                out.append(tuple(reversed(acc)))
            return
        for j in range(remaining // l, -1, -1):
            rec(l - 1, remaining - l * j, acc + [j])

    rec(k, k, [])
    return sorted(out, reverse=True)


def _weight(j) -> float:
    return 1.0 / math.prod(math.factorial(x) for x in j)


def prescribed_orders(n0: int, gamma: float) -> tuple[int, int]:
    """Orders (n1, n2) prescribed by the asymptotic analysis."""
    gp = 1.0 - gamma
    n1 = math.ceil((n0 + 4 - gamma) / (1 - 2 * gp) - 1e-12)
    n2 = math.ceil((10 + 2 * n0) / gp - 1e-12)
    return n1, n2


@dataclass
class KamState:
    """Generators u^(k), resonant coefficients h~^(k) and their local pieces."""

    box: Box
    params: ModelParams
    n1: int
    max_range: int = 8
    u: list = field(default_factory=list)
    htilde: list = field(default_factory=list)
    htilde_local: list = field(default_factory=list)  # [k][y]
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.ds, self.vs = hamiltonian_pieces(self.box, self.params)
        self.d = total(self.ds, self.box, self.params.delta)
        self.v = total(self.vs, self.box, self.params.delta)

    @property
    def gamma(self) -> float:
        return self.params.gamma

    def zero(self) -> ClassSOperator:
        return ClassSOperator.zero(self.box, self.params.delta)

    # nested ad chains -------------------------------------------------
    def chain(self, base: ClassSOperator, seq: tuple, key=None) -> ClassSOperator:
        """Apply ad_{u[seq[0]]} first, then ad_{u[seq[1]]}, ..."""
        if not seq:
            return base
        if key is None:
            # keep the base alive so its id cannot be reused by another operator
            self._cache.setdefault(("anon-ref", id(base)), base)
            key = ("anon", id(base))
        ck = (key, seq)
        got = self._cache.get(ck)
        if got is None:
            prev = self.chain(base, seq[:-1], key)
            got = commutator(self.u[seq[-1]], prev)
            self._cache[ck] = got
        return got

    def forget(self, key) -> None:
        for ck in [c for c in self._cache
                   if c[0] == key or (isinstance(c[0], tuple) and c[0][:1] == (key,))]:
            del self._cache[ck]

    def _partition_sum(self, k, f, key, kind):
        if k == 0:
            return self.zero() if kind == "S" else f
        acc = self.zero()
        tuples = partitions(k + 1) if kind == "S" else partitions(k)
        for j in tuples:
            if kind == "S":
                if j[k] != 0:
                    continue
                j = j[:k]
            if kind == "R":
                seq = tuple(l for l in range(k, 0, -1) for _ in range(j[l - 1]))
                c = (-1) ** sum(j) * _weight(j)
            else:
                seq = tuple(l for l in range(1, k + 1) for _ in range(j[l - 1]))
                c = _weight(j)
            acc = acc + self.chain(f, seq, key).scale(c)
        return acc

    def apply_Q(self, k, f, key=None):
        return self._partition_sum(k, f, key, "Q")

    def apply_R(self, k, f, key=None):
        return self._partition_sum(k, f, key, "R")

    def apply_S(self, k, f, key=None):
        return self._partition_sum(k, f, key, "S")

    # series-level maps -------------------------------------------------
    def R_series(self, f: FormalSeries, key_prefix=None) -> FormalSeries:
        order = min(f.order, self.n1)
        out = []
        for n in range(order + 1):
            acc = None
            for k in range(n + 1):
                if f[k] is None:
                    continue
                key = None if key_prefix is None else (key_prefix, k)
                term = self.apply_R(n - k, f[k], key)
                acc = term if acc is None else acc + term
            out.append(acc)
        return FormalSeries(out, order)

    def Q_series(self, f: FormalSeries, key_prefix=None) -> FormalSeries:
        order = min(f.order, self.n1)
        out = []
        for n in range(order + 1):
            acc = None
            for k in range(n + 1):
                if f[k] is None:
                    continue
                key = None if key_prefix is None else (key_prefix, k)
                term = self.apply_Q(n - k, f[k], key)
                acc = term if acc is None else acc + term
            out.append(acc)
        return FormalSeries(out, order)

    def htilde_series(self) -> FormalSeries:
        return FormalSeries(list(self.htilde), self.n1)

    def htilde_site_series(self, y: int) -> FormalSeries:
        return FormalSeries([self.htilde_local[k][y] for k in range(self.n1 + 1)], self.n1)

    def hamiltonian_series(self) -> FormalSeries:
        return FormalSeries([self.d, self.v], self.n1)


def build_kam(n1: int, params: ModelParams, box: Box, max_range: int = 8,
              local: bool = True) -> KamState:
    """Run the recursion up to order n1.

    With ``local`` the per-site pieces h~_y^(k) = R(S^(k-1) d_y + Q^(k-1) v_y)
    are built as well; they sum to h~^(k).
    """
    if n1 < 1:
        raise ValueError("n1 must be >= 1")
    st = KamState(box, params, n1, max_range)
    st.u = [None]
    st.htilde = [st.d]
    st.htilde_local = [list(st.ds)]
    gamma = params.gamma
    for k in range(1, n1 + 1):
        x = st.apply_S(k - 1, st.d, "d") + st.apply_Q(k - 1, st.v, "v")
        uk = x.kam_solve(gamma)
        r = uk.range()
        if r > max_range:
            raise RangeError(f"generator of order {k} has range {r} > cap {max_range}")
        st.u.append(uk)
        st.htilde.append(x.resonant_part(gamma))
        if local:
            pieces = []
            for y in range(box.N):
                xy = st.apply_S(k - 1, st.ds[y], ("d", y)) + st.apply_Q(k - 1, st.vs[y], ("v", y))
                pieces.append(xy.resonant_part(gamma))
            st.htilde_local.append(pieces)
    return st


# ------------------------------------------------------------------ checks

def _check(name, value, tol, move=None, config=None):
    return {"check": name, "max_violation": float(value), "tolerance": tol,
            "location": {"move": None if move is None else list(move),
                         "config": None if config is None else list(config)},
            "passed": bool(value <= tol)}


def verify_adjointness(st: KamState, n: int, tol: float = 1e-10) -> list[dict]:
    region = box_region(st.box, n)
    out = []
    for k in range(1, st.n1 + 1):
        v, m, c = max_difference(st.u[k], -st.u[k].adjoint(), region)
        out.append(_check(f"skew u^({k})", v, tol, m, c))
    for k in range(st.n1 + 1):
        h = st.htilde[k]
        v, m, c = max_difference(h, h.adjoint(), region)
        out.append(_check(f"self-adjoint htilde^({k})", v, tol, m, c))
    return out


def verify_resonance_purity(st: KamState, n: int) -> dict:
    region = box_region(st.box, n)
    scale = st.params.delta ** (-st.gamma)
    bad = 0
    for k in range(1, st.n1 + 1):
        for rho, F in st.htilde[k].terms.items():
            if any(rho):
                z = st.box.zeta(rho, scale)
                bad += int(np.count_nonzero(region & (F != 0) & (z <= 0)))
    return {"check": "resonance purity", "max_violation": float(bad), "tolerance": 0.0,
            "location": None, "passed": bad == 0}


def verify_conservation(st: KamState) -> dict:
    ops = st.u[1:] + st.htilde
    ok = all(op.conserves_particles() for op in ops)
    return {"check": "particle conservation", "max_violation": 0.0 if ok else 1.0,
            "tolerance": 0.0, "location": None, "passed": ok}


def normal_form_coefficients(st: KamState) -> FormalSeries:
    """Coefficients of T_{n1}(R h~)."""
    return st.R_series(st.htilde_series(), key_prefix="ht")


def verify_normal_form(st: KamState, n: int, tests: list[FormalSeries] | None = None,
                 tol: float = 1e-8) -> list[dict]:
    """Order-by-order check of T(R h~) = d + mu v and of the commutator identity."""
    region = box_region(st.box, n)
    report = []
    coeffs = normal_form_coefficients(st)
    for k in range(st.n1 + 1):
        target = st.d if k == 0 else st.v if k == 1 else st.zero()
        got = coeffs[k] if coeffs[k] is not None else st.zero()
        v, m, c = max_difference(got, target, region)
        report.append(_check(f"T(R htilde) coefficient {k}", v, tol, m, c))
    for i, f in enumerate(tests or []):
        for k, (lhs, rhs) in enumerate(zip(*commutator_identity_sides(st, f))):
            v, m, c = max_difference(lhs, rhs, region)
            report.append(_check(f"commutator identity test {i} coefficient {k}", v, tol, m, c))
    return report


def commutator_identity_sides(st: KamState, f: FormalSeries):
    """Both sides of ad_h T(R f) = T(R ad_h~ f) + mu^(n1+1) ad_v (R f)^(n1), by power of mu."""
    n1 = st.n1
    Rf = st.R_series(f)
    zero = st.zero()

    def c(series, k):
        return series[k] if series[k] is not None else zero

    lhs = []
    for m in range(n1 + 2):
        acc = zero
        if m <= n1:
            acc = acc + commutator(st.d, c(Rf, m))
        if m >= 1:
            acc = acc + commutator(st.v, c(Rf, m - 1))
        lhs.append(acc)
    ht = st.htilde_series()
    adf = []
    for k in range(n1 + 1):
        acc = zero
        for i in range(k + 1):
            if f[k - i] is not None:
                acc = acc + commutator(ht[i], f[k - i])
        adf.append(acc)
    R_adf = st.R_series(FormalSeries(adf, n1))
    rhs = [c(R_adf, m) for m in range(n1 + 1)]
    rhs.append(commutator(st.v, c(Rf, n1)))
    return lhs, rhs


def verify_formal_inverse(st: KamState, f: FormalSeries, n: int, tol: float = 1e-9) -> dict:
    back = st.R_series(st.Q_series(f))
    region = box_region(st.box, n)
    worst = (0.0, None, None)
    for k in range(st.n1 + 1):
        a = back[k] if back[k] is not None else st.zero()
        b = f[k] if f[k] is not None else st.zero()
        got = max_difference(a, b, region)
        if got[0] > worst[0]:
            worst = got
    return _check("formal inverse T(R(T(Q f))) = f", worst[0], tol, worst[1], worst[2])


# ------------------------------------------------------------------ random operators

def random_operator(box: Box, delta: float, rng: np.random.Generator, moves: list,
                    n_terms: int = 3, hermitian: bool = True, window_cap: int | None = None
                    ) -> ClassSOperator:
    """A random class-S operator with bounded smooth-ish diagonal coefficients."""
    chosen = rng.choice(len(moves), size=min(n_terms, len(moves)), replace=False)
    pts = box.points.astype(float)
    coeffs = {}
    for i in chosen:
        rho = tuple(moves[i])
        freq = rng.normal(scale=0.4, size=box.N)
        phase = rng.uniform(0, 2 * np.pi)
        c0, c1 = rng.normal(size=2) + 1j * rng.normal(size=2)
        coeffs[rho] = c0 + c1 * np.cos(pts @ freq + phase)
    f = ClassSOperator.from_coefficients(box, delta, coeffs)
    if hermitian:
        f = f + f.adjoint()
    return f


# ------------------------------------------------------------------ matrix oracle

def _exp_ad_series(U: sp.spmatrix, power: int, series: list, order: int, sign: float = 1.0) -> list:
    """Apply exp(sign mu^power ad_U) to a matrix-coefficient series, truncated."""
    out = [None if s is None else s.copy() for s in series]
    term = list(series)
    j = 1
    while power * j <= order:
        nxt = [None] * (order + 1)
        for k, s in enumerate(term):
            if s is None or k + power > order:
                continue
            nxt[k + power] = (sign / j) * (U @ s - s @ U)
        term = nxt
        for k, s in enumerate(term):
            if s is not None:
                out[k] = s if out[k] is None else out[k] + s
        j += 1
    return out


def conjugation_oracle(st: KamState, space: TruncatedFockSpace, order: int | None = None) -> list:
    """Coefficients of e^{mu^n ad u_n} ... e^{mu ad u_1} (d + mu v) as sparse matrices."""
    order = st.n1 if order is None else order
    series = [st.d.to_matrix(space).data, st.v.to_matrix(space).data] + [None] * (order - 1)
    series = series[: order + 1]
    for k in range(1, order + 1):
        series = _exp_ad_series(st.u[k].to_matrix(space).data, k, series, order)
    return series


def inverse_conjugation_oracle(st: KamState, space: TruncatedFockSpace, series: list) -> list:
    """Apply e^{-mu ad u_1} ... e^{-mu^n ad u_n} to a matrix series."""
    order = len(series) - 1
    for k in range(order, 0, -1):
        series = _exp_ad_series(st.u[k].to_matrix(space).data, k, series, order, sign=-1.0)
    return series


def buffered_max(mat, space: TruncatedFockSpace, depth: int) -> tuple[float, tuple | None]:
    """Largest |entry| with both row and column in the buffered subspace."""
    keep = np.flatnonzero(space.buffered_mask(depth))
    sub = sp.csr_matrix(mat)[keep][:, keep]
    if sub.nnz == 0:
        return 0.0, None
    coo = sub.tocoo()
    k = int(np.argmax(np.abs(coo.data)))
    loc = (space.config_at(keep[coo.row[k]]), space.config_at(keep[coo.col[k]]))
    return float(abs(coo.data[k])), loc


def required_cap(n_max: int, n1: int) -> int:
    """Box cap that keeps every table used up to order n1 known on {0..n_max}^N."""
    return n_max + 4 * n1 + 2


def check_capacity(op: ClassSOperator, n: int) -> None:
    if op.has_unknown(box_region(op.box, n)):
        raise CapacityError("operator has unknown entries on the requested region")


def verify_homological(params: ModelParams, N: int, n_max: int, count: int, seed: int = 0,
                       radius: int = 2, matrix_checks: int = 5, tol: float = 1e-10) -> dict:
    """ad_d kam_solve(f) = f - resonant_part(f) for random hermitian class-S f.

    Tables are compared on every cell with occupancies <= n_max; the first few
    operators are also compared as matrices on the depth-2 buffered subspace.
    """
    geometry = ChainGeometry(N)
    box = Box(N, n_max + 2 * radius)
    d = total(hamiltonian_pieces(box, params)[0], box, params.delta)
    moves = [m for m in move_set(radius, geometry) if any(m)]
    rng = np.random.default_rng(seed)
    region = box_region(box, n_max)
    space = TruncatedFockSpace(geometry, n_max)
    mask = space.buffered_mask(2)
    D = d.to_matrix(space).data
    worst = (0.0, None, None)
    for i in range(count):
        f = random_operator(box, params.delta, rng, moves)
        u = f.kam_solve(params.gamma)
        rest = f - f.resonant_part(params.gamma)
        got = max_difference(commutator(d, u), rest, region)
        if got[0] > worst[0]:
            worst = got
        if i < matrix_checks:
            U = u.to_matrix(space).data
            diff = (D @ U - U @ D - rest.to_matrix(space).data)[mask][:, mask]
            v = float(abs(diff).max()) if diff.nnz else 0.0
            if v > worst[0]:
                worst = (v, None, None)
    report = _check("homological identity", worst[0], tol, worst[1], worst[2])
    report["operators"] = count
    return report


def measure_scalings(deltas, N: int = 3, n1: int = 1, g: float = 0.5, gamma: float = 0.75,
                     spread: float = 3.0) -> dict:
    """Range and size of htilde^(k), u^(k) against delta (with mu = delta).

    Sizes are the largest coefficient over the Gibbs-typical region
    max_x eta_x <= spread / delta, and the Gibbs-weighted rms for comparison.
    """
    rows = []
    for delta in deltas:
        params = ModelParams(g, delta, delta, gamma)
        n_typ = int(math.ceil(spread / delta))
        box = Box(N, required_cap(n_typ, n1))
        st = build_kam(n1, params, box)
        region = box_region(box, n_typ)
        w = np.exp(-delta * box.points.sum(axis=-1))[region]
        w = w / w.sum()
        for k in range(1, n1 + 1):
            for name, op in (("htilde", st.htilde[k]), ("u", st.u[k])):
                sq = sum(np.abs(F[region]) ** 2 for F in op.terms.values())
                rows.append({"delta": delta, "k": k, "operator": name, "range": op.range(),
                             "max": op.max_abs(region), "rms": float(np.sqrt(w @ sq))})
    gp = 1.0 - gamma
    fits = {}
    for k in range(1, n1 + 1):
        for name, expected in (("htilde", -2 * (k - 1) * gp), ("u", -2 * k * gp - gamma)):
            sel = [r for r in rows if r["k"] == k and r["operator"] == name]
            x = np.log([r["delta"] for r in sel])
            fits[f"{name}^({k})"] = {
                "expected": expected,
                "slope_max": float(np.polyfit(x, np.log([r["max"] for r in sel]), 1)[0]),
                "slope_rms": float(np.polyfit(x, np.log([r["rms"] for r in sel]), 1)[0]),
                "ranges": sorted({r["range"] for r in sel})}
    return {"rows": rows, "fits": fits}
