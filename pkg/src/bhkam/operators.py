"""Move-decomposed operators with diagonal coefficients.

An operator f is stored as a map from a move rho to the table
``F[rho][eta] = <eta + rho| f |eta>`` over a padded occupation box
{0..cap}^N.  The diagonal coefficient b_rho of the normal-ordered monomial
A_rho is recovered on demand as F / A.  Products only ever read tables at
shifted points; cells whose value would need data from beyond the box are
marked NaN so that the algebra is exact wherever it reports a number.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp

from .lattice import CapacityError, ChainGeometry, ModelParams, OperatorMatrix, TruncatedFockSpace

Move = tuple


class RangeError(RuntimeError):
    """An operator acquired a move outside the configured range cap."""


# ---------------------------------------------------------------- moves

def move_range(rho) -> int:
    """Smallest r with rho in M_r."""
    rho = np.asarray(rho)
    nz = np.flatnonzero(rho)
    if nz.size == 0:
        return 0
    return int(max(np.abs(rho).max(), math.ceil((nz[-1] - nz[0]) / 2)))


def move_set(r: int, geometry: ChainGeometry, limit: int = 5_000_000) -> list[Move]:
    """All nonzero moves with entries in [-r, r] supported in a radius-r ball."""
    if r < 1:
        raise ValueError("r must be >= 1")
    N = geometry.N
    width = min(2 * r + 1, N)
    if (2 * r + 1) ** width * N > limit:
        raise CapacityError(f"move set M_{r} on {N} sites is too large to enumerate")
    found = set()
    for start in range(N - width + 1):
        for vals in itertools.product(range(-r, r + 1), repeat=width):
            if any(vals):
                rho = [0] * N
                rho[start:start + width] = vals
                found.add(tuple(rho))
    return sorted(found)


def support(rho) -> tuple[int, ...]:
    return tuple(int(i) for i in np.flatnonzero(rho))


def energy(eta) -> np.ndarray:
    eta = np.asarray(eta)
    return np.sum(eta * eta, axis=-1)


def delta_E(eta, rho):
    """E(eta + rho) - E(eta) = 2 eta.rho + |rho|^2."""
    eta = np.asarray(eta)
    rho = np.asarray(rho)
    return 2 * (eta @ rho) + int(rho @ rho)


# ---------------------------------------------------------------- cutoff

def _psi(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    a = _psi(t)
    b = _psi(1.0 - np.asarray(t, dtype=float))
    return a / (a + b)


def xi(x):
    """Even bump equal to 1 on [-1, 1] and 0 outside [-2, 2]."""
    x = np.asarray(x, dtype=float)
    out = smooth_step(2.0 - np.abs(x))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class CutoffFunction:
    scale: float

    def __call__(self, x):
        return xi(np.asarray(x, dtype=float) / self.scale)


def zeta(rho, eta, delta: float, gamma: float):
    return xi(np.asarray(delta_E(eta, rho), dtype=float) * delta ** gamma)


# ---------------------------------------------------------------- diagonal functions

class DiagonalFunction:
    """A function of the occupation numbers reading only the sites in ``window``."""

    def __init__(self, evaluator: Callable[[np.ndarray], np.ndarray], window: Iterable[int],
                 smooth: bool = False):
        self._f = evaluator
        self.window = tuple(sorted(set(int(x) for x in window)))
        self.smooth = smooth

    def __call__(self, eta):
        eta = np.asarray(eta)
        return self._f(eta)

    def tabulate(self, box: "Box") -> np.ndarray:
        flat = box.points.reshape(-1, box.N)
        return np.asarray(self._f(flat), dtype=complex).reshape(box.shape)

    @classmethod
    def constant(cls, c: complex) -> "DiagonalFunction":
        return cls(lambda eta: np.full(np.shape(eta)[:-1], c, dtype=complex), ())

    @classmethod
    def occupation(cls, x: int) -> "DiagonalFunction":
        return cls(lambda eta: np.asarray(eta)[..., x].astype(float), (x,))

    @classmethod
    def energy(cls, N: int) -> "DiagonalFunction":
        return cls(lambda eta: energy(eta).astype(float), range(N))


def discrete_derivative(b: DiagonalFunction, rho) -> DiagonalFunction:
    rho = np.asarray(rho)
    window = set(b.window) | set(support(rho))
    return DiagonalFunction(lambda eta: b(np.asarray(eta) + rho) - b(eta), window, b.smooth)


# ---------------------------------------------------------------- box

class Box:
    """Tabulation domain {0..cap}^N for diagonal tables."""

    def __init__(self, N: int, cap: int, max_cells: int = 20_000_000, origin=None):
        if (cap + 1) ** N > max_cells:
            raise CapacityError(f"box (0..{cap})^{N} exceeds {max_cells} cells")
        self.N = int(N)
        self.cap = int(cap)
        self.shape = (self.cap + 1,) * self.N
        # cells are origin + index; a nonzero origin gives a window far from the vacuum
        self.origin = tuple(int(v) for v in (origin if origin is not None else (0,) * self.N))
        if any(v < 0 for v in self.origin):
            raise ValueError("box origin must be non-negative")
        self._energy_diff: dict = {}
        self._zeta: dict = {}
        self._amp: dict = {}
        self._valid: dict = {}

    @classmethod
    def around(cls, eta, half_width: int) -> "Box":
        """Box of side 2*half_width+1 centred on eta (clipped at zero)."""
        origin = [max(int(v) - half_width, 0) for v in eta]
        return cls(len(origin), 2 * half_width, origin=origin)

    @cached_property
    def points(self) -> np.ndarray:
        return np.moveaxis(np.indices(self.shape), 0, -1) + np.asarray(self.origin)

    def coord(self, x: int) -> np.ndarray:
        shape = [1] * self.N
        shape[x] = self.cap + 1
        return (self.origin[x] + np.arange(self.cap + 1)).reshape(shape)

    def cell(self, eta) -> tuple:
        """Array index of configuration eta (which must lie inside the box)."""
        idx = tuple(int(v) - o for v, o in zip(eta, self.origin))
        if any(i < 0 or i > self.cap for i in idx):
            raise IndexError(f"configuration {tuple(eta)} lies outside the box")
        return idx

    def energy_difference(self, rho: Move) -> np.ndarray:
        got = self._energy_diff.get(rho)
        if got is None:
            got = np.zeros(self.shape)
            for x, s in enumerate(rho):
                if s:
                    got = got + 2.0 * s * self.coord(x)
            got = got + float(sum(s * s for s in rho))
            got = np.broadcast_to(got, self.shape)
            self._energy_diff[rho] = got
        return got

    def zeta(self, rho: Move, scale: float) -> np.ndarray:
        key = (rho, scale)
        got = self._zeta.get(key)
        if got is None:
            got = xi(self.energy_difference(rho) / scale)
            self._zeta[key] = got
        return got

    def valid(self, rho: Move) -> np.ndarray:
        """Cells eta with eta + rho >= 0."""
        got = self._valid.get(rho)
        if got is None:
            got = np.ones(self.shape, dtype=bool)
            for x, s in enumerate(rho):
                if s < 0:
                    got = got & (self.coord(x) >= -s)
            self._valid[rho] = got
        return got

    def amplitude(self, rho: Move, delta: float) -> np.ndarray:
        """<eta+rho| A_rho |eta> for the normal-ordered reduced monomial."""
        key = (rho, delta)
        got = self._amp.get(key)
        if got is None:
            prod = np.ones(self.shape)
            for x, s in enumerate(rho):
                if s:
                    n = self.coord(x).astype(float)
                    # falling factorial of max(n, n+s) over |s| steps, exact for small |s|
                    top = np.maximum(n, n + s)
                    f = np.ones_like(n)
                    for k in range(abs(s)):
                        f = f * np.maximum(top - k, 0.0)
                    prod = prod * f
            nrm = sum(abs(s) for s in rho)
            got = np.where(self.valid(rho), delta ** (0.5 * nrm) * np.sqrt(prod), 0.0)
            self._amp[key] = got
        return got

    def shifted(self, table: np.ndarray, shift: Move) -> np.ndarray:
        """out[eta] = table[eta + shift]; NaN past the cap, 0 below zero."""
        if not any(shift):
            return table
        out = np.full(self.shape, np.nan, dtype=table.dtype)
        n = self.cap + 1
        src, dst = [], []
        for s in shift:
            if s >= 0:
                dst.append(slice(0, max(n - s, 0)))
                src.append(slice(s, n))
            else:
                dst.append(slice(-s, n))
                src.append(slice(0, max(n + s, 0)))
        if all(d.stop > d.start for d in dst):
            out[tuple(dst)] = table[tuple(src)]
        for ax, s in enumerate(shift):
            below = -s - self.origin[ax]
            if below > 0:
                idx = [slice(None)] * self.N
                idx[ax] = slice(0, below)
                out[tuple(idx)] = 0.0
        return out


# ---------------------------------------------------------------- class S operators

def _add_move(a: Move, b: Move) -> Move:
    return tuple(x + y for x, y in zip(a, b))


def _neg_move(a: Move) -> Move:
    return tuple(-x for x in a)


def _safe_product(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    # an exactly-zero factor wins over an unknown (NaN) one
    with np.errstate(invalid="ignore"):
        out = left * right
    zero = (left == 0) | (right == 0)
    if zero.any():
        out[zero] = 0.0
    return out


class ClassSOperator:
    """Operator stored as move -> table of matrix elements on a box."""

    __slots__ = ("box", "terms", "delta")

    def __init__(self, box: Box, terms: dict, delta: float, clean: bool = True):
        self.box = box
        self.delta = float(delta)
        self.terms = {}
        for rho, table in terms.items():
            rho = tuple(int(v) for v in rho)
            t = np.asarray(table, dtype=complex)
            if clean:
                t = np.where(box.valid(rho), t, 0.0)
            if np.any(t != 0):
                self.terms[rho] = t

    # construction
    @classmethod
    def zero(cls, box: Box, delta: float) -> "ClassSOperator":
        return cls(box, {}, delta)

    @classmethod
    def from_coefficients(cls, box: Box, delta: float, coeffs: dict) -> "ClassSOperator":
        """Build sum_rho A_rho b_rho from diagonal functions (or arrays) b_rho."""
        terms = {}
        for rho, b in coeffs.items():
            rho = tuple(int(v) for v in rho)
            tab = b.tabulate(box) if isinstance(b, DiagonalFunction) else np.broadcast_to(b, box.shape)
            terms[rho] = box.amplitude(rho, delta) * tab
        return cls(box, terms, delta)

    def _like(self, terms: dict, clean: bool = True) -> "ClassSOperator":
        return ClassSOperator(self.box, terms, self.delta, clean)

    # inspection
    @property
    def moves(self) -> list[Move]:
        return sorted(self.terms)

    def coefficient(self, rho: Move) -> np.ndarray:
        """Diagonal coefficient b_rho = F_rho / A_rho (0 where A_rho = 0)."""
        F = self.terms.get(tuple(rho))
        if F is None:
            return np.zeros(self.box.shape, dtype=complex)
        A = self.box.amplitude(tuple(rho), self.delta)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(A != 0, F / np.where(A != 0, A, 1.0), 0.0)

    def range(self) -> int:
        return max((move_range(r) for r in self.terms), default=0)

    def degree(self) -> int:
        """Largest monomial degree |rho|_1 among stored moves."""
        return max((sum(abs(v) for v in r) for r in self.terms), default=0)

    def max_abs(self, region: np.ndarray | None = None) -> float:
        m = 0.0
        for t in self.terms.values():
            vals = t if region is None else t[region]
            if vals.size:
                m = max(m, float(np.nanmax(np.abs(vals))))
        return m

    def has_unknown(self, region: np.ndarray | None = None) -> bool:
        for t in self.terms.values():
            vals = t if region is None else t[region]
            if np.isnan(vals).any():
                return True
        return False

    def conserves_particles(self) -> bool:
        return all(sum(r) == 0 for r in self.terms)

    # linear structure
    def __add__(self, other: "ClassSOperator") -> "ClassSOperator":
        terms = dict(self.terms)
        for rho, t in other.terms.items():
            terms[rho] = terms[rho] + t if rho in terms else t
        return self._like(terms, clean=False)

    def __neg__(self) -> "ClassSOperator":
        return self._like({r: -t for r, t in self.terms.items()}, clean=False)

    def __sub__(self, other: "ClassSOperator") -> "ClassSOperator":
        return self + (-other)

    def scale(self, c: complex) -> "ClassSOperator":
        if c == 0:
            return self._like({})
        return self._like({r: c * t for r, t in self.terms.items()}, clean=False)

    __mul__ = scale

    def __rmul__(self, c):
        return self.scale(c)

    # products
    def compose(self, other: "ClassSOperator") -> "ClassSOperator":
        """Operator product self @ other."""
        box = self.box
        out: dict = {}
        for rho2, G in other.terms.items():
            for rho1, F in self.terms.items():
                sigma = _add_move(rho1, rho2)
                prod = _safe_product(box.shifted(F, rho2), G)
                if sigma in out:
                    out[sigma] = out[sigma] + prod
                else:
                    out[sigma] = prod
        return self._like(out)

    __matmul__ = compose

    def times_diagonal(self, table: np.ndarray) -> "ClassSOperator":
        """Right multiplication by the diagonal operator with the given table."""
        return self._like({r: _safe_product(t, table) for r, t in self.terms.items()})

    def diagonal_times(self, table: np.ndarray) -> "ClassSOperator":
        """Left multiplication by a diagonal operator."""
        return self._like({r: _safe_product(self.box.shifted(table, r), t)
                           for r, t in self.terms.items()})

    def adjoint(self) -> "ClassSOperator":
        out = {}
        for rho, F in self.terms.items():
            neg = _neg_move(rho)
            out[neg] = np.conj(self.box.shifted(F, neg))
        return self._like(out)

    # resonance machinery
    def resonant_part(self, gamma: float) -> "ClassSOperator":
        scale = self.delta ** (-gamma)
        return self._like({r: _safe_product(t, self.box.zeta(r, scale))
                           for r, t in self.terms.items()})

    def kam_solve(self, gamma: float) -> "ClassSOperator":
        """delta^-2 sum_rho f^(rho) (1 - zeta_rho) / Delta_rho E; zero where Delta E = 0."""
        scale = self.delta ** (-gamma)
        out = {}
        for rho, F in self.terms.items():
            dE = self.box.energy_difference(rho)
            factor = np.zeros(self.box.shape)
            nz = dE != 0
            factor[nz] = (1.0 - self.box.zeta(rho, scale)[nz]) / dE[nz]
            out[rho] = _safe_product(F, factor / self.delta ** 2)
        return self._like(out)

    # matrix bridge
    def to_matrix(self, space: TruncatedFockSpace, kind: str = "general") -> OperatorMatrix:
        if space.n_max > self.box.cap or space.N != self.box.N or any(self.box.origin):
            raise CapacityError("space does not fit inside the tabulation box")
        configs = space.configs
        cols_all = np.arange(space.dim)
        rows, cols, vals = [], [], []
        loss = 0
        for rho, F in self.terms.items():
            tgt = configs + np.asarray(rho)
            nonneg = np.all(tgt >= 0, axis=1)
            inside = nonneg & np.all(tgt <= space.n_max, axis=1)
            v = F[tuple(configs.T)]
            lost = nonneg & ~inside & (v != 0)
            loss += int(np.count_nonzero(lost))
            sel = inside & (v != 0)
            if np.isnan(v[sel]).any():
                raise CapacityError(
                    f"move {rho} has unknown matrix elements inside the space; enlarge the box")
            rows.append(space.index_of(tgt[sel]))
            cols.append(cols_all[sel])
            vals.append(v[sel])
        if rows:
            data = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(space.dim, space.dim), dtype=complex)
        else:
            data = sp.csr_matrix((space.dim, space.dim), dtype=complex)
        return OperatorMatrix(data, space, kind, loss)

    def column(self, eta) -> dict:
        """Nonzero matrix elements <eta+rho| f |eta> keyed by target."""
        eta = tuple(int(v) for v in eta)
        cell = self.box.cell(eta)
        out = {}
        for rho, F in self.terms.items():
            v = F[cell]
            if v != 0:
                out[_add_move(eta, rho)] = complex(v)
        return out

    # dump
    def dump(self, n: int | None = None) -> list:
        n = self.box.cap if n is None else n
        records = []
        for rho in self.moves:
            b = self.coefficient(rho)
            # b is undefined where the monomial vanishes
            b = np.where(self.box.amplitude(rho, self.delta) != 0, b, np.nan)
            window = self._window(b)
            finite = np.argwhere(np.isfinite(b))
            base = [int(v) for v in finite[0]] if len(finite) else [0] * self.box.N
            table = []
            for cfg in itertools.product(range(n + 1), repeat=len(window)):
                idx = list(base)
                for x, val in zip(window, cfg):
                    idx[x] = val
                cfg = tuple(self.box.origin[x] + c for x, c in zip(window, cfg))
                v = b[tuple(idx)]
                if not np.isnan(v):
                    table.append([list(cfg), float(v.real), float(v.imag)])
            records.append({"move": list(rho), "window": list(window), "table": table})
        return records

    def _window(self, table: np.ndarray) -> tuple[int, ...]:
        win = []
        for x in range(self.box.N):
            d = np.diff(table, axis=x)
            if np.nanmax(np.abs(d), initial=0.0) > 0:
                win.append(x)
        return tuple(win)

    def dump_json(self, path, n: int | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.dump(n), fh)


def commutator(f: ClassSOperator, g: ClassSOperator) -> ClassSOperator:
    return f.compose(g) - g.compose(f)


def max_difference(f: ClassSOperator, g: ClassSOperator, region: np.ndarray | None = None):
    """Largest |F - G| over all moves, optionally on a boolean region of the box.

    Returns (value, move, config).  Unknown cells inside the region raise.
    """
    worst, where = 0.0, (None, None)
    for rho in set(f.terms) | set(g.terms):
        a = f.terms.get(rho)
        b = g.terms.get(rho)
        d = (a if a is not None else 0) - (b if b is not None else 0)
        d = np.broadcast_to(d, f.box.shape)
        if region is not None:
            d = np.where(region, d, 0.0)
        if np.isnan(d).any():
            raise CapacityError(f"unknown cells inside the comparison region for move {rho}")
        k = int(np.argmax(np.abs(d)))
        val = float(np.abs(d).flat[k])
        if val > worst:
            worst, where = val, (rho, tuple(int(i) for i in np.unravel_index(k, f.box.shape)))
    return worst, where[0], where[1]


def box_region(box: Box, n: int, depth: int = 0) -> np.ndarray:
    """Cells with every occupancy <= n - depth."""
    return np.all(box.points <= n - depth, axis=-1)


# ---------------------------------------------------------------- Hamiltonian pieces

def hamiltonian_pieces(box: Box, params: ModelParams):
    """Per-site reduced pieces d_x = (delta N_x)^2 and v_x = g(alpha*_x alpha_{x+1} + h.c.)."""
    N, delta = box.N, params.delta
    ds, vs = [], []
    for x in range(N):
        zero = (0,) * N
        ds.append(ClassSOperator(box, {zero: np.broadcast_to(
            (delta * box.coord(x)) ** 2, box.shape).astype(complex)}, delta))
        if x + 1 < N:
            right = [0] * N
            right[x], right[x + 1] = 1, -1
            right = tuple(right)
            coeffs = {right: params.g, _neg_move(right): params.g}
            vs.append(ClassSOperator.from_coefficients(box, delta, {
                r: np.full(box.shape, c, dtype=complex) for r, c in coeffs.items()}))
        else:
            vs.append(ClassSOperator.zero(box, delta))
    return ds, vs


def total(ops: Iterable[ClassSOperator], box: Box, delta: float) -> ClassSOperator:
    acc = ClassSOperator.zero(box, delta)
    for op in ops:
        acc = acc + op
    return acc


# ---------------------------------------------------------------- formal series

class FormalSeries:
    """Truncated power series in mu with operator coefficients (None = zero)."""

    def __init__(self, coeffs: list, order: int):
        self.order = int(order)
        c = list(coeffs[: order + 1])
        c += [None] * (self.order + 1 - len(c))
        self.coeffs = c

    def __getitem__(self, k: int):
        return self.coeffs[k] if 0 <= k <= self.order else None

    def truncate(self, order: int) -> "FormalSeries":
        return FormalSeries(self.coeffs, min(order, self.order))

    def __add__(self, other: "FormalSeries") -> "FormalSeries":
        order = min(self.order, other.order)
        return FormalSeries([_opt_add(self[k], other[k]) for k in range(order + 1)], order)

    def scale(self, c) -> "FormalSeries":
        return FormalSeries([None if f is None else f.scale(c) for f in self.coeffs], self.order)

    def evaluate(self, mu: float):
        acc = None
        for k, f in enumerate(self.coeffs):
            if f is not None:
                acc = _opt_add(acc, f.scale(mu ** k))
        return acc


def _opt_add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def series_truncate(Y: FormalSeries, order: int) -> FormalSeries:
    return Y.truncate(order)


def series_commutator(A: FormalSeries, B: FormalSeries) -> FormalSeries:
    order = min(A.order, B.order)
    out = []
    for n in range(order + 1):
        acc = None
        for k in range(n + 1):
            if A[k] is not None and B[n - k] is not None:
                acc = _opt_add(acc, commutator(A[k], B[n - k]))
        out.append(acc)
    return FormalSeries(out, order)


def series_apply(maps: list, f: FormalSeries, order: int | None = None) -> FormalSeries:
    """Apply the operator-valued series sum_k mu^k maps[k] to f, truncated."""
    order = f.order if order is None else order
    out = []
    for n in range(order + 1):
        acc = None
        for k in range(min(n, len(maps) - 1) + 1):
            g = f[n - k]
            if g is not None and maps[k] is not None:
                acc = _opt_add(acc, maps[k](g))
        out.append(acc)
    return FormalSeries(out, order)
