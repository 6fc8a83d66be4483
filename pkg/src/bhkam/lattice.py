"""Finite chain, truncated bosonic Fock space and matrix realizations.

Sites are stored as 0..N-1 internally; ``ChainGeometry.label`` gives the
centred label used in I/O.  Configurations are enumerated lexicographically
with site 0 the most significant digit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp


class CapacityError(RuntimeError):
    """A requested object would exceed a configured size limit."""


DEFAULT_MAX_DIM = 2_000_000
DENSE_THRESHOLD = 20_000


@dataclass(frozen=True)
class ChainGeometry:
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N!r}")

    @property
    def sites(self) -> range:
        return range(self.N)

    @property
    def offset(self) -> int:
        return (self.N - 1) // 2

    def label(self, x: int) -> int:
        return int(x) - self.offset

    def index(self, label: int) -> int:
        x = int(label) + self.offset
        if not 0 <= x < self.N:
            raise ValueError(f"site label {label} outside chain of {self.N} sites")
        return x

    @property
    def bonds(self) -> list[int]:
        # bond x couples x and x+1; the last site has none
        return list(range(self.N - 1))

    def ball(self, x: int, radius: int) -> list[int]:
        return [y for y in range(self.N) if abs(y - x) <= radius]


@dataclass(frozen=True)
class ModelParams:
    g: float = 0.5
    mu: float = 0.3
    delta: float = 0.3
    gamma: float = 0.75

    def __post_init__(self):
        if not 0.5 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (1/2, 1)")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if not 0.0 < self.mu < 1.0:
            raise ValueError("mu must lie in (0, 1)")

    @property
    def gamma_prime(self) -> float:
        return 1.0 - self.gamma

    @property
    def cutoff_scale(self) -> float:
        """The scale a = delta**(-gamma) of the resonance cutoff."""
        return self.delta ** (-self.gamma)


def model_descriptor(geometry: ChainGeometry, n_max: int, params: ModelParams) -> str:
    return json.dumps({"N": geometry.N, "n_max": n_max, **asdict(params)}, sort_keys=True)


def model_from_descriptor(text: str) -> tuple[ChainGeometry, int, ModelParams]:
    d = json.loads(text)
    geometry = ChainGeometry(int(d.pop("N")))
    n_max = int(d.pop("n_max"))
    return geometry, n_max, ModelParams(**d)


@dataclass(frozen=True)
class TruncatedFockSpace:
    geometry: ChainGeometry
    n_max: int
    max_dim: int = DEFAULT_MAX_DIM
    _configs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_max < 0:
            raise ValueError("n_max must be >= 0")
        dim = (self.n_max + 1) ** self.geometry.N
        if dim > self.max_dim:
            raise CapacityError(
                f"space of dimension {dim} exceeds the limit {self.max_dim}")
        grids = np.indices((self.n_max + 1,) * self.geometry.N).reshape(self.geometry.N, -1)
        configs = np.ascontiguousarray(grids.T, dtype=np.int64)
        configs.setflags(write=False)
        object.__setattr__(self, "_configs", configs)

    @property
    def N(self) -> int:
        return self.geometry.N

    @property
    def dim(self) -> int:
        return (self.n_max + 1) ** self.N

    @property
    def configs(self) -> np.ndarray:
        return self._configs

    def config_at(self, i: int) -> tuple[int, ...]:
        return tuple(int(v) for v in self._configs[i])

    def index_of(self, configs) -> np.ndarray | int:
        c = np.asarray(configs, dtype=np.int64)
        base = self.n_max + 1
        weights = base ** np.arange(self.N - 1, -1, -1, dtype=np.int64)
        idx = c @ weights
        return int(idx) if c.ndim == 1 else idx

    def contains(self, configs) -> np.ndarray:
        c = np.asarray(configs)
        return np.all((c >= 0) & (c <= self.n_max), axis=-1)

    def buffered_mask(self, depth: int) -> np.ndarray:
        """Configurations with every occupancy <= n_max - depth."""
        return self._configs.max(axis=1) <= self.n_max - depth

    def sector_mask(self, total: int | None = None) -> np.ndarray:
        """Complete particle-number sectors: total occupation <= n_max."""
        s = self._configs.sum(axis=1)
        return s <= (self.n_max if total is None else total)


def enumerate_configs(space: TruncatedFockSpace) -> list[tuple[int, ...]]:
    return [tuple(int(v) for v in row) for row in space.configs]


def apply_ladder(config, x: int, kind: str) -> tuple[tuple[int, ...], float]:
    eta = list(config)
    n = eta[x]
    if kind == "annihilate":
        if n == 0:
            return tuple(eta), 0.0
        eta[x] = n - 1
        return tuple(eta), math.sqrt(n)
    if kind == "create":
        eta[x] = n + 1
        return tuple(eta), math.sqrt(n + 1)
    raise ValueError(f"unknown ladder kind {kind!r}")


@dataclass
class OperatorMatrix:
    data: sp.csr_matrix
    space: TruncatedFockSpace
    kind: str = "general"  # hermitian | skew | general
    truncation_loss: int = 0

    def toarray(self) -> np.ndarray:
        return self.data.toarray()

    def hermiticity_defect(self) -> float:
        d = self.data - self.data.conj().T
        return float(abs(d).max()) if d.nnz else 0.0

    def skewness_defect(self) -> float:
        d = self.data + self.data.conj().T
        return float(abs(d).max()) if d.nnz else 0.0

    def check_kind(self, tol: float = 1e-12) -> bool:
        if self.kind == "hermitian":
            return self.hermiticity_defect() <= tol
        if self.kind == "skew":
            return self.skewness_defect() <= tol
        return True

    def storage(self):
        """Dense array below the configured threshold, sparse above."""
        return self.toarray() if self.space.dim <= DENSE_THRESHOLD else self.data

    def to_csv(self, path) -> None:
        coo = self.data.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("row,col,re,im\n")
            for k in order:
                v = complex(coo.data[k])
                fh.write(f"{coo.row[k]},{coo.col[k]},{v.real:.17g},{v.imag:.17g}\n")


def _hop_matrix(space: TruncatedFockSpace, x: int, y: int):
    """Matrix of a*_x a_y (x != y) on the truncated space and its loss count."""
    c = space.configs
    src = np.flatnonzero(c[:, y] >= 1)
    amp = np.sqrt(c[src, y] * (c[src, x] + 1.0))
    tgt = c[src].copy()
    tgt[:, y] -= 1
    tgt[:, x] += 1
    keep = tgt[:, x] <= space.n_max
    loss = int(np.count_nonzero(~keep))
    rows = space.index_of(tgt[keep])
    m = sp.csr_matrix((amp[keep], (rows, src[keep])), shape=(space.dim, space.dim))
    return m, loss


def number_squared(space: TruncatedFockSpace, x: int) -> sp.csr_matrix:
    return sp.diags(space.configs[:, x].astype(float) ** 2, format="csr")


def local_pieces(params: ModelParams, space: TruncatedFockSpace, reduced: bool):
    """Per-site diagonal and bond parts (d_x, v_x) as sparse matrices.

    Reduced: d_x = (delta N_x)^2 and v_x = g delta (a*_x a_{x+1} + h.c.).
    Physical: d_x = N_x^2 and v_x = g (a*_x a_{x+1} + h.c.).
    """
    scale_d = params.delta ** 2 if reduced else 1.0
    scale_v = params.g * (params.delta if reduced else 1.0)
    ds, vs, loss = [], [], 0
    for x in space.geometry.sites:
        ds.append(scale_d * number_squared(space, x))
        if x + 1 < space.N:
            m1, l1 = _hop_matrix(space, x, x + 1)
            m2, l2 = _hop_matrix(space, x + 1, x)
            vs.append(scale_v * (m1 + m2).tocsr())
            loss += l1 + l2
        else:
            vs.append(sp.csr_matrix((space.dim, space.dim)))
    return ds, vs, loss


def build_bose_hubbard(params: ModelParams, space: TruncatedFockSpace) -> OperatorMatrix:
    ds, vs, loss = local_pieces(params, space, reduced=False)
    h = sum(ds) + sum(vs)
    return OperatorMatrix(sp.csr_matrix(h, dtype=complex), space, "hermitian", loss)


def build_reduced_hamiltonian(params: ModelParams, space: TruncatedFockSpace) -> OperatorMatrix:
    ds, vs, loss = local_pieces(params, space, reduced=True)
    h = sum(ds) + params.mu * sum(vs)
    return OperatorMatrix(sp.csr_matrix(h, dtype=complex), space, "hermitian", loss)


def right_part(params: ModelParams, space: TruncatedFockSpace, a: int, reduced: bool,
               mu_scaled: bool = True) -> sp.csr_matrix:
    """Sum of local Hamiltonian pieces h_x over sites x > a.

    The piece h_x owns the on-site term at x and the bond (x, x+1).
    """
    ds, vs, _ = local_pieces(params, space, reduced)
    coupling = params.mu if (reduced and mu_scaled) else 1.0
    out = sp.csr_matrix((space.dim, space.dim), dtype=complex)
    for x in space.geometry.sites:
        if x > a:
            out = out + ds[x] + coupling * vs[x]
    return out.tocsr()


def number_operator(space: TruncatedFockSpace) -> sp.csr_matrix:
    return sp.diags(space.configs.sum(axis=1).astype(float), format="csr")
