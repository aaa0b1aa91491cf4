"""Lattices, spin Hamiltonians and their sparse rows.

Spins are stored as ``uint8`` arrays with ``0 = down`` and ``1 = up``; the
Ising variable is ``z = 2*s - 1``.
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from . import kernels


class ConfigurationError(ValueError):
    """Invalid lattice, model or configuration."""


@dataclass(frozen=True)
class Lattice:
    kind: str
    dims: Tuple[int, ...]
    bonds: np.ndarray = field(repr=False, compare=False)
    sublattice: np.ndarray = field(repr=False, compare=False)
    boundary: str = "open"

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.dims))

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    def to_dict(self):
        return {"kind": self.kind, "dims": list(self.dims), "boundary": self.boundary}


def build_lattice(kind: str, dims) -> Lattice:
    """Open chain (``dims=(L,)``) or open grid (``dims=(rows, cols)``), row-major sites.

    Bonds are ``(i, j)`` pairs with ``i < j``: for a grid all horizontal bonds
    row by row, then all vertical bonds. Sublattice ``A`` (label 0) holds the
    sites with even coordinate sum.
    """
    dims = tuple(int(d) for d in np.atleast_1d(dims))
    if any(d <= 0 for d in dims):
        raise ConfigurationError(f"lattice dimensions must be positive, got {dims}")
    if kind == "chain1d":
        if len(dims) != 1:
            raise ConfigurationError(f"chain1d takes one dimension, got {dims}")
        (L,) = dims
        bonds = [(i, i + 1) for i in range(L - 1)]
        sub = np.arange(L) % 2
    elif kind == "grid2d":
        if len(dims) != 2:
            raise ConfigurationError(f"grid2d takes two dimensions, got {dims}")
        rows, cols = dims
        site = np.arange(rows * cols).reshape(rows, cols)
        bonds = [(site[r, c], site[r, c + 1]) for r in range(rows) for c in range(cols - 1)]
        bonds += [(site[r, c], site[r + 1, c]) for r in range(rows - 1) for c in range(cols)]
        rr, cc = np.divmod(np.arange(rows * cols), cols)
        sub = (rr + cc) % 2
    else:
        raise ConfigurationError(f"unknown lattice kind {kind!r}")
    bonds = np.array(bonds, dtype=np.int64).reshape(-1, 2)
    return Lattice(kind, dims, bonds, sub.astype(np.int8))


@dataclass(frozen=True)
class HamiltonianModel:
    kind: str
    lattice: Lattice
    J: float = 1.0
    Gamma: float = 1.0
    marshall: bool = True

    def __post_init__(self):
        if self.kind == "tfim":
            if not (np.isfinite(self.J) and np.isfinite(self.Gamma)):
                raise ConfigurationError("tfim couplings must be finite")
        elif self.kind != "heisenberg":
            raise ConfigurationError(f"unknown Hamiltonian kind {self.kind!r}")

    @property
    def n_sites(self) -> int:
        return self.lattice.n_sites

    @property
    def max_connected(self) -> int:
        if self.kind == "tfim":
            return self.n_sites + 1
        return self.lattice.n_bonds + 1

    def describe(self) -> dict:
        d = {"kind": self.kind, "lattice": self.lattice.to_dict()}
        if self.kind == "tfim":
            d.update(J=self.J, Gamma=self.Gamma, convention="pauli")
        else:
            d.update(marshall=self.marshall, convention="spin-1/2")
        return d


def tfim(dims, J=1.0, Gamma=1.0, kind="chain1d") -> HamiltonianModel:
    return HamiltonianModel("tfim", build_lattice(kind, dims), J=float(J), Gamma=float(Gamma))


def heisenberg(dims, marshall=True, kind=None) -> HamiltonianModel:
    dims = tuple(np.atleast_1d(dims))
    kind = kind or ("grid2d" if len(dims) == 2 else "chain1d")
    return HamiltonianModel("heisenberg", build_lattice(kind, dims), marshall=bool(marshall))


@dataclass
class ConnectedSet:
    base: np.ndarray
    configs: np.ndarray
    coeffs: np.ndarray

    def __len__(self):
        return len(self.coeffs)

    @property
    def entries(self) -> List[Tuple[np.ndarray, float]]:
        return [(c, float(v)) for c, v in zip(self.configs, self.coeffs)]


def as_configs(s, n_sites=None) -> np.ndarray:
    """Validate spin configurations, returning a 2-D ``uint8`` array."""
    arr = np.asarray(s)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ConfigurationError(f"configurations must be 1-D or 2-D, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ConfigurationError("spin values must lie in {0, 1}")
    if n_sites is not None and arr.shape[1] != n_sites:
        raise ConfigurationError(f"expected {n_sites} sites, got {arr.shape[1]}")
    return np.ascontiguousarray(arr, dtype=np.uint8)


def connected_batch(model: HamiltonianModel, configs):
    """Sparse rows of ``H`` for a batch of configurations.

    Returns ``(conn, coeff, count)`` with ``conn`` of shape ``(B, Kmax, N)``;
    entry 0 of every row is the diagonal, entries ``>= count[b]`` are padding
    with zero coefficient.
    """
    configs = as_configs(configs, model.n_sites)
    bonds = model.lattice.bonds
    if model.kind == "tfim":
        return kernels.tfim_connected(configs, bonds, float(model.J), float(model.Gamma))
    offdiag = -0.5 if model.marshall else 0.5
    return kernels.heisenberg_connected(configs, bonds, offdiag)


def connected_set(model: HamiltonianModel, s) -> ConnectedSet:
    base = as_configs(s, model.n_sites)
    if base.shape[0] != 1:
        raise ConfigurationError("connected_set takes a single configuration")
    conn, coeff, count = connected_batch(model, base)
    k = int(count[0])
    return ConnectedSet(base[0], conn[0, :k].copy(), coeff[0, :k].copy())


def marshall_sign(lattice: Lattice, s) -> int:
    """``(-1)`` to the number of down spins on sublattice A."""
    s = as_configs(s, lattice.n_sites)[0]
    n_down_a = int(np.sum((s == 0) & (lattice.sublattice == 0)))
    return -1 if n_down_a % 2 else 1


def diagonal_energy(model: HamiltonianModel, configs) -> np.ndarray:
    _, coeff, _ = connected_batch(model, configs)
    return coeff[:, 0].copy()


def all_configs(n_sites: int) -> np.ndarray:
    """Every basis state; row ``i`` encodes integer ``i`` with site 0 as the lowest bit."""
    idx = np.arange(2**n_sites, dtype=np.int64)
    return ((idx[:, None] >> np.arange(n_sites)) & 1).astype(np.uint8)


def encode(configs) -> np.ndarray:
    """Inverse of :func:`all_configs`: basis index of each configuration."""
    configs = np.asarray(configs)
    weights = np.left_shift(np.int64(1), np.arange(configs.shape[-1], dtype=np.int64))
    return configs.astype(np.int64) @ weights
