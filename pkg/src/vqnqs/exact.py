"""Exact diagonalization for small lattices (N <= 20)."""

import functools
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .hamiltonian import HamiltonianModel, all_configs, connected_batch, encode

MAX_SITES = 20
RESIDUAL_TOL = 1e-8
MAX_ITER = 10_000


class CapabilityError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


@dataclass
class DenseGroundState:
    energy: float
    amplitudes: np.ndarray
    n_sites: int
    residual: float = 0.0
    wall_time: float = 0.0

    @property
    def per_site_energy(self) -> float:
        return self.energy / self.n_sites


@functools.lru_cache(maxsize=8)
def hamiltonian_sparse(model: HamiltonianModel, chunk: int = 1 << 15) -> sp.csr_matrix:
    """CSR matrix of ``H`` assembled row by row from :func:`connected_batch`."""
    n = model.n_sites
    if n > MAX_SITES:
        raise CapabilityError(f"{n} sites exceeds the exact-diagonalization limit of {MAX_SITES}")
    dim = 2**n
    rows, cols, vals = [], [], []
    for start in range(0, dim, chunk):
        idx = np.arange(start, min(dim, start + chunk), dtype=np.int64)
        configs = ((idx[:, None] >> np.arange(n)) & 1).astype(np.uint8)
        conn, coeff, _ = connected_batch(model, configs)
        keep = coeff != 0.0
        b, k = np.nonzero(keep)
        rows.append(idx[b])
        cols.append(encode(conn[b, k]))
        vals.append(coeff[b, k])
    H = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim)
    )
    H.sum_duplicates()
    return H


def _residual(H, psi, energy):
    return float(np.linalg.norm(H @ psi - energy * psi))


def ground_state(model: HamiltonianModel) -> DenseGroundState:
    """Lowest eigenpair of ``H`` by Lanczos iteration (ARPACK) on the sparse rows."""
    t0 = time.perf_counter()
    H = hamiltonian_sparse(model)
    dim = H.shape[0]
    if dim <= 64:
        w, v = np.linalg.eigh(H.toarray())
        energy, psi = float(w[0]), v[:, 0]
    else:
        rng = np.random.default_rng(0)
        v0 = rng.random(dim) + 0.1
        energy, psi = None, None
        for ncv in (20, 40, 80):
            try:
                w, v = spla.eigsh(H, k=1, which="SA", v0=v0, ncv=ncv, maxiter=MAX_ITER, tol=0)
            except spla.ArpackNoConvergence as exc:
                if len(exc.eigenvalues):
                    w, v = exc.eigenvalues, exc.eigenvectors
                else:
                    continue
            energy, psi = float(w[0]), v[:, 0]
            if _residual(H, psi / np.linalg.norm(psi), energy) < RESIDUAL_TOL:
                break
        if psi is None:
            raise NumericalError("Lanczos iteration did not converge")
    psi = psi / np.linalg.norm(psi)
    if psi[np.argmax(np.abs(psi))] < 0:
        psi = -psi
    energy = float(psi @ (H @ psi))
    res = _residual(H, psi, energy)
    if res > RESIDUAL_TOL:
        raise NumericalError(f"ground-state residual {res:.3e} above {RESIDUAL_TOL:g}", residual=res)
    return DenseGroundState(energy, psi, model.n_sites, res, time.perf_counter() - t0)


def rayleigh_quotient(model: HamiltonianModel, amplitudes):
    """``psi^T H psi / psi^T psi`` for real amplitudes over all ``2**N`` basis states.

    Accepts a numpy vector or a :class:`vqnqs.tensor.Tensor`; the latter stays
    on the autodiff tape.
    """
    from .tensor import Tensor, dot, div, spmv

    H = hamiltonian_sparse(model)
    if isinstance(amplitudes, Tensor):
        if amplitudes.shape != (H.shape[0],):
            raise ValueError(f"expected {H.shape[0]} amplitudes, got shape {amplitudes.shape}")
        if not np.any(amplitudes.data):
            raise ValueError("Rayleigh quotient of the zero vector is undefined")
        return div(dot(amplitudes, spmv(H, amplitudes)), dot(amplitudes, amplitudes))
    psi = np.asarray(amplitudes, dtype=np.float64)
    if psi.shape != (H.shape[0],):
        raise ValueError(f"expected {H.shape[0]} amplitudes, got shape {psi.shape}")
    norm2 = float(psi @ psi)
    if norm2 == 0.0:
        raise ValueError("Rayleigh quotient of the zero vector is undefined")
    return float(psi @ (H @ psi)) / norm2


def ground_state_record(model: HamiltonianModel) -> dict:
    gs = ground_state(model)
    return {
        "model": model.describe(),
        "N": model.n_sites,
        "E0": gs.energy,
        "E0_per_site": gs.per_site_energy,
        "residual": gs.residual,
        "wall_time": gs.wall_time,
    }


__all__ = [
    "CapabilityError",
    "DenseGroundState",
    "NumericalError",
    "all_configs",
    "ground_state",
    "ground_state_record",
    "hamiltonian_sparse",
    "rayleigh_quotient",
]
