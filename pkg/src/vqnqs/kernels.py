"""Hot inner loops: Hamiltonian row enumeration and identity-key hashing.

Every kernel exists twice, a numba loop (``*_nb``) and a vectorized numpy
version (``*_np``); the public name is bound to one of them according to
``VQNQS_NUMBA``. Both produce identical outputs.
"""

import numpy as np

from ._accel import njit, pick

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)


# --------------------------------------------------------------------------
# transverse-field Ising: H = -J sum_<ij> z_i z_j - Gamma sum_i x_i
# --------------------------------------------------------------------------


@njit
def tfim_connected_nb(configs, bonds, J, Gamma):
    B, N = configs.shape
    K = N + 1
    conn = np.empty((B, K, N), dtype=np.uint8)
    coeff = np.empty((B, K), dtype=np.float64)
    count = np.full(B, K, dtype=np.int64)
    for b in range(B):
        zz = 0.0
        for e in range(bonds.shape[0]):
            i = bonds[e, 0]
            j = bonds[e, 1]
            zz += (2.0 * configs[b, i] - 1.0) * (2.0 * configs[b, j] - 1.0)
        for k in range(K):
            for n in range(N):
                conn[b, k, n] = configs[b, n]
        coeff[b, 0] = -J * zz
        for i in range(N):
            conn[b, i + 1, i] = 1 - configs[b, i]
            coeff[b, i + 1] = -Gamma
    return conn, coeff, count


def tfim_connected_np(configs, bonds, J, Gamma):
    B, N = configs.shape
    K = N + 1
    z = 2.0 * configs.astype(np.float64) - 1.0
    if len(bonds):
        zz = (z[:, bonds[:, 0]] * z[:, bonds[:, 1]]).sum(axis=1)
    else:
        zz = np.zeros(B)
    conn = np.repeat(configs[:, None, :], K, axis=1)
    idx = np.arange(N)
    conn[:, idx + 1, idx] = 1 - configs[:, idx]
    coeff = np.empty((B, K))
    coeff[:, 0] = -J * zz
    coeff[:, 1:] = -Gamma
    return conn, coeff, np.full(B, K, dtype=np.int64)


# --------------------------------------------------------------------------
# spin-1/2 Heisenberg: H = sum_<ij> S_i . S_j
# --------------------------------------------------------------------------


@njit
def heisenberg_connected_nb(configs, bonds, offdiag):
    B, N = configs.shape
    nb = bonds.shape[0]
    K = nb + 1
    conn = np.empty((B, K, N), dtype=np.uint8)
    coeff = np.zeros((B, K), dtype=np.float64)
    count = np.empty(B, dtype=np.int64)
    for b in range(B):
        for k in range(K):
            for n in range(N):
                conn[b, k, n] = configs[b, n]
        diag = 0.0
        c = 1
        for e in range(nb):
            i = bonds[e, 0]
            j = bonds[e, 1]
            if configs[b, i] == configs[b, j]:
                diag += 0.25
            else:
                diag -= 0.25
                conn[b, c, i] = configs[b, j]
                conn[b, c, j] = configs[b, i]
                coeff[b, c] = offdiag
                c += 1
        coeff[b, 0] = diag
        count[b] = c
    return conn, coeff, count


def heisenberg_connected_np(configs, bonds, offdiag):
    B, N = configs.shape
    nb = len(bonds)
    K = nb + 1
    conn = np.repeat(configs[:, None, :], K, axis=1)
    coeff = np.zeros((B, K))
    if nb == 0:
        return conn, coeff, np.ones(B, dtype=np.int64)
    si = configs[:, bonds[:, 0]]
    sj = configs[:, bonds[:, 1]]
    anti = si != sj
    coeff[:, 0] = np.where(anti, -0.25, 0.25).sum(axis=1)
    # slot of each anti-aligned bond: 1 + number of anti-aligned bonds before it
    slot = np.cumsum(anti, axis=1)
    bb, ee = np.nonzero(anti)
    kk = slot[bb, ee]
    conn[bb, kk, bonds[ee, 0]] = sj[bb, ee]
    conn[bb, kk, bonds[ee, 1]] = si[bb, ee]
    coeff[bb, kk] = offdiag
    return conn, coeff, 1 + anti.sum(axis=1).astype(np.int64)


# --------------------------------------------------------------------------
# 64-bit identity keys (splitmix64 chaining)
# --------------------------------------------------------------------------


@njit
def _splitmix_nb(x):
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit
def hash_rows_nb(keys, cols):
    R, C = cols.shape
    out = np.empty(R, dtype=np.uint64)
    for r in range(R):
        h = keys[r]
        for c in range(C):
            h = _splitmix_nb(h ^ _splitmix_nb(np.uint64(cols[r, c])))
        out[r] = h
    return out


def _splitmix_np(x):
    z = x + _GOLDEN
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


def hash_rows_np(keys, cols):
    h = keys.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        for c in range(cols.shape[1]):
            h = _splitmix_np(h ^ _splitmix_np(cols[:, c].astype(np.uint64)))
    return h


tfim_connected = pick(tfim_connected_nb, tfim_connected_np)
heisenberg_connected = pick(heisenberg_connected_nb, heisenberg_connected_np)
_hash_rows = pick(hash_rows_nb, hash_rows_np)


def hash_rows(keys, cols):
    """Chain each row of integer columns ``cols`` into the parent ``keys``."""
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    if cols.ndim == 1:
        cols = cols[:, None]
    return _hash_rows(keys, cols)
