"""Wall-clock comparison of the numba and numpy kernel paths.

    python benchmarks/bench_kernels.py [--repeat 20]

Both implementations are imported directly, so the ``VQNQS_NUMBA`` switch
does not matter here. The first numba call (compilation) is excluded.
"""

import argparse
import timeit

import numpy as np

from vqnqs import kernels
from vqnqs.hamiltonian import heisenberg, tfim


def _cases(rng):
    chain = tfim((64,))
    grid = heisenberg((8, 8))
    c64 = rng.integers(0, 2, size=(512, 64), dtype=np.uint8)
    keys = rng.integers(0, 2**63, size=200_000, dtype=np.uint64)
    cols = rng.integers(0, 1 << 20, size=(200_000, 4), dtype=np.int64)
    bc, bg = chain.lattice.bonds, grid.lattice.bonds
    return {
        "tfim_connected (512 x 64 sites)": (
            lambda: kernels.tfim_connected_nb(c64, bc, 1.0, 1.0),
            lambda: kernels.tfim_connected_np(c64, bc, 1.0, 1.0),
        ),
        "heisenberg_connected (512 x 8x8)": (
            lambda: kernels.heisenberg_connected_nb(c64, bg, -0.5),
            lambda: kernels.heisenberg_connected_np(c64, bg, -0.5),
        ),
        "hash_rows (200k x 4)": (
            lambda: kernels.hash_rows_nb(keys, cols),
            lambda: kernels.hash_rows_np(keys, cols),
        ),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (nb, npf) in _cases(rng).items():
        a, b = nb(), npf()
        for x, y in zip(a, b):
            assert np.allclose(x, y, rtol=0, atol=0), name
        t_nb = min(timeit.repeat(nb, number=1, repeat=args.repeat)) * 1e3
        t_np = min(timeit.repeat(npf, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:36s} {t_nb:10.3f} {t_np:10.3f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
