import os
import subprocess
import sys

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from vqnqs import kernels
from vqnqs.hamiltonian import build_lattice


@st.composite
def batch(draw):
    rows = draw(st.integers(1, 4))
    cols = draw(st.integers(1, 4))
    lattice = build_lattice("grid2d", (rows, cols)) if draw(st.booleans()) else build_lattice("chain1d", (rows * cols,))
    b = draw(st.integers(1, 6))
    seed = draw(st.integers(0, 2**31))
    configs = np.random.default_rng(seed).integers(0, 2, size=(b, rows * cols), dtype=np.uint8)
    return lattice, configs


@settings(max_examples=60, deadline=None)
@given(batch(), st.floats(-2, 2), st.floats(-2, 2))
def test_tfim_paths_agree(data, J, gamma):
    lat, configs = data
    a = kernels.tfim_connected_nb(configs, lat.bonds, J, gamma)
    b = kernels.tfim_connected_np(configs, lat.bonds, J, gamma)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


@settings(max_examples=60, deadline=None)
@given(batch(), st.sampled_from([-0.5, 0.5]))
def test_heisenberg_paths_agree(data, off):
    lat, configs = data
    a = kernels.heisenberg_connected_nb(configs, lat.bonds, off)
    b = kernels.heisenberg_connected_np(configs, lat.bonds, off)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 50), st.integers(1, 5), st.integers(0, 2**31))
def test_hash_paths_agree(rows, cols, seed):
    rng = np.random.default_rng(seed)
    keys = rng.integers(0, 2**63, size=rows, dtype=np.uint64)
    c = rng.integers(-(2**40), 2**40, size=(rows, cols), dtype=np.int64)
    assert np.array_equal(kernels.hash_rows_nb(keys, c), kernels.hash_rows_np(keys, c))


def test_hash_separates_columns_and_order():
    keys = np.zeros(3, dtype=np.uint64)
    h = kernels.hash_rows(keys, np.array([[1, 2], [2, 1], [1, 3]]))
    assert len(set(h.tolist())) == 3
    assert np.array_equal(kernels.hash_rows(keys, np.array([5, 6, 7])), kernels.hash_rows(keys, np.array([[5], [6], [7]])))


def test_env_flag_selects_numpy_path():
    code = "from vqnqs import kernels; print(kernels.tfim_connected is kernels.tfim_connected_np)"
    out = subprocess.run([sys.executable, "-c", code], env={**os.environ, "VQNQS_NUMBA": "0"}, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "True"

