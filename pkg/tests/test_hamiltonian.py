import numpy as np
import pytest
from oracles import kron_heisenberg, kron_tfim

from vqnqs.exact import hamiltonian_sparse
from vqnqs.hamiltonian import (
    ConfigurationError,
    all_configs,
    build_lattice,
    connected_set,
    encode,
    heisenberg,
    marshall_sign,
    tfim,
)

SMALL = [
    tfim((1,)),
    tfim((5,), J=0.7, Gamma=1.3),
    tfim((2, 3), kind="grid2d", Gamma=0.5),
    heisenberg((2,)),
    heisenberg((6,)),
    heisenberg((2, 3)),
    heisenberg((2, 2), marshall=False),
]


def _oracle(h):
    if h.kind == "tfim":
        return kron_tfim(h.n_sites, h.lattice.bonds, h.J, h.Gamma)
    return kron_heisenberg(h.n_sites, h.lattice.bonds, h.lattice.sublattice if h.marshall else None)


@pytest.mark.parametrize("h", SMALL, ids=lambda h: f"{h.kind}-{h.lattice.dims}")
def test_matches_kronecker_oracle(h):
    assert np.abs(hamiltonian_sparse(h).toarray() - _oracle(h)).max() < 1e-14


def test_kronecker_oracle_n10():
    h = tfim((10,), Gamma=0.8)
    assert np.abs(hamiltonian_sparse(h).toarray() - _oracle(h)).max() < 1e-14
    h = heisenberg((2, 5))
    assert np.abs(hamiltonian_sparse(h).toarray() - _oracle(h)).max() < 1e-14


@pytest.mark.parametrize("h", SMALL, ids=lambda h: f"{h.kind}-{h.lattice.dims}")
def test_hermitian(h):
    H = hamiltonian_sparse(h).toarray()
    assert np.array_equal(H, H.T)


def test_marshall_offdiagonals_nonpositive():
    H = hamiltonian_sparse(heisenberg((3, 3))).toarray()
    off = H - np.diag(np.diag(H))
    assert off.max() <= 0.0 and off.min() == -0.5


def test_marshall_sign_is_the_basis_rotation():
    lat = build_lattice("grid2d", (2, 3))
    configs = all_configs(6)
    signs = np.array([marshall_sign(lat, s) for s in configs])
    plain = hamiltonian_sparse(heisenberg((2, 3), marshall=False)).toarray()
    rotated = hamiltonian_sparse(heisenberg((2, 3))).toarray()
    assert np.allclose(signs[:, None] * plain * signs[None, :], rotated)


def test_tfim_connected_count():
    h = tfim((7,))
    s = np.array([0, 1, 1, 0, 1, 0, 0], dtype=np.uint8)
    cs = connected_set(h, s)
    assert len(cs.configs) == 8
    assert np.array_equal(cs.configs[0], s)
    assert np.all((cs.configs[1:] != s).sum(axis=1) == 1)
    assert np.allclose(cs.coeffs[1:], -1.0)


def test_heisenberg_connected_count_is_antialigned_bonds():
    h = heisenberg((3, 3))
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = rng.integers(0, 2, 9).astype(np.uint8)
        b = h.lattice.bonds
        anti = int(np.sum(s[b[:, 0]] != s[b[:, 1]]))
        cs = connected_set(h, s)
        assert len(cs.configs) == 1 + anti
        assert np.all((cs.configs[1:] != s).sum(axis=1) == 2)
        assert len(cs.configs) <= h.max_connected


def test_all_up_heisenberg_only_diagonal():
    h = heisenberg((4,))
    cs = connected_set(h, np.zeros(4, dtype=np.uint8))
    assert len(cs.configs) == 1
    assert cs.coeffs[0] == pytest.approx(0.75)


def test_grid_bonds():
    lat = build_lattice("grid2d", (4, 4))
    assert len(lat.bonds) == 24
    assert lat.sublattice.sum() == 8
    assert len(build_lattice("chain1d", (16,)).bonds) == 15


def test_encode_roundtrip():
    c = all_configs(5)
    assert np.array_equal(encode(c), np.arange(32))


@pytest.mark.parametrize("kind,dims", [("chain1d", (0,)), ("ring", (4,)), ("grid2d", (2, -1))])
def test_bad_lattice(kind, dims):
    with pytest.raises(ConfigurationError):
        build_lattice(kind, dims)


def test_wrong_configuration_length():
    with pytest.raises((ValueError, ConfigurationError)):
        connected_set(tfim((4,)), np.zeros(5, dtype=np.uint8))
