import json
from pathlib import Path

import pytest

from vqnqs import config as rc
from vqnqs.hamiltonian import ConfigurationError

TOML = """
seed = 12345678901234567890
out_dir = "runs/x"

[system]
kind = "tfim"
lattice = "chain1d"
dims = [8]
couplings = {J = 1.0, Gamma = 0.5}

[model]
group_size = 2
d_hidden = 16
vq_enabled = true

[train]
steps = 10
learning_rate = 3e-3

[train.distill]
batch_size = 64

[measure]
batches = 3
"""


def test_parse_and_defaults():
    cfg = rc.loads(TOML)
    assert cfg.model.n_sites == 8 and cfg.model.n_heads == 4
    assert cfg.system.couplings == {"J": 1.0, "Gamma": 0.5}
    assert cfg.train.distill.batch_size == 64 and cfg.train.distill.steps == 1000
    assert cfg.measure.samples_per_batch == 512
    h = cfg.system.hamiltonian()
    assert h.kind == "tfim" and h.Gamma == 0.5 and h.n_sites == 8


def test_resolved_json_roundtrip(tmp_path):
    cfg = rc.loads(TOML)
    text = cfg.to_json()
    p = tmp_path / "config.json"
    p.write_text(text)
    again = rc.load_resolved(p)
    assert again.to_json() == text
    assert json.loads(text)["seed_derivation"]["streams"]["train"] == 1


def test_seed_streams_are_independent_and_stable():
    cfg = rc.loads(TOML)
    a = cfg.rng("train").integers(1 << 30, size=4)
    b = cfg.rng("measure").integers(1 << 30, size=4)
    assert not (a == b).all()
    assert (cfg.rng("train").integers(1 << 30, size=4) == a).all()


@pytest.mark.parametrize(
    "text,needle",
    [
        ("[model]\nd_hiden = 3\n", "d_hiden"),
        ("[system]\nkind = 'xy'\n", "system.kind"),
        ("bogus = 1\n", "bogus"),
        ("[train]\nsamples_per_step = 1\n", "samples_per_step"),
        ("[system]\ndims = [2, 2]\n[model]\nn_sites = 5\n", "n_sites"),
        ("[model\n", "line 1"),
        ("seed = -1\n", "seed"),
    ],
)
def test_diagnostics(text, needle):
    with pytest.raises(ConfigurationError) as exc:
        rc.loads(text)
    assert needle in str(exc.value)


@pytest.mark.parametrize("path", sorted((Path(__file__).parent.parent / "configs").glob("*.toml")), ids=lambda p: p.name)
def test_shipped_configs_load(path):
    cfg = rc.load(path)
    assert cfg.model.n_sites == cfg.system.n_sites
