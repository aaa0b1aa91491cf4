import json

import numpy as np
import pytest

from vqnqs import bench
from vqnqs.hamiltonian import tfim
from vqnqs.model import ModelConfig, VqTransformer
from vqnqs.tensor import UsageError


def _model(n, **kw):
    base = dict(n_sites=n, group_size=2, d_hidden=16, n_heads=2, n_blocks=1)
    base.update(kw)
    return VqTransformer(ModelConfig(**base), seed=0)


@pytest.fixture(scope="module")
def report():
    m = _model(8, vq_enabled=True, vq_codebook=8)
    return bench.measure_flops(m, tfim((8,)), samples_per_batch=6, batches=2, rng=np.random.default_rng(0), reference_energy=-9.8)


def test_report_invariants(report):
    assert report.total_savings == report.flops_dense / report.flops_dedup
    assert sum(report.breakdown.values()) == pytest.approx(report.flops_dedup, rel=1e-15)
    assert report.quantized_ops_savings >= report.total_savings >= 1.0
    assert report.model_bits == "3b"
    assert report.relative_error == pytest.approx(abs(report.energy + 9.8) / 9.8)
    assert report.metadata["flop_convention"]["multiply_add"] == 2


def test_measurement_is_deterministic(report):
    m = _model(8, vq_enabled=True, vq_codebook=8)
    again = bench.measure_flops(m, tfim((8,)), samples_per_batch=6, batches=2, rng=np.random.default_rng(0), reference_energy=-9.8)
    assert again.to_dict() == report.to_dict()


def test_parallel_workers_give_identical_counts(report):
    m = _model(8, vq_enabled=True, vq_codebook=8)
    par = bench.measure_flops(
        m, tfim((8,)), samples_per_batch=6, batches=2, rng=np.random.default_rng(0), reference_energy=-9.8, workers=2
    )
    assert par.to_dict() == report.to_dict()


def test_baseline_savings_is_one():
    rep = bench.measure_flops(_model(8), tfim((8,)), samples_per_batch=4, batches=1)
    assert rep.total_savings == 1.0 and rep.model_bits == "baseline"


def test_emit_table_roundtrip(report, tmp_path):
    paths = bench.emit_table([report, report], tmp_path)
    rows = bench.read_table(paths["csv"])
    assert list(rows[0]) == list(bench.CSV_COLUMNS)
    assert rows[0] == report.row()
    assert float(rows[0]["flops_dense"]) == report.flops_dense
    assert float(rows[0]["total_savings"]) == report.total_savings
    data = json.loads(open(paths["json"]).read())
    assert data[0]["flops_dedup"] == report.flops_dedup


def test_emit_table_empty():
    with pytest.raises(UsageError):
        bench.emit_table([], "unused")


def test_error_formatting():
    assert bench.format_error(2.8e-05) == "2.8e-05"
    assert bench.format_error(0.00123) == "1.2e-03"
    assert bench.format_energy(-0.5743254) == "-0.574325"


def test_fit_recovers_cubic():
    n = np.array([4, 8, 16, 32, 64])
    y = 3 + 2 * n + 0.5 * n**2 + 0.01 * n**3
    fit = bench.fit_polynomial(n, y)
    assert np.allclose(fit["coefficients"], [3, 2, 0.5, 0.01], rtol=1e-6, atol=1e-6)
    assert not fit["reduced"]


def test_fit_degenerates_with_few_sizes():
    fit = bench.fit_polynomial([16], [100.0])
    assert fit["reduced"] and fit["degree"] == 0 and fit["coefficients"] == [100.0, 0.0, 0.0, 0.0]


def test_scaling_sweep_small(tmp_path):
    def build(n):
        return _model(n, vq_enabled=True, vq_codebook=8), tfim((n,))

    sw = bench.scaling_sweep([4, 6, 8, 10], build, samples_per_batch=3, batches=1)
    assert set(sw["fits"]) == set(bench.SERIES) and not sw["fit_reduced"]
    assert sw["fits"]["no_reuse"]["coefficients"][3] > 0
    path = bench.write_scaling(sw, tmp_path)
    assert json.loads(open(path).read())["sizes"] == [4, 6, 8, 10]
    with pytest.raises(UsageError):
        bench.scaling_sweep([8, 4], build)
