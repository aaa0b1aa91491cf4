"""FLOP measurement over local-energy batches, savings ratios and scaling fits."""

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dedup import local_energy_batch
from .flops import FlopLedger
from .tensor import UsageError

FLOP_CONVENTION = {
    "multiply_add": 2,
    "comparison": 1,
    "linear": "2*m*n*p + m*p",
    "layer_norm": "8 per element",
    "gelu": "8 per element",
    "softmax": "5 per element",
    "attention_per_head": "4*T^2*dh + 6*T^2 (+T^2 causal mask)",
    "vq_distance": "rows*Q*(3*d + 2*H)",
}

CSV_COLUMNS = (
    "system",
    "N",
    "model_bits",
    "energy",
    "relative_error",
    "flops_dense",
    "flops_dedup",
    "total_savings",
    "quantized_ops_savings",
    "per_location",
    "attention",
    "vq_distance",
    "other",
    "batches",
    "samples_per_batch",
)


@dataclass
class MeasurementReport:
    system: dict
    N: int
    model_bits: str
    flops_dense: float
    flops_dedup: float
    total_savings: float
    quantized_ops_savings: float
    breakdown: dict
    energy: float
    relative_error: Optional[float]
    batches: int
    samples_per_batch: int
    quantized_dense: float = 0.0
    quantized_unique: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        s = self.system
        dims = "x".join(str(d) for d in s["lattice"]["dims"])
        return f"{s['kind']}-{s['lattice']['kind']}-{dims}"

    def row(self) -> dict:
        """The report flattened to the CSV column set, rendered as strings."""
        return {
            "system": self.label,
            "N": str(self.N),
            "model_bits": self.model_bits,
            "energy": format_energy(self.energy),
            "relative_error": format_error(self.relative_error),
            "flops_dense": repr(float(self.flops_dense)),
            "flops_dedup": repr(float(self.flops_dedup)),
            "total_savings": repr(float(self.total_savings)),
            "quantized_ops_savings": repr(float(self.quantized_ops_savings)),
            **{k: repr(float(self.breakdown[k])) for k in ("per_location", "attention", "vq_distance", "other")},
            "batches": str(self.batches),
            "samples_per_batch": str(self.samples_per_batch),
        }

    def to_dict(self) -> dict:
        return asdict(self)


def format_energy(e) -> str:
    return f"{e:.6f}"


def format_error(err) -> str:
    return "" if err is None else f"{err:.1e}"


def _worker_count():
    try:
        return max(1, int(os.environ.get("VQNQS_WORKERS", "1")))
    except ValueError:
        return 1


def _measure_chunk(model, hamiltonian, samples):
    ledger = FlopLedger(regime="dedup")
    eloc = np.empty(len(samples))
    for i, s in enumerate(samples):
        e, led = local_energy_batch(model, hamiltonian, s, dedup=True)
        eloc[i] = np.real(e)
        ledger = ledger + led
    return ledger, eloc


def measure_flops(
    model, hamiltonian, samples_per_batch=512, batches=20, rng=None, reference_energy=None, workers=None
) -> MeasurementReport:
    """Sample ``batches`` batches and count local-energy FLOPs with and without reuse.

    Every sample runs through the dedup pipeline, whose ledger carries both
    the executed (dedup) counts and the dense shadow counts. FLOPs are
    averaged over batches.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    workers = _worker_count() if workers is None else workers
    chunks = [model.sample(samples_per_batch, rng) for _ in range(batches)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_measure_chunk, [model] * batches, [hamiltonian] * batches, chunks))
    else:
        results = [_measure_chunk(model, hamiltonian, c) for c in chunks]
    total = FlopLedger(regime="dedup")
    for led, _ in results:
        total = total + led
    eloc = np.concatenate([e for _, e in results])
    energy = float(np.mean(eloc))
    rel = None if reference_energy is None else abs(energy - reference_energy) / abs(reference_energy)
    avg = lambda x: x / batches  # noqa: E731
    return MeasurementReport(
        system=hamiltonian.describe(),
        N=hamiltonian.n_sites,
        model_bits=model.config.bits_label,
        flops_dense=avg(total.flops_dense),
        flops_dedup=avg(total.flops_dedup),
        total_savings=total.total_savings,
        quantized_ops_savings=total.quantized_ops_savings,
        breakdown={k: avg(v) for k, v in total.breakdown().items()},
        energy=energy,
        relative_error=rel,
        batches=batches,
        samples_per_batch=samples_per_batch,
        quantized_dense=avg(total.quantized_dense),
        quantized_unique=avg(total.quantized_unique),
        metadata={
            "flop_convention": FLOP_CONVENTION,
            "distillation_target": "0.5*log P (log-amplitude)",
            "energy_per_site": energy / hamiltonian.n_sites,
        },
    )


SERIES = ("no_reuse", "reuse", "reuse_minus_attention", "reuse_minus_attention_vq")


def series_values(report: MeasurementReport) -> dict:
    b = report.breakdown
    return {
        "no_reuse": report.flops_dense,
        "reuse": report.flops_dedup,
        "reuse_minus_attention": report.flops_dedup - b["attention"],
        "reuse_minus_attention_vq": report.flops_dedup - b["attention"] - b["vq_distance"],
    }


def fit_polynomial(sizes, values, degree=3) -> dict:
    """Least-squares polynomial fit on raw N; coefficients in ascending order.

    ``contributions`` gives ``|c_k N^k| / y(N_max)`` at the largest size.
    """
    n = np.asarray(sizes, dtype=float)
    y = np.asarray(values, dtype=float)
    deg = min(degree, len(n) - 1)
    A = np.vander(n, deg + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    nmax = n.max()
    scale = abs(y[np.argmax(n)]) or 1.0
    contrib = [abs(c * nmax**k) / scale for k, c in enumerate(coef)]
    coef = list(coef) + [0.0] * (degree - deg)
    contrib = contrib + [0.0] * (degree - deg)
    return {
        "degree": deg,
        "reduced": deg < degree,
        "coefficients": [float(c) for c in coef],
        "residuals": [float(r) for r in resid],
        "contributions": [float(c) for c in contrib],
    }


def scaling_sweep(sizes, build, samples_per_batch=512, batches=20, rng=None, workers=None) -> dict:
    """Measure FLOPs at each size and fit cubic polynomials per series.

    ``build(N)`` returns ``(model, hamiltonian)`` for system size ``N``.
    """
    sizes = list(sizes)
    if not sizes:
        raise UsageError("scaling_sweep needs at least one size")
    if sizes != sorted(sizes):
        raise UsageError("sizes must be ascending")
    rng = np.random.default_rng(0) if rng is None else rng
    reports = []
    for n in sizes:
        model, ham = build(n)
        reports.append(measure_flops(model, ham, samples_per_batch, batches, rng, workers=workers))
    series = {k: [series_values(r)[k] for r in reports] for k in SERIES}
    fits = {k: fit_polynomial(sizes, v) for k, v in series.items()}
    return {
        "sizes": sizes,
        "series": series,
        "fits": fits,
        "fit_reduced": len(sizes) < 4,
        "reports": reports,
    }


def emit_table(reports, out_dir) -> dict:
    """Write ``report.csv`` and ``report.json``; returns the written paths."""
    reports = list(reports)
    if not reports:
        raise UsageError("emit_table needs at least one report")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "report.csv")
    json_path = os.path.join(out_dir, "report.json")
    try:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in reports:
                w.writerow(r.row())
        with open(json_path, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    return {"csv": csv_path, "json": json_path}


def write_scaling(sweep: dict, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "scaling.json")
    payload = {k: v for k, v in sweep.items() if k != "reports"}
    payload["reports"] = [r.to_dict() for r in sweep["reports"]]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_table(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
