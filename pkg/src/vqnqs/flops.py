"""Analytic FLOP accounting.

Ops in :mod:`vqnqs.tensor` report their cost (derived from shapes, one
multiply-add = 2 FLOPs, one comparison = 1 FLOP) to the ledger that is active
in the current context. Callers label regions with :func:`section` so each
count lands in the right class.
"""

import contextlib
import contextvars
from dataclasses import asdict, dataclass

CLASSES = ("per_location_dense", "per_location_unique", "attention", "vq_distance", "other")

_active = contextvars.ContextVar("vqnqs_ledger", default=None)
# (kind, dense_rows, unique_rows, quantized)
_section = contextvars.ContextVar("vqnqs_section", default=("other", 1, 1, False))


@dataclass
class FlopLedger:
    """Per-class FLOP counters for one evaluation regime.

    ``per_location_unique`` holds what per-location ops actually executed,
    ``per_location_dense`` what the same ops cost on every location (the
    shadow count). ``quantized_*`` are the subset of per-location work that
    sits downstream of a VQ layer, with inputs keyed by codebook indices.
    """

    regime: str = "dense_baseline"
    per_location_dense: int = 0
    per_location_unique: int = 0
    attention: int = 0
    vq_distance: int = 0
    other: int = 0
    quantized_dense: int = 0
    quantized_unique: int = 0

    def __enter__(self):
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc):
        _active.reset(self._token)
        return False

    def record(self, n: int, kind="other", dense_rows=1, unique_rows=1, quantized=False):
        n = int(n)
        if kind == "per_location":
            shadow, rem = divmod(n * dense_rows, unique_rows)
            if rem:
                raise ArithmeticError("per-location FLOPs must scale linearly with rows")
            self.per_location_unique += n
            self.per_location_dense += shadow
            if quantized:
                self.quantized_unique += n
                self.quantized_dense += shadow
        elif kind in ("attention", "vq_distance", "other"):
            setattr(self, kind, getattr(self, kind) + n)
        else:
            raise ValueError(f"unknown FLOP class {kind!r}")

    @property
    def flops_dense(self) -> int:
        return self.per_location_dense + self.attention + self.vq_distance + self.other

    @property
    def flops_dedup(self) -> int:
        return self.per_location_unique + self.attention + self.vq_distance + self.other

    @property
    def total(self) -> int:
        return self.flops_dedup

    @property
    def total_savings(self) -> float:
        return self.flops_dense / self.flops_dedup if self.flops_dedup else 1.0

    @property
    def quantized_ops_savings(self) -> float:
        return self.quantized_dense / self.quantized_unique if self.quantized_unique else 1.0

    def __add__(self, other: "FlopLedger") -> "FlopLedger":
        out = FlopLedger(self.regime if self.regime == other.regime else "mixed")
        for name in CLASSES + ("quantized_dense", "quantized_unique"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        return out

    def breakdown(self) -> dict:
        return {
            "per_location": self.per_location_unique,
            "attention": self.attention,
            "vq_distance": self.vq_distance,
            "other": self.other,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(flops_dense=self.flops_dense, flops_dedup=self.flops_dedup)
        return d


def active():
    return _active.get()


def record(n: int):
    ledger = _active.get()
    if ledger is not None:
        kind, dense_rows, unique_rows, quantized = _section.get()
        ledger.record(n, kind, dense_rows, unique_rows, quantized)


@contextlib.contextmanager
def section(kind: str, dense_rows: int = 1, unique_rows: int = 1, quantized: bool = False):
    """Attribute FLOPs recorded inside the block to ``kind``.

    For ``kind="per_location"`` the ops inside run on ``unique_rows`` rows
    standing in for ``dense_rows`` locations.
    """
    token = _section.set((kind, int(dense_rows), int(max(unique_rows, 1)), bool(quantized)))
    try:
        yield
    finally:
        _section.reset(token)


# Per-op conventions, shared with tests that rebuild counts in closed form.
def linear_flops(m, n, p, bias=True):
    return 2 * m * n * p + (m * p if bias else 0)


def layer_norm_flops(m, n):
    return 8 * m * n


def gelu_flops(numel):
    return 8 * numel


def softmax_flops(m, n):
    return 5 * m * n


def attention_flops(T, dh, causal):
    return 4 * T * T * dh + 6 * T * T + (T * T if causal else 0)


def vq_flops(rows, d, heads, codes):
    return rows * codes * (3 * d + 2 * heads)
