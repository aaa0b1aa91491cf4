"""Compressed ``(I, V)`` evaluation of the network over a connected set.

A batch of ``K`` configurations that differ from a base configuration in a
few sites is stored per stage as indices ``I [K, T]`` into a table ``V`` of
``U`` unique hidden vectors. Per-location ops run on ``V`` only. Attention
and the quantizer distance search run densely over all ``K * T`` locations;
after each quantizer, locations whose residual-stream key and code indices
agree are merged again.
"""

import os
import zlib
from dataclasses import dataclass

import numpy as np

from . import flops
from . import tensor as tn
from .flops import FlopLedger
from .hamiltonian import HamiltonianModel, as_configs, connected_set
from .kernels import hash_rows
from .model import DECODER, ENCODER, VqTransformer, tokenize
from .tensor import Tensor

VERIFY = os.environ.get("VQNQS_VERIFY_DEDUP", "0") not in ("", "0")


class ContractError(RuntimeError):
    pass


@dataclass
class CompressedBatch:
    I: np.ndarray
    V: Tensor
    ids: np.ndarray
    pos: np.ndarray
    # collapsible: location keys identify vectors (dedup is valid).
    # after_vq: a quantizer sits upstream; such work counts as quantized ops.
    collapsible: bool = True
    after_vq: bool = False

    @property
    def quantized(self) -> bool:
        return self.collapsible and self.after_vq

    @property
    def K(self) -> int:
        return self.I.shape[0]

    @property
    def T(self) -> int:
        return self.I.shape[1]

    @property
    def U(self) -> int:
        return len(self.ids)

    def expand(self) -> np.ndarray:
        """Dense ``[K, T, d]`` array."""
        return self.V.data[self.I]

    def expand_tensor(self) -> Tensor:
        return tn.reshape(tn.take(self.V, self.I.reshape(-1)), (self.K, self.T, -1))

    def location_ids(self) -> np.ndarray:
        return self.ids[self.I]


class LocationOp:
    """A callable ``(V, pos) -> V'`` that treats every location identically."""

    per_location = True

    def __init__(self, fn, tag):
        self.fn, self.tag = fn, tag
        self.tag_id = zlib.crc32(tag.encode())

    def __call__(self, V, pos):
        return self.fn(V, pos)


def _unique(keys):
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    return first, inverse.reshape(-1)


def _per_location(batch_K, batch_T, U, quantized):
    return flops.section("per_location", dense_rows=batch_K * batch_T, unique_rows=U, quantized=quantized)


def compress_inputs(configs, base, group_size, shift=False, vocab=None, embed=None, collapse=True):
    """Build the input-layer compressed batch.

    The identity key of a location is a hash of ``(position, input token)``.
    With ``shift`` the inputs are the decoder's (begin-of-sequence id
    ``vocab`` followed by all but the last token). ``embed`` maps
    ``(ids, positions)`` of the unique locations to their vectors.
    """
    configs = as_configs(configs)
    base = as_configs(base, configs.shape[1])[0]
    ndiff = (configs != base[None, :]).sum(axis=1)
    if ndiff.max(initial=0) > 2:
        bad = int(np.argmax(ndiff))
        raise ContractError(f"row {bad} differs from the base configuration in {ndiff[bad]} sites (limit 2)")
    tokens = tokenize(configs, group_size)
    K, T = tokens.shape
    if shift:
        vocab = (1 << group_size) if vocab is None else vocab
        tokens = np.concatenate([np.full((K, 1), vocab, dtype=np.int64), tokens[:, :-1]], axis=1)
    pos = np.tile(np.arange(T), K)
    flat = tokens.reshape(-1)
    keys = hash_rows(np.zeros(K * T, dtype=np.uint64), np.stack([pos, flat], axis=1))
    if not collapse:
        keys = hash_rows(keys, np.arange(K * T))
    first, inverse = _unique(keys)
    U = len(first)
    V = None
    if embed is not None:
        with _per_location(K, T, U, False):
            V = embed(flat[first], pos[first])
    return CompressedBatch(inverse.reshape(K, T), V, keys[first], pos[first], collapsible=collapse)


def apply_per_location(op, batch: CompressedBatch) -> CompressedBatch:
    """Run a location-independent ``op`` on the unique vectors only."""
    if not getattr(op, "per_location", False):
        raise tn.UsageError(f"{op!r} is not registered as a per-location op")
    with _per_location(batch.K, batch.T, batch.U, batch.quantized):
        V = op(batch.V, batch.pos)
    ids = hash_rows(batch.ids, np.full(batch.U, op.tag_id, dtype=np.int64))
    return CompressedBatch(batch.I, V, ids, batch.pos, batch.collapsible, batch.after_vq)


def attention_dense(model: VqTransformer, stack, block, qkv: CompressedBatch) -> Tensor:
    """Expand the compressed ``qkv`` rows and run full attention per row."""
    with flops.section("attention"):
        return model.attend(block, stack, qkv.expand_tensor())


def requantize(model, block, full, attended: Tensor, residual: CompressedBatch, collapse=True, train=False):
    """Quantize attention outputs densely, merge equal locations, run the continuation.

    The merge key of a location is ``hash(residual key, code indices)``; the
    output projection, residual add and feed-forward sublayer then run once
    per unique key.
    """
    K, T = residual.I.shape
    rows = tn.reshape(attended, (K * T, -1))
    loc = residual.I.reshape(-1)
    res_ids = residual.ids[loc]
    after_vq = residual.after_vq
    if full and model.has_vq(block):
        with flops.section("vq_distance"):
            qz, idx = model.quantize(block, rows, train)
        after_vq = True
        collapsible = collapse and residual.collapsible
        keys = hash_rows(res_ids, idx.reshape(K * T, -1) if collapsible else np.arange(K * T))
    else:
        qz = rows
        keys = hash_rows(res_ids, np.arange(K * T))
        collapsible = False
    quantized = collapsible and after_vq
    first, inverse = _unique(keys)
    U = len(first)
    if VERIFY:
        _verify_merge(inverse, first, qz.data, residual.V.data[loc])
    q_u = tn.take(qz, first)
    r_u = tn.take(residual.V, loc[first])
    with _per_location(K, T, U, quantized):
        V = model.post_attention(block, full, r_u, q_u)
    tag = zlib.crc32(f"{block}.post".encode())
    ids = hash_rows(keys[first], np.full(U, tag, dtype=np.int64))
    return CompressedBatch(inverse.reshape(K, T), V, ids, residual.pos[loc[first]], collapsible, after_vq)


def _verify_merge(inverse, first, *arrays):
    for arr in arrays:
        if not np.array_equal(arr, arr[first][inverse]):
            raise ContractError("identity-key collision: merged locations carry different vectors")


def forward_compressed(model: VqTransformer, stack, configs, base, collapse=None, train=False):
    """Run ``stack`` through the dedup pipeline; returns the head-output batch and tokens."""
    if collapse is None:
        collapse = model.config.vq_enabled
    c = model.config
    embed = LocationOp(lambda ids, pos: model.embed(stack, ids, pos), f"{stack.prefix}.embed")
    batch = compress_inputs(
        configs, base, c.group_size, shift=stack.shift, vocab=c.vocab, embed=embed, collapse=collapse
    )
    for block, full in model.block_names(stack):
        qkv = apply_per_location(LocationOp(lambda V, pos, b=block: model.pre_attention(b, V), f"{block}.qkv"), batch)
        att = attention_dense(model, stack, block, qkv)
        batch = requantize(model, block, full, att, batch, collapse=collapse, train=train)
    head = apply_per_location(LocationOp(lambda V, pos: model.head(stack, V, pos), f"{stack.prefix}.head"), batch)
    return head, tokenize(configs, c.group_size)


def dedup_log_prob(model, configs, base, collapse=None, train=False) -> Tensor:
    configs = as_configs(configs, model.config.n_sites)
    head, tokens = forward_compressed(model, DECODER, configs, base, collapse, train)
    K, T = tokens.shape
    with flops.section("other"):
        picked = tn.gather_last(tn.take(head.V, head.I.reshape(-1)), tokens.reshape(-1))
        return tn.sum_last(tn.reshape(picked, (K, T)))


def dedup_phase(model, configs, base, collapse=None, train=False) -> Tensor:
    configs = as_configs(configs, model.config.n_sites)
    if not model.config.phase_enabled:
        return Tensor(np.zeros(len(configs)))
    head, _ = forward_compressed(model, ENCODER, configs, base, collapse, train)
    return model.phase_readout(head.expand_tensor())


def _assemble(log_amp, phase, coeffs, complex_out):
    with flops.section("other"):
        flops.record(6 * len(coeffs))
    rel = log_amp - log_amp[0]
    if complex_out:
        rel = rel + 1j * (phase - phase[0])
        return complex(np.sum(coeffs * np.exp(rel)))
    return float(np.sum(coeffs * np.exp(rel)))


def local_energy_batch(model: VqTransformer, hamiltonian: HamiltonianModel, s, dedup=True):
    """``E_loc(s) = sum_s' H[s, s'] psi(s') / psi(s)`` and the FLOP ledger of the evaluation.

    Row 0 of the evaluated batch is ``s`` itself; zero-coefficient entries
    are skipped.
    """
    cs = connected_set(hamiltonian, s)
    keep = cs.coeffs != 0.0
    keep[0] = True
    configs, coeffs = cs.configs[keep], cs.coeffs[keep]
    ledger = FlopLedger(regime="dedup" if dedup else "dense_baseline")
    with ledger, tn.no_grad():
        if dedup:
            lp = dedup_log_prob(model, configs, cs.base).data
            ph = dedup_phase(model, configs, cs.base).data
        else:
            lp = model.log_prob_tensor(configs).data
            ph = model.phase_tensor(configs).data
        e_loc = _assemble(0.5 * lp, ph, coeffs, model.config.phase_enabled)
    return e_loc, ledger
