"""Vector-quantized transformer wavefunction.

``log psi(s) = 0.5 * log P(s) + i * phase(s)`` where ``P`` is an
autoregressive decoder over groups of spins ("tokens") and ``phase`` a
bidirectional encoder with mean pooling. Every attention sublayer of a full
block is followed by a multi-head vector quantizer placed before the output
projection and the residual add.
"""

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import flops
from . import tensor as tn
from .flops import vq_flops
from .hamiltonian import ConfigurationError, as_configs
from .tensor import Tensor, _emit, _rows, _t

LOCAL_DIM = 2
MAGIC = b"VQNQS1\0"


@dataclass
class ModelConfig:
    n_sites: int
    group_size: int = 4
    d_hidden: int = 32
    n_heads: int = 4
    n_blocks: int = 2
    trailing_half_block: bool = True
    vq_enabled: bool = False
    vq_heads: int = 1
    vq_codebook: int = 64
    vq_temperature: float = 1.0
    vq_gumbel: bool = False
    phase_enabled: bool = False
    ffn_mult: int = 4
    ln_eps: float = 1e-5
    dead_code_steps: int = 200
    usage_decay: float = 0.99
    usage_threshold: float = 1e-3
    init_head_std: float = 0.01
    codebook_init_std: float = 1.0

    def __post_init__(self):
        for name in ("n_sites", "group_size", "d_hidden", "n_heads", "vq_heads", "vq_codebook", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"model.{name} must be positive")
        if self.n_blocks < 0:
            raise ConfigurationError("model.n_blocks must be nonnegative")
        if self.d_hidden % self.n_heads:
            raise ConfigurationError("model.d_hidden must be divisible by model.n_heads")
        if self.d_hidden % self.vq_heads:
            raise ConfigurationError("model.d_hidden must be divisible by model.vq_heads")
        if self.vq_temperature <= 0:
            raise ConfigurationError("model.vq_temperature must be positive")

    @property
    def vocab(self) -> int:
        return LOCAL_DIM**self.group_size

    @property
    def n_tokens(self) -> int:
        return -(-self.n_sites // self.group_size)

    @property
    def n_pad(self) -> int:
        return self.n_tokens * self.group_size - self.n_sites

    @property
    def bandwidth_bits(self) -> float:
        return self.vq_heads * math.log2(self.vq_codebook)

    @property
    def bits_label(self) -> str:
        return f"{self.bandwidth_bits:g}b" if self.vq_enabled else "baseline"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


# --------------------------------------------------------------- tokens


def tokenize(s, group_size: int) -> np.ndarray:
    """Pack consecutive groups of spins into little-endian token ids.

    A trailing incomplete group is padded with down spins; the decoder masks
    the tokens that would set a padded spin.
    """
    s = as_configs(s)
    B, N = s.shape
    T = -(-N // group_size)
    padded = np.zeros((B, T * group_size), dtype=np.int64)
    padded[:, :N] = s
    weights = LOCAL_DIM ** np.arange(group_size, dtype=np.int64)
    return padded.reshape(B, T, group_size) @ weights


def detokenize(tokens, group_size: int, n_sites: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    bits = (tokens[..., None] >> np.arange(group_size)) & 1
    return bits.reshape(tokens.shape[0], -1)[:, :n_sites].astype(np.uint8)


# ---------------------------------------------------------- quantizer


def _sq_dist(xr, W):
    """Squared distances ``[R, H, Q]`` between head segments ``xr [R, H, dh]`` and codes."""
    cross = np.matmul(xr.transpose(1, 0, 2), W.transpose(0, 2, 1)).transpose(1, 0, 2)
    sq = (xr * xr).sum(-1)[..., None] + (W * W).sum(-1)[None] - 2.0 * cross
    return np.maximum(sq, 0.0)


def _select(W, idx):
    H = W.shape[0]
    return W[np.arange(H), idx]


def vq_forward(x, W):
    """Nearest-code quantization of ``x [..., d]`` with codebook ``W [H, Q, d/H]``.

    Returns ``(indices [..., H], quantized [..., d])``; ties go to the lowest
    code index and the output rows are exact copies of codebook rows.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    W = np.asarray(W.data if isinstance(W, Tensor) else W, dtype=np.float64)
    H, Q, dh = W.shape
    lead = x.shape[:-1]
    R = int(np.prod(lead, dtype=np.int64))
    flops.record(vq_flops(R, H * dh, H, Q))
    xr = x.reshape(R, H, dh)
    idx = np.argmin(_sq_dist(xr, W), axis=-1)
    return idx.reshape(*lead, H), _select(W, idx).reshape(x.shape)


def vq_train_forward(x, W, tau=1.0, rng=None):
    """Straight-through quantizer.

    The value is the hard nearest code (identical to :func:`vq_forward`);
    the gradient is that of ``sum_h softmax(D_h / tau)^T W_h`` with
    ``D_hj = -||x_h - W_hj||``. Passing ``rng`` adds Gumbel noise to the
    relaxation only. Returns ``(quantized, indices)``.
    """
    x, W = _t(x), _t(W)
    H, Q, dh = W.shape
    R = _rows(x.shape)
    flops.record(vq_flops(R, H * dh, H, Q))
    xr = x.data.reshape(R, H, dh)
    Wd = W.data
    sq = _sq_dist(xr, Wd)
    idx = np.argmin(sq, axis=-1)
    out = _select(Wd, idx).reshape(x.shape)
    noise = None if rng is None else rng.gumbel(size=sq.shape)
    shape = x.shape

    def vjp(g):
        dist = np.sqrt(sq)
        z = -dist / tau
        if noise is not None:
            z = z + noise
        p = tn._softmax_np(z)
        gr = g.reshape(R, H, dh)
        a = np.matmul(gr.transpose(1, 0, 2), Wd.transpose(0, 2, 1)).transpose(1, 0, 2)
        gD = p * (a - (p * a).sum(-1, keepdims=True)) / tau
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(dist > 0, gD / dist, 0.0)
        ct = c.transpose(1, 0, 2)  # [H, R, Q]
        gx = -c.sum(-1)[..., None] * xr + np.matmul(ct, Wd).transpose(1, 0, 2)
        pt = p.transpose(1, 2, 0)  # [H, Q, R]
        gW = np.matmul(pt, gr.transpose(1, 0, 2))
        gW += np.matmul(ct.transpose(0, 2, 1), xr.transpose(1, 0, 2)) - c.sum(0)[..., None] * Wd
        return gx.reshape(shape), gW

    return _emit(out, (x, W), vjp), idx


class Codebook:
    """Multi-head codebook with usage tracking for dead-code reseeding."""

    def __init__(self, W: Tensor, decay=0.99, threshold=1e-3, dead_steps=200):
        self.W = W
        H, Q, _ = W.shape
        self.usage_ema = np.full((H, Q), 1.0 / Q)
        self.unused_steps = np.zeros((H, Q), dtype=np.int64)
        self.decay, self.threshold, self.dead_steps = decay, threshold, dead_steps

    @property
    def shape(self):
        return self.W.shape

    def update_usage(self, indices, pre_quant, rng, noise=1e-2) -> int:
        """Fold one step of code usage into the EMA and reseed dead codes.

        ``indices [R, H]`` are the selected codes, ``pre_quant [R, d]`` the
        vectors that were quantized. Returns the number of reseeded codes.
        """
        H, Q, dh = self.W.shape
        indices = np.asarray(indices).reshape(-1, H)
        counts = np.stack([np.bincount(indices[:, h], minlength=Q) for h in range(H)])
        freq = counts / max(len(indices), 1)
        self.usage_ema = self.decay * self.usage_ema + (1 - self.decay) * freq
        low = self.usage_ema < self.threshold
        self.unused_steps = np.where(low, self.unused_steps + 1, 0)
        dead = self.unused_steps >= self.dead_steps
        n_dead = int(dead.sum())
        if n_dead and len(pre_quant):
            segs = np.asarray(pre_quant).reshape(-1, H, dh)
            for h, j in zip(*np.nonzero(dead)):
                row = segs[rng.integers(len(segs)), h]
                self.W.data[h, j] = row + noise * (np.std(row) + 1e-12) * rng.standard_normal(dh)
            self.usage_ema[dead] = 1.0 / Q
            self.unused_steps[dead] = 0
        return n_dead

    def init_from_data(self, pre_quant, rng, noise=1e-3):
        """Seed every code with a distinct random data vector (plus jitter)."""
        H, Q, dh = self.W.shape
        segs = np.asarray(pre_quant).reshape(-1, H, dh)
        for h in range(H):
            uniq = np.unique(np.round(segs[:, h], 12), axis=0)
            pick = rng.choice(len(uniq), size=Q, replace=len(uniq) < Q)
            rows = uniq[pick]
            self.W.data[h] = rows + noise * (rows.std() + 1e-12) * rng.standard_normal(rows.shape)
        self.usage_ema[:] = 1.0 / Q
        self.unused_steps[:] = 0

    def usage_fraction(self) -> float:
        return float((self.usage_ema >= self.threshold).mean())


# ---------------------------------------------------------- the network


@dataclass
class WavefunctionValue:
    log_prob: np.ndarray
    phase: np.ndarray

    @property
    def log_psi(self):
        """``(log|psi|, arg psi)`` pair."""
        return 0.5 * self.log_prob, self.phase

    @property
    def log_amplitude(self):
        return 0.5 * self.log_prob


class _Stack:
    def __init__(self, prefix, causal, shift, head):
        self.prefix, self.causal, self.shift, self.head = prefix, causal, shift, head


DECODER = _Stack("dist", causal=True, shift=True, head="vocab")
ENCODER = _Stack("phase", causal=False, shift=False, head="scalar")


class VqTransformer:
    """Autoregressive distribution network plus optional phase network."""

    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        self.params = {}
        self.codebooks = {}
        rng = np.random.default_rng(seed)
        self._init_stack(DECODER, rng)
        if config.phase_enabled:
            self._init_stack(ENCODER, rng)
        self._vq_rng = None

    # -- parameters -------------------------------------------------------

    def _add(self, name, data):
        self.params[name] = tn.parameter(data, name)

    def _init_stack(self, stack, rng):
        c = self.config
        d, p = c.d_hidden, stack.prefix
        n_words = c.vocab + (1 if stack.shift else 0)
        n_layers = 2 * c.n_blocks + (1 if c.trailing_half_block else 0)
        resid_std = 1.0 / math.sqrt(d) / math.sqrt(max(n_layers, 1))

        def w(fan_in, fan_out, std=None):
            return rng.normal(0.0, std if std is not None else 1.0 / math.sqrt(fan_in), (fan_in, fan_out))

        self._add(f"{p}.word", rng.normal(0.0, 1.0, (n_words, d)))
        self._add(f"{p}.pos", rng.normal(0.0, 0.1, (c.n_tokens, d)))
        for name, full in self.block_names(stack):
            self._add(f"{name}.ln1.g", np.ones(d))
            self._add(f"{name}.ln1.b", np.zeros(d))
            self._add(f"{name}.qkv.w", w(d, 3 * d))
            self._add(f"{name}.qkv.b", np.zeros(3 * d))
            self._add(f"{name}.out.w", w(d, d, resid_std))
            self._add(f"{name}.out.b", np.zeros(d))
            if full:
                if c.vq_enabled:
                    dh = d // c.vq_heads
                    self._add(
                        f"{name}.vq.codebook",
                        rng.normal(0.0, c.codebook_init_std, (c.vq_heads, c.vq_codebook, dh)),
                    )
                    self.codebooks[name] = Codebook(
                        self.params[f"{name}.vq.codebook"],
                        c.usage_decay,
                        c.usage_threshold,
                        c.dead_code_steps,
                    )
                f = c.ffn_mult * d
                self._add(f"{name}.ln2.g", np.ones(d))
                self._add(f"{name}.ln2.b", np.zeros(d))
                self._add(f"{name}.ff1.w", w(d, f))
                self._add(f"{name}.ff1.b", np.zeros(f))
                self._add(f"{name}.ff2.w", w(f, d, 1.0 / math.sqrt(f) / math.sqrt(max(n_layers, 1))))
                self._add(f"{name}.ff2.b", np.zeros(d))
        self._add(f"{p}.lnf.g", np.ones(d))
        self._add(f"{p}.lnf.b", np.zeros(d))
        n_out = c.vocab if stack.head == "vocab" else 1
        self._add(f"{p}.head.w", rng.normal(0.0, c.init_head_std, (d, n_out)))
        self._add(f"{p}.head.b", np.zeros(n_out))

    def block_names(self, stack):
        """``(name, is_full_block)`` for every block of ``stack`` in order."""
        names = [(f"{stack.prefix}.block{i}", True) for i in range(self.config.n_blocks)]
        if self.config.trailing_half_block:
            names.append((f"{stack.prefix}.half", False))
        return names

    def stacks(self):
        return [DECODER, ENCODER] if self.config.phase_enabled else [DECODER]

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def has_vq(self, block_name) -> bool:
        return block_name in self.codebooks

    # -- per-location pieces (shared with the dedup engine) ---------------

    def embed(self, stack, ids, pos):
        p = self.params
        return tn.add(tn.embedding_lookup(p[f"{stack.prefix}.word"], ids), tn.embedding_lookup(p[f"{stack.prefix}.pos"], pos))

    def pre_attention(self, block, x):
        p = self.params
        a = tn.layer_norm(x, p[f"{block}.ln1.g"], p[f"{block}.ln1.b"], self.config.ln_eps)
        return tn.linear(a, p[f"{block}.qkv.w"], p[f"{block}.qkv.b"])

    def post_attention(self, block, full, residual, attended):
        p = self.params
        h = tn.add(residual, tn.linear(attended, p[f"{block}.out.w"], p[f"{block}.out.b"]))
        if not full:
            return h
        a = tn.layer_norm(h, p[f"{block}.ln2.g"], p[f"{block}.ln2.b"], self.config.ln_eps)
        a = tn.gelu(tn.linear(a, p[f"{block}.ff1.w"], p[f"{block}.ff1.b"]))
        return tn.add(h, tn.linear(a, p[f"{block}.ff2.w"], p[f"{block}.ff2.b"]))

    def head(self, stack, x, pos):
        """Per-location output head: token log-probabilities or phase features."""
        p = self.params
        a = tn.layer_norm(x, p[f"{stack.prefix}.lnf.g"], p[f"{stack.prefix}.lnf.b"], self.config.ln_eps)
        if stack.head != "vocab":
            return a
        logits = tn.linear(a, p[f"{stack.prefix}.head.w"], p[f"{stack.prefix}.head.b"])
        mask = self._pad_mask(pos)
        if mask is not None:
            logits = tn.add(logits, mask)
        return tn.log_softmax(logits)

    def _pad_mask(self, pos):
        c = self.config
        if not c.n_pad:
            return None
        valid_bits = c.group_size - c.n_pad
        allowed = (np.arange(c.vocab) >> valid_bits) == 0
        last = np.asarray(pos) == c.n_tokens - 1
        return np.where(last[:, None] & ~allowed[None, :], tn.MASK_VALUE, 0.0)

    def attend(self, block, stack, qkv):
        """Multi-head attention over dense ``qkv [B, T, 3d]``."""
        d = self.config.d_hidden
        q, k, v = tn.split_last(qkv, [d, d, d])
        h = self.config.n_heads
        out = tn.masked_attention(tn.split_heads(q, h), tn.split_heads(k, h), tn.split_heads(v, h), causal=stack.causal)
        return tn.merge_heads(out)

    def quantize(self, block, x, train=False):
        W = self.params[f"{block}.vq.codebook"]
        if train:
            return vq_train_forward(x, W, self.config.vq_temperature, self._vq_rng if self.config.vq_gumbel else None)
        idx, q = vq_forward(x, W)
        return Tensor(q), idx

    # -- dense forward ----------------------------------------------------

    def input_ids(self, stack, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if not stack.shift:
            return tokens
        bos = np.full((tokens.shape[0], 1), self.config.vocab, dtype=np.int64)
        return np.concatenate([bos, tokens[:, :-1]], axis=1)

    def forward_stack(self, stack, ids, train=False, capture=None):
        """Dense pass over input ids ``[B, L]``; returns per-location head output ``[B*L, *]``.

        ``capture`` (a dict) collects pre-quantization vectors and code
        indices per block, for usage tracking.
        """
        B, L = ids.shape
        R = B * L
        pos = np.tile(np.arange(L), B)
        per_loc = dict(kind="per_location", dense_rows=R, unique_rows=R)
        # mirrors the dedup pipeline: per-location work counts as quantized
        # only downstream of a VQ layer and before any unquantized attention
        quantized = False
        with flops.section(quantized=quantized, **per_loc):
            x = self.embed(stack, ids.reshape(-1), pos)
        for block, full in self.block_names(stack):
            with flops.section(quantized=quantized, **per_loc):
                qkv = self.pre_attention(block, x)
            with flops.section("attention"):
                att = tn.reshape(self.attend(block, stack, tn.reshape(qkv, (B, L, -1))), (R, -1))
            if full and self.has_vq(block):
                with flops.section("vq_distance"):
                    qz, idx = self.quantize(block, att, train)
                if capture is not None:
                    capture[block] = (att.data, idx)
                quantized = True
            else:
                qz, quantized = att, False
            with flops.section(quantized=quantized, **per_loc):
                x = self.post_attention(block, full, x, qz)
        with flops.section(quantized=quantized, **per_loc):
            return self.head(stack, x, pos)

    def log_prob_tensor(self, configs, train=False, capture=None):
        """``log P(s)`` per configuration as a (possibly taped) tensor ``[B]``."""
        tokens = tokenize(as_configs(configs, self.config.n_sites), self.config.group_size)
        B, T = tokens.shape
        logp = self.forward_stack(DECODER, self.input_ids(DECODER, tokens), train, capture)
        with flops.section("other"):
            picked = tn.gather_last(logp, tokens.reshape(-1))
            return tn.sum_last(tn.reshape(picked, (B, T)))

    def phase_tensor(self, configs, train=False, capture=None):
        configs = as_configs(configs, self.config.n_sites)
        if not self.config.phase_enabled:
            return Tensor(np.zeros(len(configs)))
        tokens = tokenize(configs, self.config.group_size)
        B, T = tokens.shape
        feats = self.forward_stack(ENCODER, tokens, train, capture)
        return self.phase_readout(tn.reshape(feats, (B, T, -1)))

    def phase_readout(self, feats):
        p = self.params
        with flops.section("other"):
            pooled = tn.mean_pool_rows(feats)
            return tn.reshape(tn.linear(pooled, p["phase.head.w"], p["phase.head.b"]), (-1,))

    def log_prob(self, configs, batch_size=None) -> np.ndarray:
        configs = as_configs(configs, self.config.n_sites)
        with tn.no_grad():
            if batch_size is None or len(configs) <= batch_size:
                return self.log_prob_tensor(configs).data.copy()
            return np.concatenate(
                [self.log_prob_tensor(configs[i : i + batch_size]).data for i in range(0, len(configs), batch_size)]
            )

    def phase(self, configs) -> np.ndarray:
        with tn.no_grad():
            return self.phase_tensor(configs).data.copy()

    def log_psi(self, configs) -> WavefunctionValue:
        return WavefunctionValue(self.log_prob(configs), self.phase(configs))

    def conditionals(self, configs) -> np.ndarray:
        """Per-position token log-probabilities ``[B, T, vocab]`` of the decoder."""
        tokens = tokenize(as_configs(configs, self.config.n_sites), self.config.group_size)
        with tn.no_grad():
            out = self.forward_stack(DECODER, self.input_ids(DECODER, tokens))
        return out.data.reshape(tokens.shape[0], tokens.shape[1], -1)

    def sample(self, count: int, rng, return_log_prob=False):
        """Ancestral sampling, one token at a time."""
        if count < 1:
            raise ValueError("sample count must be at least 1")
        c = self.config
        T = c.n_tokens
        tokens = np.zeros((count, T), dtype=np.int64)
        logp = np.zeros(count)
        bos = np.full((count, 1), c.vocab, dtype=np.int64)
        with tn.no_grad():
            for t in range(T):
                ids = np.concatenate([bos, tokens[:, :t]], axis=1)
                out = self.forward_stack(DECODER, ids).data.reshape(count, t + 1, -1)[:, t]
                cdf = np.cumsum(np.exp(out), axis=1)
                u = rng.random(count) * cdf[:, -1]
                tok = np.minimum((cdf < u[:, None]).sum(axis=1), c.vocab - 1)
                tokens[:, t] = tok
                logp += out[np.arange(count), tok]
        configs = detokenize(tokens, c.group_size, c.n_sites)
        return (configs, logp) if return_log_prob else configs

    # -- state ------------------------------------------------------------

    def buffers(self):
        out = {}
        for name, cb in self.codebooks.items():
            out[f"{name}.vq.usage_ema"] = cb.usage_ema
            out[f"{name}.vq.unused_steps"] = cb.unused_steps.astype(np.float64)
        return out

    def state_dict(self):
        state = {k: v.data.copy() for k, v in self.params.items()}
        state.update({k: np.array(v, dtype=np.float64) for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state, strict=True):
        for k, t in self.params.items():
            if k in state:
                if state[k].shape != t.shape:
                    raise ConfigurationError(f"shape mismatch for {k}: {state[k].shape} vs {t.shape}")
                t.data[...] = state[k]
            elif strict:
                raise ConfigurationError(f"missing tensor {k}")
        for name, cb in self.codebooks.items():
            if f"{name}.vq.usage_ema" in state:
                cb.usage_ema[...] = state[f"{name}.vq.usage_ema"]
                cb.unused_steps[...] = state[f"{name}.vq.unused_steps"].astype(np.int64)

    def copy(self) -> "VqTransformer":
        other = VqTransformer(self.config)
        other.load_state_dict(self.state_dict())
        return other

    def save(self, path):
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


# ------------------------------------------------------------ checkpoints


def save_checkpoint(model: VqTransformer, path, extra=None):
    """Write ``MAGIC | u64 header length | JSON header | float64 tensors``."""
    state = model.state_dict()
    manifest, offset = [], 0
    for name, arr in state.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {"config": model.config.to_dict(), "tensors": manifest}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise ConfigurationError(f"{path}: not a VQ-NQS checkpoint")
    buf = io.BytesIO(raw[len(MAGIC) :])
    (n,) = struct.unpack("<Q", buf.read(8))
    header = json.loads(buf.read(n).decode("utf-8"))
    data = buf.read()
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=entry["offset"])
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return header, state


def load_checkpoint(path) -> VqTransformer:
    header, state = read_checkpoint(path)
    model = VqTransformer(ModelConfig.from_dict(header["config"]))
    model.load_state_dict(state)
    return model
