"""Variational Monte Carlo optimization and teacher-student distillation."""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor as tn
from .dedup import local_energy_batch
from .exact import rayleigh_quotient
from .hamiltonian import ConfigurationError, HamiltonianModel, all_configs, connected_batch
from .model import VqTransformer, save_checkpoint

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    def __init__(self, msg, configuration=None, diagnostics=None):
        super().__init__(msg)
        self.configuration = configuration
        self.diagnostics = diagnostics or {}


@dataclass
class DistillConfig:
    teacher: Optional[str] = None
    batch_size: int = 256
    steps: int = 1000
    learning_rate: float = 1e-3
    init_from_teacher: bool = True
    codebook_data_init: bool = True
    loss: str = "l2_log_amplitude"


@dataclass
class TrainConfig:
    samples_per_step: int = 512
    steps: int = 2000
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    lr_schedule: str = "cosine"
    lr_min_factor: float = 0.05
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0
    seed: int = 0
    vq_temperature_start: Optional[float] = None
    vq_temperature_end: Optional[float] = None
    dedup_local_energy: bool = False
    log_every: int = 1
    checkpoint_every: int = 0
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if isinstance(self.distill, dict):
            self.distill = DistillConfig(**self.distill)
        if self.samples_per_step < 2:
            raise ConfigurationError("train.samples_per_step must be at least 2")
        if self.learning_rate <= 0:
            raise ConfigurationError("train.learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"train.optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"train.lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train field(s): {', '.join(sorted(unknown))}")
        if "distill" in d:
            dk = {f.name for f in fields(DistillConfig)}
            bad = set(d["distill"]) - dk
            if bad:
                raise ConfigurationError(f"unknown train.distill field(s): {', '.join(sorted(bad))}")
            d["distill"] = DistillConfig(**d["distill"])
        return cls(**d)

    def lr_at(self, step, total=None, base=None):
        base = self.learning_rate if base is None else base
        total = self.steps if total is None else total
        if self.warmup_steps and step < self.warmup_steps:
            return base * (step + 1) / self.warmup_steps
        if self.lr_schedule == "constant" or total <= 1:
            return base
        frac = min(1.0, (step - self.warmup_steps) / max(1, total - self.warmup_steps))
        lo = base * self.lr_min_factor
        return lo + 0.5 * (base - lo) * (1.0 + math.cos(math.pi * frac))

    def temperature_at(self, step, total=None):
        if self.vq_temperature_start is None:
            return None
        end = self.vq_temperature_end if self.vq_temperature_end is not None else self.vq_temperature_start
        total = self.steps if total is None else total
        frac = min(1.0, step / max(1, total - 1))
        return self.vq_temperature_start + (end - self.vq_temperature_start) * frac


# ------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, params, lr=1e-3):
        self.params, self.lr = list(params), lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr = list(params), lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(model, config: TrainConfig, lr=None):
    lr = config.learning_rate if lr is None else lr
    if config.optimizer == "sgd":
        return SGD(model.parameters(), lr)
    return Adam(model.parameters(), lr, config.beta1, config.beta2, config.eps)


def global_norm(arrays) -> float:
    return float(math.sqrt(sum(float(np.sum(a * a)) for a in arrays if a is not None)))


def _clip(model, max_norm):
    grads = [p.grad for p in model.parameters()]
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        for p in model.parameters():
            if p.grad is not None:
                p.grad *= max_norm / norm
    return norm


# ------------------------------------------------------------ estimators


@dataclass
class VmcEstimate:
    energy_mean: float
    energy_std_err: float
    local_energies: np.ndarray
    grad: Optional[dict] = None
    grad_norm: float = float("nan")

    @property
    def energy_variance(self) -> float:
        return float(np.var(self.local_energies))


def unique_rows(configs):
    """``(unique, inverse)`` for rows of a 0/1 matrix (rows hashed via packed bits)."""
    packed = np.packbits(configs, axis=1)
    view = np.ascontiguousarray(packed).view(np.dtype((np.void, packed.shape[1])))[:, 0]
    _, first, inverse = np.unique(view, return_index=True, return_inverse=True)
    return configs[first], inverse.reshape(-1)


def _log_psi(model, configs, batch_size=8192):
    with tn.no_grad():
        out = []
        for i in range(0, len(configs), batch_size):
            chunk = configs[i : i + batch_size]
            la = 0.5 * model.log_prob_tensor(chunk).data
            if model.config.phase_enabled:
                la = la + 1j * model.phase_tensor(chunk).data
            out.append(la)
    return np.concatenate(out) if out else np.zeros(0)


def local_energies(model: VqTransformer, hamiltonian: HamiltonianModel, samples, dedup=False):
    """Local energy of every sample.

    The dense path evaluates each distinct connected configuration of the
    whole batch once; ``dedup=True`` runs the per-sample compressed pipeline.
    """
    samples = np.asarray(samples, dtype=np.uint8)
    if dedup:
        return np.array([local_energy_batch(model, hamiltonian, s)[0] for s in samples])
    conn, coeff, _ = connected_batch(hamiltonian, samples)
    B, Kmax, N = conn.shape
    mask = coeff != 0.0
    mask[:, 0] = True
    b_idx, k_idx = np.nonzero(mask)
    rows = conn[b_idx, k_idx]
    uniq, inverse = unique_rows(rows)
    lpsi = _log_psi(model, uniq)[inverse]
    base = np.empty(B, dtype=lpsi.dtype)
    base[b_idx[k_idx == 0]] = lpsi[k_idx == 0]
    terms = coeff[b_idx, k_idx] * np.exp(lpsi - base[b_idx])
    return np.bincount(b_idx, weights=terms.real, minlength=B) + (
        1j * np.bincount(b_idx, weights=terms.imag, minlength=B) if np.iscomplexobj(terms) else 0.0
    )


def _check_finite(eloc, samples):
    bad = ~np.isfinite(eloc)
    if bad.any():
        i = int(np.argmax(bad))
        raise NonFiniteError(f"non-finite local energy {eloc[i]}", configuration=samples[i].copy())


def estimate_energy(model, hamiltonian, n_samples, rng, dedup=False) -> VmcEstimate:
    samples = model.sample(n_samples, rng)
    eloc = local_energies(model, hamiltonian, samples, dedup)
    _check_finite(eloc, samples)
    mean = np.mean(eloc)
    err = float(np.std(eloc) / math.sqrt(len(eloc)))
    return VmcEstimate(float(mean.real) if not np.iscomplexobj(eloc) else complex(mean), err, eloc)


def _surrogate(model, configs, weights, centered, capture=None):
    """Scalar whose gradient is ``2 Re sum_i w_i (E_loc_i - E)^* d log psi_i``."""
    logp = model.log_prob_tensor(configs, train=True, capture=capture)
    loss = tn.dot(tn.Tensor(weights * np.real(centered)), logp)
    if model.config.phase_enabled:
        ph = model.phase_tensor(configs, train=True, capture=capture)
        loss = tn.add(loss, tn.dot(tn.Tensor(2.0 * weights * np.imag(centered)), ph))
    return loss


def energy_gradient(model, hamiltonian, configs, weights, eloc, capture=None):
    """Accumulate the log-derivative energy gradient into ``param.grad``.

    ``weights`` (summing to one) are Born weights: empirical sample
    frequencies for Monte Carlo, exact probabilities for enumeration.
    Returns the weighted mean energy.
    """
    energy = np.sum(weights * eloc)
    model.zero_grad()
    with tn.Graph() as g:
        loss = _surrogate(model, configs, weights, eloc - energy, capture)
    tn.backward(g, loss)
    return energy


def gradient_step(model, hamiltonian, config: TrainConfig, optimizer, rng, exact=False) -> VmcEstimate:
    """One VMC update; ``exact=True`` replaces sampling by full enumeration."""
    if exact:
        configs = all_configs(model.config.n_sites)
        weights = np.exp(model.log_prob(configs))
        weights = weights / weights.sum()
        eloc = local_energies(model, hamiltonian, configs)
        per_sample = eloc
    else:
        samples = model.sample(config.samples_per_step, rng)
        configs, inverse = unique_rows(samples)
        weights = np.bincount(inverse, minlength=len(configs)) / len(samples)
        eloc = local_energies(model, hamiltonian, configs, config.dedup_local_energy)
        per_sample = eloc[inverse]
        _check_finite(per_sample, samples)
    capture = {} if model.codebooks else None
    energy = energy_gradient(model, hamiltonian, configs, weights, eloc, capture)
    grads = {name: p.grad for name, p in model.params.items()}
    norm = _clip(model, config.grad_clip)
    if not math.isfinite(norm):
        raise NonFiniteError("non-finite gradient", diagnostics={"energy": energy, "grad_norm": norm})
    if optimizer is not None:
        optimizer.step()
        if capture:
            for block, (pre, idx) in capture.items():
                model.codebooks[block].update_usage(idx, pre, rng)
    err = float(np.sqrt(np.sum(weights * np.abs(eloc - energy) ** 2) / max(len(per_sample) - 1, 1)))
    energy = float(np.real(energy)) if not model.config.phase_enabled else complex(energy)
    return VmcEstimate(energy, err, per_sample, grads, norm)


def variational_energy(model, hamiltonian) -> float:
    """Exact energy of the (real, phase-free) model state by enumeration, N <= 20."""
    configs = all_configs(model.config.n_sites)
    amps = np.exp(0.5 * model.log_prob(configs, batch_size=8192))
    return rayleigh_quotient(hamiltonian, amps)


def _set_temperature(model, config, step, total):
    tau = config.temperature_at(step, total)
    if tau is not None:
        model.config.vq_temperature = tau


def _codebook_usage(model):
    if not model.codebooks:
        return None
    return float(np.mean([cb.usage_fraction() for cb in model.codebooks.values()]))


def train_vmc(model, hamiltonian, config: TrainConfig, log_path=None, ckpt_dir=None, rng=None, callback=None):
    """Run ``config.steps`` VMC updates; returns ``(log records, final checkpoint path)``."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    opt = make_optimizer(model, config)
    records = []
    fh = open(log_path, "w") if log_path else None
    window = []
    try:
        for step in range(config.steps):
            opt.lr = config.lr_at(step)
            _set_temperature(model, config, step, config.steps)
            est = gradient_step(model, hamiltonian, config, opt, rng)
            rec = {
                "step": step,
                "energy": est.energy_mean,
                "energy_per_site": est.energy_mean / hamiltonian.n_sites,
                "std_err": est.energy_std_err,
                "grad_norm": est.grad_norm,
                "lr": opt.lr,
                "codebook_usage": _codebook_usage(model),
            }
            records.append(rec)
            window.append(est.energy_mean)
            if len(window) > 400:
                window.pop(0)
                if np.mean(window[200:]) > np.mean(window[:200]) + 3 * est.energy_std_err:
                    log.warning("step %d: moving-average energy increased", step)
            if fh and step % max(config.log_every, 1) == 0:
                fh.write(json.dumps(rec) + "\n")
            if ckpt_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, os.path.join(ckpt_dir, f"step{step + 1:06d}.ckpt"))
            if callback is not None:
                callback(step, est)
    finally:
        if fh:
            fh.close()
    final = None
    if ckpt_dir:
        final = os.path.join(ckpt_dir, "final.ckpt")
        save_checkpoint(model, final)
    return records, final


def _init_student_from_teacher(teacher, student):
    copied = 0
    for name, p in student.params.items():
        t = teacher.params.get(name)
        if t is not None and t.shape == p.shape:
            p.data[...] = t.data
            copied += 1
    return copied


def _seed_codebooks(student, configs, rng):
    capture = {}
    with tn.no_grad():
        student.log_prob_tensor(configs, train=False, capture=capture)
    for block in student.codebooks:
        # pre-quantization vectors of this block given earlier blocks already quantized
        student.codebooks[block].init_from_data(capture[block][0], rng)
        capture = {}
        with tn.no_grad():
            student.log_prob_tensor(configs, train=False, capture=capture)


def distill(teacher: VqTransformer, student: VqTransformer, config: TrainConfig, rng=None, log_path=None, callback=None):
    """Fit ``0.5 log P_student`` to ``0.5 log P_teacher`` on teacher samples (mean squared error).

    Returns the list of per-step training losses.
    """
    if teacher.config.n_sites != student.config.n_sites:
        raise ConfigurationError(
            f"teacher has {teacher.config.n_sites} sites but student has {student.config.n_sites}"
        )
    dc = config.distill
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if dc.init_from_teacher:
        _init_student_from_teacher(teacher, student)
    if dc.codebook_data_init and student.codebooks:
        _seed_codebooks(student, teacher.sample(max(dc.batch_size, 64), rng), rng)
    opt = make_optimizer(student, config, lr=dc.learning_rate)
    losses = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(dc.steps):
            opt.lr = config.lr_at(step, dc.steps, dc.learning_rate)
            _set_temperature(student, config, step, dc.steps)
            samples = teacher.sample(dc.batch_size, rng)
            target = 0.5 * teacher.log_prob(samples)
            capture = {} if student.codebooks else None
            student.zero_grad()
            with tn.Graph() as g:
                pred = tn.scale(student.log_prob_tensor(samples, train=True, capture=capture), 0.5)
                loss = tn.mean(tn.square(tn.sub(pred, target)))
            tn.backward(g, loss)
            norm = _clip(student, config.grad_clip)
            if not math.isfinite(norm):
                raise NonFiniteError("non-finite distillation gradient", diagnostics={"step": step})
            opt.step()
            if capture:
                for block, (pre, idx) in capture.items():
                    student.codebooks[block].update_usage(idx, pre, rng)
            losses.append(float(loss.data))
            if fh:
                fh.write(json.dumps({"step": step, "loss": losses[-1], "lr": opt.lr, "codebook_usage": _codebook_usage(student)}) + "\n")
            if callback is not None:
                callback(step, losses[-1])
    finally:
        if fh:
            fh.close()
    return losses


def distillation_loss(teacher, student, samples) -> float:
    target = 0.5 * teacher.log_prob(samples)
    return float(np.mean((0.5 * student.log_prob(samples) - target) ** 2))
