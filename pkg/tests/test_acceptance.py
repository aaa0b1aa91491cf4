"""End-to-end acceptance checks, one test per numbered criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line with the
measured value next to its tolerance, then asserts. The training-based
criteria (6, 7, 9, 10) take tens of minutes in total on one CPU core.
"""

import dataclasses

import numpy as np
import pytest
from oracles import HEIS_2SITE_E0, HEIS_4X4_PER_SITE, free_fermion_tfim
from test_model import _soft_quantize
from test_tensor import CASES as GRAD_CASES
from test_tensor import _project

from vqnqs import bench
from vqnqs import tensor as tn
from vqnqs.dedup import dedup_log_prob, dedup_phase
from vqnqs.exact import ground_state, rayleigh_quotient
from vqnqs.hamiltonian import all_configs, connected_set, heisenberg, tfim
from vqnqs.model import ModelConfig, VqTransformer, vq_train_forward
from vqnqs.trainer import TrainConfig, distill, gradient_step, local_energies, train_vmc, variational_energy

# ---------------------------------------------------------------- settings
# Desk-scale hyperparameters for the training criteria.

TEACHER_4X4 = dict(n_sites=16, group_size=2, d_hidden=48, n_heads=4, n_blocks=1)
TEACHER_4X4_TRAIN = dict(samples_per_step=512, steps=3000, learning_rate=6e-3, seed=11)
TFIM_16 = dict(n_sites=16, group_size=4, d_hidden=32, n_heads=4, n_blocks=1)
TFIM_16_TRAIN = dict(samples_per_step=512, steps=1500, learning_rate=3e-3, seed=12)
STUDENT_6BIT = dict(vq_enabled=True, vq_heads=1, vq_codebook=64)
DISTILL = dict(steps=8000, learning_rate=2e-3, batch_size=256)
# 6x6 run for criterion 9: only the savings are asserted, so training is short.
TEACHER_6X6_TRAIN = dict(samples_per_step=128, steps=100, learning_rate=6e-3, seed=11)
DISTILL_6X6_STEPS = 500
SAVINGS_MEASURE = dict(samples_per_batch=512, batches=20)
SWEEP_MODEL = dict(group_size=4, d_hidden=256, n_heads=8, n_blocks=1, trailing_half_block=False,
                   vq_enabled=True, vq_heads=4, vq_codebook=64)
SWEEP_SIZES = [16, 32, 64, 128]
SWEEP_MEASURE = dict(samples_per_batch=16, batches=2)
SWEEP_DISTILL_STEPS = 50


def verdict(capsys, n, ok, text):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {text}")
    assert ok, f"criterion {n}: {text}"


def rel(e, ref):
    return abs(e - ref) / abs(ref)


# ------------------------------------------------------- shared artifacts


@pytest.fixture(scope="session")
def heis4():
    h = heisenberg((4, 4))
    return h, ground_state(h).energy


@pytest.fixture(scope="session")
def teacher_4x4(heis4):
    h, _ = heis4
    m = VqTransformer(ModelConfig(**TEACHER_4X4), seed=1)
    train_vmc(m, h, TrainConfig(**TEACHER_4X4_TRAIN))
    return m


@pytest.fixture(scope="session")
def student_4x4(teacher_4x4):
    cfg = dataclasses.replace(teacher_4x4.config, **STUDENT_6BIT)
    s = VqTransformer(cfg, seed=5)
    tc = TrainConfig(seed=21)
    tc.distill = dataclasses.replace(tc.distill, **DISTILL)
    distill(teacher_4x4, s, tc, rng=np.random.default_rng(21))
    return s


# --------------------------------------------------------------- criteria


def test_criterion_01_exact_diagonalization(capsys):
    e2 = ground_state(heisenberg((2,))).energy
    e1 = ground_state(tfim((1,), Gamma=1.0)).energy
    e4 = ground_state(heisenberg((4, 4))).per_site_energy
    ok = abs(e2 - HEIS_2SITE_E0) < 1e-10 and abs(e1 + 1.0) < 1e-10 and abs(e4 - HEIS_4X4_PER_SITE) < 1e-5
    verdict(capsys, 1, ok, f"2-site {e2:.12f}, TFIM N=1 {e1:.12f}, 4x4 per site {e4:.7f} (ref {HEIS_4X4_PER_SITE})")


def _straight_through_error(seed):
    """The quantizer's gradient is that of the soft (softmax-weighted) code mix by design."""
    r = np.random.default_rng(seed)
    x, w, gout = r.normal(size=(5, 6)), r.normal(size=(2, 4, 3)), r.normal(size=(5, 6))
    xp, wp = tn.parameter(x), tn.parameter(w)
    with tn.Graph() as g:
        q, _ = vq_train_forward(xp, wp, 0.8)
        loss = tn.sum(tn.mul(q, gout))
    tn.backward(g, loss)
    f = lambda: float((_soft_quantize(x, w, 0.8) * gout).sum())  # noqa: E731
    return max(tn.relative_error(xp.grad, tn.numerical_grad(f, x)), tn.relative_error(wp.grad, tn.numerical_grad(f, w)))


def test_criterion_02_gradients(capsys):
    worst, worst_name = 0.0, ""
    for name, (fn, make) in GRAD_CASES.items():
        for seed in range(20):
            err = tn.check_gradients(lambda *xs: _project(fn(*xs), seed), make(np.random.default_rng(seed)))
            if err > worst:
                worst, worst_name = err, name
    for seed in range(20):
        err = _straight_through_error(seed)
        if err > worst:
            worst, worst_name = err, "vq_straight_through"
    n_ops = len(GRAD_CASES) + 1
    verdict(capsys, 2, worst < 1e-4, f"{n_ops} ops x 20 seeds, worst relative error {worst:.1e} ({worst_name}) < 1e-4")


def test_criterion_03_normalization(capsys):
    worst = 0.0
    for n in (4, 8, 12):
        for seed in range(10):
            cfg = ModelConfig(n_sites=n, group_size=(2, 4, 3)[seed % 3], d_hidden=16, n_heads=2, n_blocks=1 + seed % 2,
                              vq_enabled=bool(seed % 2), vq_codebook=16, init_head_std=0.5)
            m = VqTransformer(cfg, seed=seed)
            worst = max(worst, abs(np.exp(m.log_prob(all_configs(n))).sum() - 1.0))
    verdict(capsys, 3, worst < 1e-9, f"N in {{4,8,12}} x 10 inits, max |sum P - 1| = {worst:.1e} < 1e-9")


def test_criterion_04_sampler(capsys):
    m = VqTransformer(ModelConfig(n_sites=4, group_size=1, d_hidden=16, n_heads=2, n_blocks=1, init_head_std=1.0), seed=3)
    p = np.exp(m.log_prob(all_configs(4)))
    s = m.sample(200_000, np.random.default_rng(0))
    idx = (s.astype(np.int64) << np.arange(4)).sum(axis=1)
    emp = np.bincount(idx, minlength=16) / len(idx)
    tv = 0.5 * np.abs(emp - p).sum()
    verdict(capsys, 4, tv < 0.01, f"N=4, 200k samples, TV distance {tv:.2e} < 0.01 (max P {p.max():.3f})")


def test_criterion_05_estimator_exactness(capsys):
    h = tfim((6,), Gamma=1.0)
    worst_g, worst_e = 0.0, 0.0
    for seed in range(3):
        m = VqTransformer(ModelConfig(n_sites=6, group_size=2, d_hidden=16, n_heads=2, n_blocks=1, init_head_std=0.3), seed=seed)
        est = gradient_step(m, h, TrainConfig(), None, None, exact=True)
        ge = np.concatenate([est.grad[k].ravel().copy() for k in sorted(est.grad)])
        m.zero_grad()
        with tn.Graph() as g:
            amps = tn.exp(tn.scale(m.log_prob_tensor(all_configs(6)), 0.5))
            e = rayleigh_quotient(h, amps)
        tn.backward(g, e)
        gr = np.concatenate([m.params[k].grad.ravel() for k in sorted(est.grad)])
        worst_g = max(worst_g, np.linalg.norm(ge - gr) / np.linalg.norm(gr))
        worst_e = max(worst_e, abs(est.energy_mean - float(e.data)))
    ok = worst_g < 1e-6 and worst_e < 1e-9
    verdict(capsys, 5, ok, f"N=6 TFIM gradient rel diff {worst_g:.1e} < 1e-6, energy diff {worst_e:.1e} < 1e-9")


def test_criterion_06a_vmc_tfim(capsys):
    h = tfim((16,), Gamma=1.0)
    e0 = ground_state(h).energy
    m = VqTransformer(ModelConfig(**TFIM_16), seed=2)
    train_vmc(m, h, TrainConfig(**TFIM_16_TRAIN))
    r = rel(variational_energy(m, h), e0)
    verdict(capsys, 6, r <= 1e-3, f"(a) TFIM N=16 baseline relative error {r:.1e} <= 1e-3 (E0/N {e0 / 16:.7f}, oracle {free_fermion_tfim(16) / 16:.7f})")


def test_criterion_06b_vmc_heisenberg(capsys, heis4, teacher_4x4):
    h, e0 = heis4
    r = rel(variational_energy(teacher_4x4, h), e0)
    verdict(capsys, 6, r <= 1e-3, f"(b) Heisenberg 4x4 baseline relative error {r:.1e} <= 1e-3")


def test_criterion_07_distillation(capsys, heis4, student_4x4):
    h, e0 = heis4
    e = variational_energy(student_4x4, h)
    r = rel(e, e0)
    verdict(capsys, 7, r <= 5e-3, f"6-bit student energy/site {e / 16:.6f}, relative error {r:.1e} <= 5e-3")


def test_criterion_08_dense_dedup_equivalence(capsys):
    worst, count = 0.0, 0
    rng = np.random.default_rng(0)
    for h in (heisenberg((4, 4)), tfim((16,))):
        for seed in range(50):
            cfg = ModelConfig(n_sites=16, group_size=(2, 4)[seed % 2], d_hidden=16, n_heads=2, n_blocks=1 + seed % 2,
                              vq_enabled=seed % 5 != 0, vq_heads=1 + seed % 2, vq_codebook=16,
                              phase_enabled=seed % 7 == 0)
            m = VqTransformer(cfg, seed=seed)
            cs = connected_set(h, m.sample(1, rng)[0])
            worst = max(worst, np.abs(m.log_prob(cs.configs) - dedup_log_prob(m, cs.configs, cs.base).data).max())
            worst = max(worst, np.abs(m.phase(cs.configs) - dedup_phase(m, cs.configs, cs.base).data).max())
            count += 1
    verdict(capsys, 8, worst < 1e-9, f"{count} models x connected sets, max |log psi diff| {worst:.1e} < 1e-9")


def _student_6x6():
    h = heisenberg((6, 6))
    teacher = VqTransformer(ModelConfig(**{**TEACHER_4X4, "n_sites": 36}), seed=7)
    train_vmc(teacher, h, TrainConfig(**TEACHER_6X6_TRAIN))
    s = VqTransformer(dataclasses.replace(teacher.config, **STUDENT_6BIT), seed=8)
    tc = TrainConfig(seed=22)
    tc.distill = dataclasses.replace(tc.distill, **{**DISTILL, "steps": DISTILL_6X6_STEPS})
    distill(teacher, s, tc, rng=np.random.default_rng(22))
    return s, h


def test_criterion_09_savings(capsys, heis4, student_4x4):
    h, e0 = heis4
    r4 = bench.measure_flops(student_4x4, h, rng=np.random.default_rng(0), reference_energy=e0, **SAVINGS_MEASURE)
    s6, h6 = _student_6x6()
    r6 = bench.measure_flops(s6, h6, rng=np.random.default_rng(1), **SAVINGS_MEASURE)
    ok = all(r.total_savings >= 2 and r.quantized_ops_savings >= r.total_savings for r in (r4, r6))
    verdict(
        capsys,
        9,
        ok,
        f"4x4 total x{r4.total_savings:.2f} quantized x{r4.quantized_ops_savings:.2f}; "
        f"6x6 total x{r6.total_savings:.2f} quantized x{r6.quantized_ops_savings:.2f} (need total >= 2, quantized >= total)",
    )


def test_criterion_10_scaling(capsys):
    rng = np.random.default_rng(4)

    def build(n):
        h = tfim((n,))
        cfg = ModelConfig(n_sites=n, **SWEEP_MODEL)
        teacher = VqTransformer(dataclasses.replace(cfg, vq_enabled=False), seed=n)
        student = VqTransformer(cfg, seed=n + 1)
        tc = TrainConfig(seed=n)
        tc.distill = dataclasses.replace(tc.distill, steps=SWEEP_DISTILL_STEPS, batch_size=64)
        distill(teacher, student, tc, rng=rng)
        return student, h

    sw = bench.scaling_sweep(SWEEP_SIZES, build, rng=rng, **SWEEP_MEASURE)
    fit = sw["fits"]["reuse_minus_attention_vq"]
    n_max = SWEEP_SIZES[-1]
    c = fit["coefficients"]
    quad_cubic = abs(c[2] * n_max**2 + c[3] * n_max**3) / sw["series"]["reuse_minus_attention_vq"][-1]
    per_term = fit["contributions"][2] + fit["contributions"][3]
    cubic_no_reuse = sw["fits"]["no_reuse"]["coefficients"][3]
    ok = quad_cubic < 0.05 and cubic_no_reuse > 0
    verdict(
        capsys,
        10,
        ok,
        f"reuse minus attention/VQ: quadratic+cubic share at N={n_max} is {quad_cubic:.2%} < 5% "
        f"(sum of per-term magnitudes {per_term:.2%}); no-reuse cubic coefficient {cubic_no_reuse:.3g} > 0",
    )


class _LookupTable:
    """Test-only wavefunction: log P from exact ground-state amplitudes."""

    def __init__(self, n, amplitudes):
        self.config = dataclasses.make_dataclass("C", [("n_sites", int), ("phase_enabled", bool)])(n, False)
        self.logp = np.log(np.maximum(amplitudes**2, 1e-300))

    def log_prob_tensor(self, configs):
        idx = (configs.astype(np.int64) << np.arange(configs.shape[1])).sum(axis=1)
        return tn.Tensor(self.logp[idx])


def test_criterion_11_zero_variance(capsys):
    rng = np.random.default_rng(0)
    worst = 0.0
    for h in (tfim((10,), Gamma=0.7), heisenberg((2, 4)), heisenberg((4, 4)), tfim((16,))):
        gs = ground_state(h)
        table = _LookupTable(h.n_sites, gs.amplitudes)
        p = gs.amplitudes**2 / np.sum(gs.amplitudes**2)
        idx = rng.choice(len(p), size=2000, p=p)
        samples = all_configs(h.n_sites)[idx]
        eloc = local_energies(table, h, samples)
        worst = max(worst, np.abs(eloc - gs.energy).max())
    verdict(capsys, 11, worst < 1e-9, f"lookup-table ansatz, max |E_loc - E0| = {worst:.1e} < 1e-9 over 4 systems")
