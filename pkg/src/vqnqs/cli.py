"""Command line entry point: ``vqnqs {ed,vmc-train,distill,measure,sweep}``."""

import argparse
import dataclasses
import json
import logging
import math
import os
import sys

import numpy as np

from . import bench, config as run_config
from .exact import CapabilityError, ground_state, ground_state_record
from .hamiltonian import ConfigurationError
from .model import VqTransformer, load_checkpoint, save_checkpoint
from .tensor import UsageError
from .trainer import distill, distillation_loss, train_vmc, variational_energy

log = logging.getLogger("vqnqs")

ED_REFERENCE_MAX_SITES = 16


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _build_parser():
    p = _Parser(prog="vqnqs", description="Variational Monte Carlo with vector-quantized transformer wavefunctions.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="TOML run configuration")
        s.add_argument("--out-dir", help="override out_dir from the config")
        return s

    cmd("ed", "exact ground state by sparse diagonalization")
    cmd("vmc-train", "train a model by variational Monte Carlo")
    d = cmd("distill", "distill a teacher checkpoint into the configured model")
    d.add_argument("--teacher", required=True, help="teacher checkpoint")
    m = cmd("measure", "count local-energy FLOPs with and without reuse")
    m.add_argument("--ckpt", required=True, help="model checkpoint")
    cmd("sweep", "FLOP scaling sweep over system sizes")
    return p


def _prepare(args):
    cfg = run_config.load(args.config)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    os.makedirs(os.path.join(cfg.out_dir, "ckpt"), exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    return cfg


def _write_json(cfg, name, payload):
    path = os.path.join(cfg.out_dir, name)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _reference_energy(cfg, ham):
    if cfg.measure.reference_energy is not None:
        return cfg.measure.reference_energy
    if ham.n_sites <= ED_REFERENCE_MAX_SITES:
        return ground_state(ham).energy
    return None


def _energy_summary(model, ham, ref):
    out = {}
    if ham.n_sites <= ED_REFERENCE_MAX_SITES and not model.config.phase_enabled:
        e = variational_energy(model, ham)
        out.update(energy=e, energy_per_site=e / ham.n_sites)
        if ref is not None:
            out["relative_error"] = abs(e - ref) / abs(ref)
    if ref is not None:
        out.update(reference_energy=ref, reference_energy_per_site=ref / ham.n_sites)
    return out


def cmd_ed(cfg):
    ham = cfg.system.hamiltonian()
    rec = ground_state_record(ham)
    _write_json(cfg, "report.json", rec)
    print(json.dumps(rec, sort_keys=True))


def cmd_vmc_train(cfg):
    ham = cfg.system.hamiltonian()
    model = VqTransformer(cfg.model, seed=cfg.stream_seed("init"))
    records, ckpt = train_vmc(
        model,
        ham,
        cfg.train,
        log_path=os.path.join(cfg.out_dir, "log.ndjson"),
        ckpt_dir=os.path.join(cfg.out_dir, "ckpt"),
        rng=cfg.rng("train"),
    )
    report = {"steps": len(records), "checkpoint": os.path.relpath(ckpt, cfg.out_dir), "system": ham.describe()}
    if records:
        report.update(final_estimate=records[-1]["energy"], final_std_err=records[-1]["std_err"])
    report.update(_energy_summary(model, ham, _reference_energy(cfg, ham)))
    _write_json(cfg, "report.json", report)
    print(json.dumps(report, sort_keys=True))


def cmd_distill(cfg, teacher_path):
    ham = cfg.system.hamiltonian()
    teacher = load_checkpoint(teacher_path)
    student = VqTransformer(cfg.model, seed=cfg.stream_seed("init"))
    rng = cfg.rng("distill")
    losses = distill(teacher, student, cfg.train, rng=rng, log_path=os.path.join(cfg.out_dir, "log.ndjson"))
    ckpt = os.path.join(cfg.out_dir, "ckpt", "final.ckpt")
    save_checkpoint(student, ckpt, extra={"distillation_target": "0.5*log P"})
    held_out = teacher.sample(cfg.train.distill.batch_size, rng)
    report = {
        "steps": len(losses),
        "checkpoint": os.path.relpath(ckpt, cfg.out_dir),
        "final_loss": losses[-1] if losses else None,
        "held_out_loss": distillation_loss(teacher, student, held_out),
        "model_bits": student.config.bits_label,
        "distillation_target": "0.5*log P (log-amplitude)",
    }
    report.update(_energy_summary(student, ham, _reference_energy(cfg, ham)))
    _write_json(cfg, "report.json", report)
    print(json.dumps(report, sort_keys=True))


def cmd_measure(cfg, ckpt):
    ham = cfg.system.hamiltonian()
    model = load_checkpoint(ckpt)
    if model.config.n_sites != ham.n_sites:
        raise ConfigurationError(f"checkpoint has {model.config.n_sites} sites but the system has {ham.n_sites}")
    ref = _reference_energy(cfg, ham)
    rep = bench.measure_flops(
        model, ham, cfg.measure.samples_per_batch, cfg.measure.batches, cfg.rng("measure"), reference_energy=ref
    )
    bench.emit_table([rep], cfg.out_dir)
    print(json.dumps(rep.row(), sort_keys=True))


def _sweep_dims(cfg, n):
    if cfg.system.lattice == "chain1d":
        return [n]
    side = math.isqrt(n)
    if side * side != n:
        raise ConfigurationError(f"sweep size {n} is not a square number of sites for grid2d")
    return [side, side]


def cmd_sweep(cfg):
    sw = cfg.sweep
    master = cfg.rng("sweep")
    log_fh = open(os.path.join(cfg.out_dir, "log.ndjson"), "w")

    def build(n):
        ham = cfg.system.hamiltonian(_sweep_dims(cfg, n))
        mc = dataclasses.replace(cfg.model, n_sites=n)
        seed = int(master.integers(2**32))
        student = VqTransformer(mc, seed=seed)
        if sw.distill_steps:
            teacher = VqTransformer(dataclasses.replace(mc, vq_enabled=False), seed=seed + 1)
            if sw.teacher_steps:
                train_vmc(teacher, ham, dataclasses.replace(cfg.train, steps=sw.teacher_steps), rng=master)
            tc = dataclasses.replace(cfg.train, distill=dataclasses.replace(cfg.train.distill, steps=sw.distill_steps))
            losses = distill(teacher, student, tc, rng=master)
            log_fh.write(json.dumps({"N": n, "distill_final_loss": losses[-1]}) + "\n")
        return student, ham

    try:
        result = bench.scaling_sweep(sw.sizes, build, sw.samples_per_batch, sw.batches, rng=master)
    finally:
        log_fh.close()
    bench.emit_table(result["reports"], cfg.out_dir)
    bench.write_scaling(result, cfg.out_dir)
    print(json.dumps({k: result["fits"][k]["contributions"] for k in bench.SERIES}, sort_keys=True))


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _prepare(args)
        if args.command == "ed":
            cmd_ed(cfg)
        elif args.command == "vmc-train":
            cmd_vmc_train(cfg)
        elif args.command == "distill":
            cmd_distill(cfg, args.teacher)
        elif args.command == "measure":
            cmd_measure(cfg, args.ckpt)
        elif args.command == "sweep":
            cmd_sweep(cfg)
    except (ConfigurationError, UsageError) as exc:
        print(f"vqnqs: error: {exc}", file=sys.stderr)
        return 2
    except (CapabilityError, FloatingPointError, OSError, RuntimeError) as exc:
        print(f"vqnqs: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
