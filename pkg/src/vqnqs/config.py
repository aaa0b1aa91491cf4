"""Run configuration: TOML in, fully resolved JSON out."""

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import tomli

from .hamiltonian import ConfigurationError, HamiltonianModel, build_lattice
from .model import ModelConfig
from .trainer import TrainConfig

# Named sub-streams of the master seed; index is the SeedSequence spawn key.
STREAMS = {"init": 0, "train": 1, "distill": 2, "measure": 3, "sweep": 4}


@dataclass
class SystemConfig:
    kind: str = "heisenberg"
    lattice: str = "grid2d"
    dims: list = field(default_factory=lambda: [4, 4])
    couplings: dict = field(default_factory=lambda: {"J": 1.0, "Gamma": 1.0})
    marshall: bool = True

    def __post_init__(self):
        if self.kind not in ("tfim", "heisenberg"):
            raise ConfigurationError(f"system.kind must be 'tfim' or 'heisenberg', got {self.kind!r}")
        unknown = set(self.couplings) - {"J", "Gamma"}
        if unknown:
            raise ConfigurationError(f"unknown system.couplings field(s): {', '.join(sorted(unknown))}")
        self.couplings = {"J": float(self.couplings.get("J", 1.0)), "Gamma": float(self.couplings.get("Gamma", 1.0))}
        self.dims = [int(d) for d in self.dims]
        build_lattice(self.lattice, self.dims)

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.dims))

    def hamiltonian(self, dims=None) -> HamiltonianModel:
        lat = build_lattice(self.lattice, self.dims if dims is None else dims)
        return HamiltonianModel(self.kind, lat, J=self.couplings["J"], Gamma=self.couplings["Gamma"], marshall=self.marshall)


@dataclass
class MeasureConfig:
    samples_per_batch: int = 512
    batches: int = 20
    reference_energy: Optional[float] = None

    def __post_init__(self):
        if self.samples_per_batch < 1 or self.batches < 1:
            raise ConfigurationError("measure.samples_per_batch and measure.batches must be positive")


@dataclass
class SweepConfig:
    sizes: list = field(default_factory=lambda: [16, 32, 64, 128])
    teacher_steps: int = 0
    distill_steps: int = 0
    samples_per_batch: int = 16
    batches: int = 2


@dataclass
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    model: Optional[ModelConfig] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    measure: MeasureConfig = field(default_factory=MeasureConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        if self.model is None:
            self.model = ModelConfig(n_sites=self.system.n_sites)
        if self.model.n_sites != self.system.n_sites:
            raise ConfigurationError(
                f"model.n_sites = {self.model.n_sites} but the system has {self.system.n_sites} sites"
            )

    def rng(self, stream: str) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(int(self.seed), spawn_key=(STREAMS[stream],)))

    def stream_seed(self, stream: str) -> int:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(STREAMS[stream],))
        return int(ss.generate_state(1, np.uint32)[0])

    def to_dict(self) -> dict:
        d = {
            "system": asdict(self.system),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "measure": asdict(self.measure),
            "sweep": asdict(self.sweep),
            "seed": int(self.seed),
            "out_dir": self.out_dir,
        }
        d["seed_derivation"] = {
            "method": "numpy SeedSequence(seed, spawn_key=(stream,))",
            "streams": dict(STREAMS),
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigurationError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown field(s) in [{name}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigurationError(f"[{name}]: {exc}") from exc


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    d.pop("seed_derivation", None)
    top = {"system", "model", "train", "measure", "sweep", "seed", "out_dir"}
    unknown = set(d) - top
    if unknown:
        raise ConfigurationError(f"unknown top-level field(s): {', '.join(sorted(unknown))}")
    system = _section(SystemConfig, d.get("system", {}), "system")
    model = None
    if "model" in d:
        md = dict(d["model"])
        md.setdefault("n_sites", system.n_sites)
        model = ModelConfig.from_dict(md)
    train = TrainConfig.from_dict(d.get("train", {}))
    return RunConfig(
        system=system,
        model=model,
        train=train,
        measure=_section(MeasureConfig, d.get("measure", {}), "measure"),
        sweep=_section(SweepConfig, d.get("sweep", {}), "sweep"),
        seed=int(d.get("seed", 0)),
        out_dir=str(d.get("out_dir", "runs/default")),
    )


def loads(text: str) -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    return from_dict(data)


def load(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode("utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        return loads(text)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def load_resolved(path) -> RunConfig:
    """Read a ``config.json`` written by a previous run."""
    with open(path) as fh:
        return from_dict(json.load(fh))
