"""Declarative experiment configuration.

One YAML file fully determines a run: dataset, schedule, base training,
trajectory generation, adapters, distillation, and evaluation.  Sections map
onto the dataclasses the pipeline stages already take, so there is a single
source of truth for field names and defaults.  Unknown keys are rejected
rather than ignored; a typo should fail loudly, not silently run the
defaults.  Every artifact a run produces embeds `config_hash` so mixed
provenance can be detected later.
"""

import dataclasses
import json
from dataclasses import dataclass, field, fields, is_dataclass

import yaml

from agd import hashing
from agd.adapters import AdapterConfig
from agd.diffusion import BaseTrainConfig, NoiseSchedule
from agd.diffusion.data import ring_dataset, single_gaussian_dataset
from agd.diffusion.sampling import SamplerKind
from agd.distill import DistillConfig
from agd.errors import InputError

DATASETS = ("ring8", "single_gaussian")


@dataclass
class DatasetSpec:
    name: str = "ring8"

    def validate(self):
        if self.name not in DATASETS:
            raise InputError(f"unknown dataset {self.name!r}")
        return self


@dataclass
class ScheduleSpec:
    num_steps: int = 64
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    rho: float = 7.0


@dataclass
class TrajectorySpec:
    count: int = 512
    omega_min: float = 1.0
    omega_max: float = 6.0
    kind: str = "deterministic_euler"
    source: str = "guided"
    chunk_size: int = 512
    # round-robin class labels instead of uniform draws, equal per-class counts
    stratified: bool = False

    def validate(self):
        if self.kind not in [k.value for k in SamplerKind]:
            raise InputError(f"unknown sampler kind {self.kind!r}")
        if self.source not in ("guided", "diffusion"):
            raise InputError(f"unknown trajectory source {self.source!r}")
        if not 1.0 <= self.omega_min <= self.omega_max:
            raise InputError("need 1 <= omega_min <= omega_max")
        if self.count < 1:
            raise InputError("trajectory count must be positive")
        return self


@dataclass
class EvalSpec:
    omegas: tuple = (1.0, 2.0, 4.0, 6.0, 9.0)
    num_gen: int = 2048
    num_real: int = 4096
    num_pair_seeds: int = 512
    transfer_omega: float = 4.0

    def validate(self):
        if len(self.omegas) == 0:
            raise InputError("need at least one evaluation guidance scale")
        return self


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    base: BaseTrainConfig = field(default_factory=BaseTrainConfig)
    trajectories: TrajectorySpec = field(default_factory=TrajectorySpec)
    adapters: AdapterConfig = field(default_factory=AdapterConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def validate(self):
        self.dataset.validate()
        self.trajectories.validate()
        self.adapters.validate()
        self.distill.validate()
        self.eval.validate()
        if self.schedule.num_steps < 2:
            raise InputError("schedule needs at least two steps")
        return self


def _as_float(value):
    """YAML only reads signed-exponent forms as floats, so `1e6` arrives as
    a string; accept any string float() accepts."""
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return None
    return None


def _scalar_ok(value, template):
    if isinstance(template, bool):
        return isinstance(value, bool)
    if isinstance(template, float):
        return _as_float(value) is not None
    if isinstance(template, int):
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, type(template))


def _coerce(key_path, value, template):
    """Type-check against the field's default and normalize containers.

    YAML gives lists where the dataclasses hold tuples, and ints where they
    hold floats; both get converted so equal configs hash equally.  Anything
    else (notably YAML reading `1e6` as a string) is rejected here instead
    of failing deep inside a run.
    """
    if isinstance(template, tuple):
        if not isinstance(value, (list, tuple)):
            raise InputError(f"config key {key_path} expects a list, got {value!r}")
        value = tuple(value)
        if template and not all(_scalar_ok(v, template[0]) for v in value):
            raise InputError(
                f"config key {key_path} expects {type(template[0]).__name__} "
                f"entries, got {value!r}"
            )
        if template and isinstance(template[0], float):
            value = tuple(_as_float(v) for v in value)
        return value
    if not _scalar_ok(value, template):
        raise InputError(
            f"config key {key_path} expects {type(template).__name__}, "
            f"got {value!r}"
        )
    if isinstance(template, float):
        return _as_float(value)
    return value


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise InputError(f"config section {path or 'root'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise InputError(f"unknown config key {path}{sorted(unknown)[0]!r}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _from_dict(type(current), value, f"{path}{name}.")
        else:
            kwargs[name] = _coerce(f"{path}{name}", value, current)
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data or {}, "").validate()


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise InputError(f"config file {path} is not valid YAML: {exc}")
    return from_dict(data or {})


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply dotted-path overrides like ``distill.steps=200``.

    Values parse as YAML scalars so numbers, booleans, and lists all work
    from the command line.
    """
    data = to_dict(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise InputError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = data
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                raise InputError(f"unknown config key {dotted!r}")
            node = node[key]
        if keys[-1] not in node:
            raise InputError(f"unknown config key {dotted!r}")
        try:
            node[keys[-1]] = yaml.safe_load(raw)
        except yaml.YAMLError:
            raise InputError(f"cannot parse override value {raw!r}")
    return from_dict(data)


def to_dict(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)

    def listify(node):
        if isinstance(node, dict):
            return {k: listify(v) for k, v in node.items()}
        if isinstance(node, tuple):
            return [listify(v) for v in node]
        return node

    return listify(out)


def config_hash(cfg: ExperimentConfig) -> str:
    """16-hex-digit fingerprint of the canonicalized config."""
    canon = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return f"{hashing.fnv1a64(canon.encode()):016x}"


# Which config sections determine each pipeline stage's artifact.  Artifact
# compatibility is judged on these, so changing a downstream knob (say the
# distillation step count) never invalidates an upstream checkpoint.
STAGE_SECTIONS = {
    "base": ("seed", "dataset", "schedule", "base"),
    "trajectories": ("seed", "dataset", "schedule", "base", "trajectories"),
    "distill": ("seed", "dataset", "schedule", "base", "trajectories",
                "adapters", "distill"),
}


def stage_hash(cfg: ExperimentConfig, stage: str) -> str:
    """Fingerprint of only the sections that feed the given stage."""
    if stage not in STAGE_SECTIONS:
        raise InputError(f"unknown pipeline stage {stage!r}")
    d = to_dict(cfg)
    sub = {k: d[k] for k in STAGE_SECTIONS[stage]}
    canon = json.dumps(sub, sort_keys=True, separators=(",", ":"))
    return f"{hashing.fnv1a64(canon.encode()):016x}"


def save(cfg: ExperimentConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=False)
    return path


def make_dataset(cfg: ExperimentConfig):
    if cfg.dataset.name == "ring8":
        return ring_dataset()
    return single_gaussian_dataset()


def make_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    s = cfg.schedule
    return NoiseSchedule(s.num_steps, s.sigma_min, s.sigma_max, s.rho)
