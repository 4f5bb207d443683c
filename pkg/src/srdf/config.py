"""Run configuration: one YAML file per run, validated before any work starts."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .consistency import ConfigError, ConsistencyParams, get_prior
from .optimizer import OptimizerConfig, SamplingSchedule

INIT_MODES = ("visual-hull", "import")


@dataclass
class ConsistencySection:
    prior: str = "median-baseline"
    sigma_c: float = 0.02
    gamma_srdf: float = 0.05
    gamma_phi: float = 0.05
    even_median: str = "lower"

    def params(self, sigma_d: float = 0.01) -> ConsistencyParams:
        return ConsistencyParams(sigma_d, self.sigma_c, self.gamma_srdf, self.gamma_phi, self.even_median)


@dataclass
class OptimizeSection:
    group_size: int = 8
    samples_per_ray: int = 9
    stages: int = 4
    epochs_per_stage: int = 40
    offset_init: float = 0.16
    offset_decay: float = 0.5
    step_size: float = 0.05
    sigma_d_rule: str | float = "offset/3"

    def schedule(self) -> SamplingSchedule:
        return SamplingSchedule(
            self.offset_init, self.offset_decay, self.stages, self.epochs_per_stage, self.samples_per_ray, self.sigma_d_rule
        )


@dataclass
class FusionSection:
    resolution: int = 256
    trunc_voxels: float = 3.0
    pad: float = 0.05
    bilateral: bool = True
    sigma_spatial: float = 2.0
    sigma_range: float | None = None  # default: 1% of the scene diameter
    carve_background: bool = False
    min_component_fraction: float = 0.001


@dataclass
class MetricsSection:
    samples: int = 100000
    gt_mesh: str | None = None
    gt_depth: str | None = None


@dataclass
class RunConfig:
    """Everything a subcommand needs.

    ``scene`` (synth) is a scene file; ``data`` (reconstruct) is a directory
    written by ``synth`` or laid out the same way.
    """

    seed: int = 0
    threads: int = 1
    scene: str | None = None
    data: str | None = None
    out: str = "out"
    init: str = "visual-hull"
    hull_resolution: int = 128
    import_dir: str | None = None
    planar_depth: bool = False
    consistency: ConsistencySection = field(default_factory=ConsistencySection)
    optimize: OptimizeSection = field(default_factory=OptimizeSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    base_dir: str = field(default=".", repr=False)

    # -- construction --------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict | None, base_dir: str | Path = ".") -> RunConfig:
        data = copy.deepcopy(data or {})
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        sections = {"consistency": ConsistencySection, "optimize": OptimizeSection, "fusion": FusionSection, "metrics": MetricsSection}
        kwargs = {}
        top = {f.name for f in fields(cls)} - {"base_dir"}
        for key, value in data.items():
            if key not in top:
                raise ConfigError(f"unknown configuration key {key!r}")
            if key in sections:
                kwargs[key] = _section(sections[key], value, key)
            else:
                kwargs[key] = value
        try:
            cfg = cls(**kwargs, base_dir=str(base_dir))
            cfg.validate(check_paths=False)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        return cls.from_dict(data, path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def path(self, value) -> Path | None:
        """A configured path, relative to the config file's directory."""
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def resolve(self, name: str) -> Path | None:
        return self.path(getattr(self, name))

    # -- validation ----------------------------------------------------------

    def validate(self, check_paths: bool = True, command: str | None = None) -> None:
        """Raise ConfigError on the first invalid field."""
        _int(self.seed, "seed", lo=0)
        _int(self.threads, "threads", lo=1)
        _int(self.hull_resolution, "hull_resolution", lo=16)
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        c = self.consistency
        get_prior(c.prior)
        c.params()
        o = self.optimize
        _int(o.group_size, "optimize.group_size", lo=2)
        _int(o.samples_per_ray, "optimize.samples_per_ray", lo=1)
        _int(o.stages, "optimize.stages", lo=1)
        _int(o.epochs_per_stage, "optimize.epochs_per_stage", lo=0)
        o.schedule()
        OptimizerConfig(step_size=o.step_size, prior=c.prior)
        f = self.fusion
        _int(f.resolution, "fusion.resolution", lo=8)
        if not f.trunc_voxels > 0:
            raise ConfigError("fusion.trunc_voxels must be > 0")
        if not f.sigma_spatial > 0 or (f.sigma_range is not None and not f.sigma_range > 0):
            raise ConfigError("fusion bilateral sigmas must be > 0")
        if not 0 <= f.min_component_fraction < 1:
            raise ConfigError("fusion.min_component_fraction must lie in [0, 1)")
        _int(self.metrics.samples, "metrics.samples", lo=1)
        if not check_paths:
            return
        if command == "synth":
            self._need("scene")
        elif command == "reconstruct":
            self._need("data")
            if self.init == "import":
                self._need("import_dir")

    def _need(self, name: str) -> None:
        p = self.resolve(name)
        if p is None:
            raise ConfigError(f"configuration key {name!r} is required")
        if not p.exists():
            raise ConfigError(f"{name} path does not exist: {p}")


def _section(cls, value, name):
    if value is None:
        return cls()
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    for key in value:
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}")
    return cls(**value)


def _int(value, name, lo=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer")
    if lo is not None and value < lo:
        raise ConfigError(f"{name} must be >= {lo}")
