"""Experiment configuration: ``[section]`` / ``key = value`` text format.

Every key has a default; ``[experiment] name`` is the only required key.
A ``preset`` key in ``[experiment]`` loads a named set of defaults that
explicit keys then override. Unknown sections or keys are rejected.
"""

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .coupling import COUPLING_MODES, DegradationModel, GaussianSpec
from .exceptions import ConfigParseError, ConfigurationError
from .training import TrainConfig

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ExperimentSection:
    name: str = ""
    preset: str = "default_2d"
    seed: int = 0
    output_dir: str = ""
    format_version: int = FORMAT_VERSION


@dataclass(frozen=True)
class CouplingSection:
    mode: str = "oracle-anchored"
    dim: int = 2
    operator: tuple = (0.6, 0.2, 0.0, 0.6)
    noise_std: float = 0.4
    prior_mean: tuple = (1.0, -1.0)
    prior_std: float = 1.0
    source_mean: tuple = (0.0, 0.0)
    source_std: float = 1.0
    sigma: float = 0.05


@dataclass(frozen=True)
class EstimatorSection:
    n_train: int = 50000
    hidden: tuple = (32, 32)
    iterations: int = 8000
    batch_size: int = 256
    learning_rate: float = 3e-4


@dataclass(frozen=True)
class TrainingSection:
    batch_size: int = 16
    fm_fraction: float = 0.75
    learning_rate: float = 1e-4
    iterations: int = 20000
    ema_decay: float = 0.999
    dt_depth: int = 7
    conditioning: bool = True
    shortcut: bool = True
    hidden: tuple = (128, 128)
    time_features: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass(frozen=True)
class InferenceSection:
    steps: tuple = (1, 2, 4, 8, 128)
    n_restorations: int = 10000
    use_ema: bool = False
    n_dump: int = 16


@dataclass(frozen=True)
class DiagnosticsSection:
    enabled: bool = True
    n_samples: int = 100000
    n_projections: int = 64
    bandwidth_scale: float = 0.3
    kinetic_steps: int = 64
    kinetic_samples: int = 10000


SECTIONS = {
    "experiment": ExperimentSection,
    "coupling": CouplingSection,
    "estimator": EstimatorSection,
    "training": TrainingSection,
    "inference": InferenceSection,
    "diagnostics": DiagnosticsSection,
}

PRESETS = {
    "default_2d": {},
    "ablation_no_sc": {"training": {"shortcut": False}},
    "ablation_no_cond": {"training": {"conditioning": False}},
    "baseline_gaussian_1d": {
        "coupling": {
            "mode": "independent",
            "dim": 1,
            "operator": (0.8,),
            "noise_std": 0.05,
            "prior_mean": (2.0,),
            "prior_std": 1.0,
            "source_mean": (0.0,),
            "source_std": 1.0,
        },
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    coupling: CouplingSection = field(default_factory=CouplingSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)

    def __post_init__(self):
        validate(self)

    # -- derived objects ---------------------------------------------------

    @property
    def name(self):
        return self.experiment.name

    @property
    def seed(self):
        return self.experiment.seed

    @property
    def prior(self):
        return GaussianSpec(np.array(self.coupling.prior_mean), self.coupling.prior_std)

    @property
    def source(self):
        return GaussianSpec(np.array(self.coupling.source_mean), self.coupling.source_std)

    @property
    def degradation(self):
        d = self.coupling.dim
        return DegradationModel(np.array(self.coupling.operator).reshape(d, d), self.coupling.noise_std)

    def train_config(self):
        t = self.training
        return TrainConfig(
            batch_size=t.batch_size,
            fm_fraction=t.fm_fraction,
            learning_rate=t.learning_rate,
            iterations=t.iterations,
            ema_decay=t.ema_decay,
            dt_depth=t.dt_depth,
            coupling=self.coupling.mode,
            conditioning=t.conditioning,
            shortcut=t.shortcut,
            seed=self.experiment.seed,
            hidden=t.hidden,
            time_features=t.time_features,
            beta1=t.beta1,
            beta2=t.beta2,
            adam_eps=t.adam_eps,
        )

    def with_updates(self, **sections):
        """Return a copy with ``section={key: value}`` overrides applied."""
        parts = {name: getattr(self, name) for name in SECTIONS}
        for name, updates in sections.items():
            parts[name] = replace(parts[name], **updates)
        return ExperimentConfig(**parts)

    def config_hash(self):
        """Digest of the settings that determine the trained model.

        The name, preset label, output location, iteration budget and the
        inference and diagnostics sections are left out, so a checkpoint can
        be re-evaluated or trained further under new settings.
        """
        model_only = replace(
            self,
            experiment=replace(self.experiment, name="", preset="default_2d", output_dir=""),
            training=replace(self.training, iterations=0),
            inference=InferenceSection(),
            diagnostics=DiagnosticsSection(),
        )
        text = serialize_config(model_only)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def validate(cfg):
    e, c, t = cfg.experiment, cfg.coupling, cfg.training
    if e.format_version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported format_version {e.format_version}")
    if e.preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {e.preset!r}; expected one of {sorted(PRESETS)}")
    if c.mode not in COUPLING_MODES:
        raise ConfigurationError(f"unknown coupling mode {c.mode!r}")
    if c.dim < 1:
        raise ConfigurationError("coupling.dim must be positive")
    if len(c.operator) not in (c.dim * c.dim,):
        raise ConfigurationError(f"coupling.operator needs {c.dim * c.dim} entries")
    for key in ("prior_mean", "source_mean"):
        if len(getattr(c, key)) != c.dim:
            raise ConfigurationError(f"coupling.{key} needs {c.dim} entries")
    for key in ("noise_std", "prior_std", "source_std", "sigma"):
        if not getattr(c, key) > 0:
            raise ConfigurationError(f"coupling.{key} must be positive")
    if cfg.estimator.n_train < 100 * c.dim:
        raise ConfigurationError("estimator.n_train must be at least 100 * dim")
    if any(n < 1 for n in cfg.inference.steps):
        raise ConfigurationError("inference.steps must be positive")
    if cfg.inference.n_restorations < 1:
        raise ConfigurationError("inference.n_restorations must be positive")
    d = cfg.diagnostics
    if d.n_samples < 10000 or d.kinetic_samples < 10000:
        raise ConfigurationError("diagnostics sample counts must be at least 10^4")
    if d.n_projections < 1 or d.kinetic_steps < 1 or not d.bandwidth_scale > 0:
        raise ConfigurationError("invalid diagnostics settings")
    TrainConfig(  # validates the training section
        batch_size=t.batch_size, fm_fraction=t.fm_fraction, learning_rate=t.learning_rate,
        iterations=t.iterations, ema_decay=t.ema_decay, dt_depth=t.dt_depth,
        shortcut=t.shortcut, hidden=t.hidden, time_features=t.time_features,
    )


# -- text format -----------------------------------------------------------


def _field_types(section_cls):
    return {f.name: f.default for f in fields(section_cls)}


def _parse_value(raw, default, where, lineno=None):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            cast = int if default and all(isinstance(x, int) for x in default) else float
            return tuple(cast(s) for s in items)
        return raw
    except ValueError as exc:
        raise ConfigParseError(f"{where}: {exc}", lineno) from None


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def parse_config(text):
    """Parse config text into a validated :class:`ExperimentConfig`."""
    entries = {name: {} for name in SECTIONS}
    lines = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigParseError(f"malformed section header {stripped!r}", lineno)
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigParseError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in stripped:
            raise ConfigParseError(f"expected 'key = value', got {stripped!r}", lineno)
        if section is None:
            raise ConfigParseError("key outside of any section", lineno)
        key, raw = (s.strip() for s in stripped.split("=", 1))
        defaults = _field_types(SECTIONS[section])
        if key not in defaults:
            raise ConfigParseError(f"unknown key {key!r} in [{section}]", lineno)
        if key in entries[section]:
            raise ConfigParseError(f"duplicate key {key!r} in [{section}]", lineno)
        entries[section][key] = _parse_value(raw, defaults[key], f"[{section}] {key}", lineno)
        lines[(section, key)] = lineno

    if not entries["experiment"].get("name"):
        raise ConfigParseError("missing required key 'name' in [experiment]", lines.get(("experiment", "name")))
    preset = entries["experiment"].get("preset", ExperimentSection.preset)
    if preset not in PRESETS:
        raise ConfigParseError(f"unknown preset {preset!r}", lines.get(("experiment", "preset")))

    parts = {}
    for name, cls in SECTIONS.items():
        values = dict(PRESETS[preset].get(name, {}))
        values.update(entries[name])
        parts[name] = cls(**values)
    try:
        return ExperimentConfig(**parts)
    except ConfigurationError as exc:
        line = _blame_line(str(exc), lines)
        raise ConfigParseError(str(exc), line) from None


def _blame_line(message, lines):
    for (section, key), lineno in lines.items():
        if key in message:
            return lineno
    return None


def serialize_config(cfg):
    """Write every resolved key; ``parse_config`` of the output reproduces ``cfg``."""
    out = []
    for name in SECTIONS:
        out.append(f"[{name}]")
        for key, value in asdict(getattr(cfg, name)).items():
            out.append(f"{key} = {_format_value(value)}")
        out.append("")
    return "\n".join(out)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
