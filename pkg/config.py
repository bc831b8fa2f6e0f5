"""
Defaults, per-dataset presets and the flat key=value configuration layer of the CLI.
"""
import logging
from dataclasses import dataclass, fields, replace
from typing import Optional

from cycle import RETRIEVAL_MODES, TIT_MODES, CycleConfig
from errors import ConfigError, IoFailure
from synth import SynthSpec
from trainer import TrainConfig

DEFAULT_K = 10
DEFAULT_LAMBDA1 = 3.0
DEFAULT_LAMBDA2 = 2.0
DEFAULT_TAU_CE = 0.01
DEFAULT_TAU_SOFT = 0.07
DEFAULT_EPOCHS = 100
DEFAULT_LR = 0.01
DEFAULT_MOMENTUM = 0.9
DEFAULT_EPS = 1e-12
DEFAULT_GRID = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0)

# (lambda1, lambda2) tuned per target dataset
DATASET_PRESETS = {
    "chestx": (3.0, 0.5),
    "isic": (3.0, 2.0),
    "eurosat": (1.5, 0.2),
    "cropdiseases": (1.0, 1.5),
}

logger = logging.getLogger(__name__)


def _to_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


@dataclass
class CliConfig:
    """Every setting a CLI command can take, before it is split into typed configs."""

    # objective
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2
    k: int = DEFAULT_K
    tau: float = DEFAULT_TAU_CE
    tau_soft: float = DEFAULT_TAU_SOFT
    retrieval: str = "cross_view"
    tit_mode: str = "soft"
    semantic_anchor: bool = True
    eps: float = DEFAULT_EPS
    # optimiser
    epochs: int = DEFAULT_EPOCHS
    lr: float = DEFAULT_LR
    momentum: float = DEFAULT_MOMENTUM
    hidden: Optional[int] = None
    expect_A: Optional[int] = None
    seed: int = 0
    log_every: int = 10
    # synthetic episodes
    C: int = 5
    d: int = 64
    M: int = 16
    A: int = 2
    shots: int = 5
    queries: int = 15
    signal_patches: int = 2
    strength: float = 0.8
    noise: float = 0.5
    overlap: float = 0.3
    jitter: float = 0.1
    # benchmark
    episodes: int = 100
    workers: int = 1
    preset: Optional[str] = None
    # paths
    bundle: Optional[str] = None
    bundles: Optional[str] = None
    ckpt: Optional[str] = None
    history: Optional[str] = None
    out: Optional[str] = None

    @classmethod
    def field_types(cls) -> dict:
        converters = {}
        for f in fields(cls):
            kind = str(f.type)
            if "bool" in kind:
                converters[f.name] = _to_bool
            elif "int" in kind:
                converters[f.name] = int
            elif "float" in kind:
                converters[f.name] = float
            else:
                converters[f.name] = str
        return converters

    def merged(self, values: dict) -> "CliConfig":
        """Return a copy with `values` applied; string values are converted to the field type."""
        converters = self.field_types()
        updates = {}
        for key, value in values.items():
            if key not in converters:
                raise ConfigError(f"unknown configuration key {key!r}")
            if isinstance(value, str) and converters[key] is not str:
                try:
                    value = converters[key](value)
                except ValueError as e:
                    raise ConfigError(f"bad value for {key}: {e}") from e
            updates[key] = value
        return replace(self, **updates)

    def with_preset(self) -> "CliConfig":
        """Apply the dataset preset's (lambda1, lambda2)."""
        if self.preset is None:
            return self
        key = self.preset.lower()
        if key not in DATASET_PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(DATASET_PRESETS)}")
        lambda1, lambda2 = DATASET_PRESETS[key]
        return replace(self, lambda1=lambda1, lambda2=lambda2)

    def validate(self) -> None:
        if self.retrieval not in RETRIEVAL_MODES:
            raise ConfigError(f"retrieval must be one of {RETRIEVAL_MODES}")
        if self.tit_mode not in TIT_MODES:
            raise ConfigError(f"tit_mode must be one of {TIT_MODES}")
        if self.episodes < 1 or self.workers < 1:
            raise ConfigError("episodes and workers must be positive")
        self.to_train_config().validate()

    def to_cycle_config(self) -> CycleConfig:
        return CycleConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            k=self.k,
            tau_ce=self.tau,
            tau_soft=self.tau_soft,
            retrieval=self.retrieval,
            tit_mode=self.tit_mode,
            semantic_anchor=self.semantic_anchor,
            eps=self.eps,
        )

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            momentum=self.momentum,
            cycle=self.to_cycle_config(),
            A=self.expect_A,
            hidden=self.hidden,
            seed=self.seed,
            log_every=self.log_every,
        )

    def to_synth_spec(self) -> SynthSpec:
        return SynthSpec(
            C=self.C,
            d=self.d,
            M=self.M,
            A=self.A,
            N_support=self.shots,
            N_query=self.queries,
            signal_patches_per_image=self.signal_patches,
            signal_strength=self.strength,
            noise_sigma=self.noise,
            distractor_overlap=self.overlap,
            view_jitter_sigma=self.jitter,
            seed=self.seed,
        )


def load_config_file(path: str) -> dict:
    """
    Parse a flat UTF-8 `key = value` file.

    Blank lines and lines starting with '#' are ignored; values may be quoted.

    Returns:
        dict: Raw string values keyed by setting name.
    """
    assert isinstance(path, str), "path must be a string."
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        logger.error(f"Error reading config file {path}: {e}")
        raise IoFailure(f"cannot read {path}: {e}") from e

    values = {}
    for number, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{number}: expected key = value")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        values[key.replace("-", "_")] = value
    logger.info(f"Read {len(values)} settings from {path}")
    return values


def resolve_config(config_path: Optional[str], overrides: dict) -> CliConfig:
    """
    Defaults <- config file <- flags, then the preset, then validation.

    Explicit --lambda1/--lambda2 flags win over a preset.
    """
    cfg = CliConfig()
    if config_path:
        cfg = cfg.merged(load_config_file(config_path))
    flags = {key: value for key, value in overrides.items() if value is not None}
    cfg = cfg.merged(flags).with_preset()
    explicit = {key: flags[key] for key in ("lambda1", "lambda2") if key in flags}
    cfg = cfg.merged(explicit)
    cfg.validate()
    return cfg
