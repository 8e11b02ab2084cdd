import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

from . import defaults
from .common import ConfigError, DataFormatError, Split

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    epochs: int = defaults.epochs
    batch_size: int = defaults.batch_size
    lr: float = defaults.lr
    lr_drop_points: tuple[float, ...] = defaults.lr_drop_points
    lr_drop_factor: float = defaults.lr_drop_factor
    momentum: float = defaults.momentum
    weight_decay: float = defaults.weight_decay
    alpha_grid: tuple[float, ...] = defaults.alpha_grid
    # retraining budget per alpha trial; defaults to the baseline budget
    retrain_epochs: Optional[int] = None
    acceptance_epsilon: float = 0.0
    max_rollbacks: int = defaults.max_rollbacks
    seed: int = 0
    snapshot_epochs: tuple[int, ...] = ()
    finetune_epochs: int = 0
    gate_split: str = Split.EVAL.value
    keep_pruned_weights: bool = False
    eval_batch_size: int = defaults.eval_batch_size
    hist_bins: int = defaults.hist_bins
    progress: bool = True

    def __post_init__(self):
        for name in ("lr_drop_points", "alpha_grid", "snapshot_epochs"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    @property
    def effective_retrain_epochs(self) -> int:
        return self.epochs if self.retrain_epochs is None else self.retrain_epochs

    def validate(self):
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.retrain_epochs is not None and self.retrain_epochs < 0:
            raise ConfigError("retrain_epochs must be >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive: {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1): {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not all(0 < p < 1 for p in self.lr_drop_points):
            raise ConfigError(f"lr_drop_points must lie in (0, 1): {self.lr_drop_points}")
        grid = self.alpha_grid
        if not grid or any(a <= 0 for a in grid):
            raise ConfigError(f"alpha_grid must be non-empty and positive: {grid}")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError(f"alpha_grid must be strictly ascending: {grid}")
        if self.acceptance_epsilon < 0:
            raise ConfigError("acceptance_epsilon must be >= 0")
        if self.max_rollbacks < 0:
            raise ConfigError("max_rollbacks must be >= 0")
        if any(e < 0 for e in self.snapshot_epochs):
            raise ConfigError("snapshot_epochs must be >= 0")
        if self.hist_bins < 1:
            raise ConfigError("hist_bins must be >= 1")
        try:
            Split(self.gate_split)
        except ValueError:
            raise ConfigError(f"gate_split must be 'train' or 'eval': {self.gate_split}") from None


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value: Any):
    default = getattr(RunConfig, name, None)
    kind = type(default)
    try:
        if name == "retrain_epochs":
            return None if value is None else int(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            item = int if name == "snapshot_epochs" else float
            return tuple(item(v) for v in value)
        if kind is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                return value.lower() == "true"
            return bool(value)
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"Invalid value for '{name}': {value!r}") from None


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    changes = {}
    for key, value in overrides.items():
        name = key.replace("-", "_")
        if name not in _FIELDS:
            raise ConfigError(f"Unknown config key: '{key}'")
        if value is None:
            continue
        changes[name] = _coerce(name, value)
    return replace(config, **changes)


def load_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Reads a flat key = value TOML file; ``overrides`` win over file values."""
    config = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as f:
                values = tomllib.load(f)
        except OSError as e:
            raise ConfigError(f"Cannot read config '{path}': {e}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Invalid config '{path}': {e}") from e
        nested = [k for k, v in values.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"Config tables are not supported: {nested}")
        config = apply_overrides(config, values)
        logger.debug("loaded config from %s", path)
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return str(value)


def dump_config(config: RunConfig, path) -> Path:
    """Writes the effective config in field order; ``None`` values are omitted."""
    path = Path(path)
    lines = [
        f"{name} = {_toml_value(value)}"
        for name, value in asdict(config).items()
        if value is not None
    ]
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    except OSError as e:
        raise DataFormatError(f"Cannot write '{path}': {e}") from e
    return path
