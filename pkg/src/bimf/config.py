"""JSON run configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import SplitSpec
from .evaluation import GridSpec
from .factorization import Hyperparams, ModelKind, NetworkConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CompareConfig:
    kinds: tuple[str, ...] = ("PMF", "ISFMF_ITEM", "BI_ISFMF")
    fractions: tuple[float, ...] = (0.7, 0.8)
    validation_fraction: float = 0.1
    cold_item_fraction: float = 0.0
    use_grid: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(ModelKind(k).value for k in self.kinds))
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if len(self.kinds) < 2:
            raise ValueError("compare.kinds needs at least two models")
        for f in self.fractions:
            if not 0 < f < 1:
                raise ValueError(f"training fraction {f} must be in (0, 1)")


@dataclass(frozen=True)
class SweepConfig:
    P_values: tuple[int, ...] = (1, 2, 3, 4, 5)
    repeats: int = 10
    train_fraction: float = 0.8
    cold_item_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "P_values", tuple(int(p) for p in self.P_values))
        if not self.P_values or min(self.P_values) < 1:
            raise ValueError("sweep.P_values must be positive integers")
        if self.repeats < 1:
            raise ValueError("sweep.repeats must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    data: str | None = None
    model: str = "BI_ISFMF"
    hyper: Hyperparams = field(default_factory=Hyperparams)
    split: SplitSpec = field(default_factory=SplitSpec)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    compare: CompareConfig = field(default_factory=CompareConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["hyper"].pop("seed")
        d["split"].pop("seed")
        d["network"] = self.network.to_dict()
        for key in ("grid", "compare", "sweep"):
            d[key] = {k: list(v) if isinstance(v, tuple) else v for k, v in d[key].items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# nested seeds come from the top-level "seed"
_SECTIONS = {
    "hyper": (Hyperparams, {"seed"}),
    "split": (SplitSpec, {"seed"}),
    "network": (NetworkConfig, set()),
    "grid": (GridSpec, set()),
    "compare": (CompareConfig, set()),
    "sweep": (SweepConfig, set()),
}


def _section(name, cls, raw, hidden, **extra):
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    allowed = {f.name for f in dataclasses.fields(cls)} - hidden
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    try:
        return cls(**raw, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config(raw: dict[str, Any], base_dir: Path | None = None,
                 seed: int | None = None) -> RunConfig:
    """Validate a config document.  Relative paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    if seed is None:
        seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    kwargs: dict[str, Any] = {"seed": seed}
    for name, (cls, hidden) in _SECTIONS.items():
        extra = {"seed": seed} if "seed" in hidden else {}
        kwargs[name] = _section(name, cls, raw.get(name, {}), hidden, **extra)
    try:
        kwargs["model"] = ModelKind(raw.get("model", "BI_ISFMF")).value
    except ValueError:
        raise ConfigError(f"unknown model {raw.get('model')!r}") from None
    base_dir = Path(base_dir or ".")
    for key in ("data", "output_dir"):
        if key in raw:
            if raw[key] is not None and not isinstance(raw[key], str):
                raise ConfigError(f"{key} must be a string path")
            kwargs[key] = None if raw[key] is None else str((base_dir / raw[key]).resolve())
    if "output_dir" not in kwargs:
        kwargs["output_dir"] = str((base_dir / RunConfig.output_dir).resolve())
    return RunConfig(**kwargs)


def load_config(path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw, path.parent, seed)
