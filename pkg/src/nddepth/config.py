"""Run configuration: ``key = value`` files with CLI overrides."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import LossWeights
from .refinement import RefineConfig
from .segmentation import DEFAULT_K, MIN_REGION_SIZE
from .geometry import DENOM_EPS


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    refine: RefineConfig = field(default_factory=RefineConfig)
    felzenszwalb_k: float = DEFAULT_K
    min_region_size: int = MIN_REGION_SIZE
    denom_eps: float = DENOM_EPS
    seed: int = 0

    def __post_init__(self):
        if not self.felzenszwalb_k > 0:
            raise ConfigError("felzenszwalb_k must be positive")
        if self.min_region_size < 0:
            raise ConfigError("min_region_size must be non-negative")
        if not self.denom_eps > 0:
            raise ConfigError("denom_eps must be positive")
        # the multiscale depth loss sums over every refinement iterate
        if self.weights.m_steps != self.refine.t_max:
            raise ConfigError(f"m_steps ({self.weights.m_steps}) must equal t_max ({self.refine.t_max})")

    def flat(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for f in fields(self.weights):
            out[f.name] = getattr(self.weights, f.name)
        for f in fields(self.refine):
            out[f.name] = getattr(self.refine, f.name)
        for key in ("felzenszwalb_k", "min_region_size", "denom_eps", "seed"):
            out[key] = getattr(self, key)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.flat().items())


_INT_KEYS = {"m_steps", "proj_channels", "context_channels", "hidden_channels", "t_max",
             "min_region_size", "seed"}


def known_keys() -> set[str]:
    return set(RunConfig().flat())


def parse_config_text(text: str) -> dict[str, float | int]:
    out: dict[str, float | int] = {}
    keys = known_keys()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in keys:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = int(value) if key in _INT_KEYS else float(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
    return out


def build_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then non-None ``overrides``."""
    values: dict = RunConfig().flat()
    given: set[str] = set()
    if path is not None:
        parsed = parse_config_text(Path(path).read_text())
        values.update(parsed)
        given.update(parsed)
    for k, v in (overrides or {}).items():
        if v is not None:
            if k not in values:
                raise ConfigError(f"unknown key {k!r}")
            values[k] = v
            given.add(k)
    # setting only one of the two iteration counts sets both
    if "t_max" in given and "m_steps" not in given:
        values["m_steps"] = values["t_max"]
    elif "m_steps" in given and "t_max" not in given:
        values["t_max"] = values["m_steps"]
    try:
        weights = LossWeights(**{f.name: values[f.name] for f in fields(LossWeights)})
        refine = RefineConfig(**{f.name: values[f.name] for f in fields(RefineConfig)})
        return RunConfig(weights, refine, values["felzenszwalb_k"], int(values["min_region_size"]),
                         values["denom_eps"], int(values["seed"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
