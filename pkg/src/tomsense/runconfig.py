"""Experiment-level configuration, loaded from JSON with strict validation."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .evaluation import DEFAULT_KAPPA_GRID, DEFAULT_LOCALIZATION_LENGTHS, parse_grid
from .model import ALL_TOKENS, FINAL_TOKEN, LOSS_MODES
from .rope import HALF_SPLIT, INTERLEAVED


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model_config: str = None  # path to a model config JSON, or None for defaults
    rope_base: float = 50000.0
    rope_layout: str = HALF_SPLIT
    kappa_grid: str = DEFAULT_KAPPA_GRID
    task_loss_mode: str = FINAL_TOKEN
    general_loss_mode: str = ALL_TOKENS
    seeds: tuple = (0,)
    sink_threshold: float = 0.01
    localization_n: int = 100
    localization_lengths: tuple = DEFAULT_LOCALIZATION_LENGTHS
    task_samples: int = 512
    general_samples: int = 2048
    general_window: int = 64
    ppl_window: int = 64
    deterministic: bool = True
    threads: int = 1
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "localization_lengths", tuple(int(n) for n in self.localization_lengths))
        if not self.rope_base > 1:
            raise RunConfigError("rope_base must be > 1")
        if self.rope_layout not in (HALF_SPLIT, INTERLEAVED):
            raise RunConfigError(f"rope_layout must be {HALF_SPLIT!r} or {INTERLEAVED!r}")
        try:
            grid = parse_grid(self.kappa_grid)
        except ValueError as e:
            raise RunConfigError(str(e)) from None
        if any(not 0 <= k <= 1 for k in grid):
            raise RunConfigError("kappa grid must lie in [0, 1]")
        for name in ("task_loss_mode", "general_loss_mode"):
            if getattr(self, name) not in LOSS_MODES:
                raise RunConfigError(f"{name} must be one of {LOSS_MODES}")
        if not self.seeds:
            raise RunConfigError("at least one seed required")
        if not 0 < self.sink_threshold < 1:
            raise RunConfigError("sink_threshold must lie in (0, 1)")
        for name in ("localization_n", "task_samples", "general_samples", "threads"):
            if getattr(self, name) < 1:
                raise RunConfigError(f"{name} must be >= 1")
        if self.general_window < 2 or self.ppl_window < 2:
            raise RunConfigError("windows must be >= 2 tokens")
        if not self.localization_lengths or min(self.localization_lengths) < 1:
            raise RunConfigError("localization lengths must be positive")
        if not isinstance(self.deterministic, bool):
            raise RunConfigError("deterministic must be a boolean")

    @property
    def grid(self) -> list:
        return parse_grid(self.kappa_grid)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["localization_lengths"] = list(self.localization_lengths)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise RunConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise RunConfigError(f"unknown run config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as e:
            raise RunConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            try:
                return cls.from_dict(json.load(f))
            except json.JSONDecodeError as e:
                raise RunConfigError(f"{path}: {e}") from None
