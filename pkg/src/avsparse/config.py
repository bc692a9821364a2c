"""Scenario configuration (JSON) for the experiment harness."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

from avsparse.martingales import EmConfig

METHODS = ("oracle", "mixture", "plugin", "hc_bonferroni", "lrt_fixed", "hc_fixed", "mlr_fixed",
           "max_martingale")


class ConfigError(ValueError):
    pass


def _default_times() -> List[int]:
    return [1, 2, 3, 4, 5, 6, 8, 10, 12, 15, 20, 25, 30, 40, 50, 60, 70, 80]


@dataclass
class ScenarioConfig:
    """Experiment settings; the defaults reproduce the published simulation protocol.

    ``horizon`` and ``C`` default to ``2 T_star`` and ``5 T_star``.
    """

    K: List[int] = field(default_factory=lambda: [100, 1000])
    beta: List[float] = field(default_factory=lambda: [0.55, 0.85])
    T_star: float = 40.0
    alpha: float = 0.05
    horizon: Optional[int] = None
    n_mc_calibrate: int = 10_000
    n_mc_evaluate: int = 10_000
    C: Optional[float] = None
    master_seed: int = 20240917
    methods: List[str] = field(default_factory=lambda: ["oracle", "mixture", "plugin", "hc_bonferroni",
                                                        "lrt_fixed", "hc_fixed", "mlr_fixed"])
    em: EmConfig = field(default_factory=EmConfig)
    growth_K: List[int] = field(default_factory=lambda: [100, 1000, 10000])
    growth_beta: float = 0.75
    hc_table_M: int = 1_000_000
    fixed_power_times: List[int] = field(default_factory=_default_times)
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.em, dict):
            self.em = EmConfig(**self.em)
        self.validate()

    @property
    def H(self) -> int:
        return int(self.horizon) if self.horizon is not None else int(round(2 * self.T_star))

    @property
    def C_value(self) -> float:
        return float(self.C) if self.C is not None else 5.0 * self.T_star

    def validate(self) -> None:
        if not self.K or any(int(k) < 2 for k in self.K):
            raise ConfigError("K must be a nonempty list of integers >= 2")
        if not self.beta or any(not 0.0 < b <= 1.0 for b in self.beta):
            raise ConfigError("beta values must lie in (0, 1]")
        if not self.T_star > 0:
            raise ConfigError("T_star must be positive")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.n_mc_calibrate < 1 or self.n_mc_evaluate < 1 or self.hc_table_M < 1:
            raise ConfigError("Monte-Carlo sizes must be >= 1")
        if self.C is not None and not self.C > 1:
            raise ConfigError("C must exceed 1")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods: {bad}")
        if not 0.0 < self.growth_beta <= 1.0:
            raise ConfigError("growth_beta must lie in (0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def render(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def parse(cls, text: str) -> "ScenarioConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if "config" in d and isinstance(d["config"], dict):
            d = d["config"]  # a run manifest embeds its config
        return cls.from_dict(d)
