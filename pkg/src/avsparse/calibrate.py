"""Monte-Carlo calibration of rejection thresholds and the HC null quantile table."""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from avsparse.hc import StatisticKind, statistic_batch
from avsparse.model import ModelParams
from avsparse.simulate import (
    TAG_CALIBRATE,
    TAG_HC_TABLE,
    MartingaleSpec,
    cached_grid,
    hc_trajectories,
    log_trajectories,
    sums_at,
)


class InsufficientSamplesWarning(UserWarning):
    pass


class Target(str, enum.Enum):
    AV_RUNNING_MAX = "AV_running_max"
    FIXED_SAMPLE = "fixed_sample"


def upper_rank(n: int, alpha: float) -> int:
    """1-based rank ``max(1, ceil((1 - alpha) n))`` of the upper quantile."""
    # round away float noise such as (1 - 0.05) * 100 = 95.00000000000001
    return max(1, math.ceil(round((1.0 - alpha) * n, 9)))


def upper_quantile(samples, alpha: float) -> float:
    """Empirical ``(1 - alpha)`` quantile: order statistic at ``upper_rank``."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("no samples")
    k = upper_rank(x.size, alpha) - 1
    return float(np.partition(x, k)[k])


@dataclass
class CalibratedThreshold:
    """A Monte-Carlo threshold with its provenance.

    ``log_value`` is authoritative; ``value = exp(log_value)`` may overflow
    to ``inf`` for statistics that are not on the log scale (``statistic``
    names the quantity, for HC ``log_value`` holds the raw HC value).
    """

    log_value: float
    alpha: float
    n_mc: int
    horizon: int
    master_seed: int
    target: Target
    statistic: str
    K: int

    @property
    def value(self) -> float:
        try:
            return math.exp(self.log_value)
        except OverflowError:
            return math.inf

    def to_json(self) -> str:
        d = asdict(self)
        d["target"] = Target(self.target).value
        d["value"] = self.value
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibratedThreshold":
        d = json.loads(text)
        d.pop("value", None)
        d["target"] = Target(d["target"])
        return cls(**d)


def _check_budget(n: int, alpha: float, what: str):
    if n * alpha < 10:
        warnings.warn(f"{what}: n*alpha = {n * alpha:g} < 10, the quantile is poorly resolved",
                      InsufficientSamplesWarning, stacklevel=3)


def running_max_log(traj: np.ndarray) -> np.ndarray:
    """Per-path ``max(0, max_t ln E_t)``; the 0 is ``E_0 = 1``."""
    return np.maximum(0.0, np.nanmax(traj, axis=1))


def calibrate_av(spec: MartingaleSpec, K: int, horizon: int, alpha: float, n_mc: int,
                 master_seed: int, workers: int = 1, trajectories: Optional[np.ndarray] = None
                 ) -> CalibratedThreshold:
    """AV threshold: upper ``alpha`` quantile of ``sup_{t <= horizon} E_t`` under the null.

    ``trajectories`` may pass precomputed null log trajectories of the same
    paths (the cached route used by the experiment layer).
    """
    if n_mc < 1 or horizon < 1:
        raise ValueError("n_mc and horizon must be >= 1")
    _check_budget(n_mc, alpha, "calibrate_av")
    if trajectories is None:
        trajectories = null_trajectories(spec, horizon, n_mc, master_seed, workers)
    maxima = running_max_log(trajectories[:, :horizon])
    return CalibratedThreshold(upper_quantile(maxima, alpha), alpha, n_mc, horizon, int(master_seed),
                               Target.AV_RUNNING_MAX, spec.kind, K)


def null_params(K: int) -> ModelParams:
    # any valid scenario works: null paths never read eps or delta
    return ModelParams(K, 1.0, 1.0)


def null_trajectories(spec: MartingaleSpec, horizon: int, n_mc: int, master_seed: int,
                      workers: int = 1) -> np.ndarray:
    return log_trajectories(spec, null_params(spec.K), horizon, n_mc, master_seed, TAG_CALIBRATE,
                            True, workers=workers)


@dataclass(frozen=True)
class StatisticSpec:
    """Fixed-sample statistic: HC, or LRT/MLR backed by a martingale spec."""

    kind: StatisticKind
    K: int
    martingale: Optional[MartingaleSpec] = None

    def lr_params(self):
        if self.kind is StatisticKind.HC:
            return None
        m = self.martingale
        if self.kind is StatisticKind.LRT:
            from avsparse.martingales import ParamPair
            return ParamPair(m.eps, m.delta)
        return cached_grid(m.K, float(m.C))


def calibrate_fixed(spec: StatisticSpec, K: int, t: int, alpha: float, n_mc: int, master_seed: int
                    ) -> CalibratedThreshold:
    """Snapshot threshold: upper ``alpha`` quantile of the statistic at time ``t``."""
    if n_mc < 1 or t < 1:
        raise ValueError("n_mc and t must be >= 1")
    _check_budget(n_mc, alpha, "calibrate_fixed")
    sums = sums_at(null_params(K), t, n_mc, master_seed, TAG_CALIBRATE, True)
    stats = statistic_batch(spec.kind, sums, t, spec.lr_params())
    return CalibratedThreshold(upper_quantile(stats, alpha), alpha, n_mc, t, int(master_seed),
                               Target.FIXED_SAMPLE, StatisticKind(spec.kind).value, K)


@dataclass
class QuantileTable:
    """Sorted null HC draws with upper-tail lookup ``alpha' -> sample[ceil((1-alpha')M)]``."""

    sorted_samples: np.ndarray
    K: int
    master_seed: int

    @property
    def M(self) -> int:
        return self.sorted_samples.shape[0]

    @property
    def smallest_reliable_level(self) -> float:
        return 10.0 / self.M

    def lookup(self, alpha_prime) -> Union[float, np.ndarray]:
        a = np.asarray(alpha_prime, dtype=float)
        ranks = np.maximum(1, np.ceil(np.round((1.0 - a) * self.M, 9))).astype(np.int64)
        ranks = np.minimum(ranks, self.M)
        out = self.sorted_samples[ranks - 1]
        return float(out) if out.ndim == 0 else out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# K={self.K} M={self.M} master_seed={self.master_seed}\n")
            np.savetxt(fh, self.sorted_samples, fmt="%.17g")

    @classmethod
    def load(cls, path) -> "QuantileTable":
        with open(path, encoding="utf-8") as fh:
            head = fh.readline().lstrip("#").split()
            meta = dict(item.split("=") for item in head)
            samples = np.loadtxt(fh, ndmin=1)
        return cls(samples, int(meta["K"]), int(meta["master_seed"]))


def build_hc_quantile_table(K: int, M: int, master_seed: int, workers: int = 1) -> QuantileTable:
    """``M`` null HC draws at ``t = 1`` (the null law of ``HC_t`` does not depend on ``t``)."""
    if M < 100_000:
        warnings.warn(f"M = {M} < 1e5 leaves the deep tail unresolved", InsufficientSamplesWarning,
                      stacklevel=2)
    draws = hc_trajectories(null_params(K), 1, M, master_seed, TAG_HC_TABLE, True, workers)[:, 0]
    return QuantileTable(np.sort(draws), K, int(master_seed))
