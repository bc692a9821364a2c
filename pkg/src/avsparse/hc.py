"""Higher Criticism and the fixed-sample (snapshot) tests built on it."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy import special

from avsparse import _kernels
from avsparse.martingales import GridPrior, ParamPair, log_lr, log_lr_batch, log_mixture, log_mixture_batch
from avsparse.model import ModelParams, StreamState, generate_path, path_seed


class DegenerateError(ValueError):
    """Raised when a p-value equals 0 or 1 exactly."""


@dataclass
class UVector:
    """Upper-tail p-values ``u_i = P(N(0,1) > Z_i)``.

    ``complement`` carries ``1 - u_i`` computed directly from ``Z`` so that
    p-values close to one keep their relative accuracy.
    """

    u: np.ndarray
    complement: Optional[np.ndarray] = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        if self.complement is None:
            self.complement = 1.0 - self.u
        else:
            self.complement = np.asarray(self.complement, dtype=float)


def upper_tail(z) -> np.ndarray:
    """Standard normal survival function, accurate deep into the upper tail."""
    return special.ndtr(-np.asarray(z, dtype=float))


def u_values(state: StreamState) -> UVector:
    z = state.z
    return UVector(special.ndtr(-z), special.ndtr(z))


def hc_statistic(u: Union[UVector, np.ndarray]) -> float:
    """``max_i sqrt(K) (F(u_i) - u_i) / sqrt(u_i (1 - u_i))`` with ECDF ``F``."""
    if not isinstance(u, UVector):
        u = UVector(u)
    vals = u.u
    comp = u.complement
    if np.any(vals <= 0.0) or np.any(comp <= 0.0):
        raise DegenerateError("HC is undefined when some p-value is exactly 0 or 1")
    order = np.argsort(vals, kind="stable")
    return float(_kernels.hc_sorted_rows(vals[order][None, :], comp[order][None, :])[0])


def hc_batch(z: np.ndarray) -> np.ndarray:
    """HC of each row of standardized sums ``z`` (paths x streams)."""
    z = np.asarray(z, dtype=float)
    z_sorted = -np.sort(-z, axis=1)  # descending z == ascending u
    u = special.ndtr(-z_sorted)
    uc = special.ndtr(z_sorted)
    if np.any(u <= 0.0) or np.any(uc <= 0.0):
        raise DegenerateError("HC is undefined when some p-value is exactly 0 or 1")
    return _kernels.hc_sorted_rows(np.ascontiguousarray(u), np.ascontiguousarray(uc))


class StatisticKind(str, enum.Enum):
    LRT = "LRT"
    HC = "HC"
    MLR = "MLR"


@dataclass
class FixedSampleTest:
    """Snapshot test at time ``t``: reject when the statistic is at least ``threshold``.

    The LRT statistic is ``ln E_t(eps, delta)``, the MLR statistic is
    ``ln E_t(Pi)`` and HC is the Higher Criticism statistic.
    """

    statistic_kind: StatisticKind
    t: int
    threshold: float
    calibration: Optional[object] = None

    def __post_init__(self):
        self.statistic_kind = StatisticKind(self.statistic_kind)
        cal = self.calibration
        if cal is not None and getattr(cal, "horizon", self.t) != self.t:
            raise ValueError("calibration record was made at a different t")


def statistic(kind: StatisticKind, state: StreamState, lr_params=None) -> float:
    kind = StatisticKind(kind)
    if kind is StatisticKind.HC:
        return hc_statistic(u_values(state))
    if kind is StatisticKind.LRT:
        return log_lr(lr_params, state)
    return log_mixture(lr_params, state)


def statistic_batch(kind: StatisticKind, sums: np.ndarray, t: int, lr_params=None) -> np.ndarray:
    """Statistic for each row of a (paths x streams) sum matrix at time ``t``."""
    kind = StatisticKind(kind)
    if kind is StatisticKind.HC:
        return hc_batch(np.asarray(sums) / math.sqrt(t))
    if kind is StatisticKind.LRT:
        return log_lr_batch(lr_params.eps, lr_params.delta, sums, t)
    return log_mixture_batch(lr_params, sums, t)


def fixed_sample_reject(test: FixedSampleTest, state: StreamState,
                        params_for_lr: Union[ParamPair, GridPrior, None] = None) -> bool:
    if state.t != test.t:
        raise ValueError(f"test is for t = {test.t}, state is at t = {state.t}")
    if test.threshold == -math.inf:
        return True
    if test.threshold == math.inf:
        return False
    return statistic(test.statistic_kind, state, params_for_lr) >= test.threshold


def estimate_power(test: FixedSampleTest, params: ModelParams, n_mc: int, seed: int,
                   params_for_lr: Union[ParamPair, GridPrior, None] = None,
                   force_null: bool = False) -> Tuple[float, float]:
    """Monte-Carlo rejection rate of a snapshot test and its binomial SE.

    Path ``i`` uses the substream ``path_seed(seed, i)``.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    sums = np.empty((n_mc, params.K))
    for i in range(n_mc):
        path = generate_path(params, test.t, path_seed(seed, i), force_null=force_null)
        sums[i] = path.cumulative_sums()[test.t - 1]
    stats = statistic_batch(test.statistic_kind, sums, test.t, params_for_lr)
    power = float(np.mean(stats >= test.threshold))
    return power, math.sqrt(power * (1.0 - power) / n_mc)
