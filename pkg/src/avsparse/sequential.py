"""Anytime-valid stopping rules and stopping-time summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from avsparse.calibrate import QuantileTable
from avsparse.hc import hc_statistic, u_values
from avsparse.martingales import LogMartingale
from avsparse.model import ModelParams, PathBundle, generate_path, max_power, path_seed

INFINITY = math.inf


@dataclass
class StoppingRecord:
    """First crossing time ``tau`` (``INFINITY`` when no crossing by the horizon)."""

    tau: float
    hit: bool
    trajectory: Optional[np.ndarray] = None


def first_crossing(values: np.ndarray, log_threshold) -> StoppingRecord:
    """Stopping record for a trajectory ``values[t-1]`` and a (possibly per-t) threshold."""
    hit = np.asarray(values >= log_threshold)
    if hit.any():
        return StoppingRecord(int(np.argmax(hit)) + 1, True)
    return StoppingRecord(INFINITY, False)


def stopping_times(traj: np.ndarray, log_threshold) -> np.ndarray:
    """Vectorized first crossings of each row; ``inf`` where no row entry crosses.

    NaN entries (unevaluated steps after an earlier crossing) never cross.
    """
    with np.errstate(invalid="ignore"):
        hit = traj >= log_threshold
    any_hit = hit.any(axis=1)
    tau = np.where(any_hit, hit.argmax(axis=1) + 1, 0).astype(float)
    tau[~any_hit] = INFINITY
    return tau


def run_stopping(evaluator: LogMartingale, log_threshold: float, path: PathBundle, horizon: int,
                 keep_trajectory: bool = False) -> StoppingRecord:
    """Monitor ``ln E_t`` along ``path`` and stop at the first ``ln E_t >= log_threshold``."""
    if horizon > path.horizon:
        raise ValueError(f"horizon {horizon} exceeds the path length {path.horizon}")
    evaluator.reset()
    traj = [] if keep_trajectory else None
    for state in path.states(horizon):
        v = evaluator.update(state)
        if traj is not None:
            traj.append(v)
        if v >= log_threshold:
            return StoppingRecord(state.t, True, None if traj is None else np.array(traj))
    return StoppingRecord(INFINITY, False, None if traj is None else np.array(traj))


@dataclass
class StoppingSummary:
    """Empirical law of stopping times truncated at ``horizon``."""

    taus: np.ndarray
    horizon: int
    gamma_max: float
    ecdf: Dict[int, float] = field(default_factory=dict)
    n_q: Dict[float, Optional[int]] = field(default_factory=dict)
    truncated_mean: Dict[int, float] = field(default_factory=dict)

    def rate(self, t: int) -> float:
        return float(np.mean(self.taus <= t))

    def mean_truncated(self, n: int) -> float:
        return float(np.mean(np.minimum(self.taus, n)))


def _as_taus(records) -> np.ndarray:
    if isinstance(records, np.ndarray):
        return records.astype(float)
    return np.array([getattr(r, "tau", r) for r in records], dtype=float)


def n_for_fraction(curve: np.ndarray, target: float) -> Optional[int]:
    """Smallest ``n`` (1-based) with ``curve[n-1] >= target``; ``None`` if never."""
    ok = np.flatnonzero(np.asarray(curve) >= target)
    return int(ok[0]) + 1 if ok.size else None


def summarize(records, params: ModelParams, alpha: float, horizon: Optional[int] = None,
              fractions: Sequence[float] = (0.8,)) -> StoppingSummary:
    """ECDF, ``n(q) = min{n : ecdf(n) >= q gamma_max}`` and ``E[tau ^ n(q)]``."""
    taus = _as_taus(records)
    if taus.size == 0:
        raise ValueError("records must be nonempty")
    if horizon is None:
        finite = taus[np.isfinite(taus)]
        horizon = int(finite.max()) if finite.size else 1
    gmax = max_power(alpha, params)
    ecdf = {t: float(np.mean(taus <= t)) for t in range(1, horizon + 1)}
    curve = np.array([ecdf[t] for t in range(1, horizon + 1)])
    s = StoppingSummary(taus, horizon, gmax, ecdf)
    for q in fractions:
        n = n_for_fraction(curve, q * gmax)
        s.n_q[q] = n
        if n is not None:
            s.truncated_mean[n] = s.mean_truncated(n)
    return s


@dataclass
class BonferroniSchedule:
    """Level split ``w_t = 1/(t(t+1))`` over time and an HC null quantile table."""

    quantile_table: QuantileTable

    @staticmethod
    def weight(t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return 1.0 / (t * (t + 1.0))

    def thresholds(self, alpha: float, horizon: int) -> np.ndarray:
        """``h_M(w_t alpha)`` for ``t = 1..horizon``."""
        t = np.arange(1, horizon + 1)
        return np.asarray(self.quantile_table.lookup(self.weight(t) * alpha))


def bonferroni_hc_run(schedule: BonferroniSchedule, alpha: float, path: PathBundle, horizon: int
                      ) -> StoppingRecord:
    """Stop at the first ``t`` with ``HC_t >= h_M(w_t alpha)``."""
    thr = schedule.thresholds(alpha, horizon)
    for state in path.states(horizon):
        if hc_statistic(u_values(state)) >= thr[state.t - 1]:
            return StoppingRecord(state.t, True)
    return StoppingRecord(INFINITY, False)


@dataclass
class RejectionCurve:
    t: np.ndarray
    rate: np.ndarray
    se: np.ndarray
    n_mc: int

    def to_csv(self, fh) -> None:
        fh.write("t,rate,se\n")
        for t, r, s in zip(self.t, self.rate, self.se):
            fh.write(f"{int(t)},{float(r)!r},{float(s)!r}\n")


def curve_from_taus(taus: np.ndarray, horizon: int) -> RejectionCurve:
    taus = np.asarray(taus, dtype=float)
    t = np.arange(1, horizon + 1)
    rate = (taus[None, :] <= t[:, None]).mean(axis=1)
    n = taus.size
    return RejectionCurve(t, rate, np.sqrt(rate * (1.0 - rate) / n), n)


def cumulative_rejection_curve(runner: Callable[[PathBundle], StoppingRecord], params: ModelParams,
                               horizon: int, n_mc: int, seed: int, force_null: bool = False
                               ) -> RejectionCurve:
    """Monte-Carlo ``t -> P(tau <= t)`` with binomial SE; path ``i`` uses ``path_seed(seed, i)``."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    taus = np.empty(n_mc)
    for i in range(n_mc):
        path = generate_path(params, horizon, path_seed(seed, i), force_null)
        taus[i] = runner(path).tau
    return curve_from_taus(taus, horizon)


def write_stopping_csv(fh, taus: Iterable[float], seeds: Iterable[int]) -> None:
    fh.write("path_id,seed,tau,hit\n")
    for i, (tau, seed) in enumerate(zip(taus, seeds)):
        hit = math.isfinite(tau)
        fh.write(f"{i},{int(seed)},{int(tau) if hit else 'inf'},{int(hit)}\n")
