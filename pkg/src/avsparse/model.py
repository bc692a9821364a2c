"""Sparse Gaussian contamination model, its parametrization and path simulation.

Streams ``i = 1..K`` carry i.i.d. ``Normal(delta * A_i, 1)`` increments with
latent indicators ``A_i ~ Bernoulli(eps)``. Scenarios are parametrized by a
sparsity exponent ``beta`` (``eps = K**-beta``) and a reference time scale
``T_star`` (``delta = sqrt(2 ln K / T_star)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of a model quantity."""


def sparsity_from_beta(K: int, beta: float) -> float:
    """Return the anomaly fraction ``K**-beta``."""
    if K < 2:
        raise DomainError(f"K must be >= 2, got {K}")
    if not 0.0 < beta <= 1.0:
        raise DomainError(f"beta must lie in (0, 1], got {beta}")
    return float(K) ** (-beta)


def signal_from_timescale(K: int, T: float) -> float:
    """Return the mean shift ``sqrt(2 ln K / T)`` for reference time ``T``."""
    if K < 2:
        raise DomainError(f"K must be >= 2, got {K}")
    if not T > 0.0:
        raise DomainError(f"T must be positive, got {T}")
    return math.sqrt(2.0 * math.log(K) / T)


def detection_boundary(beta: float) -> float:
    """Detection boundary rho(beta) on (1/2, 1].

    The closed interval ``[3/4, 1]`` takes the second branch; both branches
    equal 1/4 there, so the function is continuous.
    """
    if not 0.5 < beta <= 1.0:
        raise DomainError(f"detection boundary is defined for beta in (1/2, 1], got {beta}")
    if beta < 0.75:
        return beta - 0.5
    return (1.0 - math.sqrt(1.0 - beta)) ** 2


@dataclass(frozen=True)
class ModelParams:
    """Scenario tuple with derived sparsity, signal and detection moment.

    ``eps_override``/``delta_override`` pin the alternative directly, which is
    needed for degenerate cases (``eps`` in ``{0, 1}``) that no ``beta``
    reaches.
    """

    K: int
    beta: float
    T_star: float
    alpha: float = 0.05
    eps_override: Optional[float] = None
    delta_override: Optional[float] = None

    def __post_init__(self):
        if self.K < 2:
            raise DomainError(f"K must be >= 2, got {self.K}")
        if self.eps_override is None and not 0.0 < self.beta <= 1.0:
            raise DomainError(f"beta must lie in (0, 1], got {self.beta}")
        if not self.T_star > 0.0:
            raise DomainError(f"T_star must be positive, got {self.T_star}")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.eps_override is not None and not 0.0 <= self.eps_override <= 1.0:
            raise DomainError(f"eps must lie in [0, 1], got {self.eps_override}")

    @classmethod
    def direct(cls, K: int, eps: float, delta: float, alpha: float = 0.05) -> "ModelParams":
        """Build params from an explicit ``(eps, delta)`` alternative."""
        T = 2.0 * math.log(K) / delta**2 if delta > 0 else math.inf
        beta = math.log(1.0 / eps) / math.log(K) if 0.0 < eps < 1.0 else float("nan")
        return cls(K, beta, T, alpha, eps_override=eps, delta_override=delta)

    @property
    def eps(self) -> float:
        if self.eps_override is not None:
            return self.eps_override
        return sparsity_from_beta(self.K, self.beta)

    @property
    def delta(self) -> float:
        if self.delta_override is not None:
            return self.delta_override
        return signal_from_timescale(self.K, self.T_star)


def detection_moment(params: ModelParams) -> float:
    """Detection moment ``T_star * rho(beta)``."""
    return params.T_star * detection_boundary(params.beta)


def max_power(alpha: float, params: ModelParams) -> float:
    """Power ceiling ``alpha (1-eps)^K + 1 - (1-eps)^K`` of any level-alpha test."""
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    eps = params.eps
    if eps >= 1.0:
        p_clean = 0.0
    else:
        p_clean = math.exp(params.K * math.log1p(-eps))
    return alpha * p_clean + 1.0 - p_clean


@dataclass
class StreamState:
    """Running per-stream sums ``S_{i,t}`` after ``t`` steps."""

    t: int
    sums: np.ndarray

    @classmethod
    def initial(cls, K: int) -> "StreamState":
        return cls(0, np.zeros(K))

    @property
    def K(self) -> int:
        return self.sums.shape[0]

    @property
    def z(self) -> np.ndarray:
        """Standardized sums ``S_{i,t} / sqrt(t)``."""
        if self.t < 1:
            raise ValueError("standardized sums are undefined at t = 0")
        return self.sums / math.sqrt(self.t)


def advance(state: StreamState, increments_row) -> StreamState:
    """Return the state after one more time step of increments."""
    row = np.asarray(increments_row, dtype=float)
    if row.shape != state.sums.shape:
        raise ValueError(f"increment row has shape {row.shape}, expected {state.sums.shape}")
    return StreamState(state.t + 1, state.sums + row)


@dataclass
class PathBundle:
    """One simulated realization: latent indicators and time-major increments."""

    params: ModelParams
    indicators: np.ndarray
    increments: np.ndarray  # shape (horizon, K); row s holds X_{., s+1}
    seed: int
    force_null: bool = False
    _sums: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def horizon(self) -> int:
        return self.increments.shape[0]

    @property
    def K(self) -> int:
        return self.increments.shape[1]

    def cumulative_sums(self) -> np.ndarray:
        """Matrix of ``S_{i,t}``, row ``t-1`` for time ``t``."""
        if self._sums is None:
            self._sums = np.cumsum(self.increments, axis=0)
        return self._sums

    def states(self, horizon: Optional[int] = None):
        """Yield the stream states for ``t = 1..horizon``."""
        horizon = self.horizon if horizon is None else horizon
        state = StreamState.initial(self.K)
        for s in range(horizon):
            state = advance(state, self.increments[s])
            yield state

    def to_csv(self, fh) -> None:
        """Write the path in long format: ``t, stream, indicator, x``."""
        fh.write("t,stream,indicator,x\n")
        for s in range(self.horizon):
            for i in range(self.K):
                fh.write(f"{s + 1},{i},{int(self.indicators[i])},{float(self.increments[s, i])!r}\n")


def path_seed(master_seed: int, index: int, *tags: int) -> int:
    """64-bit seed of path ``index`` as a pure function of the master seed.

    Extra integer ``tags`` separate independent families of paths (for
    example calibration versus evaluation paths).
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(*map(int, tags), int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


def generate_path(params: ModelParams, horizon: int, seed: int, force_null: bool = False) -> PathBundle:
    """Simulate ``horizon`` steps of all ``K`` streams.

    Indicator uniforms are drawn even under ``force_null`` so that a null and
    an alternative path built from the same seed share their noise.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    rng = np.random.default_rng(seed)
    draws = rng.random(params.K)
    noise = rng.standard_normal((horizon, params.K))
    if force_null:
        indicators = np.zeros(params.K, dtype=np.int8)
    else:
        indicators = (draws < params.eps).astype(np.int8)
        if indicators.any():
            noise[:, indicators == 1] += params.delta
    return PathBundle(params, indicators, noise, int(seed), force_null)
