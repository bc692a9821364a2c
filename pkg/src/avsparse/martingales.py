"""Log-space test martingales for the sparse Gaussian streams model.

Every family is evaluated from the running stream sums alone:

* ``log_lr``: the likelihood ratio against a fixed ``(eps, delta)``; at the
  true parameters this is the oracle martingale.
* ``log_mixture``: the uniform mixture of likelihood ratios over the
  adaptive grid built by ``build_grid``.
* ``PluginMartingale``: prequential plug-in with EM estimates fitted on the
  data strictly before the current step.
* ``log_max_martingale``: the soft-max of single-stream likelihood ratios.

The ``*Martingale`` classes expose the sequential interface used by the
runners: ``reset()`` before a path, then ``update(state)`` for
``t = 1, 2, ...`` returning ``ln E_t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from avsparse import _kernels
from avsparse.model import DomainError, StreamState


@dataclass(frozen=True)
class ParamPair:
    eps: float
    delta: float

    def __post_init__(self):
        if not 0.0 < self.eps <= 1.0:
            raise DomainError(f"eps must lie in (0, 1], got {self.eps}")
        if not self.delta > 0.0:
            raise DomainError(f"delta must be positive, got {self.delta}")


def log_lr_stream(pair: ParamPair, S_i: float, t: int) -> float:
    """``ln(1 - eps + eps exp(delta S_i - t delta^2 / 2))`` without overflow."""
    if t < 1:
        raise ValueError("t must be >= 1")
    eps, delta = pair.eps, pair.delta
    a = delta * S_i - 0.5 * t * delta * delta
    if eps == 1.0:
        return a
    if a > 0.0:
        return a + math.log(eps + (1.0 - eps) * math.exp(-a))
    return math.log1p(eps * math.expm1(a))


def _log_lr_terms(eps: float, delta: float, sums: np.ndarray, t: float) -> np.ndarray:
    a = delta * sums - 0.5 * t * delta * delta
    if eps == 1.0:
        return a
    return np.logaddexp(math.log1p(-eps), math.log(eps) + a)


def log_lr(pair: ParamPair, state: StreamState) -> float:
    """``ln E_t(eps, delta)``: the sum of per-stream log likelihood ratios."""
    if state.t < 1:
        raise ValueError("log_lr needs t >= 1")
    return float(np.sum(_log_lr_terms(pair.eps, pair.delta, state.sums, state.t)))


def log_lr_batch(eps: float, delta: float, sums: np.ndarray, t: int) -> np.ndarray:
    """``ln E_t(eps, delta)`` for each row of a (paths x streams) sum matrix."""
    return _log_lr_terms(eps, delta, np.asarray(sums, dtype=float), t).sum(axis=-1)


def log_max_martingale(pair: ParamPair, state: StreamState) -> float:
    """``ln[(1-eps) + (eps/K) sum_i exp(delta S_i - t delta^2/2)]``."""
    if state.t < 1:
        raise ValueError("log_max_martingale needs t >= 1")
    return float(log_max_batch(pair.eps, pair.delta, state.sums[None, :], state.t)[0])


def log_max_batch(eps: float, delta: float, sums: np.ndarray, t: int) -> np.ndarray:
    sums = np.asarray(sums, dtype=float)
    K = sums.shape[-1]
    a = delta * sums - 0.5 * t * delta * delta
    lse = np.logaddexp.reduce(a, axis=-1) - math.log(K)
    if eps == 0.0:
        return np.zeros(sums.shape[:-1])
    if eps == 1.0:
        return lse
    return np.logaddexp(math.log1p(-eps), math.log(eps) + lse)


@dataclass(frozen=True)
class GridPrior:
    """Uniform prior on the discrete ``(eps, delta)`` grid.

    Pairs are stored grouped by distinct delta so the evaluator can share
    one exponential per (delta, stream).
    """

    pairs: Tuple[ParamPair, ...]
    log_weight: float
    C: float
    K: int
    betas: Tuple[float, ...] = field(repr=False)
    eps: np.ndarray = field(repr=False, compare=False)
    delta: np.ndarray = field(repr=False, compare=False)
    _deltas: np.ndarray = field(repr=False, compare=False)
    _group_start: np.ndarray = field(repr=False, compare=False)
    _group_log_r_max: np.ndarray = field(repr=False, compare=False)
    _order: np.ndarray = field(repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def from_pairs(cls, K: int, pairs: Sequence[ParamPair], C: float = math.nan,
                   betas: Optional[Sequence[float]] = None) -> "GridPrior":
        """Uniform prior on an explicit list of pairs (duplicates are dropped)."""
        uniq, seen = [], set()
        for p in pairs:
            if (p.eps, p.delta) not in seen:
                seen.add((p.eps, p.delta))
                uniq.append(p)
        if not uniq:
            raise DomainError("a grid needs at least one pair")
        if betas is None:
            lk = math.log(K)
            betas = [-math.log(p.eps) / lk for p in uniq]
        eps_arr = np.array([p.eps for p in uniq])
        delta_arr = np.array([p.delta for p in uniq])
        order = np.lexsort((eps_arr, delta_arr))
        deltas, starts = np.unique(delta_arr[order], return_index=True)
        group_start = np.append(starts, len(uniq)).astype(np.int64)
        e_sorted = eps_arr[order]
        with np.errstate(divide="ignore"):
            log_r = np.log(e_sorted) - np.log1p(-e_sorted)
        return cls(
            pairs=tuple(uniq),
            log_weight=-math.log(len(uniq)),
            C=float(C),
            K=int(K),
            betas=tuple(float(b) for b in betas),
            eps=eps_arr,
            delta=delta_arr,
            _deltas=deltas,
            _group_start=group_start,
            _group_log_r_max=np.maximum.reduceat(log_r, starts),
            _order=order,
        )

    def to_csv(self, fh) -> None:
        """Write ``beta_i, eps, delta, T`` per grid pair (``T = 2 ln K / delta^2``)."""
        fh.write("beta_i,eps,delta,T\n")
        lk = math.log(self.K)
        for b, p in zip(self.betas, self.pairs):
            fh.write(f"{b!r},{p.eps!r},{p.delta!r},{2.0 * lk / p.delta**2!r}\n")


def grid_size(K: int, C: float) -> int:
    """Brute-force ``|G_C|``: sum over the eps grid of ``ceil(eps K) ceil(ln C)``."""
    n_eps = math.ceil(math.log(K) ** 2)
    total = 0
    for i in range(1, n_eps + 1):
        eps = float(K) ** -(0.5 + i / (2 * n_eps))
        total += math.ceil(eps * K) * math.ceil(math.log(C))
    return total


def build_grid(K: int, C: float) -> GridPrior:
    """Adaptive grid: ``ceil(ln^2 K)`` sparsities, each with an
    exponentially spaced set of ``ceil(eps K) ceil(ln C)`` signal levels."""
    if K < 2:
        raise DomainError(f"K must be >= 2, got {K}")
    if not C > 1.0:
        raise DomainError(f"C must exceed 1, got {C}")
    lk = math.log(K)
    n_eps = math.ceil(lk**2)
    n_c = math.ceil(math.log(C))
    seen = set()
    pairs: List[ParamPair] = []
    betas: List[float] = []
    for i in range(1, n_eps + 1):
        beta = 0.5 + i / (2 * n_eps)
        eps = float(K) ** -beta
        n_e = math.ceil(eps * K)
        for j in range(1, n_e * n_c + 1):
            delta = math.sqrt(2.0 * lk / math.exp(j / n_e))
            if (eps, delta) in seen:
                continue
            seen.add((eps, delta))
            pairs.append(ParamPair(eps, delta))
            betas.append(beta)
    return GridPrior.from_pairs(K, pairs, C=float(C), betas=betas)


class MixtureScratch:
    """Reusable buffers for ``log_mixture`` (per-pair logs and per-stream work)."""

    def __init__(self, grid: GridPrior):
        K = grid.K
        self.sorted_pair_logs = np.empty(len(grid))
        self.x = np.empty(K)
        self.u = np.empty(K)
        self.bits = np.empty(K, dtype=np.int64)
        e = grid.eps[grid._order]
        self.eps = e
        with np.errstate(divide="ignore"):
            self.log1m_eps = np.log1p(-e)

    def pair_logs(self, grid: GridPrior) -> np.ndarray:
        """Per-pair ``ln E_t(eps, delta)`` of the last call, in ``grid.pairs`` order."""
        out = np.empty(len(grid))
        out[grid._order] = self.sorted_pair_logs
        return out


def log_mixture(grid: GridPrior, state: StreamState, scratch: Optional[MixtureScratch] = None) -> float:
    """``ln E_t(Pi)`` for the uniform prior on the grid."""
    if state.t < 1:
        raise ValueError("log_mixture needs t >= 1")
    if state.K != grid.K:
        raise ValueError(f"state has {state.K} streams, grid was built for {grid.K}")
    if scratch is None:
        scratch = MixtureScratch(grid)
    s_desc = np.sort(state.sums)[::-1].copy()
    _kernels.mixture_pair_logs(
        s_desc, float(state.t), grid._deltas, grid._group_start, grid._group_log_r_max,
        scratch.eps, scratch.log1m_eps, scratch.sorted_pair_logs, scratch.x, scratch.u, scratch.bits,
    )
    return float(_kernels.log_mean_exp(scratch.sorted_pair_logs, grid.log_weight))


def log_mixture_batch(grid: GridPrior, sums: np.ndarray, t: int) -> np.ndarray:
    """``ln E_t(Pi)`` for each row of a (paths x streams) sum matrix."""
    e = grid.eps[grid._order]
    with np.errstate(divide="ignore"):
        l1 = np.log1p(-e)
    return _kernels.mixture_log_batch(
        np.ascontiguousarray(sums, dtype=float), float(t), grid._deltas, grid._group_start,
        grid._group_log_r_max, e, l1, grid.log_weight,
    )


@dataclass(frozen=True)
class EmConfig:
    """EM settings; ``None`` initial values mean ``1/K`` and ``sqrt(2 ln K)``."""

    init_eps: Optional[float] = None
    init_delta: Optional[float] = None
    m_max: int = 1000
    tol: float = 1e-4
    normalized_mstep: bool = True
    # EM runs on Z_{., t-1}, whose anomalous mean is delta * sqrt(t-1); the
    # plug-in divides the fitted mean by sqrt(t-1) to get a per-step delta
    # unless this is False (fitted mean used as is).
    per_step_delta: bool = True


def em_fit(z, init_eps: float, init_delta: float, m_max: int = 1000, tol: float = 1e-4,
           normalized_mstep: bool = True) -> Tuple[float, float]:
    """Fit ``(eps, delta)`` of ``(1-eps) N(0,1) + eps N(delta,1)`` to ``z``.

    Returns ``(0.0, 1.0)`` when the iteration does not settle within
    ``m_max`` steps. ``normalized_mstep=False`` uses the unnormalized
    M-step ``delta = sum_i pi_i z_i``.
    """
    if m_max < 1:
        raise ValueError("m_max must be >= 1")
    if not 0.0 < init_eps < 1.0:
        raise DomainError(f"init_eps must lie in (0, 1), got {init_eps}")
    z = np.ascontiguousarray(z, dtype=float)
    K = z.shape[0]
    e, d, ok, _ = _kernels.em_fit_kernel(
        z, float(init_eps), float(init_delta), int(m_max), float(tol), bool(normalized_mstep),
        np.empty(K), np.empty(K), np.empty(K, dtype=np.int64),
    )
    if not ok:
        return 0.0, 1.0
    return float(e), float(d)


def _em_defaults(cfg: EmConfig, K: int) -> Tuple[float, float]:
    e0 = 1.0 / K if cfg.init_eps is None else cfg.init_eps
    d0 = math.sqrt(2.0 * math.log(K)) if cfg.init_delta is None else cfg.init_delta
    return e0, d0


def _per_step(delta_hat: float, eps_hat: float, t_fit: int, cfg: EmConfig) -> float:
    if cfg.per_step_delta and eps_hat > 0.0:
        return delta_hat / math.sqrt(t_fit)
    return delta_hat


@dataclass
class PluginState:
    eps_hat: float = 0.0
    delta_hat: float = 1.0
    log_M: float = 0.0
    prev_log_lr: float = 0.0


def _raw_log_lr(eps: float, delta: float, state: StreamState) -> float:
    # no ParamPair validation: plug-in estimates may sit on the boundary
    if eps == 0.0 or state.t == 0:
        return 0.0
    return float(np.sum(_log_lr_terms(eps, delta, state.sums, state.t)))


def plugin_step(pstate: PluginState, state_before: StreamState, state_after: StreamState,
                em_cfg: EmConfig) -> PluginState:
    """Advance the plug-in martingale by one step.

    The estimate for step ``t`` is fitted on ``Z_{., t-1}`` (``(0, 1)`` at
    ``t = 1``); the log increment is the ratio of consecutive likelihood
    ratios at that fixed estimate.
    """
    if state_after.t != state_before.t + 1:
        raise ValueError("state_after must be one step past state_before")
    if state_before.t == 0:
        eps_hat, delta_hat = 0.0, 1.0
    else:
        e0, d0 = _em_defaults(em_cfg, state_before.K)
        eps_hat, delta_hat = em_fit(state_before.z, e0, d0, em_cfg.m_max, em_cfg.tol,
                                    em_cfg.normalized_mstep)
        delta_hat = _per_step(delta_hat, eps_hat, state_before.t, em_cfg)
    before = _raw_log_lr(eps_hat, delta_hat, state_before)
    after = _raw_log_lr(eps_hat, delta_hat, state_after)
    return PluginState(eps_hat, delta_hat, pstate.log_M + (after - before), before)


class LogMartingale:
    """Sequential evaluator protocol: ``reset()`` then ``update(state)``."""

    name = "martingale"

    def reset(self) -> None:
        pass

    def update(self, state: StreamState) -> float:
        raise NotImplementedError

    def batch(self, sums: np.ndarray, t: int) -> np.ndarray:
        """Log values at a fixed ``t`` for many paths (stateless families)."""
        raise NotImplementedError


class OracleMartingale(LogMartingale):
    """Likelihood ratio at a fixed pair; the oracle when the pair is true."""

    name = "oracle"

    def __init__(self, pair: ParamPair):
        self.pair = pair

    def update(self, state: StreamState) -> float:
        return log_lr(self.pair, state)

    def batch(self, sums, t):
        return log_lr_batch(self.pair.eps, self.pair.delta, sums, t)


class MixtureMartingale(LogMartingale):
    name = "mixture"

    def __init__(self, grid: GridPrior):
        self.grid = grid
        self.scratch = MixtureScratch(grid)

    def update(self, state: StreamState) -> float:
        return log_mixture(self.grid, state, self.scratch)

    def batch(self, sums, t):
        return log_mixture_batch(self.grid, sums, t)


class MaxMartingale(LogMartingale):
    name = "max_martingale"

    def __init__(self, pair: ParamPair):
        self.pair = pair

    def update(self, state: StreamState) -> float:
        return log_max_martingale(self.pair, state)

    def batch(self, sums, t):
        return log_max_batch(self.pair.eps, self.pair.delta, sums, t)


class PluginMartingale(LogMartingale):
    """Prequential plug-in martingale; stateful across ``update`` calls."""

    name = "plugin"

    def __init__(self, em_cfg: EmConfig = EmConfig()):
        self.em_cfg = em_cfg
        self.reset()

    def reset(self) -> None:
        self.pstate = PluginState()
        self._prev: Optional[StreamState] = None

    def update(self, state: StreamState) -> float:
        prev = self._prev
        if prev is None:
            if state.t != 1:
                raise ValueError("plug-in martingale must start at t = 1")
            prev = StreamState.initial(state.K)
        self.pstate = plugin_step(self.pstate, prev, state, self.em_cfg)
        self._prev = state
        return self.pstate.log_M

    def batch_increment(self, sums_before: np.ndarray, sums_after: np.ndarray, t: int) -> np.ndarray:
        """Log increments at step ``t`` for many paths at once."""
        sums_before = np.asarray(sums_before, dtype=float)
        sums_after = np.asarray(sums_after, dtype=float)
        n, K = sums_after.shape
        if t == 1:
            return np.zeros(n)
        e0, d0 = _em_defaults(self.em_cfg, K)
        est = _kernels.em_fit_batch(
            np.ascontiguousarray(sums_before / math.sqrt(t - 1)), float(e0), float(d0),
            int(self.em_cfg.m_max), float(self.em_cfg.tol), bool(self.em_cfg.normalized_mstep),
        )
        out = np.zeros(n)
        for i in range(n):
            e, d = est[i]
            if e == 0.0:
                continue
            d = _per_step(d, e, t - 1, self.em_cfg)
            out[i] = (_log_lr_terms(e, d, sums_after[i], t).sum()
                      - _log_lr_terms(e, d, sums_before[i], t - 1).sum())
        return out


def pairs_from_arrays(eps: Sequence[float], delta: Sequence[float]) -> List[ParamPair]:
    return [ParamPair(float(e), float(d)) for e, d in zip(eps, delta)]
