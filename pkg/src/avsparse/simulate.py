"""Monte-Carlo engine: per-path substreams, log-martingale trajectories, HC paths.

Path ``i`` of a family is generated from ``path_seed(master_seed, i, tag, K)``
so the output of every function here is a pure function of its arguments,
whatever the number of workers.
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np

from avsparse import _kernels
from avsparse.hc import hc_batch
from avsparse.martingales import (
    EmConfig,
    GridPrior,
    LogMartingale,
    MaxMartingale,
    MixtureMartingale,
    OracleMartingale,
    ParamPair,
    PluginMartingale,
    build_grid,
    log_lr_batch,
    log_max_batch,
)
from avsparse.model import ModelParams, generate_path, path_seed

TAG_CALIBRATE = 1
TAG_EVALUATE = 2
TAG_VALIDATE = 3
TAG_HC_TABLE = 4

KINDS = ("oracle", "mixture", "plugin", "max_martingale")


@functools.lru_cache(maxsize=8)
def cached_grid(K: int, C: float) -> GridPrior:
    return build_grid(K, C)


@dataclass(frozen=True)
class MartingaleSpec:
    """Picklable description of a log-martingale family.

    ``oracle`` and ``max_martingale`` need ``eps``/``delta``; ``mixture``
    needs ``C``; ``plugin`` uses ``em``.
    """

    kind: str
    K: int
    eps: Optional[float] = None
    delta: Optional[float] = None
    C: Optional[float] = None
    em: EmConfig = field(default_factory=EmConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown martingale kind {self.kind!r}")
        if self.kind in ("oracle", "max_martingale") and (self.eps is None or self.delta is None):
            raise ValueError(f"{self.kind} needs eps and delta")
        if self.kind == "mixture" and self.C is None:
            raise ValueError("mixture needs C")

    @classmethod
    def oracle(cls, params: ModelParams) -> "MartingaleSpec":
        return cls("oracle", params.K, eps=params.eps, delta=params.delta)

    def key(self) -> dict:
        d = {"kind": self.kind, "K": self.K}
        if self.kind in ("oracle", "max_martingale"):
            d.update(eps=repr(self.eps), delta=repr(self.delta))
        elif self.kind == "mixture":
            d["C"] = repr(float(self.C))
        else:
            d["em"] = asdict(self.em)
        return d

    def evaluator(self) -> LogMartingale:
        if self.kind == "oracle":
            return OracleMartingale(ParamPair(self.eps, self.delta))
        if self.kind == "max_martingale":
            return MaxMartingale(ParamPair(self.eps, self.delta))
        if self.kind == "mixture":
            return MixtureMartingale(cached_grid(self.K, float(self.C)))
        return PluginMartingale(self.em)


def simulate_sums(params: ModelParams, horizon: int, master_seed: int, start: int, stop: int,
                  tag: int, force_null: bool) -> np.ndarray:
    """Cumulative sums of paths ``start..stop-1``: array (paths, horizon, K)."""
    out = np.empty((stop - start, horizon, params.K))
    for j, i in enumerate(range(start, stop)):
        path = generate_path(params, horizon, path_seed(master_seed, i, tag, params.K), force_null)
        out[j] = path.cumulative_sums()
    return out


def _trajectories_from_sums(spec: MartingaleSpec, cums: np.ndarray, stop_log: float) -> np.ndarray:
    n, H, K = cums.shape
    if spec.kind in ("oracle", "max_martingale"):
        fn = log_lr_batch if spec.kind == "oracle" else log_max_batch
        res = np.empty((n, H))
        for s in range(H):
            res[:, s] = fn(spec.eps, spec.delta, cums[:, s, :], s + 1)
        return _mask_after_crossing(res, stop_log)
    if spec.kind == "mixture":
        g = cached_grid(spec.K, float(spec.C))
        e = g.eps[g._order]
        l1 = np.log1p(-e)
        res = np.empty((n, H))
        for i in range(n):
            res[i] = _kernels.mixture_path_logs(
                np.ascontiguousarray(cums[i]), g._deltas, g._group_start, g._group_log_r_max,
                e, l1, g.log_weight, stop_log,
            )
        return res
    # plugin: all paths advance together, dropping the ones that crossed
    mart = PluginMartingale(spec.em)
    res = np.full((n, H), np.nan)
    log_m = np.zeros(n)
    active = np.arange(n)
    zero = np.zeros((n, K))
    for s in range(H):
        if active.size == 0:
            break
        before = zero[active] if s == 0 else cums[active, s - 1, :]
        log_m[active] += mart.batch_increment(before, cums[active, s, :], s + 1)
        res[active, s] = log_m[active]
        active = active[log_m[active] < stop_log]
    return res


def _mask_after_crossing(res: np.ndarray, stop_log: float) -> np.ndarray:
    if stop_log == math.inf:
        return res
    hit = res >= stop_log
    first = np.where(hit.any(axis=1), hit.argmax(axis=1), res.shape[1])
    cols = np.arange(res.shape[1])[None, :]
    res = res.copy()
    res[cols > first[:, None]] = np.nan
    return res


def _trajectory_chunk(spec, params, horizon, master_seed, tag, force_null, stop_log, start, stop):
    cums = simulate_sums(params, horizon, master_seed, start, stop, tag, force_null)
    return _trajectories_from_sums(spec, cums, stop_log)


def _hc_chunk(params, horizon, master_seed, tag, force_null, start, stop):
    cums = simulate_sums(params, horizon, master_seed, start, stop, tag, force_null)
    res = np.empty((stop - start, horizon))
    scale = 1.0 / np.sqrt(np.arange(1, horizon + 1))[:, None]
    for j in range(stop - start):
        res[j] = hc_batch(cums[j] * scale)
    return res


def _chunks(n: int, size: int) -> List[tuple]:
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def _chunk_size(K: int, horizon: int) -> int:
    # keep each chunk's cumulative sums around 16 MB
    return max(1, min(1000, (2 << 20) // max(1, K * horizon)))


def parallel_map(fn: Callable, ranges: List[tuple], workers: int = 1) -> List[np.ndarray]:
    """Apply ``fn(start, stop)`` to each range; results are returned in range order."""
    if workers <= 1 or len(ranges) <= 1:
        return [fn(a, b) for a, b in ranges]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        futs = [ex.submit(fn, a, b) for a, b in ranges]
        return [f.result() for f in futs]


def log_trajectories(spec: MartingaleSpec, params: ModelParams, horizon: int, n_paths: int,
                     master_seed: int, tag: int, force_null: bool, stop_log: float = math.inf,
                     workers: int = 1) -> np.ndarray:
    """Matrix of ``ln E_t`` (paths x t = 1..horizon).

    With a finite ``stop_log`` each row is NaN after its first crossing.
    """
    if spec.K != params.K:
        raise ValueError("spec and params disagree on K")
    fn = functools.partial(_trajectory_chunk, spec, params, horizon, master_seed, tag, force_null, stop_log)
    parts = parallel_map(fn, _chunks(n_paths, _chunk_size(params.K, horizon)), workers)
    return np.concatenate(parts, axis=0)


def hc_trajectories(params: ModelParams, horizon: int, n_paths: int, master_seed: int, tag: int,
                    force_null: bool, workers: int = 1) -> np.ndarray:
    """Matrix of ``HC_t`` (paths x t = 1..horizon)."""
    fn = functools.partial(_hc_chunk, params, horizon, master_seed, tag, force_null)
    parts = parallel_map(fn, _chunks(n_paths, _chunk_size(params.K, horizon)), workers)
    return np.concatenate(parts, axis=0)


def sums_at(params: ModelParams, t: int, n_paths: int, master_seed: int, tag: int,
            force_null: bool) -> np.ndarray:
    """Sums ``S_{., t}`` of paths ``0..n_paths-1`` (same paths as ``log_trajectories``).

    Because the noise of a path is drawn time-major, the first ``t`` rows of a
    longer path coincide with the path simulated up to ``t``.
    """
    out = np.empty((n_paths, params.K))
    for i in range(n_paths):
        path = generate_path(params, t, path_seed(master_seed, i, tag, params.K), force_null)
        out[i] = path.cumulative_sums()[t - 1]
    return out
