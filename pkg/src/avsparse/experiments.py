"""Simulation protocol behind the CLI: calibration, evaluation and summaries.

Heavy intermediate arrays (null and alternative trajectories, HC paths,
quantile tables) are memoized on disk, keyed by a hash of every input that
determines them, so that different commands reuse the same simulated paths.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from avsparse.calibrate import (
    CalibratedThreshold,
    QuantileTable,
    Target,
    build_hc_quantile_table,
    null_params,
    null_trajectories,
    running_max_log,
    upper_quantile,
)
from avsparse.config import ScenarioConfig
from avsparse.hc import StatisticKind, statistic_batch
from avsparse.martingales import EmConfig
from avsparse.model import ModelParams, detection_moment, max_power
from avsparse.sequential import BonferroniSchedule, curve_from_taus, n_for_fraction, stopping_times
from avsparse.simulate import (
    TAG_CALIBRATE,
    TAG_EVALUATE,
    TAG_VALIDATE,
    MartingaleSpec,
    cached_grid,
    hc_trajectories,
    log_trajectories,
    sums_at,
)

log = logging.getLogger(__name__)

CACHE_VERSION = 3


def default_cache_dir() -> Path:
    env = os.environ.get("AVSPARSE_CACHE_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "avsparse"


class DiskCache:
    """npz memo store; ``None`` directory disables caching."""

    def __init__(self, directory: Optional[Path]):
        self.directory = None if directory is None else Path(directory)
        self._memo: Dict[str, Dict[str, np.ndarray]] = {}

    @staticmethod
    def digest(key: dict) -> str:
        blob = json.dumps({"v": CACHE_VERSION, **key}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:24]

    def get(self, name: str, key: dict, compute: Callable[[], Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
        tag = f"{name}-{self.digest(key)}"
        if tag in self._memo:
            return self._memo[tag]
        path = None if self.directory is None else self.directory / f"{tag}.npz"
        if path is not None and path.exists():
            with np.load(path) as z:
                out = {k: z[k] for k in z.files}
        else:
            out = compute()
            if path is not None:
                self.directory.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp.npz")
                np.savez(tmp, **out)
                os.replace(tmp, path)
        self._memo[tag] = out
        return out


@dataclass
class Table1Row:
    K: int
    beta: float
    type: str
    E_tau_truncated: Optional[float]
    n_AV: Optional[int]
    n_FS: Optional[int]


class Experiment:
    """All Monte-Carlo quantities of one configuration, computed lazily."""

    def __init__(self, config: ScenarioConfig, cache: Optional[DiskCache] = None):
        self.cfg = config
        self.cache = cache if cache is not None else DiskCache(default_cache_dir())

    # -- scenario helpers -------------------------------------------------
    def params(self, K: int, beta: float) -> ModelParams:
        return ModelParams(int(K), float(beta), self.cfg.T_star, min(self.cfg.alpha, 0.999999))

    def spec(self, method: str, K: int, beta: Optional[float] = None) -> MartingaleSpec:
        if method == "oracle":
            return MartingaleSpec.oracle(self.params(K, beta))
        if method == "max_martingale":
            p = self.params(K, beta)
            return MartingaleSpec("max_martingale", int(K), eps=p.eps, delta=p.delta)
        if method == "mixture":
            return MartingaleSpec("mixture", int(K), C=self.cfg.C_value)
        if method == "plugin":
            return MartingaleSpec("plugin", int(K), em=self.cfg.em)
        raise ValueError(f"{method} is not a martingale method")

    def _key(self, **extra) -> dict:
        return {"H": self.cfg.H, "seed": self.cfg.master_seed, **extra}

    # -- null side ---------------------------------------------------------
    def null_traj(self, method: str, K: int, beta: Optional[float] = None) -> np.ndarray:
        spec = self.spec(method, K, beta)
        n = self.cfg.n_mc_calibrate
        key = self._key(spec=spec.key(), n=n)

        def compute():
            log.info("null trajectories: %s K=%d n=%d", method, K, n)
            return {"traj": null_trajectories(spec, self.cfg.H, n, self.cfg.master_seed, self.cfg.workers)}
        return self.cache.get("null", key, compute)["traj"]

    def av_threshold(self, method: str, K: int, beta: Optional[float] = None) -> CalibratedThreshold:
        traj = self.null_traj(method, K, beta)
        value = upper_quantile(running_max_log(traj), self.cfg.alpha)
        return CalibratedThreshold(value, self.cfg.alpha, traj.shape[0], self.cfg.H, self.cfg.master_seed,
                                   Target.AV_RUNNING_MAX, method, int(K))

    def fixed_lr_thresholds(self, method: str, K: int, beta: Optional[float] = None) -> np.ndarray:
        """Per-t upper quantiles of the null statistic (LRT from oracle, MLR from mixture)."""
        traj = self.null_traj(method, K, beta)
        return np.array([upper_quantile(traj[:, s], self.cfg.alpha) for s in range(traj.shape[1])])

    def hc_fixed_threshold(self, K: int) -> float:
        n = self.cfg.n_mc_calibrate
        key = self._key(K=int(K), n=n)

        def compute():
            sums = sums_at(null_params(int(K)), 1, n, self.cfg.master_seed, TAG_CALIBRATE, True)
            return {"hc": statistic_batch(StatisticKind.HC, sums, 1)}
        hc = self.cache.get("hcnull", key, compute)["hc"]
        return upper_quantile(hc, self.cfg.alpha)

    def hc_table(self, K: int) -> QuantileTable:
        M = self.cfg.hc_table_M
        key = {"K": int(K), "M": M, "seed": self.cfg.master_seed}

        def compute():
            log.info("HC quantile table: K=%d M=%d", K, M)
            t = build_hc_quantile_table(int(K), M, self.cfg.master_seed, self.cfg.workers)
            return {"samples": t.sorted_samples}
        samples = self.cache.get("hctable", key, compute)["samples"]
        return QuantileTable(samples, int(K), self.cfg.master_seed)

    # -- alternative side --------------------------------------------------
    def eval_traj(self, method: str, K: int, beta: float, tag: int = TAG_EVALUATE,
                  force_null: bool = False) -> np.ndarray:
        """Trajectories on evaluation paths, stopped at the calibrated AV threshold.

        The oracle family is cheap, so its rows are kept whole (fixed-sample
        LRT power needs every t).
        """
        spec = self.spec(method, K, beta)
        stop = math.inf if method == "oracle" else self.av_threshold(method, K, beta).log_value
        n = self.cfg.n_mc_evaluate
        params = self.params(K, beta)
        key = self._key(spec=spec.key(), n=n, beta=repr(float(beta)), T=self.cfg.T_star, stop=repr(stop),
                        tag=tag, null=force_null)

        def compute():
            log.info("evaluation trajectories: %s K=%d beta=%g n=%d null=%s", method, K, beta, n, force_null)
            return {"traj": log_trajectories(spec, params, self.cfg.H, n, self.cfg.master_seed, tag,
                                             force_null, stop, self.cfg.workers)}
        return self.cache.get("eval", key, compute)["traj"]

    def taus(self, method: str, K: int, beta: float, tag: int = TAG_EVALUATE, force_null: bool = False
             ) -> np.ndarray:
        if method == "hc_bonferroni":
            hc = self.hc_traj(K, beta, tag, force_null)
            thr = BonferroniSchedule(self.hc_table(K)).thresholds(self.cfg.alpha, self.cfg.H)
            return stopping_times(hc, thr[None, :])
        traj = self.eval_traj(method, K, beta, tag, force_null)
        return stopping_times(traj, self.av_threshold(method, K, beta).log_value)

    def hc_traj(self, K: int, beta: float, tag: int = TAG_EVALUATE, force_null: bool = False) -> np.ndarray:
        n = self.cfg.n_mc_evaluate
        params = self.params(K, beta)
        key = self._key(K=int(K), n=n, beta=repr(float(beta)), T=self.cfg.T_star, tag=tag, null=force_null)

        def compute():
            log.info("HC trajectories: K=%d beta=%g n=%d null=%s", K, beta, n, force_null)
            return {"hc": hc_trajectories(params, self.cfg.H, n, self.cfg.master_seed, tag, force_null,
                                          self.cfg.workers)}
        return self.cache.get("hctraj", key, compute)["hc"]

    def gamma_max(self, K: int, beta: float) -> float:
        return max_power(self.cfg.alpha, self.params(K, beta))

    # -- fixed-sample power --------------------------------------------------
    def lrt_power(self, K: int, beta: float) -> np.ndarray:
        traj = self.eval_traj("oracle", K, beta)
        thr = self.fixed_lr_thresholds("oracle", K, beta)
        return (traj >= thr[None, :]).mean(axis=0)

    def hc_power(self, K: int, beta: float) -> np.ndarray:
        return (self.hc_traj(K, beta) >= self.hc_fixed_threshold(K)).mean(axis=0)

    def mlr_power(self, K: int, beta: float, times: List[int]) -> np.ndarray:
        thr = self.fixed_lr_thresholds("mixture", K)
        n = self.cfg.n_mc_evaluate
        params = self.params(K, beta)
        grid = cached_grid(int(K), self.cfg.C_value)
        out = []
        for t in times:
            key = self._key(K=int(K), n=n, beta=repr(float(beta)), T=self.cfg.T_star, C=self.cfg.C_value, t=t)

            def compute(t=t):
                log.info("MLR statistic: K=%d beta=%g t=%d", K, beta, t)
                sums = sums_at(params, t, n, self.cfg.master_seed, TAG_EVALUATE, False)
                return {"stat": statistic_batch(StatisticKind.MLR, sums, t, grid)}
            stat = self.cache.get("mlr", key, compute)["stat"]
            out.append(float(np.mean(stat >= thr[t - 1])))
        return np.array(out)

    # -- summaries -------------------------------------------------------
    def table1(self) -> List[Table1Row]:
        rows = []
        for K in self.cfg.K:
            for beta in self.cfg.beta:
                target = 0.8 * self.gamma_max(K, beta)
                for typ, method, fs in (("Oracle", "oracle", self.lrt_power), ("Adaptive", "mixture", self.hc_power)):
                    taus = self.taus(method, K, beta)
                    curve = curve_from_taus(taus, self.cfg.H).rate
                    n_av = n_for_fraction(curve, target)
                    mean = float(np.mean(np.minimum(taus, n_av))) if n_av is not None else None
                    n_fs = n_for_fraction(fs(K, beta), target)
                    rows.append(Table1Row(int(K), float(beta), typ, mean, n_av, n_fs))
        return rows

    def growth(self, K: int) -> Dict[str, np.ndarray]:
        """Mean and SE of ``ln E*_t`` under the alternative at ``growth_beta``."""
        traj = self.eval_traj("oracle", K, self.cfg.growth_beta)
        n = traj.shape[0]
        return {"mean": traj.mean(axis=0), "se": traj.std(axis=0, ddof=1) / math.sqrt(n)}

    def null_stop_rate(self, method: str, K: int, beta: float) -> float:
        """Fraction of fresh null paths stopped by the horizon at the calibrated threshold."""
        taus = self.taus(method, K, beta, tag=TAG_VALIDATE, force_null=True)
        return float(np.mean(np.isfinite(taus)))

    def detection_moment(self, K: int, beta: float) -> float:
        return detection_moment(self.params(K, beta))


def em_from_flags(em: EmConfig, raw_mstep: bool = False, literal_delta: bool = False) -> EmConfig:
    if raw_mstep:
        em = dataclasses.replace(em, normalized_mstep=False)
    if literal_delta:
        em = dataclasses.replace(em, per_step_delta=False)
    return em
