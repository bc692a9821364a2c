"""Command-line harness: ``avsparse <command> [options]``.

Commands write CSV files (the authoritative output), optional SVG plots and
a ``manifest_<command>.json`` that pins the configuration and seeds.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from avsparse import __version__
from avsparse.config import ConfigError, ScenarioConfig
from avsparse.experiments import DiskCache, Experiment, default_cache_dir, em_from_flags
from avsparse.sequential import curve_from_taus
from avsparse.simulate import TAG_CALIBRATE, TAG_EVALUATE, TAG_HC_TABLE, TAG_VALIDATE
from avsparse.svg import line_chart

EXIT_CONFIG = 2
EXIT_IO = 3

log = logging.getLogger("avsparse")


def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


class Outputs:
    """Collects written files for the manifest."""

    def __init__(self, out_dir: Path, svg: bool):
        self.dir = out_dir
        self.svg = svg
        self.files: Dict[str, str] = {}
        out_dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str) -> None:
        path = self.dir / name
        path.write_text(text, encoding="utf-8", newline="")
        self.files[name] = hashlib.sha256(text.encode()).hexdigest()

    def csv(self, name: str, header: List[str], rows) -> None:
        lines = [",".join(header)] + [",".join(_fmt(v) if not isinstance(v, str) else v for v in r) for r in rows]
        self.write(name, "\n".join(lines) + "\n")

    def plot(self, name: str, **kw) -> None:
        if self.svg:
            self.write(name, line_chart(**kw))


def _markers(exp: Experiment, K: int, beta: float) -> Dict[str, float]:
    m = {"T*": exp.cfg.T_star}
    if 0.5 < beta <= 1.0:
        m["t*"] = exp.detection_moment(K, beta)
    return m


def cmd_calibrate(exp: Experiment, out: Outputs) -> None:
    cfg = exp.cfg
    methods = [m for m in ("oracle", "mixture") if m in cfg.methods]
    for m in methods:
        for K in cfg.K:
            for beta in cfg.beta:
                thr = exp.av_threshold(m, K, beta)
                out.write(f"threshold_{m}_K{K}_beta{beta:g}.json", thr.to_json() + "\n")


def cmd_growth(exp: Experiment, out: Outputs) -> None:
    cfg = exp.cfg
    rows, series = [], {}
    for K in cfg.growth_K:
        g = exp.growth(K)
        t = np.arange(1, cfg.H + 1)
        rows += [(int(s), int(K), m, e) for s, m, e in zip(t, g["mean"], g["se"])]
        series[f"K={K}"] = (t, g["mean"])
    out.csv("growth.csv", ["t", "K", "mean_log_E", "se"], rows)
    beta = cfg.growth_beta
    out.plot("growth.svg", series=series, title=f"expected log growth, beta={beta:g}",
             ylabel="E[ln E*_t]", vlines=_markers(exp, cfg.growth_K[0], beta))


def cmd_power_curves(exp: Experiment, out: Outputs) -> None:
    cfg = exp.cfg
    H = cfg.H
    t = np.arange(1, H + 1)
    n = cfg.n_mc_evaluate
    for K in cfg.K:
        for beta in cfg.beta:
            curves = {}
            for m in ("oracle", "mixture"):
                curves[m] = curve_from_taus(exp.taus(m, K, beta), H).rate
            curves["lrt_fixed"] = exp.lrt_power(K, beta)
            curves["hc_fixed"] = exp.hc_power(K, beta)
            rows = [(int(s), m, c[s - 1], math.sqrt(c[s - 1] * (1 - c[s - 1]) / n))
                    for m, c in curves.items() for s in t]
            out.csv(f"power_curves_K{K}_beta{beta:g}.csv", ["t", "method", "rate_or_power", "se"], rows)
            out.plot(f"power_curves_K{K}_beta{beta:g}.svg", series={m: (t, c) for m, c in curves.items()},
                     title=f"rejection rate, K={K}, beta={beta:g}", ylabel="rate",
                     vlines=_markers(exp, K, beta))


def cmd_table1(exp: Experiment, out: Outputs) -> None:
    rows = [(r.K, _fmt(r.beta), r.type, r.E_tau_truncated, r.n_AV, r.n_FS) for r in exp.table1()]
    out.csv("table1.csv", ["K", "beta", "type", "E_tau_truncated", "n_AV", "n_FS"], rows)


def cmd_fixed_power(exp: Experiment, out: Outputs) -> None:
    cfg = exp.cfg
    n = cfg.n_mc_evaluate
    times = [t for t in cfg.fixed_power_times if 1 <= t <= cfg.H]
    rows = []
    for K in cfg.K:
        for beta in cfg.beta:
            series = {}
            lrt_thr = exp.fixed_lr_thresholds("oracle", K, beta)
            lrt = exp.lrt_power(K, beta)
            hc = exp.hc_power(K, beta)
            hc_thr = exp.hc_fixed_threshold(K)
            kinds = [("LRT", [lrt[s - 1] for s in times], [lrt_thr[s - 1] for s in times]),
                     ("HC", [hc[s - 1] for s in times], [hc_thr] * len(times))]
            if "mlr_fixed" in cfg.methods:
                mlr_thr = exp.fixed_lr_thresholds("mixture", K)
                kinds.append(("MLR", list(exp.mlr_power(K, beta, times)), [mlr_thr[s - 1] for s in times]))
            for kind, pw, thr in kinds:
                for s, p, h in zip(times, pw, thr):
                    rows.append((int(K), _fmt(beta), _fmt(cfg.T_star), int(s), kind, h, p,
                                 math.sqrt(p * (1 - p) / n), int(n), int(cfg.master_seed)))
                series[kind] = (times, pw)
            out.plot(f"fixed_power_K{K}_beta{beta:g}.svg", series=series,
                     title=f"fixed-sample power, K={K}, beta={beta:g}", ylabel="power",
                     vlines=_markers(exp, K, beta))
    out.csv("fixed_power.csv", ["K", "beta", "T_star", "t", "statistic_kind", "threshold", "power", "se",
                                "n_mc", "seed"], rows)


def cmd_baselines(exp: Experiment, out: Outputs) -> None:
    cfg = exp.cfg
    H = cfg.H
    t = np.arange(1, H + 1)
    for K in cfg.K:
        out.write(f"threshold_plugin_K{K}.json", exp.av_threshold("plugin", K).to_json() + "\n")
        for beta in cfg.beta:
            curves = {}
            for m in ("mixture", "plugin", "hc_bonferroni"):
                c = curve_from_taus(exp.taus(m, K, beta), H)
                curves[m] = c
            rows = [(int(s), m, c.rate[s - 1], c.se[s - 1]) for m, c in curves.items() for s in t]
            out.csv(f"baselines_K{K}_beta{beta:g}.csv", ["t", "method", "rate", "se"], rows)
            out.plot(f"baselines_K{K}_beta{beta:g}.svg", series={m: (t, c.rate) for m, c in curves.items()},
                     title=f"cumulative rejection rate, K={K}, beta={beta:g}", ylabel="rate",
                     vlines=_markers(exp, K, beta))


COMMANDS = {
    "calibrate": cmd_calibrate,
    "growth": cmd_growth,
    "power-curves": cmd_power_curves,
    "table1": cmd_table1,
    "fixed-power": cmd_fixed_power,
    "baselines": cmd_baselines,
}


def _common(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", type=Path, default=d, help="JSON config or run manifest")
    p.add_argument("--seed", type=int, default=d, help="master seed")
    p.add_argument("--out", type=Path, default=d, help="output directory (default: ./out)")
    p.add_argument("--paths", type=int, default=d, help="Monte-Carlo paths for calibration and evaluation")
    p.add_argument("--no-svg", action="store_true", default=d, help="skip SVG plots")
    p.add_argument("--em-raw-mstep", action="store_true", default=d, help="unnormalized EM delta update")
    p.add_argument("--plugin-z-delta", action="store_true", default=d,
                   help="plug-in uses the fitted z-scale mean as its per-step delta")
    p.add_argument("--K", type=int, nargs="+", default=d, help="stream counts")
    p.add_argument("--beta", type=float, nargs="+", default=d, help="sparsity exponents")
    p.add_argument("--alpha", type=float, default=d, help="test level")
    p.add_argument("--workers", type=int, default=d, help="worker processes for path simulation")
    p.add_argument("--cache-dir", type=Path, default=d, help="simulation cache directory")
    p.add_argument("--no-cache", action="store_true", default=d, help="recompute without reading or writing the cache")
    p.add_argument("-v", "--verbose", action="store_true", default=d, help="log progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avsparse", description=__doc__.splitlines()[0])
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _common(sub.add_parser(name), suppress=True)
    return parser


def resolve_config(args) -> ScenarioConfig:
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        cfg = ScenarioConfig.parse(text)
    else:
        cfg = ScenarioConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["master_seed"] = args.seed
    if args.paths is not None:
        d["n_mc_calibrate"] = d["n_mc_evaluate"] = args.paths
    if args.K is not None:
        d["K"] = args.K
    if args.beta is not None:
        d["beta"] = args.beta
    if args.alpha is not None:
        d["alpha"] = args.alpha
    if args.workers is not None:
        d["workers"] = args.workers
    cfg = ScenarioConfig.from_dict(d)
    cfg.em = em_from_flags(cfg.em, bool(args.em_raw_mstep), bool(args.plugin_z_delta))
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    cache = DiskCache(None if args.no_cache else (args.cache_dir or default_cache_dir()))
    exp = Experiment(cfg, cache)
    start = time.time()
    try:
        out = Outputs(args.out or Path("out"), svg=not args.no_svg)
        COMMANDS[args.command](exp, out)
        manifest = {
            "command": args.command,
            "version": __version__,
            "config": cfg.to_dict(),
            "seeds": {"master_seed": cfg.master_seed,
                      "path_seed_tags": {"calibrate": TAG_CALIBRATE, "evaluate": TAG_EVALUATE,
                                         "validate": TAG_VALIDATE, "hc_table": TAG_HC_TABLE},
                      "common_random_numbers": "all methods of a (K, beta) cell share evaluation paths"},
            "outputs": dict(out.files),
            "wall_clock_s": round(time.time() - start, 3),
        }
        out.write(f"manifest_{args.command}.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
