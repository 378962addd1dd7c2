"""Experiment sweeps and the ``allocate`` command.

A YAML file sets up the network, the pipeline and a sweep axis; every
(sweep value, realization) pair draws a fresh instance from
``base_seed + realization``, runs the pipeline, audits the result and
records rate, fairness, outage, iterations and signalling. Rows hold the
means with 95% confidence half-widths.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .assign import PGDConfig
from .model import Geometry, NetworkParams, generate_instance, FADING_KINDS
from .orchestrate import MODES, Partition, RunConfig, run_pipeline, subproblems
from . import oracle

log = logging.getLogger(__name__)

PIPELINES = ("cent-sep", "cent-joint", "dec-sep", "dec-joint")
SWEEP_AXES = ("epsilon", "gamma")
# Path-gain constant at 1 m used by experiments. With unit reference gain and
# 1e-3 noise a cell-edge CU cannot reach a unit SINR floor even alone, so
# the experiment default lifts it to 1e3 (60 dB SNR at 1 m for 1 W).
DEFAULT_REFERENCE_GAIN = 1e3

CSV_COLUMNS = ("sweep_value", "rate_mean", "rate_ci", "fairness_mean", "fairness_ci",
               "outage_mean", "outage_ci", "iters_mean", "msgs_mean")


class ConfigError(ValueError):
    pass


class AuditError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    geometry: Geometry = field(default_factory=lambda: Geometry(reference_gain=DEFAULT_REFERENCE_GAIN))
    params: NetworkParams = field(default_factory=NetworkParams)
    mode: str = "ERM"
    pipeline: str = "cent-sep"
    partition: object = "half"
    fading: str = "exponential"
    sweep_axis: Optional[str] = None
    sweep_values: list = field(default_factory=list)
    n_realizations: int = 500
    base_seed: int = 0
    single_channel: bool = False
    run: RunConfig = field(default_factory=RunConfig)
    outage_method: str = "mc"     # "mc", "exact" or "none"
    outage_samples: int = 100_000
    workers: int = 1
    out: Optional[str] = None

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.fading not in FADING_KINDS:
            raise ConfigError(f"fading must be one of {FADING_KINDS}, got {self.fading!r}")
        if self.n_realizations < 1:
            raise ConfigError("n_realizations must be >= 1")
        if self.sweep_axis is not None and self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
        if self.sweep_axis == "epsilon" and any(not 0 < e < 1 for e in self.sweep_values):
            raise ConfigError("epsilon values must lie in (0, 1)")
        if self.sweep_axis == "gamma" and any(g < 0 for g in self.sweep_values):
            raise ConfigError("gamma values must be >= 0")
        if self.sweep_axis is not None and not self.sweep_values:
            raise ConfigError("sweep axis given without values")
        if self.outage_method not in ("mc", "exact", "none"):
            raise ConfigError("outage method must be 'mc', 'exact' or 'none'")
        if self.outage_method == "mc" and self.outage_samples < 100_000:
            raise ConfigError("outage_samples must be >= 1e5")
        if self.pipeline.endswith("sep") or self.single_channel:
            try:
                Partition.from_spec(self.partition, self.params.n_pairs).validate(self.params.n_pairs)
            except ValueError as exc:
                raise ConfigError(f"bad partition: {exc}") from exc
        return self

    def points(self):
        """(sweep value, params) per sweep point; a single point without a sweep."""
        if self.sweep_axis is None:
            return [(float("nan"), self.params)]
        return [(float(x), self.params.replace(**{self.sweep_axis: float(x)})) for x in self.sweep_values]


def parse_sweep(text: str):
    """``"epsilon=0.05:0.05:0.3"`` (start:step:stop, inclusive) or ``"gamma=0,1,2"``."""
    try:
        axis, values = text.split("=", 1)
        if ":" in values:
            start, step, stop = (float(x) for x in values.split(":"))
            n = int(math.floor((stop - start) / step + 1e-9)) + 1
            vals = [round(start + k * step, 12) for k in range(n)]
        else:
            vals = [float(x) for x in values.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse sweep {text!r}") from exc
    return axis.strip(), vals


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    known = {"geometry", "network", "mode", "pipeline", "partition", "fading", "sweep", "n_realizations",
             "seed", "baseline", "run", "outage", "workers", "out"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        geometry = Geometry(**{"reference_gain": DEFAULT_REFERENCE_GAIN, **raw.get("geometry", {})})
        params = NetworkParams(**raw.get("network", {}))
        run_raw = dict(raw.get("run", {}))
        pgd = PGDConfig(**run_raw.pop("pgd", {}))
        run = RunConfig(pgd=pgd, **run_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    sweep_axis, sweep_values = None, []
    sweep = raw.get("sweep")
    if isinstance(sweep, str):
        sweep_axis, sweep_values = parse_sweep(sweep)
    elif isinstance(sweep, dict):
        if len(sweep) != 1:
            raise ConfigError("sweep must name exactly one axis")
        (sweep_axis, sweep_values), = sweep.items()
        sweep_values = [float(x) for x in sweep_values]
    outage = raw.get("outage", {})
    baseline = raw.get("baseline", {})
    cfg = ExperimentConfig(
        geometry=geometry, params=params, mode=str(raw.get("mode", "ERM")).upper(),
        pipeline=raw.get("pipeline", "cent-sep"), partition=raw.get("partition", "half"),
        fading=raw.get("fading", "exponential"), sweep_axis=sweep_axis, sweep_values=sweep_values,
        n_realizations=int(raw.get("n_realizations", 500)), base_seed=int(raw.get("seed", 0)),
        single_channel=bool(baseline.get("single_channel", False)), run=run,
        outage_method=outage.get("method", "mc"), outage_samples=int(outage.get("samples", 100_000)),
        workers=int(raw.get("workers", 1)), out=raw.get("out"))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    return config_from_dict(raw)


# --- metrics -------------------------------------------------------------------

def _link(sub, fading, i, j):
    """Scalar subproblem and fading law of channel ``i`` shared with pair ``j``."""
    pick = lambda a: float(np.broadcast_to(a, sub.shape)[i, j])
    scalar = dataclasses.replace(sub, g_c=pick(sub.g_c), g_d=pick(sub.g_d),
                                 h_cu_to_d2d=pick(sub.h_cu_to_d2d), h_d2d_to_cu=pick(sub.h_d2d_to_cu))
    return scalar, fading.at(i, j)


def _exact_outage(p_c, p_d, sub, fading):
    kind, mean, var = oracle._params(fading)
    m, v = float(mean), float(var)
    if sub.random_link == "cu":
        # CU SINR < floor  <=>  h > (p_c g_c / eta - N) / p_d
        if p_d == 0:
            return float(p_c * sub.g_c < sub.eta_c_min * sub.noise)
        thr = (p_c * sub.g_c / sub.eta_c_min - sub.noise) / p_d
    else:
        if p_c == 0:
            return float(p_d * sub.g_d < sub.eta_d_min * sub.noise)
        thr = (p_d * sub.g_d / sub.eta_d_min - sub.noise) / p_c
    return 1.0 - oracle.fading_cdf(kind, m, v, thr) if thr >= 0 else 1.0


def allocation_outage(result, instance, method="mc", n_samples=100_000, seed=0) -> float:
    """Mean outage probability over the active links (NaN if none is active)."""
    if method == "none":
        return float("nan")
    probs = []
    for s in ("ul", "dl"):
        b = getattr(result, f"b_{s}")
        sub, fading = subproblems(instance, s)
        for k, (i, j) in enumerate(zip(*np.nonzero(b))):
            lsub, lfad = _link(sub, fading, i, j)
            p_c, p_d = getattr(result, f"p_c_{s}")[i, j], getattr(result, f"p_d_{s}")[i, j]
            if method == "exact":
                probs.append(_exact_outage(p_c, p_d, lsub, lfad))
            else:
                est = oracle.monte_carlo_outage(p_c, p_d, lsub, lfad, n_samples, seed=[seed, k, s == "dl"])
                probs.append(est.probability)
    return float(np.mean(probs)) if probs else float("nan")


@dataclass(frozen=True)
class Sample:
    rate: float
    fairness: float
    outage: float
    iterations: int
    messages: int


@dataclass(frozen=True)
class SweepRow:
    sweep_value: float
    rate_mean: float
    rate_ci: float
    fairness_mean: float
    fairness_ci: float
    outage_mean: float
    outage_ci: float
    iters_mean: float
    msgs_mean: float
    n_realizations: int

    def as_csv(self):
        return [repr(float(getattr(self, c))) for c in CSV_COLUMNS]


def _ci(x):
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return float("nan"), float("nan")
    half = 1.96 * x.std(ddof=1) / math.sqrt(x.size) if x.size > 1 else 0.0
    return float(x.mean()), float(half)


def run_realization(cfg: ExperimentConfig, params: NetworkParams, realization: int) -> Sample:
    seed = cfg.base_seed + realization
    inst = generate_instance(seed, cfg.geometry, params, cfg.fading)
    run = dataclasses.replace(cfg.run, seed=seed)
    res = run_pipeline(inst, cfg.pipeline, cfg.mode, cfg.partition, run, single_channel=cfg.single_channel)
    audit = oracle.audit_allocation(res, inst, joint=cfg.pipeline.endswith("joint") and not cfg.single_channel)
    if not audit.ok:
        raise AuditError(f"realization {realization} (seed {seed}) failed the audit: {audit.violations[:3]}")
    out = allocation_outage(res, inst, cfg.outage_method, cfg.outage_samples, seed)
    return Sample(res.total_rate, res.fairness_delta, out, res.iterations, res.messages_exchanged)


def _job(args):
    return run_realization(*args)


def run_samples(cfg: ExperimentConfig):
    """Per sweep point, the list of per-realization samples (in seed order)."""
    cfg.validate()
    out = []
    for value, params in cfg.points():
        jobs = [(cfg, params, r) for r in range(cfg.n_realizations)]
        if cfg.workers > 1:
            with ProcessPoolExecutor(cfg.workers) as pool:
                samples = list(pool.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * cfg.workers))))
        else:
            samples = [_job(j) for j in jobs]
        out.append((value, samples))
    return out


def aggregate(value, samples: Sequence[Sample]) -> SweepRow:
    rate = _ci([s.rate for s in samples])
    fair = _ci([s.fairness for s in samples])
    outage = _ci([s.outage for s in samples])
    return SweepRow(value, rate[0], rate[1], fair[0], fair[1], outage[0], outage[1],
                    float(np.mean([s.iterations for s in samples])),
                    float(np.mean([s.messages for s in samples])), len(samples))


def run_experiment(cfg: ExperimentConfig):
    """One :class:`SweepRow` per sweep value."""
    return [aggregate(v, s) for v, s in run_samples(cfg)]


def emit_csv(rows, path):
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for row in rows:
                w.writerow(row.as_csv())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return Path(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# --- command line ----------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="allocate", description="Run a D2D underlay allocation sweep and write a CSV.")
    ap.add_argument("--config", help="YAML experiment file")
    ap.add_argument("--mode", choices=MODES)
    ap.add_argument("--pipeline", choices=PIPELINES)
    ap.add_argument("--partition", help="all-ul, all-dl or half")
    ap.add_argument("--sweep", help="axis=start:step:stop or axis=v1,v2,...")
    ap.add_argument("--realizations", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--single-channel", action="store_true", help="single-channel-per-pair baseline")
    ap.add_argument("--out", help="output CSV path")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.mode:
            cfg.mode = args.mode
        if args.pipeline:
            cfg.pipeline = args.pipeline
        if args.partition:
            cfg.partition = args.partition
        if args.sweep:
            cfg.sweep_axis, cfg.sweep_values = parse_sweep(args.sweep)
        if args.realizations is not None:
            cfg.n_realizations = args.realizations
        if args.seed is not None:
            cfg.base_seed = args.seed
        if args.workers is not None:
            cfg.workers = args.workers
        if args.single_channel:
            cfg.single_channel = True
        if args.out:
            cfg.out = args.out
        cfg.validate()
        rows = run_experiment(cfg)
        if cfg.out:
            emit_csv(rows, cfg.out)
            log.info("wrote %d rows to %s", len(rows), cfg.out)
        else:
            w = csv.writer(sys.stdout)
            w.writerow(CSV_COLUMNS)
            for row in rows:
                w.writerow(row.as_csv())
    except (ConfigError, AuditError, OSError) as exc:
        print(f"allocate: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
