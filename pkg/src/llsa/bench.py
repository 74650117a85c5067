"""Timing harness for the scaling and key/value-backward experiments.

Every timed phase is the median of ``repeats`` wall-clock runs
(``time.perf_counter_ns``) after one untimed warm-up. Records are flat rows
with the fixed column order ``CSV_COLUMNS``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import build_plan, forward_mul_accs, llsa_forward
from .core import (
    LLSAConfig,
    ReweightMode,
    auto_levels,
    effective_block_count,
    validate_config,
)
from .errors import ConfigError
from .grad import backward_mul_accs, kv_backward, kv_backward_masked, llsa_backward, output_delta
from .indexmap import transpose_all
from .oracle import ORACLE_MAX_N, dense_attention
from .pyramid import build_pyramid
from .selection import hierarchical_topk
from .tensorio import gen_random

log = logging.getLogger(__name__)

PHASES = ("select", "forward", "backward_kv", "backward_full", "dense_oracle", "backward_kv_mask")
CSV_COLUMNS = ("n", "phase", "wall_ns", "mul_accs", "b", "k", "levels", "enrich", "mode", "seed")
DEFAULT_GRID = (8192, 16384, 32768, 65536)
DEFAULT_DENSE_GRID = (512, 1024, 2048)


@dataclass(frozen=True)
class BenchRecord:
    n: int
    phase: str
    wall_ns: int
    mul_accs: int
    b: int
    k: int
    levels: int
    enrich: int
    mode: str
    seed: int

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.wall_ns <= 0:
            raise ValueError("wall_ns must be positive")

    def row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


@dataclass
class Report:
    records: list[BenchRecord] = field(default_factory=list)
    slopes: dict[str, float] = field(default_factory=dict)
    skipped: list[int] = field(default_factory=list)

    def series(self, phase: str) -> tuple[np.ndarray, np.ndarray]:
        rs = sorted((r for r in self.records if r.phase == phase), key=lambda r: r.n)
        return np.array([r.n for r in rs]), np.array([r.wall_ns for r in rs], dtype=np.float64)

    def per_token(self, phase: str) -> tuple[np.ndarray, np.ndarray]:
        n, t = self.series(phase)
        return n, t / n

    def to_json(self) -> dict:
        return {
            "columns": list(CSV_COLUMNS),
            "records": [asdict(r) for r in self.records],
            "slopes": self.slopes,
            "skipped": self.skipped,
        }


def median_ns(fn, repeats: int = 5, warmup: int = 1) -> int:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return max(1, int(np.median(times)))


def round_robin(jobs: dict, repeats: int = 5, warmup: int = 1) -> dict:
    """Median wall time of every job, timing one round over all jobs per repeat.

    Interleaving spreads slow phases of a shared machine evenly over the jobs
    instead of letting them land on one grid point.
    """
    for _ in range(warmup):
        for fn in jobs.values():
            fn()
    times = {key: [] for key in jobs}
    for _ in range(repeats):
        for key, fn in jobs.items():
            t0 = time.perf_counter_ns()
            fn()
            times[key].append(time.perf_counter_ns() - t0)
    return {key: max(1, int(np.median(ts))) for key, ts in times.items()}


def fit_slope(x, y) -> float:
    """Least-squares slope of log(y) against log(x); nan for fewer than 2 points."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size < 2:
        return math.nan
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def make_config(n: int, d: int, b: int, k: int, levels="auto", enrich=None,
                mode=ReweightMode.SCALE_KV):
    lv = auto_levels(n, b, k) if levels == "auto" else int(levels)
    return validate_config(LLSAConfig(n, d, b, k, lv, enrich_levels=enrich,
                                      reweight_mode=ReweightMode(mode)))


def _inputs(n: int, d: int, seed: int):
    return tuple(gen_random(n, d, seed + j) for j in range(4))


def _echo(cfg, seed):
    return dict(b=cfg.block_size, k=cfg.top_k, levels=cfg.levels, enrich=cfg.enrich_levels,
                mode=cfg.reweight_mode.value, seed=seed)


def _prepare(n, d, b, k, levels, enrich, mode, seed):
    cfg = make_config(n, d, b, k, levels, enrich, mode)
    q, kk, v, g = _inputs(n, d, seed)
    B, L = cfg.block_size, cfg.levels
    pk, pv = build_pyramid(kk, B, L), build_pyramid(v, B, L)
    sel = hierarchical_topk(build_pyramid(q, B, L), pk, cfg)
    plan = build_plan(sel, cfg)
    state = llsa_forward(q, kk, v, pk, pv, plan, cfg)
    D = output_delta(g, state.output)
    return cfg, (q, kk, v, g, pk, pv, sel, plan, state, D)


def _grid(n_grid, rep: Report, *args):
    cases = {}
    for n in n_grid:
        try:
            cases[n] = _prepare(n, *args)
        except ConfigError as exc:
            log.warning("skipping N=%d: %s", n, exc)
            rep.skipped.append(n)
    return cases


def _fit_all(rep: Report) -> None:
    for phase in PHASES:
        ns, ts = rep.series(phase)
        if ns.size >= 2:
            rep.slopes[phase] = fit_slope(ns, ts)


def run_scaling(n_grid=DEFAULT_GRID, b: int = 16, k: int = 8, d: int = 16, levels="auto",
                enrich=None, mode=ReweightMode.SCALE_KV, seed: int = 0, repeats: int = 5,
                dense_grid=DEFAULT_DENSE_GRID) -> Report:
    """Time select / forward / backward phases over ``n_grid`` and fit log-log slopes.

    ``total`` is select + forward + backward_full. The dense oracle is timed on
    ``dense_grid`` (entries above the oracle cap are dropped).
    """
    rep = Report()
    cases = _grid(n_grid, rep, d, b, k, levels, enrich, mode, seed)
    jobs, macs, echo = {}, {}, {}
    for n, (cfg, (q, kk, v, g, pk, pv, sel, plan, state, D)) in cases.items():
        B, L = cfg.block_size, cfg.levels
        E = effective_block_count(cfg)
        echo[n] = _echo(cfg, seed)

        def select(q=q, kk=kk, B=B, L=L, cfg=cfg):
            return hierarchical_topk(build_pyramid(q, B, L), build_pyramid(kk, B, L), cfg)

        def forward(q=q, kk=kk, v=v, pk=pk, pv=pv, plan=plan, cfg=cfg):
            return llsa_forward(q, kk, v, pk, pv, plan, cfg)

        def backward_kv(g=g, state=state, q=q, pk=pk, pv=pv, sel=sel, cfg=cfg, D=D):
            return kv_backward(g, state, q, pk, pv, transpose_all(sel, cfg), cfg, D)

        def backward_full(g=g, state=state, q=q, kk=kk, v=v, pk=pk, pv=pv, plan=plan,
                          sel=sel, cfg=cfg):
            return llsa_backward(g, state, q, kk, v, pk, pv, plan, transpose_all(sel, cfg), cfg)

        for phase, fn, m in (("select", select, sel.mul_accs),
                             ("forward", forward, forward_mul_accs(cfg)),
                             ("backward_kv", backward_kv, 4 * n * E * B * d),
                             ("backward_full", backward_full, backward_mul_accs(cfg))):
            jobs[n, phase] = fn
            macs[n, phase] = m
    dense_echo = dict(b=b, k=k, levels=0 if levels == "auto" else int(levels),
                      enrich=-1 if enrich is None else int(enrich),
                      mode=ReweightMode(mode).value, seed=seed)
    for n in dense_grid:
        if n > ORACLE_MAX_N:
            log.warning("dense oracle skipped at N=%d (cap %d)", n, ORACLE_MAX_N)
            continue
        q, kk, v, _ = _inputs(n, d, seed)
        jobs[n, "dense_oracle"] = lambda q=q, kk=kk, v=v: dense_attention(q, kk, v, 1.0 / math.sqrt(d))
        macs[n, "dense_oracle"] = 2 * n * n * d
        echo.setdefault(n, dense_echo)
    for (n, phase), ns in round_robin(jobs, repeats).items():
        e = dense_echo if phase == "dense_oracle" else echo[n]
        rep.records.append(BenchRecord(n=n, phase=phase, wall_ns=ns, mul_accs=int(macs[n, phase]), **e))
    _fit_all(rep)
    ns, _ = rep.series("select")
    if ns.size >= 2:
        rep.slopes["select_mul_accs"] = fit_slope(ns, [macs[n, "select"] for n in ns])
        total = [sum(r.wall_ns for r in rep.records
                     if r.n == n and r.phase in ("select", "forward", "backward_full"))
                 for n in ns]
        rep.slopes["total"] = fit_slope(ns, total)
    return rep


def run_kv_backward(n_grid=DEFAULT_GRID, b: int = 16, k: int = 8, d: int = 16, levels="auto",
                    enrich=None, mode=ReweightMode.SCALE_KV, seed: int = 0, repeats: int = 9,
                    baseline: str = "mask") -> Report:
    """Key/value backward (transpose + CSC pass) against the dense-mask baseline.

    ``wall_ns / n`` of each record is the per-token time.
    """
    if baseline not in ("mask", "none"):
        raise ValueError(f"baseline must be 'mask' or 'none', not {baseline!r}")
    rep = Report()
    cases = _grid(n_grid, rep, d, b, k, levels, enrich, mode, seed)
    jobs, macs, echo = {}, {}, {}
    for n, (cfg, (q, kk, v, g, pk, pv, sel, plan, state, D)) in cases.items():
        macs[n] = 4 * n * effective_block_count(cfg) * cfg.block_size * d
        echo[n] = _echo(cfg, seed)
        jobs[n, "backward_kv"] = (
            lambda g=g, s=state, q=q, pk=pk, pv=pv, sel=sel, cfg=cfg, D=D:
            kv_backward(g, s, q, pk, pv, transpose_all(sel, cfg), cfg, D))
        if baseline == "mask":
            jobs[n, "backward_kv_mask"] = (
                lambda g=g, s=state, q=q, pk=pk, pv=pv, sel=sel, cfg=cfg, D=D:
                kv_backward_masked(g, s, q, pk, pv, sel, cfg, D))
    for (n, phase), ns in round_robin(jobs, repeats).items():
        rep.records.append(BenchRecord(n=n, phase=phase, wall_ns=ns, mul_accs=macs[n], **echo[n]))
    _fit_all(rep)
    return rep


def write_csv(records, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())


def write_json(report: Report, fh) -> None:
    json.dump(report.to_json(), fh, indent=2)
    fh.write("\n")
