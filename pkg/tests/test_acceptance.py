"""Acceptance criteria A1-A9.

Each test records a one-line verdict (criterion, PASS/FAIL, measured values)
that is printed in the "acceptance criteria" section of the pytest summary.
A5-A7 time real runs over N = 8192 ... 65536 and take a few minutes.
"""

import itertools
import math
import time

import numpy as np
import pytest

from llsa import (
    LLSAConfig,
    ReweightMode,
    apply_permutation,
    build_plan,
    build_pyramid,
    build_reorder,
    effective_block_count,
    hierarchical_topk,
    llsa_backward,
    llsa_forward,
    table_pairs,
    transpose_all,
    transpose_indices,
    validate_config,
)
from llsa.bench import fit_slope, run_kv_backward, run_scaling
from llsa.oracle import dense_attention, effective_attention, finite_diff_check, mask_backward, mask_transpose
from llsa.reorder import block_side, spatial_pool
from llsa.tensorio import gen_random

MODES = (ReweightMode.SCALE_KV, ReweightMode.LOGIT_BIAS)
GRID = (8192, 16384, 32768, 65536)


@pytest.fixture
def verdict(record_property):
    def record(name, detail):
        record_property("criterion", name)
        record_property("detail", detail)
    return record


def instance(n, d, b, k, levels, enrich, mode, seed):
    cfg = validate_config(LLSAConfig(n, d, b, k, levels, enrich_levels=enrich, reweight_mode=mode))
    q, kk, v, g = (gen_random(n, d, 4 * seed + j) for j in range(4))
    pk, pv = build_pyramid(kk, b, levels), build_pyramid(v, b, levels)
    sel = hierarchical_topk(build_pyramid(q, b, levels), pk, cfg)
    plan = build_plan(sel, cfg)
    return cfg, q, kk, v, g, pk, pv, sel, plan


def test_a1_forward_oracle(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for mode in MODES:
        for seed in range(5):
            cfg, q, k, v, _, pk, pv, _, plan = instance(256, 16, 4, 2, 2, 2, mode, seed)
            out = llsa_forward(q, k, v, pk, pv, plan, cfg).output
            ref = effective_attention(q, k, v, pk, pv, plan, cfg)
            worst = max(worst, float(np.max(np.abs(out - ref))))
    elapsed = time.perf_counter() - t0
    verdict("A1", f"max abs diff {worst:.2e} (<= 1e-10), {elapsed:.2f} s (< 5 s)")
    assert worst <= 1e-10
    assert elapsed < 5


def test_a2_dense_reduction(verdict):
    # K = N/B selects every level-0 key block
    t0 = time.perf_counter()
    n, b = 256, 4
    worst = 0.0
    for mode in MODES:
        for seed in range(5):
            cfg, q, k, v, _, pk, pv, _, plan = instance(n, 16, b, n // b, 1, 0, mode, seed)
            out = llsa_forward(q, k, v, pk, pv, plan, cfg).output
            worst = max(worst, float(np.max(np.abs(out - dense_attention(q, k, v, cfg.softmax_scale)))))
    elapsed = time.perf_counter() - t0
    verdict("A2", f"max abs diff vs dense {worst:.2e} (<= 1e-10), {elapsed:.2f} s (< 5 s)")
    assert worst <= 1e-10
    assert elapsed < 5


def test_a3_gradient_exactness(verdict):
    t0 = time.perf_counter()
    fd_worst = mask_worst = 0.0
    for mode in MODES:
        cfg, q, k, v, g, pk, pv, sel, plan = instance(128, 8, 4, 2, 2, 2, mode, 0)
        state = llsa_forward(q, k, v, pk, pv, plan, cfg)
        grads = llsa_backward(g, state, q, k, v, pk, pv, plan, transpose_all(sel, cfg), cfg)
        mask_worst = max(mask_worst, grads.max_abs_diff(mask_backward(g, q, k, v, sel, cfg)))
        rep = finite_diff_check((q, k, v), g, cfg, step=1e-6)
        assert rep.n_coords == 3 * 128 * 8
        fd_worst = max(fd_worst, rep.max_rel_error)
    elapsed = time.perf_counter() - t0
    verdict("A3", f"finite-difference rel err {fd_worst:.2e} (<= 1e-6), vs mask backward "
                  f"{mask_worst:.2e} (<= 1e-10), {elapsed:.1f} s (< 60 s)")
    assert fd_worst <= 1e-6
    assert mask_worst <= 1e-10
    assert elapsed < 60


def test_a4_transpose(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    bad = 0
    for _ in range(1000):
        t, tk = rng.integers(1, 65, size=2)
        k = int(rng.integers(1, min(8, tk) + 1))
        idx = np.sort(np.array([rng.choice(tk, size=k, replace=False) for _ in range(t)],
                               dtype=np.int32), axis=1)
        tr = transpose_indices(idx, int(tk))
        if tr != mask_transpose(idx, int(tk)) or tr.pairs() != table_pairs(idx):
            bad += 1
    elapsed = time.perf_counter() - t0
    verdict("A4", f"{bad} mismatches in 1000 instances, {elapsed:.2f} s (< 10 s)")
    assert bad == 0
    assert elapsed < 10


@pytest.fixture(scope="module")
def scaling():
    return run_scaling(n_grid=GRID, b=16, k=8, d=16)


def test_a5_selection_work(verdict, scaling):
    slope = scaling.slopes["select_mul_accs"]
    verdict("A5", f"selection mul_accs slope {slope:.3f} (1.0 +- 0.1)")
    assert abs(slope - 1.0) <= 0.1


def test_a6_end_to_end_scaling(verdict, scaling):
    ns, _ = scaling.series("select")
    total = np.array([sum(r.wall_ns for r in scaling.records
                          if r.n == n and r.phase in ("select", "forward", "backward_full"))
                      for n in ns], dtype=np.float64)
    slope = scaling.slopes["total"]
    per = total / (ns * np.log(ns))
    spread = per.max() / per.min()
    dense = scaling.slopes["dense_oracle"]
    verdict("A6", f"total slope {slope:.3f} (<= 1.3), time/(N log N) spread {spread:.2f}x (<= 2.5x), "
                  f"dense slope {dense:.2f} (2 +- 0.3)")
    assert slope <= 1.3
    assert spread <= 2.5
    assert abs(dense - 2.0) <= 0.3


def test_a7_kv_backward_flatness(verdict):
    rep = run_kv_backward(n_grid=GRID, b=16, k=8, d=16)
    _, csc = rep.per_token("backward_kv")
    _, mask = rep.per_token("backward_kv_mask")
    ratio = csc.max() / csc.min()
    increasing = bool(np.all(np.diff(mask) > 0))
    verdict("A7", f"csc per-token spread {ratio:.2f}x (<= 2x); mask per-token ns "
                  f"{', '.join(f'{x:.0f}' for x in mask)} strictly increasing: {increasing}")
    assert ratio <= 2.0
    assert increasing


def test_a8_effective_blocks(verdict):
    count = effective_block_count(validate_config(LLSAConfig(16384, 16, 16, 8, 2, enrich_levels=2)))
    verdict("A8", f"effective_block_count = {count} (== 20)")
    assert count == 20


def reorder_failures(H, B):
    s = block_side(B)
    p = build_reorder(H, H, B)
    fails = []
    if sorted(p.forward.tolist()) != list(range(H * H)) or not np.array_equal(p.forward[p.inverse], np.arange(H * H)):
        fails.append("bijection")
    x = gen_random(H * H, 3, H + B)
    if not np.array_equal(apply_permutation(apply_permutation(x, p), p, "inverse"), x):
        fails.append("round trip")
    r, c = np.divmod(np.arange(H * H), H)
    for i in range(p.levels + 1):
        side = s**i
        patch = (r // side) * (H // side) + c // side
        lo = np.full(patch.max() + 1, H * H)
        hi = np.zeros(patch.max() + 1, dtype=np.int64)
        np.minimum.at(lo, patch, p.inverse)
        np.maximum.at(hi, patch, p.inverse)
        if not np.all(hi - lo + 1 == side * side) or not np.all(lo % (side * side) == 0):
            fails.append(f"contiguity at level {i}")
    seq = apply_permutation(x, p)
    for l in range(1, p.levels + 1):
        pooled = build_pyramid(seq, B, l)[l]
        side = s**l
        ref = apply_permutation(spatial_pool(x, H, H, side), build_reorder(H // side, H // side, B))
        if np.max(np.abs(pooled - ref)) > 1e-12:
            fails.append(f"pooling at level {l}")
    return p.levels, fails


def test_a9_reordering(verdict):
    results = {(H, B): reorder_failures(H, B) for H, B in itertools.product((4, 16, 64), (4, 16))}
    failed = {key: f for key, (_, f) in results.items() if f}
    depths = ", ".join(f"{H}/{B}:L{lv}" for (H, B), (lv, _) in results.items())
    verdict("A9", f"6 (H=W, B) cases, depths {depths}; failures: {failed or 'none'}")
    assert not failed
