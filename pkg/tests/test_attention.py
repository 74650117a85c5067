import numpy as np
import pytest

import llsa
from llsa import LLSAConfig, ReweightMode, build_plan, build_pyramid, hierarchical_topk, llsa_forward, validate_config
from llsa.errors import NonFiniteError, ShapeMismatch
from llsa.oracle import dense_attention, effective_attention
from llsa.tensorio import gen_random

from conftest import max_abs

MODES = ["scale_kv", "logit_bias"]


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("seed", range(3))
def test_matches_effective_attention(backend, make_case, mode, seed):
    c = make_case(256, 16, 4, 2, 2, mode=mode, seed=seed)
    ref = effective_attention(c.q, c.k, c.v, c.pyr_k, c.pyr_v, c.plan, c.cfg)
    assert max_abs(c.out, ref) <= 1e-10


@pytest.mark.parametrize("n, b, k, levels, enrich", [
    (64, 2, 2, 2, 1), (512, 2, 3, 4, 2), (1024, 4, 4, 3, 3), (1024, 8, 2, 2, 0),
])
@pytest.mark.parametrize("mode", MODES)
def test_other_shapes_match_oracle(backend, make_case, n, b, k, levels, enrich, mode):
    c = make_case(n, 8, b, k, levels, enrich, mode)
    ref = effective_attention(c.q, c.k, c.v, c.pyr_k, c.pyr_v, c.plan, c.cfg)
    assert max_abs(c.out, ref) <= 1e-10


def test_single_precision_matches_oracle(backend, make_case, single_precision):
    c = make_case(256, 16, 4, 2, 2)
    assert c.out.dtype == np.float32
    ref = effective_attention(c.q, c.k, c.v, c.pyr_k, c.pyr_v, c.plan, c.cfg)
    assert max_abs(c.out, ref) <= 1e-4


def test_full_coverage_is_dense(backend, make_case):
    n, b = 256, 4
    c = make_case(n, 16, b, n // b, 1, enrich=0)
    assert max_abs(c.out, dense_attention(c.q, c.k, c.v, c.cfg.softmax_scale)) <= 1e-10


def test_partial_coverage_is_not_dense(make_case):
    n, b = 256, 4
    c = make_case(n, 16, b, n // b**2, 1, enrich=0)
    assert max_abs(c.out, dense_attention(c.q, c.k, c.v, c.cfg.softmax_scale)) > 1e-3


def test_identical_rows_logit_bias(backend):
    n, d = 256, 5
    x = np.tile(np.linspace(-1, 1, d), (n, 1))
    out, _ = llsa.attend(x, x, x, LLSAConfig(n, d, 4, 2, 2, reweight_mode=ReweightMode.LOGIT_BIAS))
    np.testing.assert_allclose(out, x, rtol=0, atol=1e-14)


def test_scale_kv_equal_values_in_hull(backend):
    n, d, b, levels = 256, 4, 4, 2
    v = np.tile(np.array([1.0, -2.0, 0.5, 3.0]), (n, 1))
    out, _ = llsa.attend(gen_random(n, d, 0), gen_random(n, d, 1), v, LLSAConfig(n, d, b, 2, levels))
    alpha = out[:, 0]
    np.testing.assert_allclose(out, alpha[:, None] * v[0], rtol=1e-12)
    assert alpha.min() >= 1.0 - 1e-12 and alpha.max() <= b**levels + 1e-9


def test_equal_logits_weighted_average(backend):
    # q = 0 makes every logit equal; LogitBias then averages with multiplicities
    n, b = 9, 3
    cfg = validate_config(LLSAConfig(n, 2, b, 1, 1, reweight_mode=ReweightMode.LOGIT_BIAS))
    v = gen_random(n, 2, 3)
    q, k = np.zeros((n, 2)), gen_random(n, 2, 4)
    pk, pv = build_pyramid(k, b, 1), build_pyramid(v, b, 1)
    plan = build_plan(hierarchical_topk(build_pyramid(q, b, 1), pk, cfg), cfg)
    out = llsa_forward(q, k, v, pk, pv, plan, cfg).output
    assert plan.n_entries == 2
    for i in range(cfg.n_blocks):
        fine = plan.entry_blocks[i, 0]
        expected = (v[fine * b:(fine + 1) * b].sum(0) + 3 * pv[1].sum(0)) / (b + 3 * b)
        np.testing.assert_allclose(out[i * b:(i + 1) * b], np.tile(expected, (b, 1)), rtol=1e-13)


def test_multiplicity_weighted_average():
    # single row: one fine block of weight 1 and one coarse block of weight B
    n, b = 4, 2
    cfg = validate_config(LLSAConfig(n, 1, b, 1, 1, reweight_mode=ReweightMode.LOGIT_BIAS))
    v = np.array([[1.0], [1.0], [5.0], [5.0]])
    q, k = np.zeros((n, 1)), np.zeros((n, 1))
    pk, pv = build_pyramid(k, b, 1), build_pyramid(v, b, 1)
    plan = build_plan(hierarchical_topk(build_pyramid(q, b, 1), pk, cfg), cfg)
    out = effective_attention(q, k, v, pk, pv, plan, cfg)
    # tie: block 0 chosen; values (1, 1) at weight 1 and pooled (1, 5) at weight 2
    np.testing.assert_allclose(out[:, 0], (1 + 1 + 2 * (1 + 5)) / 6, rtol=1e-15)


def test_logit_shift_invariance(backend):
    n, b, levels = 256, 4, 2
    cfg = validate_config(LLSAConfig(n, 1, b, 2, levels, reweight_mode=ReweightMode.LOGIT_BIAS))
    q, k, v = gen_random(n, 1, 0), gen_random(n, 1, 1), gen_random(n, 1, 2)
    pk, pv = build_pyramid(k, b, levels), build_pyramid(v, b, levels)
    plan = build_plan(hierarchical_topk(build_pyramid(q, b, levels), pk, cfg), cfg)
    base = llsa_forward(q, k, v, pk, pv, plan, cfg).output
    ks = k + 7.5
    shifted = llsa_forward(q, ks, v, build_pyramid(ks, b, levels), pv, plan, cfg).output
    np.testing.assert_allclose(shifted, base, rtol=1e-12, atol=1e-12)


def test_plan_without_enrichment(make_case):
    c = make_case(256, 4, 4, 2, 2, enrich=0)
    assert c.plan.entry_levels.tolist() == [0, 0]
    assert c.plan.weights.tolist() == [1.0, 1.0]
    np.testing.assert_array_equal(c.plan.entry_blocks, c.sel.per_level[0].indices)


def test_plan_counts_large():
    n, b = 16384, 16
    cfg = validate_config(LLSAConfig(n, 4, b, 8, 2))
    pq = build_pyramid(gen_random(n, 4, 0), b, 2)
    plan = build_plan(hierarchical_topk(pq, pq, cfg), cfg)
    assert plan.n_entries == 20
    assert plan.entry_levels.tolist() == [0] * 8 + [1] * 8 + [2] * 4
    assert set(zip(plan.entry_levels.tolist(), plan.weights.tolist())) == {(0, 1), (1, 16), (2, 256)}


def test_plan_partial_enrichment(make_case):
    c = make_case(64, 4, 2, 2, 2, enrich=1)
    assert c.plan.n_entries == 4
    assert c.plan.entry_levels.tolist() == [0, 0, 1, 1]


def test_plan_canonical_order(make_case):
    c = make_case(1024, 4, 4, 3, 3)
    lv = c.plan.entry_levels
    assert (np.diff(lv) >= 0).all()
    for l in np.unique(lv):
        blocks = c.plan.entry_blocks[:, lv == l]
        assert (np.diff(blocks, axis=1) > 0).all()
    for i in (0, 17, c.cfg.n_blocks - 1):
        for l in range(c.cfg.levels):
            np.testing.assert_array_equal(c.plan.entry_blocks[i, lv == l],
                                          c.sel.per_level[l].indices[i // 4**l])


def test_saved_statistics(make_case):
    c = make_case(256, 16, 4, 2, 2, mode="logit_bias")
    assert (c.state.row_denom > 0).all()
    assert c.state.row_max.shape == (256,)
    assert np.isfinite(c.state.logsumexp).all()


def test_deterministic_across_threads(make_case, threads):
    threads(1)
    one = make_case(4096, 16, 16, 4, 2).out
    threads(4)
    np.testing.assert_array_equal(make_case(4096, 16, 16, 4, 2).out, one)


def test_backends_agree(make_case):
    from llsa import _backend
    outs = []
    for name in _backend.available_backends():
        _backend.use_backend(name)
        outs.append(make_case(1024, 8, 4, 3, 3, mode="logit_bias").out)
    _backend.use_backend(sorted(_backend.available_backends())[0])
    for o in outs[1:]:
        assert max_abs(o, outs[0]) <= 1e-12


def test_heads():
    h, n, d = 3, 64, 4
    q = np.stack([gen_random(n, d, s) for s in range(h)])
    out, ctxs = llsa.attend_heads(q, q, q, LLSAConfig(n, d, 4, 2, 1))
    assert out.shape == (h, n, d) and len(ctxs) == h
    np.testing.assert_array_equal(out[1], llsa.attend(q[1], q[1], q[1], LLSAConfig(n, d, 4, 2, 1))[0])


def test_input_validation(make_case):
    c = make_case(64, 4, 4, 2, 1)
    bad = c.q.copy()
    bad[3, 1] = np.nan
    with pytest.raises(NonFiniteError):
        llsa_forward(bad, c.k, c.v, c.pyr_k, c.pyr_v, c.plan, c.cfg)
    with pytest.raises(ShapeMismatch):
        llsa_forward(c.q[:32], c.k, c.v, c.pyr_k, c.pyr_v, c.plan, c.cfg)
    other = validate_config(LLSAConfig(64, 4, 4, 1, 1))
    with pytest.raises(ShapeMismatch):
        llsa_forward(c.q, c.k, c.v, c.pyr_k, c.pyr_v, c.plan, other)


def test_forward_work_linear_in_k():
    a = llsa.forward_mul_accs(LLSAConfig(16384, 16, 16, 8, 2, enrich_levels=1))
    b = llsa.forward_mul_accs(LLSAConfig(16384, 16, 16, 16, 2, enrich_levels=1))
    assert b == 2 * a
