import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from llsa import LLSAConfig, build_pyramid, hierarchical_topk, table_pairs, transpose_all, transpose_indices, validate_config
from llsa.core import LevelIndices
from llsa.errors import IndexOutOfRange
from llsa.indexmap import TransposedIndices, full_transpose
from llsa.oracle import mask_transpose
from llsa.tensorio import gen_random


def table(rows):
    return np.array(rows, dtype=np.int32)


@pytest.mark.parametrize("rows, tk, offsets, flat", [
    ([[1], [0], [1], [3]], 4, [0, 1, 3, 3, 4], [1, 0, 2, 3]),
    ([[0], [1], [2]], 3, [0, 1, 2, 3], [0, 1, 2]),
    ([[0, 1], [0, 1]], 2, [0, 2, 4], [0, 1, 0, 1]),
])
def test_small_examples(backend, rows, tk, offsets, flat):
    for fn in (transpose_indices, mask_transpose):
        tr = fn(table(rows), tk)
        np.testing.assert_array_equal(tr.offsets, offsets)
        np.testing.assert_array_equal(tr.flat_queries, flat)


def test_segments_and_pairs(backend):
    tr = transpose_indices(table([[1], [0], [1], [3]]), 4)
    assert tr.n_key_blocks == 4
    np.testing.assert_array_equal(tr.segment(1), [0, 2])
    assert tr.segment(2).size == 0
    assert tr.pairs() == [(0, 1), (1, 0), (2, 1), (3, 3)]
    assert tr.pairs() == table_pairs(table([[1], [0], [1], [3]]))


def test_accepts_level_indices(backend):
    li = LevelIndices(0, table([[0, 2], [1, 2]]))
    assert transpose_indices(li, 3) == mask_transpose(li, 3)


def test_out_of_range(backend):
    with pytest.raises(IndexOutOfRange):
        transpose_indices(table([[0], [4]]), 4)
    with pytest.raises(IndexOutOfRange):
        transpose_indices(table([[-1]]), 4)
    with pytest.raises(IndexOutOfRange):
        mask_transpose(table([[5]]), 4)


def random_table(rng, t, tk, k):
    return np.sort(np.array([rng.choice(tk, size=k, replace=False) for _ in range(t)],
                            dtype=np.int32).reshape(t, k), axis=1)


@settings(max_examples=200, deadline=None)
@given(t=st.integers(1, 64), tk=st.integers(1, 64), k=st.integers(1, 8), seed=st.integers(0, 2**32 - 1),
       chunks=st.integers(0, 9))
def test_random_instances(t, tk, k, seed, chunks):
    k = min(k, tk)
    idx = random_table(np.random.default_rng(seed), t, tk, k)
    tr = transpose_indices(idx, tk, n_chunks=chunks)
    assert tr == mask_transpose(idx, tk)
    assert tr.pairs() == table_pairs(idx)
    assert tr.offsets[0] == 0 and tr.offsets[-1] == t * k
    assert (np.diff(tr.offsets) >= 0).all()
    counts = np.bincount(idx.ravel(), minlength=tk)
    np.testing.assert_array_equal(np.diff(tr.offsets), counts)
    for b in range(tk):
        seg = tr.segment(b)
        assert (np.diff(seg) > 0).all()


def test_backends_agree():
    from llsa import _backend
    idx = random_table(np.random.default_rng(0), 300, 200, 8)
    results = []
    for name in _backend.available_backends():
        _backend.use_backend(name)
        results.append(transpose_indices(idx, 200))
    _backend.use_backend(sorted(_backend.available_backends())[0])
    assert all(r == results[0] for r in results)


def test_uniform_selection(backend):
    t, tk, k = 10, 7, 3
    tr = transpose_indices(np.tile(np.arange(k, dtype=np.int32), (t, 1)), tk)
    lengths = np.diff(tr.offsets)
    np.testing.assert_array_equal(lengths, [t] * k + [0] * (tk - k))


def test_single_level(backend):
    cfg = validate_config(LLSAConfig(64, 4, 4, 2, 1))
    pq = build_pyramid(gen_random(64, 4, 0), 4, 1)
    sel = hierarchical_topk(pq, pq, cfg)
    trs = transpose_all(sel, cfg)
    assert len(trs) == 1 and trs[0].n_key_blocks == 16


@pytest.mark.parametrize("seed", range(3))
def test_two_level_selection_matches_mask(backend, seed):
    cfg = validate_config(LLSAConfig(256, 8, 4, 2, 2))
    sel = hierarchical_topk(build_pyramid(gen_random(256, 8, seed), 4, 2),
                            build_pyramid(gen_random(256, 8, seed + 9), 4, 2), cfg)
    for li, tr in zip(sel.per_level, transpose_all(sel, cfg)):
        assert tr == mask_transpose(li, cfg.level_blocks(li.level))
        assert tr.pairs() == table_pairs(li)


def test_full_transpose():
    tr = full_transpose(3, 2)
    assert tr == mask_transpose(np.tile(np.arange(2, dtype=np.int32), (3, 1)), 2)


def test_equality():
    a = TransposedIndices(np.array([0], np.int32), np.array([0, 1]))
    assert a == TransposedIndices(np.array([0], np.int32), np.array([0, 1]))
    assert a != TransposedIndices(np.array([0], np.int32), np.array([0, 0, 1]))
    assert a.__eq__(3) is NotImplemented
