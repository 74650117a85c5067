import pytest
from hypothesis import given, settings, strategies as st

import llsa
from llsa import LLSAConfig, effective_block_count, validate_config
from llsa.core import LevelIndices, SelectionResult
from llsa.errors import ConfigError, DivisibilityError, LevelError, PrecisionError, TopKError

import numpy as np


def cfg(n, b, k, levels, enrich=None, d=4):
    return validate_config(LLSAConfig(n, d, b, k, levels, enrich_levels=enrich))


def test_max_levels():
    assert llsa.max_levels(65536, 16) == 3
    assert llsa.max_levels(4, 2) == 1
    assert llsa.max_levels(15, 16) == -1


def test_minimal_config_is_valid():
    c = cfg(4, 2, 1, 1)
    assert (c.n, c.block_size, c.top_k, c.levels, c.enrich_levels) == (4, 2, 1, 1, 1)


def test_defaults_resolved():
    c = cfg(256, 4, 2, 2, d=16)
    assert c.softmax_scale == pytest.approx(0.25)
    assert c.enrich_levels == 2
    assert c.reweight_mode is llsa.ReweightMode.SCALE_KV
    assert validate_config(c) is c


def test_topk_bound_counts_coarsest_tokens():
    # 4096 / 16^2 = 16 level-2 tokens compete in the coarsest selection
    assert cfg(4096, 16, 8, 2).top_k == 8
    assert cfg(4096, 16, 16, 2).top_k == 16
    with pytest.raises(TopKError):
        cfg(4096, 16, 17, 2)
    with pytest.raises(TopKError):
        cfg(4096, 16, 0, 2)


@pytest.mark.parametrize("args, err", [
    ((100, 4, 1, 1), DivisibilityError),
    ((64, 1, 1, 1), DivisibilityError),
    ((64, 4, 1, 0), LevelError),
    ((64, 4, 1, 3), LevelError),
    ((64, 4, 1, 1, 2), LevelError),
    ((64, 4, 1, 1, -1), LevelError),
])
def test_invalid_configs(args, err):
    with pytest.raises(err):
        cfg(*args)


def test_bad_scale():
    with pytest.raises(ValueError):
        validate_config(LLSAConfig(64, 4, 4, 1, 1, softmax_scale=0.0))


@pytest.mark.parametrize("n, enrich, expected", [
    (16384, 2, 20),
    (16384, 0, 8),
    (16384, 1, 16),
    (65536, 2, 32),
])
def test_effective_block_count(n, enrich, expected):
    assert effective_block_count(cfg(n, 16, 8, 2, enrich)) == expected


def test_full_fine_selection_covers_every_block():
    c = cfg(256, 4, 64, 1, enrich=0)
    assert effective_block_count(c) * c.block_size == c.n


@settings(max_examples=300, deadline=None)
@given(n=st.integers(1, 5000), b=st.integers(1, 20), k=st.integers(-1, 40),
       levels=st.integers(-1, 6), enrich=st.one_of(st.none(), st.integers(-1, 6)))
def test_validation_is_total(n, b, k, levels, enrich):
    try:
        c = validate_config(LLSAConfig(n, 3, b, k, levels, enrich_levels=enrich))
    except ConfigError as exc:
        assert type(exc) in (DivisibilityError, LevelError, TopKError)
        return
    assert c.n % c.block_size ** (c.levels + 1) == 0
    assert 1 <= c.levels <= llsa.max_levels(c.n, c.block_size)
    assert 0 <= c.enrich_levels <= c.levels
    assert 1 <= c.top_k <= c.n // c.block_size ** c.levels


def test_auto_levels():
    assert llsa.auto_levels(65536, 16, 8) == 3
    assert llsa.auto_levels(8192, 16, 8) == 2
    with pytest.raises(LevelError):
        llsa.auto_levels(16, 16, 1)


def test_level_geometry():
    c = cfg(256, 4, 2, 2)
    assert c.n_blocks == 64
    assert [c.level_rows(l) for l in range(3)] == [256, 64, 16]
    assert [c.level_blocks(l) for l in range(3)] == [64, 16, 4]
    assert [c.weight(l) for l in range(3)] == [1, 4, 16]


def test_precision_switch():
    assert llsa.get_precision() == "double"
    assert llsa.default_tolerance() == 1e-10
    llsa.set_precision("single")
    try:
        assert llsa.default_tolerance() == 1e-4
    finally:
        llsa.set_precision("double")
    with pytest.raises(PrecisionError):
        llsa.set_precision("half")


def test_level_indices_check():
    ok = LevelIndices(0, np.array([[0, 2], [1, 3]], dtype=np.int32))
    ok.check(4)
    with pytest.raises(ValueError):
        ok.check(3)
    with pytest.raises(ValueError):
        LevelIndices(0, np.array([[2, 0]], dtype=np.int32)).check(4)


def test_selection_dump():
    sel = SelectionResult([LevelIndices(0, np.array([[0, 3], [1, 2]], dtype=np.int32))])
    assert sel.dump() == "level 0 / row 0: 0 3\nlevel 0 / row 1: 1 2\n"
