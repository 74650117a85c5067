import numpy as np
import pytest

import llsa
from llsa import _backend
from llsa.attention import build_plan, llsa_forward
from llsa.indexmap import transpose_all
from llsa.pyramid import build_pyramid
from llsa.selection import hierarchical_topk
from llsa.tensorio import gen_random

BACKENDS = sorted(_backend.available_backends())


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = _backend.current_backend()
    _backend.use_backend(request.param)
    yield request.param
    _backend.use_backend(prev)


@pytest.fixture
def single_precision():
    llsa.set_precision("single")
    yield
    llsa.set_precision("double")


@pytest.fixture
def threads():
    """Restores the worker count after a test changes it."""
    n = llsa.get_num_threads()
    yield llsa.set_num_threads
    llsa.set_num_threads(n)


class Case:
    """One seeded instance with every intermediate of a forward pass."""

    def __init__(self, n, d, b, k, levels, enrich=None, mode="scale_kv", seed=0):
        self.cfg = llsa.validate_config(llsa.LLSAConfig(
            n, d, b, k, levels, enrich_levels=enrich, reweight_mode=llsa.ReweightMode(mode)))
        self.q, self.k, self.v, self.g = (gen_random(n, d, 4 * seed + j) for j in range(4))
        self.pyr_q = build_pyramid(self.q, b, levels)
        self.pyr_k = build_pyramid(self.k, b, levels)
        self.pyr_v = build_pyramid(self.v, b, levels)
        self.sel = hierarchical_topk(self.pyr_q, self.pyr_k, self.cfg)
        self.plan = build_plan(self.sel, self.cfg)
        self.state = llsa_forward(self.q, self.k, self.v, self.pyr_k, self.pyr_v, self.plan, self.cfg)
        self.transposed = transpose_all(self.sel, self.cfg)

    @property
    def out(self):
        return self.state.output


@pytest.fixture
def make_case():
    return Case


def max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        props = dict(report.user_properties)
        _ACCEPTANCE[report.nodeid] = (props.get("criterion", report.nodeid.split("::")[-1]),
                                      report.passed, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE.values():
        terminalreporter.write_line(f"{name:<4} {'PASS' if ok else 'FAIL'}  {detail}")
