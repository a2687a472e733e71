import time

import numpy as np

from triagenet import diffcore as dc
from triagenet import gradcheck


def test_full_suite_passes():
    t0 = time.perf_counter()
    results = gradcheck.run_suite(0)
    assert time.perf_counter() - t0 < 60
    failing = [(r.name, r.rel_err) for r in results if not r.passed]
    assert failing == []
    names = {r.name for r in results}
    assert {"matmul", "unary:sigmoid", "rearrange_group", "rearrange_stride", "concat",
            "smoothed_cross_entropy", "end_to_end:tiny_model"} <= names


def test_other_seed_passes():
    ok, text = gradcheck.main(seed=3)
    assert ok, text


def test_corrupted_rule_is_named(monkeypatch):
    fwd, _ = dc.UNARY_RULES["sigmoid"]
    monkeypatch.setitem(dc.UNARY_RULES, "sigmoid", (fwd, lambda x, y: y))  # wrong: drops (1 - y)
    ok, text = gradcheck.main(0)
    assert not ok
    failed = [line for line in text.splitlines() if line.startswith("FAIL")]
    assert any("unary:sigmoid" in line for line in failed)
    assert any("end_to_end:tiny_model" in line for line in failed)
    assert all("PASS" in line for line in text.splitlines() if "unary:tanh" in line)


def test_rel_error_guard():
    assert gradcheck.rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert gradcheck.rel_error(np.ones(2), np.ones(2) * 1.1) > 0.05
