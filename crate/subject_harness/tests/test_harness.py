import json
import os
import sys

import pytest

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.dirname(HERE))
sys.path.insert(0, os.path.join(os.path.dirname(HERE), "golden"))

import build_cases  # noqa: E402
import kubench_harness as harness  # noqa: E402

with open(os.path.join(os.path.dirname(HERE), "golden", "cases.json"), encoding="utf-8") as fh:
    GOLDEN = json.load(fh)


@pytest.mark.parametrize("case", GOLDEN, ids=[c["name"] for c in GOLDEN])
def test_golden_report_is_bit_exact(case):
    assert build_cases.run_case(case) == case["expected_stdout"]


def test_golden_suite_matches_definitions():
    assert [c["name"] for c in GOLDEN] == [c["name"] for c in build_cases.CASES]
    assert len(GOLDEN) == 12


def test_exactly_one_sentinel_line():
    for case in GOLDEN:
        lines = case["expected_stdout"].splitlines()
        assert len(lines) == 1 and lines[0].startswith(harness.SENTINEL)


def test_values_match_rules():
    assert harness.values_match(1, 1.0)
    assert not harness.values_match(0.1 + 0.2, 0.3)
    assert harness.values_match(0.1 + 0.2, 0.3, 1e-9)
    assert harness.values_match({"a": [1.0, 2.0]}, {"a": [1.0 + 1e-12, 2.0]}, 1e-9)
    assert not harness.values_match((1.0,), [1.0], 1e-9)
    # Booleans never get the tolerance, even though True == 1.
    assert not harness.values_match(True, 0.9, 0.5)
    assert harness.values_match(float("nan"), float("nan"), 1e-9)


def test_report_for_partial_results(tmp_path):
    solution = tmp_path / "solution.py"
    solution.write_text("def f(x):\n    return x * 2\n", encoding="utf-8")
    tests = [{"kind": "io", "call": "f(2)", "expected": "4"}, {"kind": "weird"}]
    report = harness.run_tests(str(solution), tests)
    assert [r["status"] for r in report["results"]] == ["pass", "error"]
    assert "fatal" not in report


def test_usage_error_exit_code(capsys):
    assert harness.main(["only-one-arg"]) == 2
    assert harness.SENTINEL not in capsys.readouterr().out
