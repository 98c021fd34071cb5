"""Writes cases.json from the definitions below, recording the harness's
current output as the expected report line.

Run after an intentional change to the report format and review the diff:

    python3 subject_harness/golden/build_cases.py
"""

import json
import os
import subprocess
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
HARNESS = os.path.join(os.path.dirname(HERE), "kubench_harness.py")


def a(code):
    return {"kind": "assert", "code": code}


def io(call, expected, tol=None):
    case = {"kind": "io", "call": call, "expected": expected}
    if tol is not None:
        case["float_tolerance"] = tol
    return case


ADD = "def add(a, b):\n    return a + b\n"

CASES = [
    {"name": "asserts_all_pass", "solution": ADD,
     "tests": [a("assert add(1, 2) == 3"), a("assert add(-1, 1) == 0"), a("assert add('a', 'b') == 'ab'")]},
    {"name": "assert_failure_with_message", "solution": ADD,
     "tests": [a("assert add(1, 2) == 3"), a("assert add(2, 2) == 5, 'two plus two'"), a("assert add(0, 0) == 1")]},
    {"name": "io_all_pass", "solution": ADD, "entry_point": "add",
     "tests": [io("add(1, 2)", "3"), io("add([1], [2])", "[1, 2]"), io("add(0.5, 0.25)", "0.75")]},
    {"name": "io_mismatch", "solution": ADD,
     "tests": [io("add(1, 2)", "4"), io("add('x', 'y')", "'xy'")]},
    {"name": "runtime_error_is_isolated",
     "solution": "def inv(x):\n    return 1 / x\n",
     "tests": [io("inv(1)", "1.0"), io("inv(2)", "0.5"), io("inv(0)", "0"), io("inv(4)", "0.25")]},
    {"name": "syntax_error_is_fatal",
     "solution": "def broken(:\n    return 1\n",
     "tests": [a("assert broken() == 1")]},
    {"name": "import_error_is_fatal",
     "solution": "import module_that_does_not_exist_kubench\n\ndef f():\n    return 1\n",
     "tests": [a("assert f() == 1")]},
    {"name": "float_tolerance",
     "solution": "def third():\n    return 1 / 3\n\ndef pair():\n    return [0.1 + 0.2, 2.0]\n",
     "tests": [io("third()", "0.3333", 1e-3), io("third()", "0.3333"), io("pair()", "[0.3, 2.0]", 1e-9),
               io("pair()", "[0.3, 2.0]")]},
    {"name": "per_test_timeout", "timeout": 0.3,
     "solution": "def spin(n):\n    while n:\n        pass\n    return n\n",
     "tests": [io("spin(0)", "0"), io("spin(1)", "1"), io("spin(0)", "0")]},
    {"name": "output_is_captured",
     "solution": "import sys\n\ndef shout(x):\n    print('hello', x)\n    print('warn', file=sys.stderr)\n    return x\n",
     "tests": [io("shout(1)", "1"), io("shout(2)", "3")]},
    {"name": "namespace_isolation",
     "solution": "STATE = []\nLIMIT = 1\n\ndef push(x):\n    STATE.append(x)\n    return len(STATE)\n",
     "tests": [a("LIMIT = 99\nassert LIMIT == 99"), a("assert LIMIT == 1"), a("STATE = None\nassert STATE is None"),
               a("assert push(1) >= 1")]},
    {"name": "missing_entry_point_is_fatal", "entry_point": "solve",
     "solution": "def helper():\n    return 1\n",
     "tests": [a("assert helper() == 1")]},
]


def run_case(case):
    with tempfile.TemporaryDirectory() as tmp:
        with open(os.path.join(tmp, "solution.py"), "w", encoding="utf-8") as fh:
            fh.write(case["solution"])
        with open(os.path.join(tmp, "tests.json"), "w", encoding="utf-8") as fh:
            json.dump(case["tests"], fh)
        argv = [sys.executable, HARNESS, "solution.py", "tests.json"]
        if case.get("entry_point"):
            argv.append(case["entry_point"])
        env = {"PATH": os.environ.get("PATH", ""), "PYTHONHASHSEED": "0", "PYTHONDONTWRITEBYTECODE": "1",
               "PYTHONIOENCODING": "utf-8"}
        if case.get("timeout"):
            env["KUBENCH_TEST_TIMEOUT"] = str(case["timeout"])
        done = subprocess.run(argv, cwd=tmp, env=env, capture_output=True, text=True, timeout=30, check=True)
        return done.stdout


def main():
    out = []
    for case in CASES:
        record = dict(case)
        record["expected_stdout"] = run_case(case)
        out.append(record)
    with open(os.path.join(HERE, "cases.json"), "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2)
        fh.write("\n")


if __name__ == "__main__":
    main()
