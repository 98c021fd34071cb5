"""Runs a candidate Python solution against a list of test cases.

Usage::

    python3 kubench_harness.py SOLUTION TESTS [ENTRY_POINT]

``TESTS`` is a JSON list whose items are either
``{"kind": "assert", "code": ...}`` or
``{"kind": "io", "call": ..., "expected": ..., "float_tolerance": ...}``,
where ``call`` and ``expected`` are Python expressions.

Exactly one line starting with ``##KUBENCH##`` is written to stdout. It
carries ``{"results": [{"test_index", "status", "message"}], "fatal"?}``
with ``status`` one of ``pass``, ``fail`` or ``error``. The exit code is 0
whenever that line was written.

If the environment variable ``KUBENCH_TEST_TIMEOUT`` holds a positive
number of seconds, each test is interrupted after that long and reported
as an error.
"""

import contextlib
import io
import json
import linecache
import math
import os
import signal
import sys
import traceback

SENTINEL = "##KUBENCH##"
TIMEOUT_ENV = "KUBENCH_TEST_TIMEOUT"
MAX_MESSAGE = 2000


class TestTimeout(BaseException):
    """Raised inside a test that ran past its time limit."""


def values_match(actual, expected, tolerance=None):
    """Equality, optionally with an absolute tolerance applied to floats
    anywhere inside lists, tuples and dict values."""
    if tolerance is None:
        return actual == expected
    if isinstance(actual, bool) or isinstance(expected, bool):
        return actual == expected
    if isinstance(actual, (int, float)) and isinstance(expected, (int, float)):
        if math.isnan(actual) and math.isnan(expected):
            return True
        return math.isclose(actual, expected, rel_tol=0.0, abs_tol=tolerance)
    if isinstance(actual, (list, tuple)) and isinstance(expected, (list, tuple)):
        return (
            type(actual) is type(expected)
            and len(actual) == len(expected)
            and all(values_match(a, e, tolerance) for a, e in zip(actual, expected))
        )
    if isinstance(actual, dict) and isinstance(expected, dict):
        return actual.keys() == expected.keys() and all(
            values_match(actual[k], expected[k], tolerance) for k in actual
        )
    return actual == expected


def _clip(text):
    text = text.strip()
    if len(text) > MAX_MESSAGE:
        text = text[:MAX_MESSAGE] + "..."
    return text


def format_failure(exc, filename):
    """Traceback limited to frames from the solution file, so the text
    does not depend on where the harness is installed."""
    frames = [f for f in traceback.extract_tb(exc.__traceback__) if f.filename == filename]
    lines = []
    if frames:
        lines.append("Traceback (most recent call last):\n")
        lines.extend(traceback.format_list(frames))
    lines.extend(traceback.format_exception_only(type(exc), exc))
    return "".join(lines).rstrip()


def _describe(exc):
    text = str(exc)
    return f"{type(exc).__name__}: {text}" if text else type(exc).__name__


@contextlib.contextmanager
def _time_limit(seconds):
    if not seconds or not hasattr(signal, "setitimer"):
        yield
        return

    def expire(_signum, _frame):
        raise TestTimeout(f"test exceeded {seconds:g}s")

    previous = signal.signal(signal.SIGALRM, expire)
    signal.setitimer(signal.ITIMER_REAL, seconds)
    try:
        yield
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0)
        signal.signal(signal.SIGALRM, previous)


def _test_timeout():
    raw = os.environ.get(TIMEOUT_ENV, "").strip()
    if not raw:
        return None
    try:
        value = float(raw)
    except ValueError:
        return None
    return value if value > 0 else None


def load_solution(path, entry_point=None):
    """Executes the solution once and returns its globals, or raises."""
    with open(path, encoding="utf-8") as fh:
        source = fh.read()
    filename = os.path.basename(path)
    lines = source.splitlines(keepends=True)
    linecache.cache[filename] = (len(source), None, lines, filename)
    namespace = {"__name__": "solution", "__builtins__": __builtins__}
    exec(compile(source, filename, "exec"), namespace)
    if entry_point and not callable(namespace.get(entry_point)):
        raise NameError(f"entry point '{entry_point}' is not defined")
    return namespace, filename


def run_test(test, base, timeout=None):
    """Runs one test in a copy of the solution's globals."""
    namespace = dict(base)
    captured = io.StringIO()
    status, message = "pass", ""
    try:
        with contextlib.redirect_stdout(captured), contextlib.redirect_stderr(captured):
            with _time_limit(timeout):
                kind = test.get("kind")
                if kind == "assert":
                    exec(compile(test["code"], "<test>", "exec"), namespace)
                elif kind == "io":
                    actual = eval(compile(test["call"], "<test>", "eval"), namespace)
                    expected = eval(compile(test["expected"], "<expected>", "eval"), namespace)
                    if not values_match(actual, expected, test.get("float_tolerance")):
                        status, message = "fail", f"expected {expected!r}, got {actual!r}"
                else:
                    status, message = "error", f"unknown test kind {kind!r}"
    except AssertionError as exc:
        status, message = "fail", str(exc) or "assertion failed"
    except TestTimeout as exc:
        status, message = "error", f"Timeout: {exc}"
    except BaseException as exc:  # noqa: BLE001 - any exception is a test error
        status, message = "error", _describe(exc)
    output = captured.getvalue()
    if output:
        message = f"{message} [output] {output}" if message else f"[output] {output}"
    return {"status": status, "message": _clip(message)}


def run_tests(solution_path, tests, entry_point=None, timeout=None):
    """Builds the report dictionary."""
    report = {"results": []}
    try:
        with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
            base, _filename = load_solution(solution_path, entry_point)
    except BaseException as exc:  # noqa: BLE001 - load failures are reported, not raised
        report["fatal"] = _clip(format_failure(exc, os.path.basename(solution_path)))
        return report
    for index, test in enumerate(tests):
        result = run_test(test, base, timeout)
        report["results"].append({"test_index": index, **result})
    return report


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) not in (2, 3):
        print(__doc__.strip().splitlines()[2].strip(), file=sys.stderr)
        return 2
    solution_path, tests_path = argv[0], argv[1]
    entry_point = argv[2] if len(argv) == 3 else None
    real_stdout = sys.stdout
    try:
        with open(tests_path, encoding="utf-8") as fh:
            tests = json.load(fh)
        if not isinstance(tests, list):
            raise ValueError("tests file must hold a JSON list")
    except (OSError, ValueError) as exc:
        print(f"cannot read tests: {exc}", file=sys.stderr)
        return 2
    report = run_tests(solution_path, tests, entry_point, _test_timeout())
    real_stdout.write(SENTINEL + json.dumps(report) + "\n")
    real_stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
