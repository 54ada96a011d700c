import os

import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    from darksurrogate.core import Rng

    return Rng(1234, "tests")


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def record(request):
    """Store one acceptance outcome; the session summary prints them in order."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def _record(number, title, checks, seconds, budget):
        in_time = budget is None or seconds < budget
        passed = all(ok for ok, _ in checks.values()) and in_time
        parts = [f"{name} {'ok' if ok else 'FAILED'} ({detail})" for name, (ok, detail) in checks.items()]
        bound = "no bound" if budget is None else f"< {budget:.0f}s {'ok' if in_time else 'FAILED'}"
        parts.append(f"runtime {seconds:.0f}s {bound}")
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: " + "; ".join(parts)
        results[number] = line
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
