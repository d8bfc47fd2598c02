import math
import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from spinrev.diffusion import Normalizer  # noqa: E402
from spinrev.phantom import PhantomSpec, generate_phantom  # noqa: E402


@pytest.fixture(scope="session")
def normalizer():
    return Normalizer()


@pytest.fixture(scope="session")
def phantom32():
    return generate_phantom(PhantomSpec(32, 32, seed=1))


@pytest.fixture(scope="session")
def phantom64():
    return generate_phantom(PhantomSpec(64, 64, seed=1))


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))


DEG = math.pi / 180.0


# acceptance reporting: one line per criterion, driven by the real test outcome

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA[mark.args[0]] = (mark.args[1], "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"criterion {n} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
