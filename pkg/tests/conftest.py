import time

import pytest

from ymwml.gradcheck import run_suite


@pytest.fixture(scope="session")
def gradcheck_all():
    """Full finite-difference sweep (ops + loss + model), shared between the
    unit tests and the acceptance gate so it only runs once per session."""
    t0 = time.time()
    results = run_suite("all")
    return results, time.time() - t0
