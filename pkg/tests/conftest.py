import time

import pytest

from smcgate.crypto import generate_identity
from smcgate.testbed import build_testbed


@pytest.fixture(scope="session")
def anchor():
    return generate_identity("anchor", not_before=int(time.time()) - 3600)


@pytest.fixture(scope="session")
def client_identity(anchor):
    return generate_identity("client", "energy monitoring", issuer=anchor, not_before=int(time.time()) - 3600)


@pytest.fixture
def testbed():
    beds = []

    def make(*args, **kwargs):
        bed = build_testbed(*args, **kwargs)
        beds.append(bed)
        return bed

    yield make
    for bed in beds:
        bed.close()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    # lets fixtures see whether the test body passed
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)
