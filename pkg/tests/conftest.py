import pytest

from exitlab.model import preset


@pytest.fixture(scope="session")
def linear():
    return preset("linear-ou")


@pytest.fixture(scope="session")
def asym():
    return preset("linear-asym")


@pytest.fixture(scope="session")
def cubic():
    return preset("cubic")


@pytest.fixture(scope="session")
def varsigma():
    return preset("varsigma")
