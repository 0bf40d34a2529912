import pytest

from countprompt import meta
from countprompt.fixtures import build_pipeline


@pytest.fixture(scope="session")
def pipe():
    return build_pipeline(0)


@pytest.fixture(scope="session")
def cfg():
    return meta.OptimConfig()
