import pytest

from seldkit import autodiff


@pytest.fixture(autouse=True)
def _finiteness_checks():
    # hard-fail on NaN/Inf inside any op while tests run
    autodiff.set_debug_checks(True)
    yield
    autodiff.set_debug_checks(False)
