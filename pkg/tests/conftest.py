import pytest

from flashsim.scenario import builtin_scenario


@pytest.fixture(scope="session")
def paa_state():
    state, _ = builtin_scenario("pump_arbitrage")
    return state


@pytest.fixture(scope="session")
def oracle_state():
    state, _ = builtin_scenario("oracle_manipulation")
    return state
