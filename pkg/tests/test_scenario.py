"""Scenario file loading and validation."""

import json

import pytest

from flashsim.models import ConfigError, ConstantProductAmm, FlashLoanPool
from flashsim.scenario import builtin_scenario, load_scenario, scenario_from_dict


def minimal_doc():
    return {
        "assets": ["ETH", "WBTC"],
        "balances": {"adversary": {"ETH": 5.0}},
        "pools": {
            "flash": {"type": "flash_loan", "asset": "ETH", "vX": 100.0},
            "amm": {"type": "constant_product", "x": "ETH", "y": "WBTC",
                    "uX": 10.0, "uY": 10.0},
        },
    }


def test_round_trip_of_minimal_document():
    state = scenario_from_dict(minimal_doc())
    assert state.balance("adversary", "ETH") == 5.0
    assert isinstance(state.pool("flash"), FlashLoanPool)
    assert isinstance(state.pool("amm"), ConstantProductAmm)
    assert state.step_index == 0


def test_bundled_scenarios_carry_incident_figures():
    paa, doc = builtin_scenario("pump_arbitrage")
    assert paa.pool("flash").available == 10000.0
    assert paa.pool("amm").reserve_x == 2817.77
    assert doc["pools"]["lending"]["er"] == 36.48
    oracle, doc = builtin_scenario("oracle_manipulation")
    assert oracle.pool("reserve").liquidity_rate == 0.00252
    assert doc["pools"]["market"]["maxY"] == 943837.59
    assert oracle.pool("lending").exchange_rate is None  # quoted live off the AMM


def test_unknown_builtin_name():
    with pytest.raises(ConfigError):
        builtin_scenario("mystery")


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["assets"].append("ETH"), "unique"),
    (lambda d: d["balances"]["adversary"].update(ETH=-1.0), "negative"),
    (lambda d: d["pools"]["flash"].pop("vX"), "missing field"),
    (lambda d: d["pools"]["flash"].update(type="ponzi"), "unknown type"),
    (lambda d: d["pools"]["amm"].update(x="DOGE"), "undeclared"),
    (lambda d: d["pools"].update(margin={"type": "margin", "collateral": "ETH",
                                         "short": "WBTC", "leverage": 5, "ocr": 1.1,
                                         "wX": 1.0, "venue": "ghost"}), "venue"),
])
def test_validation_failures(mutate, message):
    doc = minimal_doc()
    mutate(doc)
    with pytest.raises(ConfigError, match=message):
        scenario_from_dict(doc)


def test_parse_error_carries_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "assets": [,]\n}')
    with pytest.raises(ConfigError, match="line 2"):
        load_scenario(path)


def test_file_load_matches_dict(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(minimal_doc()))
    state, doc = load_scenario(path)
    assert doc == minimal_doc()
    assert state.pool("flash").available == 100.0
