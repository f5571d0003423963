"""Scenario files: declarative initial on-chain state for a simulation run.

A scenario is a JSON document naming assets, entities, starting balances,
and one stanza per pool.  Pool stanzas use the short field names common in
on-chain incident write-ups (vX, cf, er, zY, uX, uY, ocr, leverage, wX,
pm, lr, minP, maxP, kX, maxY).  Two scenarios ship with the package:
``pump_arbitrage`` (the February 15 2020 ETH/WBTC incident state) and
``oracle_manipulation`` (the February 18 2020 ETH/sUSD incident state).
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Any

from .models import (
    AutomatedPriceReserve,
    BalanceLedger,
    ConfigError,
    ConstantProductAmm,
    FixedPriceMarket,
    FlashLoanPool,
    InterestModel,
    LendingPool,
    MarginPlatform,
    Pool,
    WorldState,
)

BUILTIN_SCENARIOS = ("pump_arbitrage", "oracle_manipulation")


def _require(stanza: dict, pool_id: str, *fields: str) -> list[Any]:
    missing = [f for f in fields if f not in stanza]
    if missing:
        raise ConfigError(f"pool {pool_id!r}: missing field(s) {', '.join(missing)}")
    return [stanza[f] for f in fields]


def _build_pool(pool_id: str, stanza: dict) -> Pool:
    kind = stanza.get("type")
    if kind == "flash_loan":
        asset, v_x = _require(stanza, pool_id, "asset", "vX")
        interest = stanza.get("interest", {})
        return FlashLoanPool(
            asset=asset,
            available=float(v_x),
            interest=InterestModel(
                rate=float(interest.get("rate", 0.0)),
                flat=float(interest.get("flat", 0.0)),
            ),
        )
    if kind == "constant_product":
        x, y, u_x, u_y = _require(stanza, pool_id, "x", "y", "uX", "uY")
        return ConstantProductAmm(
            asset_x=x, asset_y=y,
            reserve_x=float(u_x), reserve_y=float(u_y),
            fee_rate=float(stanza.get("fee", 0.0)),
        )
    if kind == "price_reserve":
        x, y, k_x, lr, min_p, max_p = _require(stanza, pool_id, "x", "y", "kX", "lr", "minP", "maxP")
        return AutomatedPriceReserve(
            asset_x=x, asset_y=y,
            inventory_x=float(k_x), liquidity_rate=float(lr),
            min_price=float(min_p), max_price=float(max_p),
        )
    if kind == "fixed_price":
        x, y, p_m = _require(stanza, pool_id, "x", "y", "pm")
        max_y = stanza.get("maxY")
        return FixedPriceMarket(
            asset_x=x, asset_y=y, price=float(p_m),
            max_y=None if max_y is None else float(max_y),
        )
    if kind == "lending":
        collateral, debt, cf, z_y = _require(stanza, pool_id, "collateral", "debt", "cf", "zY")
        er = stanza.get("er")
        return LendingPool(
            collateral_asset=collateral, debt_asset=debt,
            collateral_factor=float(cf), available_debt=float(z_y),
            exchange_rate=None if er is None else float(er),
        )
    if kind == "margin":
        collateral, short, lev, ocr, w_x = _require(
            stanza, pool_id, "collateral", "short", "leverage", "ocr", "wX"
        )
        return MarginPlatform(
            collateral_asset=collateral, short_asset=short,
            leverage=float(lev), over_collateral_ratio=float(ocr),
            available_x=float(w_x),
            venue=stanza.get("venue"),
            external_price=None if stanza.get("emp") is None else float(stanza["emp"]),
        )
    raise ConfigError(f"pool {pool_id!r}: unknown type {kind!r}")


def scenario_from_dict(doc: dict) -> WorldState:
    """Build the step-0 world state from a parsed scenario document."""
    assets = doc.get("assets", [])
    if len(set(assets)) != len(assets) or any(not a for a in assets):
        raise ConfigError("assets must be unique non-empty symbols")
    balances: dict[tuple[str, str], float] = {}
    for entity, per_asset in doc.get("balances", {}).items():
        for asset, amount in per_asset.items():
            if float(amount) < 0:
                raise ConfigError(f"negative initial balance for {entity}/{asset}")
            balances[(entity, asset)] = float(amount)
    pools = {pid: _build_pool(pid, stanza) for pid, stanza in doc.get("pools", {}).items()}
    declared = set(assets)
    for pid, pool in pools.items():
        if isinstance(pool, MarginPlatform) and pool.venue is not None and pool.venue not in pools:
            raise ConfigError(f"pool {pid!r}: venue {pool.venue!r} not defined")
        if declared:
            referenced = {
                getattr(pool, name)
                for name in ("asset", "asset_x", "asset_y", "collateral_asset",
                             "debt_asset", "short_asset")
                if getattr(pool, name, None) is not None
            }
            stray = referenced - declared
            if stray:
                raise ConfigError(f"pool {pid!r}: undeclared asset(s) {sorted(stray)}")
    return WorldState(ledger=BalanceLedger(balances), pools=pools, step_index=0)


def load_scenario(path: str | Path) -> tuple[WorldState, dict]:
    """Load a scenario file; returns the initial state and the raw document."""
    raw = Path(path).read_text()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario {path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return scenario_from_dict(doc), doc


def builtin_scenario(name: str) -> tuple[WorldState, dict]:
    """Load one of the bundled scenarios by name."""
    if name not in BUILTIN_SCENARIOS:
        raise ConfigError(f"unknown bundled scenario {name!r}; have {BUILTIN_SCENARIOS}")
    raw = resources.files("flashsim.data").joinpath(f"{name}.json").read_text()
    doc = json.loads(raw)
    return scenario_from_dict(doc), doc
