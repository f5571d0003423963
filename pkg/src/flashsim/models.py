"""Pure state-transition models for six DeFi protocol primitives.

Every operation takes an immutable :class:`WorldState` plus numeric
parameters and returns a fresh state together with a list of signed
constraint residuals.  A residual >= 0 means the protocol rule it encodes
is satisfied; negative residuals are *returned, not raised*, so an
optimizer can walk through infeasible regions.  Misconfiguration (unknown
pool, bad price, zero reserves) raises :class:`ConfigError` instead --
that is a broken setup, not an infeasible trade.

Conventions: each venue trades a pair X/Y; amounts are token units in
binary floating point, and all golden comparisons elsewhere use relative
tolerances, never bit equality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Union

AssetId = str
Entity = str


class ConfigError(Exception):
    """A pool, asset, or parameter is misconfigured (distinct from an infeasible trade)."""


class PositionError(Exception):
    """An operation was applied to a position that does not exist."""


class ResidualViolation(Exception):
    """Strict-mode check found a residual below tolerance."""


STRICT_RESIDUAL_TOL = 1e-9


@dataclass(frozen=True)
class Residual:
    """Signed slack of one protocol constraint; >= 0 means satisfied."""

    name: str
    value: float
    step: int | None = None


@dataclass(frozen=True)
class BalanceLedger:
    """Token balances per (entity, asset); absent entries read as zero."""

    entries: Mapping[tuple[Entity, AssetId], float] = field(default_factory=dict)

    def get(self, entity: Entity, asset: AssetId) -> float:
        return self.entries.get((entity, asset), 0.0)

    def add(self, entity: Entity, asset: AssetId, delta: float) -> "BalanceLedger":
        updated = dict(self.entries)
        updated[(entity, asset)] = updated.get((entity, asset), 0.0) + delta
        return BalanceLedger(updated)

    def is_non_negative(self, tol: float = STRICT_RESIDUAL_TOL) -> bool:
        return all(v >= -tol for v in self.entries.values())


@dataclass(frozen=True)
class InterestModel:
    """Flash-loan fee: proportional rate plus a constant absolute fee."""

    rate: float = 0.0
    flat: float = 0.0

    def fee(self, amount: float) -> float:
        return self.rate * amount + self.flat


@dataclass(frozen=True)
class FlashLoanPool:
    """Uncollateralized intra-transaction lender with `available` liquidity."""

    asset: AssetId
    available: float
    interest: InterestModel = InterestModel()


@dataclass(frozen=True)
class ConstantProductAmm:
    """Two-asset exchange keeping reserve_x * reserve_y invariant (at zero fee)."""

    asset_x: AssetId
    asset_y: AssetId
    reserve_x: float
    reserve_y: float
    fee_rate: float = 0.0


@dataclass(frozen=True)
class AutomatedPriceReserve:
    """Single-inventory market maker quoting min_price * exp(liquidity_rate * inventory_x).

    The quote (X per Y) rises exponentially as X accumulates in inventory;
    min_price/max_price bound the admissible quote, enforced as residuals.
    """

    asset_x: AssetId
    asset_y: AssetId
    inventory_x: float
    liquidity_rate: float
    min_price: float
    max_price: float


@dataclass(frozen=True)
class FixedPriceMarket:
    """Venue selling Y for X at a fixed price, optionally capped in cumulative Y."""

    asset_x: AssetId
    asset_y: AssetId
    price: float  # X per Y
    max_y: float | None = None
    dispensed_y: float = 0.0


@dataclass(frozen=True)
class LoanPosition:
    trader: Entity
    collateral: float
    debt: float


@dataclass(frozen=True)
class LendingPool:
    """Over-collateralized lender: deposit collateral_asset, draw debt_asset.

    `exchange_rate` is collateral units per debt unit; it may be None when a
    caller always supplies a live rate (e.g. read off an AMM).  Open
    positions are tracked per trader so collateral can be redeemed later.
    """

    collateral_asset: AssetId
    debt_asset: AssetId
    collateral_factor: float
    available_debt: float
    exchange_rate: float | None = None
    positions: tuple[LoanPosition, ...] = ()


@dataclass(frozen=True)
class MarginPlatform:
    """Margin venue opening leveraged shorts through an execution venue.

    A short of collateral d pushes d * leverage / over_collateral_ratio of X
    through the venue AMM and locks the received Y until close/liquidation.
    `external_price` substitutes for the AMM when no venue is configured.
    """

    collateral_asset: AssetId
    short_asset: AssetId
    leverage: float
    over_collateral_ratio: float
    available_x: float
    venue: str | None = None  # pool id of a ConstantProductAmm
    external_price: float | None = None
    locked: Mapping[Entity, float] = field(default_factory=dict)


Pool = Union[
    FlashLoanPool,
    ConstantProductAmm,
    AutomatedPriceReserve,
    FixedPriceMarket,
    LendingPool,
    MarginPlatform,
]


@dataclass(frozen=True)
class WorldState:
    """Immutable snapshot of all balances and pool states at one step."""

    ledger: BalanceLedger = BalanceLedger()
    pools: Mapping[str, Pool] = field(default_factory=dict)
    step_index: int = 0

    def pool(self, pool_id: str, kind: type | None = None) -> Pool:
        try:
            found = self.pools[pool_id]
        except KeyError:
            raise ConfigError(f"unknown pool {pool_id!r}") from None
        if kind is not None and not isinstance(found, kind):
            raise ConfigError(
                f"pool {pool_id!r} is {type(found).__name__}, expected {kind.__name__}"
            )
        return found

    def with_pool(self, pool_id: str, pool: Pool) -> "WorldState":
        updated = dict(self.pools)
        updated[pool_id] = pool
        return replace(self, pools=updated)

    def with_ledger(self, ledger: BalanceLedger) -> "WorldState":
        return replace(self, ledger=ledger)

    def balance(self, entity: Entity, asset: AssetId) -> float:
        return self.ledger.get(entity, asset)


OpResult = tuple[WorldState, list[Residual]]


def _require_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise ConfigError(f"{name} must be finite, got {value!r}")


def assert_strict(residuals: list[Residual], tol: float = STRICT_RESIDUAL_TOL) -> None:
    """Validation-mode check: raise if any residual is meaningfully negative."""
    violated = [r for r in residuals if r.value < -tol]
    if violated:
        worst = min(violated, key=lambda r: r.value)
        raise ResidualViolation(
            f"strict mode violation: {worst.name} = {worst.value:.6g} "
            f"({len(violated)} residual(s) below {-tol:g})"
        )


# ---------------------------------------------------------------------------
# Flash loans
# ---------------------------------------------------------------------------

def flash_loan(state: WorldState, pool_id: str, borrower: Entity, amount: float) -> OpResult:
    """Borrow `amount` from a flash pool; feasible while amount <= available."""
    _require_finite("loan amount", amount)
    pool = state.pool(pool_id, FlashLoanPool)
    new_state = state.with_ledger(state.ledger.add(borrower, pool.asset, amount))
    return new_state, [Residual("loan_liquidity", pool.available - amount)]


def flash_repay(state: WorldState, pool_id: str, borrower: Entity, amount: float) -> OpResult:
    """Repay `amount` plus interest; feasible while the borrower can cover both."""
    _require_finite("repay amount", amount)
    pool = state.pool(pool_id, FlashLoanPool)
    owed = amount + pool.interest.fee(amount)
    held = state.balance(borrower, pool.asset)
    new_state = state.with_ledger(state.ledger.add(borrower, pool.asset, -owed))
    return new_state, [Residual("repay_balance", held - owed)]


# ---------------------------------------------------------------------------
# Fixed-price trading
# ---------------------------------------------------------------------------

def sell_x_for_y_fixed(state: WorldState, market_id: str, trader: Entity, amount: float) -> OpResult:
    """Sell `amount` of X for Y at the market's fixed price."""
    _require_finite("sale amount", amount)
    market = state.pool(market_id, FixedPriceMarket)
    if market.price <= 0:
        raise ConfigError(f"market {market_id!r} has non-positive price {market.price}")
    bought = amount / market.price
    ledger = state.ledger.add(trader, market.asset_x, -amount)
    ledger = ledger.add(trader, market.asset_y, bought)
    new_market = replace(market, dispensed_y=market.dispensed_y + bought)
    new_state = state.with_ledger(ledger).with_pool(market_id, new_market)
    residuals = [Residual("seller_balance", state.balance(trader, market.asset_x) - amount)]
    if market.max_y is not None:
        residuals.append(Residual("market_inventory", market.max_y - market.dispensed_y - bought))
    return new_state, residuals


# ---------------------------------------------------------------------------
# Constant-product AMM
# ---------------------------------------------------------------------------

def _amm_checked(state: WorldState, amm_id: str) -> ConstantProductAmm:
    amm = state.pool(amm_id, ConstantProductAmm)
    if amm.reserve_x <= 0 or amm.reserve_y <= 0:
        raise ConfigError(f"amm {amm_id!r} has empty reserves")
    return amm


def amm_swap_x_for_y(state: WorldState, amm_id: str, trader: Entity, amount: float) -> OpResult:
    """Swap `amount` of X into the pool for Y; output preserves the reserve product.

    Output for input p at fee f is p(1-f) * reserve_y / (reserve_x + p(1-f)).
    """
    _require_finite("swap amount", amount)
    if amount < 0:
        raise ConfigError(f"negative swap amount {amount}")
    amm = _amm_checked(state, amm_id)
    effective = amount * (1.0 - amm.fee_rate)
    out = effective * amm.reserve_y / (amm.reserve_x + effective)
    ledger = state.ledger.add(trader, amm.asset_x, -amount)
    ledger = ledger.add(trader, amm.asset_y, out)
    new_amm = replace(amm, reserve_x=amm.reserve_x + amount, reserve_y=amm.reserve_y - out)
    new_state = state.with_ledger(ledger).with_pool(amm_id, new_amm)
    return new_state, [Residual("trader_x_balance", state.balance(trader, amm.asset_x) - amount)]


def amm_swap_y_for_x(state: WorldState, amm_id: str, trader: Entity, amount: float) -> OpResult:
    """Mirror swap: Y in, X out."""
    _require_finite("swap amount", amount)
    if amount < 0:
        raise ConfigError(f"negative swap amount {amount}")
    amm = _amm_checked(state, amm_id)
    effective = amount * (1.0 - amm.fee_rate)
    out = effective * amm.reserve_x / (amm.reserve_y + effective)
    ledger = state.ledger.add(trader, amm.asset_y, -amount)
    ledger = ledger.add(trader, amm.asset_x, out)
    new_amm = replace(amm, reserve_y=amm.reserve_y + amount, reserve_x=amm.reserve_x - out)
    new_state = state.with_ledger(ledger).with_pool(amm_id, new_amm)
    return new_state, [Residual("trader_y_balance", state.balance(trader, amm.asset_y) - amount)]


def amm_spot_price_y(state: WorldState, amm_id: str) -> float:
    """Marginal price of Y in X units: reserve_x / reserve_y."""
    amm = _amm_checked(state, amm_id)
    return amm.reserve_x / amm.reserve_y


# ---------------------------------------------------------------------------
# Automated price reserve
# ---------------------------------------------------------------------------

def reserve_price_y(state: WorldState, reserve_id: str) -> float:
    """Current reserve quote (X per Y); the max_price cap is a residual, not a clamp."""
    res = state.pool(reserve_id, AutomatedPriceReserve)
    return res.min_price * math.exp(res.liquidity_rate * res.inventory_x)


def reserve_convert_x_to_y(state: WorldState, reserve_id: str, trader: Entity, amount: float) -> OpResult:
    """Convert `amount` of X into Y against the exponential-quote reserve.

    Integrating the inverse quote over the inventory move gives the output
    (1 - exp(-liquidity_rate * amount)) / (liquidity_rate * pre-trade quote),
    so successive conversions get a strictly worse marginal rate.
    """
    _require_finite("convert amount", amount)
    if amount < 0:
        raise ConfigError(f"negative convert amount {amount}")
    res = state.pool(reserve_id, AutomatedPriceReserve)
    pre_price = res.min_price * math.exp(res.liquidity_rate * res.inventory_x)
    out = (1.0 - math.exp(-res.liquidity_rate * amount)) / (res.liquidity_rate * pre_price)
    new_res = replace(res, inventory_x=res.inventory_x + amount)
    post_price = res.min_price * math.exp(res.liquidity_rate * new_res.inventory_x)
    ledger = state.ledger.add(trader, res.asset_x, -amount)
    ledger = ledger.add(trader, res.asset_y, out)
    new_state = state.with_ledger(ledger).with_pool(reserve_id, new_res)
    return new_state, [
        Residual("trader_x_balance", state.balance(trader, res.asset_x) - amount),
        Residual("price_floor", post_price - res.min_price),
        Residual("price_cap", res.max_price - post_price),
    ]


# ---------------------------------------------------------------------------
# Collateralized lending
# ---------------------------------------------------------------------------

def collateralized_borrow(
    state: WorldState,
    pool_id: str,
    trader: Entity,
    collateral: float,
    exchange_rate: float | None = None,
    debt_cap: float | None = None,
) -> OpResult:
    """Deposit collateral and draw collateral * factor / rate of the debt asset.

    `exchange_rate` overrides the pool's static rate (oracle-driven pools
    quote a live rate instead).  When `debt_cap` is given the drawn amount
    is clamped to it; otherwise the pool's liquidity limit stays a residual.
    """
    _require_finite("collateral", collateral)
    if collateral < 0:
        raise ConfigError(f"negative collateral {collateral}")
    pool = state.pool(pool_id, LendingPool)
    rate = exchange_rate if exchange_rate is not None else pool.exchange_rate
    if rate is None or rate <= 0:
        raise ConfigError(f"lending pool {pool_id!r} has no usable exchange rate")
    drawn = collateral * pool.collateral_factor / rate
    if debt_cap is not None:
        drawn = min(drawn, debt_cap)
    ledger = state.ledger.add(trader, pool.collateral_asset, -collateral)
    ledger = ledger.add(trader, pool.debt_asset, drawn)
    new_pool = replace(pool, positions=pool.positions + (LoanPosition(trader, collateral, drawn),))
    new_state = state.with_ledger(ledger).with_pool(pool_id, new_pool)
    return new_state, [
        Residual("collateral_balance", state.balance(trader, pool.collateral_asset) - collateral),
        Residual("debt_liquidity", pool.available_debt - drawn),
    ]


def collateralized_repay(state: WorldState, pool_id: str, trader: Entity) -> OpResult:
    """Repay the trader's most recent open position and reclaim its collateral."""
    pool = state.pool(pool_id, LendingPool)
    open_idx = [i for i, p in enumerate(pool.positions) if p.trader == trader]
    if not open_idx:
        raise PositionError(f"{trader!r} has no open position in {pool_id!r}")
    idx = open_idx[-1]
    position = pool.positions[idx]
    held = state.balance(trader, pool.debt_asset)
    ledger = state.ledger.add(trader, pool.debt_asset, -position.debt)
    ledger = ledger.add(trader, pool.collateral_asset, position.collateral)
    new_pool = replace(pool, positions=pool.positions[:idx] + pool.positions[idx + 1:])
    new_state = state.with_ledger(ledger).with_pool(pool_id, new_pool)
    return new_state, [Residual("debt_balance", held - position.debt)]


# ---------------------------------------------------------------------------
# Margin trading
# ---------------------------------------------------------------------------

def margin_short(state: WorldState, platform_id: str, trader: Entity, collateral: float) -> OpResult:
    """Open a short: leveraged collateral is swapped for Y and the Y is locked.

    The platform fronts collateral * leverage / over_collateral_ratio of X;
    its own liquidity must cover everything beyond the posted collateral.
    """
    _require_finite("margin collateral", collateral)
    if collateral < 0:
        raise ConfigError(f"negative margin collateral {collateral}")
    platform = state.pool(platform_id, MarginPlatform)
    pushed = collateral * platform.leverage / platform.over_collateral_ratio
    residuals = [
        Residual("collateral_balance", state.balance(trader, platform.collateral_asset) - collateral),
        Residual("platform_liquidity", platform.available_x + collateral - pushed),
    ]
    ledger = state.ledger.add(trader, platform.collateral_asset, -collateral)
    state_after = state.with_ledger(ledger)
    if platform.venue is not None:
        amm = _amm_checked(state_after, platform.venue)
        effective = pushed * (1.0 - amm.fee_rate)
        locked_out = effective * amm.reserve_y / (amm.reserve_x + effective)
        new_amm = replace(amm, reserve_x=amm.reserve_x + pushed, reserve_y=amm.reserve_y - locked_out)
        state_after = state_after.with_pool(platform.venue, new_amm)
    elif platform.external_price is not None:
        locked_out = pushed / platform.external_price
    else:
        raise ConfigError(f"margin platform {platform_id!r} has no execution venue")
    new_locked = dict(platform.locked)
    new_locked[trader] = new_locked.get(trader, 0.0) + locked_out
    new_platform = replace(platform, locked=new_locked)
    return state_after.with_pool(platform_id, new_platform), residuals


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def compute_slippage(expected_price: float, executed_price: float) -> float:
    """Relative drift of the executed price against the expected price."""
    if expected_price <= 0:
        raise ConfigError(f"expected price must be positive, got {expected_price}")
    return (executed_price - expected_price) / expected_price
