"""Compose protocol endpoints into parametrized trading vectors.

A vector is an ordered chain of endpoint calls whose numeric arguments are
bound either to free parameters p1..pN or to expressions over earlier
states ("all sUSD held", "cost of buying back the open debt").  Evaluating
a vector replays the chain on a scenario state, collecting every residual
with its step index; the objective is the actor's profit in one asset
between the initial and final states.

The two built-in vectors model the February 2020 pump-and-arbitrage and
oracle-manipulation incidents.  Each carries, besides its step chain, a
closed-form objective and canonical constraint set in the parameters; the
optimizer consumes those for speed, and a differential test holds the two
routes together (they must agree to 1e-9 relative on feasible points).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .models import (
    AutomatedPriceReserve,
    ConfigError,
    ConstantProductAmm,
    FixedPriceMarket,
    FlashLoanPool,
    LendingPool,
    MarginPlatform,
    Residual,
    WorldState,
    amm_swap_x_for_y,
    amm_swap_y_for_x,
    collateralized_borrow,
    collateralized_repay,
    flash_loan,
    flash_repay,
    margin_short,
    reserve_convert_x_to_y,
    sell_x_for_y_fixed,
)


class EvaluationError(Exception):
    """Evaluation produced a non-finite intermediate value at some step."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


# ---------------------------------------------------------------------------
# Parameter bindings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Params:
    """Sum of the referenced free parameters (0-based indices)."""

    indices: tuple[int, ...]


@dataclass(frozen=True)
class Literal:
    value: float


@dataclass(frozen=True)
class AllBalance:
    """Entire balance of (entity, asset) in the state entering the step."""

    entity: str
    asset: str


@dataclass(frozen=True)
class DebtBuyback:
    """X needed on a fixed-price market to buy back the actor's open debt."""

    lending_pool: str
    market: str


@dataclass(frozen=True)
class CollateralRate:
    """Collateral-per-debt rate read off an AMM state recorded at `step`."""

    amm: str
    step: int


Binding = Params | Literal | AllBalance | DebtBuyback | CollateralRate


def _resolve(binding: Binding, actor: str, states: Sequence[WorldState], params: Sequence[float]) -> float:
    if isinstance(binding, Params):
        return float(sum(params[i] for i in binding.indices))
    if isinstance(binding, Literal):
        return binding.value
    if isinstance(binding, AllBalance):
        return states[-1].balance(binding.entity, binding.asset)
    if isinstance(binding, DebtBuyback):
        pool = states[-1].pool(binding.lending_pool, LendingPool)
        market = states[-1].pool(binding.market, FixedPriceMarket)
        debt = sum(p.debt for p in pool.positions if p.trader == actor)
        return debt * market.price
    if isinstance(binding, CollateralRate):
        if binding.step >= len(states):
            raise ConfigError(f"binding references state {binding.step}, not yet produced")
        amm = states[binding.step].pool(binding.amm, ConstantProductAmm)
        return amm.reserve_y / amm.reserve_x
    raise ConfigError(f"unknown binding {binding!r}")


def format_binding(binding: Binding) -> str:
    if isinstance(binding, Params):
        return " + ".join(f"p{i + 1}" for i in binding.indices)
    if isinstance(binding, Literal):
        return repr(binding.value)
    if isinstance(binding, AllBalance):
        return f"all:{binding.entity}:{binding.asset}"
    if isinstance(binding, DebtBuyback):
        return f"buyback:{binding.lending_pool}:{binding.market}"
    if isinstance(binding, CollateralRate):
        return f"collateral_rate:{binding.amm}@{binding.step}"
    raise ConfigError(f"unknown binding {binding!r}")


def parse_binding(text: str) -> Binding:
    text = text.strip()
    if text.startswith("all:"):
        _, entity, asset = text.split(":")
        return AllBalance(entity, asset)
    if text.startswith("buyback:"):
        _, pool, market = text.split(":")
        return DebtBuyback(pool, market)
    if text.startswith("collateral_rate:"):
        _, rest = text.split(":")
        amm, step = rest.split("@")
        return CollateralRate(amm, int(step))
    terms = [t.strip() for t in text.split("+")]
    if all(t.startswith("p") and t[1:].isdigit() for t in terms):
        return Params(tuple(int(t[1:]) - 1 for t in terms))
    try:
        return Literal(float(text))
    except ValueError:
        raise ConfigError(f"cannot parse binding {text!r}") from None


# ---------------------------------------------------------------------------
# Steps and vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EndpointCall:
    op: str
    pool: str
    amount: Binding | None = None
    extra: Mapping[str, Binding] = field(default_factory=dict)


@dataclass(frozen=True)
class ActionStep:
    """One chain link: a short pipeline of endpoint calls mapping S_{i-1} to S_i."""

    label: str
    calls: tuple[EndpointCall, ...]


@dataclass(frozen=True)
class ConstraintSpec:
    """One named constraint of the parameter problem, residual >= 0 feasible."""

    name: str
    description: str
    step: int
    linear: bool
    fn: Callable[[np.ndarray], np.ndarray | float]


@dataclass(frozen=True)
class AttackVector:
    name: str
    steps: tuple[ActionStep, ...]
    n_params: int
    bounds: tuple[tuple[float, float], ...]
    actor: str
    profit_asset: str
    objective_name: str
    constraints: tuple[ConstraintSpec, ...]
    objective: Callable[[np.ndarray], np.ndarray | float] | None = None
    reference_points: Mapping[str, tuple[float, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class EvaluationTrace:
    states: tuple[WorldState, ...]
    residuals: tuple[Residual, ...]
    objective_value: float


_OPS: dict[str, Callable] = {
    "flash_loan": flash_loan,
    "flash_repay": flash_repay,
    "sell_x_for_y_fixed": sell_x_for_y_fixed,
    "amm_swap_x_for_y": amm_swap_x_for_y,
    "amm_swap_y_for_x": amm_swap_y_for_x,
    "reserve_convert_x_to_y": reserve_convert_x_to_y,
    "collateralized_borrow": collateralized_borrow,
    "collateralized_repay": collateralized_repay,
    "margin_short": margin_short,
}


def evaluate(vector: AttackVector, scenario: WorldState, params: Sequence[float]) -> EvaluationTrace:
    """Replay the chain on `scenario` with the given free parameters.

    Negative residuals never raise; non-finite intermediates raise
    :class:`EvaluationError` carrying the offending step index.
    """
    params = tuple(float(p) for p in params)
    if len(params) != vector.n_params:
        raise ValueError(f"expected {vector.n_params} parameters, got {len(params)}")
    if not all(math.isfinite(p) for p in params):
        raise ValueError(f"parameters must be finite, got {params}")

    states: list[WorldState] = [replace(scenario, step_index=0)]
    residuals: list[Residual] = []
    for i, step in enumerate(vector.steps, start=1):
        state = states[-1]
        try:
            for call in step.calls:
                op = _OPS[call.op]
                args = [state, call.pool, vector.actor]
                if call.amount is not None:
                    args.append(_resolve(call.amount, vector.actor, states, params))
                kwargs = {
                    key: _resolve(b, vector.actor, states, params)
                    for key, b in call.extra.items()
                }
                state, step_residuals = op(*args, **kwargs)
                for r in step_residuals:
                    if not math.isfinite(r.value):
                        raise OverflowError(f"residual {r.name} is {r.value}")
                    residuals.append(replace(r, step=i))
        except OverflowError as exc:
            raise EvaluationError(i, str(exc)) from None
        if not math.isfinite(state.balance(vector.actor, vector.profit_asset)):
            raise EvaluationError(i, f"{vector.profit_asset} balance overflowed")
        states.append(replace(state, step_index=i))

    gain = states[-1].balance(vector.actor, vector.profit_asset) - states[0].balance(
        vector.actor, vector.profit_asset
    )
    return EvaluationTrace(tuple(states), tuple(residuals), gain)


def trace_objective(vector: AttackVector, scenario: WorldState, params: Sequence[float]) -> float:
    """Objective via full chain replay (the slow, endpoint-faithful route)."""
    return evaluate(vector, scenario, params).objective_value


def closed_form_objective(vector: AttackVector, scenario: WorldState) -> Callable:
    """Best objective callable available: algebraic if present, else replay."""
    if vector.objective is not None:
        return vector.objective
    return lambda p: trace_objective(vector, scenario, np.asarray(p, dtype=float))


def list_constraints(vector: AttackVector) -> list[dict]:
    """Describe every constraint: name, text, step provenance, linearity."""
    return [
        {"name": c.name, "description": c.description, "step": c.step, "linear": c.linear}
        for c in vector.constraints
    ]


def with_bounds(vector: AttackVector, overrides: Mapping[int, tuple[float, float]]) -> AttackVector:
    """New vector with per-parameter (0-based) bound overrides."""
    bounds = list(vector.bounds)
    for idx, pair in overrides.items():
        if not 0 <= idx < vector.n_params:
            raise ConfigError(f"no parameter with index {idx}")
        bounds[idx] = (float(pair[0]), float(pair[1]))
    return replace(vector, bounds=tuple(bounds))


# ---------------------------------------------------------------------------
# Built-in vector: pump and arbitrage
# ---------------------------------------------------------------------------

def _unique_pool(scenario: WorldState, kind: type) -> tuple[str, object]:
    matches = [(pid, p) for pid, p in scenario.pools.items() if isinstance(p, kind)]
    if len(matches) != 1:
        raise ConfigError(
            f"scenario must contain exactly one {kind.__name__}, found {len(matches)}"
        )
    return matches[0]


def _coord(p, i: int):
    """i-th parameter of a single vector or a batch of vectors."""
    return np.asarray(p, dtype=float)[..., i]


def build_paa_vector(scenario: WorldState, actor: str = "adversary") -> AttackVector:
    """Six-step pump-and-arbitrage chain with free params (p1, p2).

    p1 collateralizes the lending pool to draw Y; p2 opens the leveraged
    short that pumps the AMM.  The drawn Y is dumped into the pumped pool,
    the flash loan repaid, and the debt bought back at the street price to
    redeem the collateral.

    The final step nets the buyback against the collateral it redeems (on
    chain this settled incrementally over later blocks), so its sell leg
    can report a negative balance residual at large p1 even though the
    step as a whole is funded; the canonical constraint set accounts for
    the netting.
    """
    flash_id, flash = _unique_pool(scenario, FlashLoanPool)
    lend_id, lend = _unique_pool(scenario, LendingPool)
    amm_id, amm = _unique_pool(scenario, ConstantProductAmm)
    margin_id, margin = _unique_pool(scenario, MarginPlatform)
    market_id, market = _unique_pool(scenario, FixedPriceMarket)

    x = flash.asset
    y = lend.debt_asset
    v_x = flash.available
    cf, er, z_y = lend.collateral_factor, lend.exchange_rate, lend.available_debt
    if er is None:
        raise ConfigError("pump-and-arbitrage lending pool needs a static exchange rate")
    lev, ocr, w_x = margin.leverage, margin.over_collateral_ratio, margin.available_x
    u_x0, u_y0 = amm.reserve_x, amm.reserve_y
    k = u_x0 * u_y0
    p_m = market.price
    b0 = scenario.balance(actor, x)

    def dumped_reserve_x(p):
        pumped = u_x0 + _coord(p, 1) * lev / ocr
        drawn = _coord(p, 0) * cf / er
        return k / (k / pumped + drawn)

    def objective(p):
        drawn = _coord(p, 0) * cf / er
        return u_x0 + _coord(p, 1) * lev / ocr - dumped_reserve_x(p) - _coord(p, 1) - drawn * p_m

    constraints = (
        ConstraintSpec("p1", "collateral parameter non-negative", 1, True,
                       lambda p: _coord(p, 0)),
        ConstraintSpec("p2", "short-margin parameter non-negative", 1, True,
                       lambda p: _coord(p, 1)),
        ConstraintSpec("vX", "flash liquidity covers the total loan", 1, True,
                       lambda p: v_x - _coord(p, 0) - _coord(p, 1)),
        ConstraintSpec("zY", "lending liquidity covers the drawn debt", 2, True,
                       lambda p: z_y - _coord(p, 0) * cf / er),
        ConstraintSpec("wX", "margin platform liquidity covers the leveraged excess", 3, True,
                       lambda p: w_x + _coord(p, 1) * (1.0 - lev / ocr)),
        ConstraintSpec("repay", "post-dump balance covers the flash repayment", 5, False,
                       lambda p: b0 + u_x0 + _coord(p, 1) * lev / ocr - dumped_reserve_x(p)
                       - _coord(p, 0) - _coord(p, 1)),
    )

    steps = (
        ActionStep("flash loan", (EndpointCall("flash_loan", flash_id, Params((0, 1))),)),
        ActionStep("collateralized borrow", (EndpointCall("collateralized_borrow", lend_id, Params((0,))),)),
        ActionStep("margin short via pool", (EndpointCall("margin_short", margin_id, Params((1,))),)),
        ActionStep("dump drawn debt", (EndpointCall("amm_swap_y_for_x", amm_id, AllBalance(actor, y)),)),
        ActionStep("flash repay", (EndpointCall("flash_repay", flash_id, Params((0, 1))),)),
        ActionStep("buy back and redeem", (
            EndpointCall("sell_x_for_y_fixed", market_id, DebtBuyback(lend_id, market_id)),
            EndpointCall("collateralized_repay", lend_id),
        )),
    )

    return AttackVector(
        name="paa",
        steps=steps,
        n_params=2,
        bounds=((0.0, v_x), (0.0, v_x)),
        actor=actor,
        profit_asset=x,
        objective_name=f"net {x} gain for {actor}",
        constraints=constraints,
        objective=objective,
        reference_points={
            "executed": (5500.0, 1300.0),
            "documented_optimum": (2470.08, 1456.23),
        },
    )


# ---------------------------------------------------------------------------
# Built-in vector: oracle manipulation
# ---------------------------------------------------------------------------

def build_oracle_vector(
    scenario: WorldState, actor: str = "adversary", zy_cap: bool = False
) -> AttackVector:
    """Six-step oracle-manipulation chain with free params (p1, p2, p3).

    p1 dumps into the price-oracle AMM, p2 into the exponential reserve,
    p3 buys at the fixed market; everything acquired is collateralized at
    the manipulated AMM rate and the flash loan repaid.  With ``zy_cap``
    the lender clamps the drawn amount to its liquidity instead of
    reporting the shortfall as a residual.
    """
    flash_id, flash = _unique_pool(scenario, FlashLoanPool)
    amm_id, amm = _unique_pool(scenario, ConstantProductAmm)
    reserve_id, reserve = _unique_pool(scenario, AutomatedPriceReserve)
    market_id, market = _unique_pool(scenario, FixedPriceMarket)
    lend_id, lend = _unique_pool(scenario, LendingPool)

    x = flash.asset
    y = amm.asset_y
    v_x = flash.available
    u_x0, u_y0 = amm.reserve_x, amm.reserve_y
    k = u_x0 * u_y0
    lr, min_p, max_p = reserve.liquidity_rate, reserve.min_price, reserve.max_price
    k_x0 = reserve.inventory_x
    reserve_price0 = min_p * math.exp(lr * k_x0)
    p_m = market.price
    max_y = market.max_y
    cf, z_y = lend.collateral_factor, lend.available_debt
    if max_y is None:
        raise ConfigError("oracle-manipulation market needs a maxY cap")

    def acquired_y(p):
        swapped = u_y0 - k / (u_x0 + _coord(p, 0))
        converted = (1.0 - np.exp(-lr * _coord(p, 1))) / (lr * reserve_price0)
        bought = _coord(p, 2) / p_m
        return swapped + converted + bought

    def drawn_x(p):
        pumped = u_x0 + _coord(p, 0)
        raw = acquired_y(p) * cf * (pumped / (k / pumped))
        return np.minimum(raw, z_y) if zy_cap else raw

    def objective(p):
        return drawn_x(p) - _coord(p, 0) - _coord(p, 1) - _coord(p, 2)

    constraints = (
        ConstraintSpec("p1", "oracle-pump parameter non-negative", 1, True,
                       lambda p: _coord(p, 0)),
        ConstraintSpec("p2", "reserve-conversion parameter non-negative", 1, True,
                       lambda p: _coord(p, 1)),
        ConstraintSpec("p3", "fixed-market parameter non-negative", 1, True,
                       lambda p: _coord(p, 2)),
        ConstraintSpec("vX", "flash liquidity covers the total loan", 1, True,
                       lambda p: v_x - _coord(p, 0) - _coord(p, 1) - _coord(p, 2)),
        ConstraintSpec("maxP", "reserve quote stays below its cap", 3, False,
                       lambda p: max_p - min_p * np.exp(lr * (k_x0 + _coord(p, 1)))),
        ConstraintSpec("maxY", "fixed market inventory covers the purchase", 4, True,
                       lambda p: max_y - _coord(p, 2) / p_m),
        ConstraintSpec("zY", "lender liquidity covers the drawn amount", 5, False,
                       lambda p: z_y - acquired_y(p) * cf * (u_x0 + _coord(p, 0)) ** 2 / k),
    )

    borrow_extra: dict[str, Binding] = {"exchange_rate": CollateralRate(amm_id, 2)}
    if zy_cap:
        borrow_extra["debt_cap"] = Literal(z_y)

    steps = (
        ActionStep("flash loan", (EndpointCall("flash_loan", flash_id, Params((0, 1, 2))),)),
        ActionStep("pump the oracle pool", (EndpointCall("amm_swap_x_for_y", amm_id, Params((0,))),)),
        ActionStep("convert at the reserve", (EndpointCall("reserve_convert_x_to_y", reserve_id, Params((1,))),)),
        ActionStep("buy at the fixed market", (EndpointCall("sell_x_for_y_fixed", market_id, Params((2,))),)),
        ActionStep("collateralize all holdings", (
            EndpointCall("collateralized_borrow", lend_id, AllBalance(actor, y), borrow_extra),
        )),
        ActionStep("flash repay", (EndpointCall("flash_repay", flash_id, Params((0, 1, 2))),)),
    )

    return AttackVector(
        name="oracle",
        steps=steps,
        n_params=3,
        bounds=((0.0, v_x),) * 3,
        actor=actor,
        profit_asset=x,
        objective_name=f"net {x} gain for {actor}",
        constraints=constraints,
        objective=objective,
        reference_points={
            "executed": (540.0, 360.0, 3517.86),
            "documented_optimum": (898.58, 546.80, 3517.86),
        },
    )


BUILTIN_VECTORS: dict[str, Callable[..., AttackVector]] = {
    "paa": build_paa_vector,
    "oracle": build_oracle_vector,
}


# ---------------------------------------------------------------------------
# Vector description files
# ---------------------------------------------------------------------------

def describe(vector: AttackVector) -> dict:
    """Serializable description of a vector's chain (for docs and user files)."""
    return {
        "name": vector.name,
        "actor": vector.actor,
        "profit_asset": vector.profit_asset,
        "n_params": vector.n_params,
        "bounds": [list(b) for b in vector.bounds],
        "steps": [
            {
                "label": step.label,
                "calls": [
                    {
                        "op": call.op,
                        "pool": call.pool,
                        **({"amount": format_binding(call.amount)} if call.amount is not None else {}),
                        **({"extra": {k: format_binding(b) for k, b in call.extra.items()}}
                           if call.extra else {}),
                    }
                    for call in step.calls
                ],
            }
            for step in vector.steps
        ],
    }


def _probe_constraints(vector: AttackVector, scenario: WorldState) -> tuple[ConstraintSpec, ...]:
    """Mechanically derive constraints for a user vector from a probe replay.

    Linearity is decided numerically: a residual is classified linear when
    it is affine along random segments of the parameter box.
    """
    lo = np.array([b[0] for b in vector.bounds])
    hi = np.array([b[1] for b in vector.bounds])
    mid = lo + 0.25 * (hi - lo)
    probe = evaluate(vector, scenario, mid)
    rng = np.random.default_rng(11)
    pts = [lo + rng.random(vector.n_params) * (hi - lo) * 0.5 for _ in range(3)]

    def residual_fn(index: int):
        return lambda p: evaluate(vector, scenario, np.asarray(p, dtype=float)).residuals[index].value

    specs = []
    for idx, res in enumerate(probe.residuals):
        fn = residual_fn(idx)
        linear = True
        for a, b in zip(pts, pts[1:] + pts[:1]):
            fa, fb, fmid = fn(a), fn(b), fn(0.5 * (a + b))
            scale = max(1.0, abs(fa), abs(fb))
            if abs(0.5 * (fa + fb) - fmid) > 1e-7 * scale:
                linear = False
                break
        specs.append(ConstraintSpec(
            name=f"s{res.step}_{res.name}",
            description=f"{res.name} at step {res.step}",
            step=res.step or 0,
            linear=linear,
            fn=fn,
        ))
    return tuple(specs)


def parse_vector(doc: dict, scenario: WorldState) -> AttackVector:
    """Build a user-defined vector from a parsed description document."""
    try:
        steps = tuple(
            ActionStep(
                label=s.get("label", f"step {i + 1}"),
                calls=tuple(
                    EndpointCall(
                        op=c["op"],
                        pool=c["pool"],
                        amount=parse_binding(c["amount"]) if "amount" in c else None,
                        extra={k: parse_binding(v) for k, v in c.get("extra", {}).items()},
                    )
                    for c in s["calls"]
                ),
            )
            for i, s in enumerate(doc["steps"])
        )
        vector = AttackVector(
            name=doc.get("name", "custom"),
            steps=steps,
            n_params=int(doc["n_params"]),
            bounds=tuple((float(lo), float(hi)) for lo, hi in doc["bounds"]),
            actor=doc["actor"],
            profit_asset=doc["profit_asset"],
            objective_name=f"net {doc['profit_asset']} gain for {doc['actor']}",
            constraints=(),
            objective=None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad vector description: {exc}") from None
    for call in (c for s in vector.steps for c in s.calls):
        if call.op not in _OPS:
            raise ConfigError(f"unknown endpoint {call.op!r}")
    return replace(vector, constraints=_probe_constraints(vector, scenario))
