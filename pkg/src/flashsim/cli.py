"""Command-line entry point tying scenarios, vectors, solver, and analytics together.

Every command emits a run report echoing its inputs (with content hashes)
next to its results, so a report is reproducible byte-for-byte under a
fixed seed once timing fields are dropped.  Exit codes: 0 success, 1
infeasible or strict-mode violation, 2 unusable input.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from dataclasses import dataclass
from importlib import metadata, resources
from pathlib import Path

import click
import numpy as np
import scipy

from . import analytics, atomicity
from .models import ConfigError, ConstantProductAmm, STRICT_RESIDUAL_TOL
from .optimize import FEASIBILITY_TOL, OptimizationResult, SolverConfig, grid_oracle, solve
from .scenario import BUILTIN_SCENARIOS, builtin_scenario, load_scenario
from .vectors import (
    BUILTIN_VECTORS,
    AttackVector,
    EvaluationError,
    describe,
    evaluate,
    parse_vector,
    with_bounds,
)

AGREEMENT_THRESHOLD = 0.02


@dataclass
class RunReport:
    command: str
    config: dict
    config_hash: str
    scenario_hash: str | None
    results: dict
    versions: dict
    wall_time_s: float

    def payload(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "config_hash": self.config_hash,
            "scenario_hash": self.scenario_hash,
            "results": self.results,
            "versions": self.versions,
            "wall_time_s": self.wall_time_s,
        }

    def stable_payload(self) -> dict:
        payload = self.payload()
        del payload["wall_time_s"]
        del payload["versions"]
        return payload


def _versions() -> dict:
    return {
        "flashsim": metadata.version("flashsim"),
        "python": ".".join(map(str, sys.version_info[:3])),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def _hash_config(command: str, config: dict) -> str:
    blob = json.dumps({"command": command, **config}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _fail(message: str, code: int = 2):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _resolve_scenario(value: str):
    if value in BUILTIN_SCENARIOS:
        raw = resources.files("flashsim.data").joinpath(f"{value}.json").read_bytes()
        state, doc = builtin_scenario(value)
    else:
        path = Path(value)
        if not path.exists():
            raise ConfigError(f"scenario {value!r} is neither a bundled name nor a file")
        raw = path.read_bytes()
        state, doc = load_scenario(path)
    return state, doc, _hash_bytes(raw)


def _resolve_vector(value: str, state, zy_cap: bool) -> AttackVector:
    if value in BUILTIN_VECTORS:
        if value == "oracle":
            return BUILTIN_VECTORS[value](state, zy_cap=zy_cap)
        if zy_cap:
            raise ConfigError("--zy-cap only applies to the oracle vector")
        return BUILTIN_VECTORS[value](state)
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"vector {value!r} is neither a built-in name nor a file")
    if zy_cap:
        raise ConfigError("--zy-cap only applies to the oracle vector")
    return parse_vector(json.loads(path.read_text()), state)


def _parse_bound(text: str) -> tuple[int, tuple[float, float]]:
    try:
        name, lo, hi = text.split(":")
        if not (name.startswith("p") and name[1:].isdigit()):
            raise ValueError
        return int(name[1:]) - 1, (float(lo), float(hi))
    except ValueError:
        raise ConfigError(f"bad bound {text!r}, expected pN:LOW:HIGH") from None


def _result_text(label: str, res: OptimizationResult) -> list[str]:
    params = "  ".join(f"p{i+1}={v:.6f}" for i, v in enumerate(res.best_params))
    return [
        f"{label} ({res.method}, {res.starts_tried} start(s))",
        f"  objective   {res.best_objective:.6f}",
        f"  params      {params}",
        f"  feasible    {'yes' if res.feasible else 'NO'} (worst scaled residual {res.max_violation:.3g})",
        f"  iterations  {res.iterations}   wall {res.wall_time:.3f} s",
    ]


def _emit(ctx, report: RunReport, text_lines: list[str], csv_lines: list[str] | None = None):
    fmt = ctx.obj["format"]
    if fmt == "structured":
        click.echo(json.dumps(report.payload(), sort_keys=True, indent=2))
    elif fmt == "csv" and csv_lines is not None:
        click.echo("\n".join(csv_lines))
    else:
        click.echo("\n".join(text_lines))


@click.group()
@click.option("--seed", default=0, show_default=True, help="Master seed for every stochastic component.")
@click.option("--format", "fmt", type=click.Choice(["text", "csv", "structured"]), default="text",
              show_default=True, help="Output rendering.")
@click.option("--strict", is_flag=True, help="Treat any negative residual as a failure (exit 1).")
@click.pass_context
def main(ctx, seed, fmt, strict):
    """Deterministic DeFi trading simulator, optimizer, and analytics."""
    ctx.obj = {"seed": seed, "format": fmt, "strict": strict}


@main.command()
@click.option("--scenario", required=True, help="Bundled scenario name or JSON file.")
@click.option("--vector", "vector_name", required=True, help="Built-in vector (paa, oracle) or description file.")
@click.option("--ignore-constraint", "ignored", multiple=True, help="Constraint name to drop from the solve.")
@click.option("--bound", "bound_overrides", multiple=True, help="Parameter bound override pN:LOW:HIGH.")
@click.option("--zy-cap", is_flag=True, help="Clamp the oracle vector's drawn amount to lender liquidity.")
@click.option("--method", type=click.Choice(["slsqp", "auglag"]), default="slsqp", show_default=True)
@click.option("--max-iter", default=200, show_default=True)
@click.option("--tol", default=1e-9, show_default=True)
@click.option("--fd-step", default=1e-4, show_default=True)
@click.option("--starts", default=16, show_default=True)
@click.option("--grid-res", default=0, help="Grid oracle resolution (0 = auto by dimension).")
@click.pass_context
def optimize(ctx, scenario, vector_name, ignored, bound_overrides, zy_cap, method,
             max_iter, tol, fd_step, starts, grid_res):
    """Solve for profit-maximizing parameters, certified by the grid oracle."""
    started = time.perf_counter()
    try:
        state, _, scenario_hash = _resolve_scenario(scenario)
        vector = _resolve_vector(vector_name, state, zy_cap)
        overrides = dict(_parse_bound(b) for b in bound_overrides)
        vector = with_bounds(vector, overrides)
        config = SolverConfig(max_iterations=max_iter, tolerance=tol, fd_step=fd_step,
                              starts=starts, seed=ctx.obj["seed"])
        resolution = grid_res or {1: 2000, 2: 200, 3: 60}.get(vector.n_params, 0)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        _fail(str(exc))

    try:
        best = solve(vector, state, config, ignore=ignored, method=method)
        grid = grid_oracle(vector, state, resolution, ignore=ignored) if vector.n_params <= 3 else None
    except (ConfigError, EvaluationError, ValueError) as exc:
        _fail(str(exc))

    rel_gap = None
    disagreement = False
    if grid is not None and grid.feasible and best.feasible:
        rel_gap = abs(best.best_objective - grid.best_objective) / max(1.0, abs(best.best_objective))
        disagreement = rel_gap > AGREEMENT_THRESHOLD

    params = np.array(best.best_params)
    corner = np.array([lo for lo, _ in vector.bounds])
    constraint_rows = []
    notes = []
    for spec in vector.constraints:
        value = float(spec.fn(params))
        constraint_rows.append({"name": spec.name, "description": spec.description,
                                "step": spec.step, "linear": spec.linear,
                                "value_at_best": value, "ignored": spec.name in ignored})
        scale = max(1.0, abs(float(spec.fn(corner))))  # solver's normalization
        if spec.name not in ignored and abs(value) <= 1e-4 * scale:
            for ref_name, ref_params in vector.reference_points.items():
                ref_value = float(spec.fn(np.array(ref_params)))
                if ref_value < -FEASIBILITY_TOL:
                    notes.append(
                        f"constraint {spec.name!r} is active at the reported optimum; "
                        f"reference point {ref_name} {tuple(ref_params)} violates it by "
                        f"{-ref_value:.4g}, so that point is reachable only with "
                        f"{spec.name!r} ignored"
                    )

    config_echo = {
        "scenario": scenario, "vector": vector_name, "ignore": sorted(ignored),
        "bounds": sorted(bound_overrides), "zy_cap": zy_cap, "method": method,
        "max_iter": max_iter, "tol": tol, "fd_step": fd_step, "starts": starts,
        "grid_res": resolution, "seed": ctx.obj["seed"],
    }
    results = {
        "solver": best.as_dict(),
        "grid": grid.as_dict() if grid is not None else None,
        "relative_gap": rel_gap,
        "disagreement": disagreement,
        "constraints": constraint_rows,
        "notes": notes,
    }
    report = RunReport("optimize", config_echo, _hash_config("optimize", config_echo),
                       scenario_hash, results, _versions(), time.perf_counter() - started)

    lines = ["command: optimize", f"scenario: {scenario} (sha256 {scenario_hash[:12]})",
             f"vector: {vector.name} ({vector.n_params} free parameter(s))", ""]
    lines += _result_text("solver", best)
    if grid is not None:
        lines.append("")
        lines += _result_text("grid oracle", grid)
        if rel_gap is not None:
            verdict = "DISAGREEMENT" if disagreement else "ok"
            lines.append(f"agreement: {rel_gap:.3%} ({verdict}, threshold {AGREEMENT_THRESHOLD:.0%})")
    lines.append("")
    lines.append("constraints at solver optimum:")
    for row in constraint_rows:
        kind = "linear" if row["linear"] else "nonlinear"
        suffix = "  [ignored]" if row["ignored"] else ""
        lines.append(f"  {row['name']:<8} {kind:<9} step {row['step']}  value {row['value_at_best']:.6g}{suffix}")
    for note in notes:
        lines.append(f"note: {note}")

    csv_lines = ["key,value"]
    csv_lines += [f"solver_objective,{best.best_objective!r}",
                  f"solver_params,{' '.join(map(repr, best.best_params))}",
                  f"solver_feasible,{best.feasible}"]
    if grid is not None:
        csv_lines += [f"grid_objective,{grid.best_objective!r}"]

    _emit(ctx, report, lines, csv_lines)
    if not best.feasible:
        sys.exit(1)


@main.command("evaluate")
@click.option("--scenario", required=True)
@click.option("--vector", "vector_name", required=True)
@click.option("--zy-cap", is_flag=True)
@click.argument("params", nargs=-1, type=float, required=True)
@click.pass_context
def evaluate_cmd(ctx, scenario, vector_name, zy_cap, params):
    """Replay a vector at fixed parameters and print the full trace."""
    started = time.perf_counter()
    try:
        state, _, scenario_hash = _resolve_scenario(scenario)
        vector = _resolve_vector(vector_name, state, zy_cap)
        if len(params) != vector.n_params:
            raise ConfigError(f"vector {vector.name!r} needs {vector.n_params} parameter(s)")
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        _fail(str(exc))
    try:
        trace = evaluate(vector, state, params)
    except (EvaluationError, ValueError) as exc:
        _fail(str(exc))

    assets = sorted({asset for state in trace.states for _, asset in state.ledger.entries})
    step_rows = []
    for state_i, step in zip(trace.states, ["initial"] + [s.label for s in vector.steps]):
        step_rows.append({
            "step": state_i.step_index,
            "label": step,
            "balances": {asset: state_i.balance(vector.actor, asset) for asset in assets},
        })
    residual_rows = [
        {"step": r.step, "name": r.name, "value": r.value, "satisfied": r.value >= -STRICT_RESIDUAL_TOL}
        for r in trace.residuals
    ]
    violated = [r for r in residual_rows if not r["satisfied"]]

    config_echo = {"scenario": scenario, "vector": vector_name, "params": list(params),
                   "zy_cap": zy_cap, "strict": ctx.obj["strict"], "seed": ctx.obj["seed"]}
    results = {"objective": trace.objective_value, "objective_name": vector.objective_name,
               "steps": step_rows, "residuals": residual_rows,
               "violated_count": len(violated)}
    report = RunReport("evaluate", config_echo, _hash_config("evaluate", config_echo),
                       scenario_hash, results, _versions(), time.perf_counter() - started)

    lines = ["command: evaluate", f"scenario: {scenario} (sha256 {scenario_hash[:12]})",
             f"vector: {vector.name}  params: {', '.join(f'{p:g}' for p in params)}", ""]
    for row in step_rows:
        balances = "  ".join(f"{a}={row['balances'][a]:,.6f}" for a in assets)
        lines.append(f"S{row['step']}: {row['label']:<28} {balances}")
    lines.append("")
    lines.append("residuals:")
    for row in residual_rows:
        marker = "" if row["satisfied"] else "  <-- VIOLATED"
        lines.append(f"  step {row['step']}  {row['name']:<20} {row['value']:,.6f}{marker}")
    lines.append("")
    lines.append(f"{vector.objective_name}: {trace.objective_value:,.6f}")

    csv_lines = ["step,name,value"] + [f"{r['step']},{r['name']},{r['value']!r}" for r in residual_rows]
    csv_lines.append(f"objective,,{trace.objective_value!r}")

    _emit(ctx, report, lines, csv_lines)
    if ctx.obj["strict"] and violated:
        sys.exit(1)


@main.command("atomicity")
@click.option("--market", "market_file", required=True, help="JSON file with exchange_a/exchange_b pools.")
@click.option("--budget", required=True, type=float)
@click.option("--i-values", default="0,10,100", show_default=True, help="Comma-separated intermediary counts.")
@click.option("--trials", default=100, show_default=True)
@click.option("--replay", "replay_file", default=None, help="Replay trace file instead of synthetic flow.")
@click.option("--stream-size", default=0, help="Synthetic stream length (default: max of --i-values).")
@click.option("--amount-scale", default=1.0, show_default=True)
@click.option("--sigma", default=1.0, show_default=True)
@click.option("--bootstrap-samples", default=1000, show_default=True)
@click.pass_context
def atomicity_cmd(ctx, market_file, budget, i_values, trials, replay_file,
                  stream_size, amount_scale, sigma, bootstrap_samples):
    """Sweep the arbitrage profit difference over intermediary counts."""
    started = time.perf_counter()
    try:
        doc = json.loads(Path(market_file).read_text())
        x, y = doc.get("x", "X"), doc.get("y", "Y")

        def pool(stanza: dict) -> ConstantProductAmm:
            return ConstantProductAmm(x, y, float(stanza["uX"]), float(stanza["uY"]),
                                      float(stanza.get("fee", 0.0)))

        market = atomicity.TwoExchangeMarket(pool(doc["exchange_a"]), pool(doc["exchange_b"]))
        counts = [int(v) for v in i_values.split(",") if v.strip() != ""]
        if budget <= 0:
            raise ConfigError("budget must be positive")
        if replay_file is not None:
            stream = atomicity.load_trace(replay_file)
        else:
            stream = atomicity.SyntheticStream(
                seed=ctx.obj["seed"], size=stream_size or max(counts, default=0),
                amount_scale=amount_scale, sigma=sigma,
            )
        market_hash = _hash_bytes(Path(market_file).read_bytes())
    except (ConfigError, KeyError, ValueError, json.JSONDecodeError, OSError) as exc:
        _fail(str(exc))

    try:
        rows = atomicity.sweep(market, budget, stream, counts, trials,
                               bootstrap_samples=bootstrap_samples)
    except (ConfigError, ValueError) as exc:
        _fail(str(exc))

    config_echo = {"market": market_file, "budget": budget, "i_values": counts,
                   "trials": trials, "replay": replay_file, "stream_size": stream_size,
                   "amount_scale": amount_scale, "sigma": sigma,
                   "bootstrap_samples": bootstrap_samples, "seed": ctx.obj["seed"]}
    results = {"rows": [r.as_dict() for r in rows]}
    report = RunReport("atomicity", config_echo, _hash_config("atomicity", config_echo),
                       market_hash, results, _versions(), time.perf_counter() - started)

    lines = ["command: atomicity", f"market: {market_file} (sha256 {market_hash[:12]})",
             f"budget: {budget:g}  trials: {trials}", "",
             f"{'i':>8}  {'mean':>14}  {'ci_low':>14}  {'ci_high':>14}  {'trials':>7}"]
    for r in rows:
        lines.append(f"{r.intermediaries:>8}  {r.mean:>14.6f}  {r.ci_low:>14.6f}  "
                     f"{r.ci_high:>14.6f}  {r.trials:>7}")
    csv_lines = ["i,mean,ci_low,ci_high,trials"] + [
        f"{r.intermediaries},{r.mean!r},{r.ci_low!r},{r.ci_high!r},{r.trials}" for r in rows
    ]
    _emit(ctx, report, lines, csv_lines)


@main.command("classify")
@click.option("--input", "input_file", default="-", show_default=True,
              help="JSONL loan records ('-' for stdin).")
@click.option("--map", "map_file", default=None, help="address,project lines (default: bundled).")
@click.option("--prices", "prices_file", default=None, help="JSON asset->USD file (default: bundled).")
@click.pass_context
def classify_cmd(ctx, input_file, map_file, prices_file):
    """Aggregate flash-loan records by the platform sets they touch."""
    started = time.perf_counter()
    try:
        addr_map = analytics.AddressMap.from_file(map_file) if map_file else analytics.AddressMap.bundled()
        prices = analytics.PriceTable.from_file(prices_file) if prices_file else analytics.PriceTable.default()
        if input_file == "-":
            text = sys.stdin.read()
            input_hash = _hash_bytes(text.encode())
        else:
            text = Path(input_file).read_text()
            input_hash = _hash_bytes(text.encode())
        records, parse_errors = analytics.parse_records(text.splitlines())
    except (ConfigError, json.JSONDecodeError, OSError, ValueError) as exc:
        _fail(str(exc))

    table = analytics.aggregate(records, addr_map, prices)
    config_echo = {"input": input_file, "map": map_file, "prices": prices_file,
                   "seed": ctx.obj["seed"]}
    results = {
        "rows": [r.as_dict() for r in table.rows],
        "total": table.total.as_dict(),
        "classification_errors": list(table.errors),
        "parse_errors": parse_errors,
    }
    report = RunReport("classify", config_echo, _hash_config("classify", config_echo),
                       input_hash, results, _versions(), time.perf_counter() - started)
    text_out = analytics.format_table_text(table)
    if parse_errors:
        text_out += f"\nskipped {len(parse_errors)} unparseable line(s)"
    _emit(ctx, report, text_out.splitlines(), analytics.format_table_csv(table).splitlines())


@main.command("describe")
@click.option("--scenario", required=True)
@click.option("--vector", "vector_name", required=True)
@click.option("--zy-cap", is_flag=True)
@click.pass_context
def describe_cmd(ctx, scenario, vector_name, zy_cap):
    """Emit a vector's chain in the reusable description-file format."""
    try:
        state, _, _ = _resolve_scenario(scenario)
        vector = _resolve_vector(vector_name, state, zy_cap)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        _fail(str(exc))
    click.echo(json.dumps(describe(vector), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
