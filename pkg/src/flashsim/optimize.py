"""Constrained maximization of vector objectives, plus a brute-force oracle.

The primary solver is sequential least-squares programming (SciPy's SLSQP)
driven by central finite-difference gradients, restarted from a Latin
hypercube of seeds over the bound box.  An augmented-Lagrangian fallback
covers environments where the QP subproblem solver misbehaves.  Residuals
are normalized by the magnitude of their constant term so pools five
orders of magnitude apart weigh comparably.

``grid_oracle`` is the independent check: an exhaustive feasible-box scan
(plus one local refinement pass) that certifies solver results on one- to
three-parameter problems.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize

from .models import ConfigError, WorldState
from .vectors import AttackVector, ConstraintSpec, EvaluationError, closed_form_objective

FEASIBILITY_TOL = 1e-6


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 200
    tolerance: float = 1e-9
    fd_step: float = 1e-4
    starts: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.tolerance <= 0 or self.fd_step <= 0:
            raise ConfigError("tolerances and steps must be positive")


@dataclass(frozen=True)
class OptimizationResult:
    """Best point found; `max_violation` is the worst scaled residual (signed,
    positive means slack), so feasible results satisfy max_violation >= -1e-6."""

    best_params: tuple[float, ...]
    best_objective: float
    max_violation: float
    feasible: bool
    iterations: int
    wall_time: float
    starts_tried: int
    method: str

    def as_dict(self) -> dict:
        return {
            "best_params": list(self.best_params),
            "best_objective": self.best_objective,
            "max_violation": self.max_violation,
            "feasible": self.feasible,
            "iterations": self.iterations,
            "starts_tried": self.starts_tried,
            "method": self.method,
        }


def _active_constraints(vector: AttackVector, ignore: Iterable[str]) -> list[ConstraintSpec]:
    ignored = set(ignore)
    unknown = ignored - {c.name for c in vector.constraints}
    if unknown:
        raise ConfigError(f"cannot ignore unknown constraint(s) {sorted(unknown)}")
    return [c for c in vector.constraints if c.name not in ignored]


def _scales(constraints: Sequence[ConstraintSpec], bounds) -> np.ndarray:
    # Normalize by each residual's magnitude at the lower-bound corner, i.e.
    # its constant term for the affine majority (pools differ by ~1e5 in size).
    corner = np.array([lo for lo, _ in bounds], dtype=float)
    return np.array([max(1.0, abs(float(c.fn(corner)))) for c in constraints])


def _min_scaled_residual(constraints, scales, params) -> float:
    if not constraints:
        return np.inf
    values = np.array([float(c.fn(params)) for c in constraints]) / scales
    return float(values.min())


def latin_hypercube(n: int, bounds, seed: int) -> np.ndarray:
    """Deterministic LHS sample of n points over the bound box."""
    rng = np.random.default_rng(seed)
    dim = len(bounds)
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    cells = np.stack([rng.permutation(n) for _ in range(dim)], axis=1)
    u = (cells + rng.random((n, dim))) / n
    return lo + u * (hi - lo)


def finite_diff_gradient(
    vector: AttackVector,
    scenario: WorldState,
    params: Sequence[float],
    step: float,
) -> np.ndarray:
    """Central-difference gradient of the objective at an interior point."""
    params = np.asarray(params, dtype=float)
    for i, ((lo, hi), p) in enumerate(zip(vector.bounds, params)):
        if not (lo + step <= p <= hi - step):
            raise ValueError(
                f"parameter {i} = {p} not interior to [{lo}, {hi}] by step {step}"
            )
    f = closed_form_objective(vector, scenario)
    grad = np.empty_like(params)
    for i in range(len(params)):
        bump = np.zeros_like(params)
        bump[i] = step
        try:
            grad[i] = (float(f(params + bump)) - float(f(params - bump))) / (2.0 * step)
        except EvaluationError as exc:
            raise EvaluationError(exc.step, f"while differencing coordinate {i}: {exc}") from None
    return grad


def _solve_slsqp(neg_obj, grad_neg, x0, bounds, cons_fns, cfg) -> tuple[np.ndarray, int]:
    scipy_cons = [{"type": "ineq", "fun": fn} for fn in cons_fns]
    res = minimize(
        neg_obj,
        x0,
        jac=grad_neg,
        bounds=bounds,
        constraints=scipy_cons,
        method="SLSQP",
        options={"maxiter": cfg.max_iterations, "ftol": cfg.tolerance},
    )
    return np.clip(res.x, [b[0] for b in bounds], [b[1] for b in bounds]), int(res.nit)


def _solve_auglag(neg_obj, x0, bounds, cons_fns, cfg) -> tuple[np.ndarray, int]:
    """Augmented-Lagrangian fallback: L-BFGS-B inner solves, multiplier updates."""
    m = len(cons_fns)
    lam = np.zeros(m)
    mu = 10.0
    x = np.asarray(x0, dtype=float)
    iterations = 0
    prev_violation = np.inf
    for _ in range(25):
        def lagrangian(p, lam=lam, mu=mu):
            total = neg_obj(p)
            for i, fn in enumerate(cons_fns):
                g = fn(p)
                total += (max(0.0, lam[i] - mu * g) ** 2 - lam[i] ** 2) / (2.0 * mu)
            return total

        inner = minimize(lagrangian, x, bounds=bounds, method="L-BFGS-B",
                         options={"maxiter": cfg.max_iterations})
        x = inner.x
        iterations += int(inner.nit)
        g = np.array([fn(x) for fn in cons_fns]) if m else np.zeros(0)
        violation = float(np.maximum(0.0, -g).max()) if m else 0.0
        new_lam = np.maximum(0.0, lam - mu * g) if m else lam
        if violation <= FEASIBILITY_TOL and np.allclose(new_lam, lam, rtol=1e-6, atol=1e-9):
            lam = new_lam
            break
        lam = new_lam
        if violation > 0.25 * prev_violation:
            mu *= 4.0
        prev_violation = max(violation, 1e-30)
    return x, iterations


def solve(
    vector: AttackVector,
    scenario: WorldState,
    config: SolverConfig = SolverConfig(),
    ignore: Iterable[str] = (),
    method: str = "slsqp",
) -> OptimizationResult:
    """Maximize the vector objective subject to its accumulated constraints.

    Multi-start over a seeded Latin hypercube; returns the best feasible
    point, or an explicitly infeasible result (never a silent zero) when no
    start lands within the scaled feasibility tolerance.
    """
    if vector.n_params < 1:
        raise ConfigError("vector has no free parameters")
    if any(not np.isfinite([lo, hi]).all() for lo, hi in vector.bounds):
        raise ConfigError("solver needs finite bounds")
    if method not in ("slsqp", "auglag"):
        raise ConfigError(f"unknown method {method!r}")

    started = time.perf_counter()
    objective = closed_form_objective(vector, scenario)
    constraints = _active_constraints(vector, ignore)
    scales = _scales(constraints, vector.bounds)
    cons_fns = [
        (lambda p, c=c, s=s: float(c.fn(np.asarray(p, dtype=float))) / s)
        for c, s in zip(constraints, scales)
    ]

    def neg_obj(p):
        return -float(objective(np.asarray(p, dtype=float)))

    def grad_neg(p):
        f = objective
        p = np.asarray(p, dtype=float)
        h = config.fd_step
        out = np.empty_like(p)
        for i in range(len(p)):
            bump = np.zeros_like(p)
            bump[i] = h
            out[i] = -(float(f(p + bump)) - float(f(p - bump))) / (2.0 * h)
        return out

    starts = latin_hypercube(config.starts, vector.bounds, config.seed)
    best: tuple[float, np.ndarray, float] | None = None  # (objective, params, min residual)
    least_bad: tuple[float, np.ndarray, float] | None = None
    iterations = 0
    for x0 in starts:
        try:
            if method == "slsqp":
                x, nit = _solve_slsqp(neg_obj, grad_neg, x0, vector.bounds, cons_fns, config)
            else:
                x, nit = _solve_auglag(neg_obj, x0, vector.bounds, cons_fns, config)
        except (EvaluationError, FloatingPointError):
            continue
        iterations += nit
        value = float(objective(x))
        worst = _min_scaled_residual(constraints, scales, x)
        if not np.isfinite(value):
            continue
        if worst >= -FEASIBILITY_TOL:
            if best is None or value > best[0]:
                best = (value, x, worst)
        elif least_bad is None or worst > least_bad[2]:
            least_bad = (value, x, worst)

    elapsed = time.perf_counter() - started
    if best is not None:
        value, x, worst = best
        feasible = True
    elif least_bad is not None:
        value, x, worst = least_bad
        feasible = False
    else:
        raise EvaluationError(0, "every start failed to evaluate")
    return OptimizationResult(
        best_params=tuple(float(v) for v in x),
        best_objective=value,
        max_violation=worst,
        feasible=feasible,
        iterations=iterations,
        wall_time=elapsed,
        starts_tried=len(starts),
        method=method,
    )


def grid_oracle(
    vector: AttackVector,
    scenario: WorldState,
    resolution: int,
    ignore: Iterable[str] = (),
) -> OptimizationResult:
    """Exhaustive feasible-box scan plus one refinement pass around the best cell.

    Independent of the gradient solver; used to certify its results.  Only
    supported for up to three free parameters (desk-scale exhaustion).
    """
    if vector.n_params > 3:
        raise ValueError(f"grid oracle supports at most 3 parameters, got {vector.n_params}")
    if resolution < 2:
        raise ConfigError("grid resolution must be at least 2")
    started = time.perf_counter()
    objective = closed_form_objective(vector, scenario)
    constraints = _active_constraints(vector, ignore)
    scales = _scales(constraints, vector.bounds)
    vectorized = vector.objective is not None

    def scan(lo: np.ndarray, hi: np.ndarray) -> tuple[float, np.ndarray] | None:
        axes = [np.linspace(a, b, resolution) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        if vectorized:
            values = np.asarray(objective(pts), dtype=float)
            feasible = np.ones(len(pts), dtype=bool)
            for c, s in zip(constraints, scales):
                feasible &= np.asarray(c.fn(pts), dtype=float) / s >= -FEASIBILITY_TOL
        else:
            values = np.array([float(objective(p)) for p in pts])
            feasible = np.array([
                _min_scaled_residual(constraints, scales, p) >= -FEASIBILITY_TOL for p in pts
            ])
        if not feasible.any():
            return None
        masked = np.where(feasible, values, -np.inf)
        idx = int(np.argmax(masked))
        return float(values[idx]), pts[idx]

    lo = np.array([b[0] for b in vector.bounds], dtype=float)
    hi = np.array([b[1] for b in vector.bounds], dtype=float)
    coarse = scan(lo, hi)
    evaluated = resolution ** vector.n_params
    best = coarse
    if coarse is not None:
        cell = (hi - lo) / (resolution - 1)
        center = coarse[1]
        fine = scan(np.maximum(lo, center - cell), np.minimum(hi, center + cell))
        evaluated += resolution ** vector.n_params
        if fine is not None and fine[0] > coarse[0]:
            best = fine

    elapsed = time.perf_counter() - started
    if best is None:
        corner = lo
        return OptimizationResult(
            best_params=tuple(corner),
            best_objective=float(objective(corner)),
            max_violation=_min_scaled_residual(constraints, scales, corner),
            feasible=False,
            iterations=evaluated,
            wall_time=elapsed,
            starts_tried=1,
            method="grid",
        )
    value, point = best
    return OptimizationResult(
        best_params=tuple(float(v) for v in point),
        best_objective=value,
        max_violation=_min_scaled_residual(constraints, scales, point),
        feasible=True,
        iterations=evaluated,
        wall_time=elapsed,
        starts_tried=1,
        method="grid",
    )
