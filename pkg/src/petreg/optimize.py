"""Regular-step gradient descent and projected (box-bounded) L-BFGS.

Both optimisers minimise ``fun(x) -> (cost, gradient)`` and return the best
point visited, so the reported cost never exceeds the starting cost.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = ["CostFunction", "OptReport", "regular_step_gd", "lbfgs_bounded"]

log = logging.getLogger(__name__)

STOP_REASONS = ("max-iters", "min-step", "gradient-tol", "cost-tol")


@dataclass
class CostFunction:
    """Wraps ``fun(params) -> (cost, gradient)`` with an evaluation counter."""

    fun: Callable
    n_params: int
    scales: np.ndarray | None = None
    n_evals: int = 0

    def __call__(self, x):
        self.n_evals += 1
        f, g = self.fun(x)
        g = np.asarray(g, dtype=float)
        if g.shape != (self.n_params,):
            raise ValueError(f"gradient has shape {g.shape}, expected ({self.n_params},)")
        return float(f), g


def _as_cost(f, n):
    return f if isinstance(f, CostFunction) else CostFunction(f, n)


@dataclass
class OptReport:
    final_params: np.ndarray
    final_cost: float
    initial_cost: float
    iterations: int
    stop_reason: str
    trace: list = field(default_factory=list)  # (iteration, cost, step)
    n_evals: int = 0

    def write_trace(self, fh, stage=""):
        for it, cost, step in self.trace:
            prefix = f"{stage}," if stage else ""
            fh.write(f"{prefix}{it},{cost!r},{step!r}\n")


def regular_step_gd(
    f,
    init,
    max_step=1.0,
    min_step=1e-3,
    relaxation=0.5,
    max_iters=200,
    scales=None,
    grad_tol=1e-12,
) -> OptReport:
    """Normalised-gradient descent whose step shrinks on every direction reversal.

    The search runs in scaled coordinates ``u = scales * x``: the direction
    ``d = (g / scales) / |g / scales|`` is the unit gradient there, and the
    update is ``x -= step * d / scales``. ``step`` is thus a length in scaled
    units. It is multiplied by ``relaxation`` whenever the new direction makes
    an obtuse angle with the previous one.
    """
    if not 0 < min_step < max_step:
        raise ValueError(f"need 0 < min_step < max_step, got {min_step}, {max_step}")
    if not 0 < relaxation < 1:
        raise ValueError(f"relaxation must be in (0, 1), got {relaxation}")
    x = np.array(init, dtype=float)
    n = x.size
    cf = _as_cost(f, n)
    s = np.ones(n) if scales is None else np.asarray(scales, dtype=float)
    if s.shape != (n,) or np.any(s <= 0):
        raise ValueError("scales must be positive, one per parameter")

    cost, g = cf(x)
    initial = cost
    best_x, best_cost = x.copy(), cost
    step = float(max_step)
    prev_dir = None
    trace = [(0, cost, step)]
    reason = "max-iters"
    it = 0
    while it < max_iters:
        d = g / s
        norm = np.linalg.norm(d)
        if not np.isfinite(norm) or norm <= grad_tol:
            reason = "gradient-tol"
            break
        d /= norm
        if prev_dir is not None and np.dot(d, prev_dir) < 0:
            step *= relaxation
        if step < min_step:
            reason = "min-step"
            break
        x_new = x - step * d / s
        it += 1
        cost_new, g_new = cf(x_new)
        trace.append((it, cost_new, step))
        if not np.isfinite(cost_new):
            # infeasible point (e.g. no overlap): stay put and shorten the step
            step *= relaxation
            continue
        x, cost, g, prev_dir = x_new, cost_new, g_new, d
        if cost < best_cost:
            best_x, best_cost = x.copy(), cost
    log.debug("regular_step_gd: %d iterations, stop=%s, cost %.6g -> %.6g", it, reason, initial, best_cost)
    return OptReport(best_x, best_cost, initial, it, reason, trace, cf.n_evals)


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        alphas.append((rho, a))
        q -= a * y
    if S:
        gamma = np.dot(S[-1], Y[-1]) / np.dot(Y[-1], Y[-1])
        q *= gamma
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return q


def lbfgs_bounded(
    f,
    init,
    lower=None,
    upper=None,
    memory=5,
    grad_tol=1e-5,
    max_iters=100,
    cost_tol=0.0,
    c1=1e-4,
    max_backtracks=30,
    initial_step=None,
) -> OptReport:
    """Limited-memory BFGS with box constraints enforced by projection.

    Variables sitting on a bound whose gradient pushes outward are frozen for
    the iteration; trial points are projected onto the box during the Armijo
    backtracking search. Curvature pairs with ``s'y <= 0`` are discarded.

    Steepest-descent trial steps (first iteration, or after a memory reset)
    have max-norm ``initial_step``; by default their 2-norm is 1.
    """
    x = np.array(init, dtype=float)
    n = x.size
    lo = np.full(n, -np.inf) if lower is None else np.broadcast_to(np.asarray(lower, dtype=float), (n,)).copy()
    hi = np.full(n, np.inf) if upper is None else np.broadcast_to(np.asarray(upper, dtype=float), (n,)).copy()
    if np.any(lo > hi):
        raise ValueError("invalid box: some lower bounds exceed upper bounds")
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError("initial point lies outside the box")
    cf = _as_cost(f, n)

    cost, g = cf(x)
    initial = cost
    S, Y = [], []
    trace = [(0, cost, 0.0)]
    reason = "max-iters"
    it = 0
    while it < max_iters:
        pg = x - np.clip(x - g, lo, hi)
        if np.max(np.abs(pg)) <= grad_tol:
            reason = "gradient-tol"
            break
        active = ((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0))
        d = -_two_loop(np.where(active, 0.0, g), S, Y)
        d[active] = 0.0
        slope = np.dot(g, d)
        if not slope < 0:
            S.clear()
            Y.clear()
            d = np.where(active, 0.0, -g)
            slope = np.dot(g, d)
        if S:
            alpha = 1.0
        elif initial_step is None:
            alpha = min(1.0, 1.0 / max(np.linalg.norm(d), 1e-300))
        else:
            alpha = initial_step / max(np.max(np.abs(d)), 1e-300)
        accepted = False
        for _ in range(max_backtracks):
            x_new = np.clip(x + alpha * d, lo, hi)
            cost_new, g_new = cf(x_new)
            if cost_new <= cost + c1 * np.dot(g, x_new - x) and np.isfinite(cost_new):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            reason = "min-step"
            break
        s = x_new - x
        y = g_new - g
        sy = np.dot(s, y)
        if sy > 1e-12 * np.dot(y, y):
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        decrease = cost - cost_new
        x, cost, g = x_new, cost_new, g_new
        it += 1
        trace.append((it, cost, float(np.linalg.norm(s))))
        if decrease <= cost_tol * max(1.0, abs(cost)):
            reason = "cost-tol"
            break
    log.debug("lbfgs_bounded: %d iterations, stop=%s, cost %.6g -> %.6g", it, reason, initial, cost)
    return OptReport(x, cost, initial, it, reason, trace, cf.n_evals)
