"""Independent verification machinery.

Everything here deliberately avoids the reduced-order and adaptive
sparse-grid code paths: gradients come from finite differences of the
full solve, expectations from directly tensorized quadrature, and the
baseline optimizer queries the high-dimensional model only.  These are
the second routes against which the fast paths are checked.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .hdm import (QueryCounters, adjoint_gradient, solve_adjoint, solve_primal)
from .rom import ReducedBasis, rom_gradient, rom_qoi, solve_rom_adjoint, solve_rom_primal
from .sparse_grid import cc_rule

__all__ = [
    "BoundEstimate", "fd_gradient", "tensor_reference", "tensor_nodes",
    "sg_iso_baseline", "validate_bounds", "cost_metric",
]


@dataclass
class BoundEstimate:
    """Per-sample ratios of an error to its residual-based indicator.

    A bounded maximum across samples is the empirical content of the
    residual-based error bounds; the constants themselves are
    problem-dependent and never asserted against.
    """

    ratios: list
    max_ratio: float
    median_ratio: float
    n_samples: int
    n_excluded: int


def fd_gradient(problem, y, mu, h: float = 1e-5,
                counters: QueryCounters | None = None) -> np.ndarray:
    """Central finite differences of the solution-restricted QoI.

    Costs two full primal solves per parameter component.
    """
    if h <= 0.0:
        raise ValueError("step size must be positive")
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    grad = np.zeros(problem.n_mu)
    for j in range(problem.n_mu):
        e = np.zeros(problem.n_mu)
        e[j] = h
        up = solve_primal(problem, y, mu + e, counters=counters)
        dn = solve_primal(problem, y, mu - e, counters=counters)
        f_up = problem.qoi(up.u, y, mu + e)
        f_dn = problem.qoi(dn.u, y, mu - e)
        grad[j] = (f_up - f_dn) / (2.0 * h)
    return grad


def tensor_nodes(n_y: int, level: int):
    """Nodes and weights of the full tensor Clenshaw-Curtis rule."""
    rule = cc_rule(level)
    nodes = []
    weights = []
    for combo in itertools.product(range(len(rule.nodes)), repeat=n_y):
        nodes.append(np.array([rule.nodes[i] for i in combo]))
        weights.append(math.prod(rule.weights[i] for i in combo))
    return nodes, np.array(weights)


def tensor_reference(problem, mu, level: int,
                     counters: QueryCounters | None = None,
                     warm: dict | None = None):
    """Objective and gradient on a directly tensorized quadrature.

    Every node gets a full primal and adjoint solve; this is the
    brute-force reference the adaptive machinery is compared against.
    """
    if level > 6:
        raise ValueError("tensor reference capped at level 6")
    if problem.n_y > 3:
        raise ValueError("tensor reference capped at 3 stochastic dimensions")
    mu = np.asarray(mu, dtype=float)
    nodes, weights = tensor_nodes(problem.n_y, level)
    j_val = 0.0
    grad = np.zeros(problem.n_mu)
    for i, (y, w) in enumerate(zip(nodes, weights)):
        u0 = warm.get(i) if warm is not None else None
        prim = solve_primal(problem, y, mu, u0=u0, counters=counters)
        if warm is not None:
            warm[i] = prim.u
        adj = solve_adjoint(problem, prim.u, y, mu, counters=counters)
        j_val += w * problem.qoi(prim.u, y, mu)
        grad += w * adjoint_gradient(problem, adj.lam, prim.u, y, mu)
    return j_val, grad


def sg_iso_baseline(problem, mu0, level: int = 5, gtol: float = 1e-6,
                    max_iters: int = 100,
                    counters: QueryCounters | None = None):
    """BFGS with backtracking on the fixed isotropic tensor-grid objective.

    Uses high-dimensional solves only.  A failed line search terminates
    the iteration at the best known point.  Returns
    ``(mu_final, history)`` where each history row records the
    objective, gradient norm, and cumulative query counts.
    """
    mu = np.asarray(mu0, dtype=float).copy()
    n = problem.n_mu
    warm: dict = {}
    cache: dict = {}

    def evaluate(mu_pt):
        key = mu_pt.tobytes()
        if key not in cache:
            cache[key] = tensor_reference(problem, mu_pt, level,
                                          counters=counters, warm=warm)
        return cache[key]

    hinv = np.eye(n)
    history = []
    j_val, grad = evaluate(mu)
    status = "max_iters"
    for it in range(max_iters):
        gnorm = float(np.linalg.norm(grad))
        history.append({
            "k": it, "J": j_val, "gnorm": gnorm,
            "n_hp": counters.n_hp if counters else 0,
            "n_ha": counters.n_ha if counters else 0,
        })
        if gnorm <= gtol:
            status = "converged"
            break
        d = -hinv @ grad
        if float(d @ grad) >= 0.0:
            hinv = np.eye(n)
            d = -grad
        t = 1.0
        slope = float(grad @ d)
        ok = False
        for _ in range(40):
            mu_new = mu + t * d
            j_new, g_new = evaluate(mu_new)
            if j_new <= j_val + 1e-4 * t * slope:
                ok = True
                break
            t *= 0.5
        if not ok:
            status = "line_search_failed"
            break
        s = mu_new - mu
        yv = g_new - grad
        sy = float(s @ yv)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(yv)):
            rho = 1.0 / sy
            v = np.eye(n) - rho * np.outer(s, yv)
            hinv = v @ hinv @ v.T + rho * np.outer(s, s)
        mu, j_val, grad = mu_new, j_new, g_new
    return mu, {"history": history, "status": status}


def validate_bounds(problem, basis: ReducedBasis, n_samples: int,
                    seed: int = 2024,
                    counters: QueryCounters | None = None):
    """Empirical ratio statistics for the residual-based error bounds.

    Draws ``(y, mu)`` uniformly from the problem's working box, solves
    both the reduced and the full model, and reports the ratios
    ``|F - F_r| / ||r||`` and ``||grad F - g_hat|| / (||r|| + ||r_adj||)``.
    Samples whose primal residual is below ``1e-14`` carry no
    information and are excluded (but counted).
    """
    rng = np.random.default_rng(seed)
    box = problem.mu_sample_halfwidth
    qoi_ratios = []
    grad_ratios = []
    excluded = 0
    for _ in range(n_samples):
        y = rng.uniform(-1.0, 1.0, problem.n_y)
        mu = rng.uniform(-box, box, problem.n_mu)
        prim = solve_rom_primal(problem, basis, y, mu, counters=counters)
        adj = solve_rom_adjoint(problem, basis, prim.q, y, mu, counters=counters)
        if prim.residual_norm < 1e-14:
            excluded += 1
            continue
        hdm_prim = solve_primal(problem, y, mu, counters=counters)
        hdm_adj = solve_adjoint(problem, hdm_prim.u, y, mu, counters=counters)
        f_true = problem.qoi(hdm_prim.u, y, mu)
        g_true = adjoint_gradient(problem, hdm_adj.lam, hdm_prim.u, y, mu)
        f_rom = rom_qoi(problem, basis, prim.q, y, mu)
        g_rom = rom_gradient(problem, basis, prim.q, adj.eta, y, mu)
        qoi_ratios.append(abs(f_true - f_rom) / prim.residual_norm)
        grad_ratios.append(float(np.linalg.norm(g_true - g_rom))
                           / (prim.residual_norm + adj.residual_norm))

    def estimate(ratios):
        if not ratios:
            return BoundEstimate([], math.nan, math.nan, 0, excluded)
        return BoundEstimate(list(ratios), float(np.max(ratios)),
                             float(np.median(ratios)), len(ratios), excluded)

    return estimate(qoi_ratios), estimate(grad_ratios)


def cost_metric(counters, tau: float) -> float:
    """Total cost in equivalent primal HDM queries.

    ``tau`` is the assumed speedup of a reduced solve over a full
    solve; ``tau = inf`` makes reduced queries free.  Adjoint queries
    count as one nonlinear iteration of their primal counterpart.
    """
    if not (tau > 0.0):
        raise ValueError("tau must be positive (may be math.inf)")
    c = counters.n_hp + counters.n_ha / counters.nbar_h()
    if math.isfinite(tau):
        c += (counters.n_rp + counters.n_ra / counters.nbar_r()) / tau
    return c
