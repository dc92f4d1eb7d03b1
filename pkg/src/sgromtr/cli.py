"""Command-line front end: optimize | validate | compare.

Reports are written as CSV plus a config echo; history and event files
are flushed per iteration so an interrupted run leaves a valid prefix.
Exit codes: 0 success/converged, 1 validation-suite failure,
2 maximum iterations reached, 3 solver failure, 4 config error.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .adapt import LevelCapError, RefinementError
from .config import ConfigError, RunConfig, echo_config, load_config
from .hdm import (QueryCounters, SolverError, adjoint_gradient,
                  solve_adjoint, solve_primal)
from .oracle import (cost_metric, fd_gradient, sg_iso_baseline,
                     tensor_reference, validate_bounds)
from .rom import ReducedBasis, RomSolveError, solve_rom_primal
from .sparse_grid import MultiIndexSet, assemble, cc_rule, integrate, write_index_set
from .trust_opt import tr_run

__all__ = ["main", "run_optimize", "run_validate", "run_compare"]

EXIT_OK = 0
EXIT_SUITE_FAILED = 1
EXIT_MAX_ITERS = 2
EXIT_SOLVER_FAILURE = 3
EXIT_CONFIG_ERROR = 4

_TAUS = (1.0, 10.0, 100.0, math.inf)

_TR_COLUMNS = ("k", "m_center", "m_trial", "psi_center", "psi_trial", "rho",
               "Delta", "accepted", "gnorm", "step_norm", "grid_size",
               "basis_k", "terminal", "n_hp", "n_ha", "n_rp", "n_ra",
               "nbar_h", "nbar_r")


def _fmt(val) -> str:
    if isinstance(val, (bool, np.bool_)):
        return "1" if val else "0"
    if isinstance(val, (float, np.floating)):
        return repr(float(val))
    return str(val)


class _CsvWriter:
    """Append-only CSV writer, flushed after every row."""

    def __init__(self, path: Path, columns):
        self.columns = columns
        self._f = open(path, "w")
        self._f.write(",".join(columns) + "\n")
        self._f.flush()

    def write(self, row: dict):
        self._f.write(",".join(_fmt(row.get(c, "")) for c in self.columns) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()


def _write_summary(out: Path, entries: dict):
    with open(out / "summary.txt", "w") as f:
        for key, val in entries.items():
            f.write(f"{key} = {_fmt(val)}\n")


def _write_cost(out: Path, rows):
    with open(out / "cost.csv", "w") as f:
        f.write("method,tau,cost\n")
        for method, tau, cost in rows:
            tau_s = "inf" if math.isinf(tau) else _fmt(tau)
            f.write(f"{method},{tau_s},{_fmt(cost)}\n")


def _dump_failure(out: Path, exc: Exception):
    with open(out / "error.txt", "w") as f:
        f.write(f"{type(exc).__name__}: {exc}\n")


def _write_basis_provenance(out: Path, basis: ReducedBasis):
    with open(out / "basis_provenance.csv", "w") as f:
        f.write("index,kind,kept,y,mu\n")
        for i, snap in enumerate(basis.provenance):
            y = ";".join(repr(float(v)) for v in snap.y)
            mu = ";".join(repr(float(v)) for v in snap.mu)
            f.write(f"{i},{snap.kind},{int(snap.kept)},{y},{mu}\n")


def _write_final_nodes(out: Path, pair, mu):
    quad = pair.sweep(mu)
    with open(out / "final_nodes.csv", "w") as f:
        f.write("node,y,weight,primal_residual,adjoint_residual\n")
        for key, coord, w in quad.items():
            ev = pair.node_eval(key, coord, mu)
            y = ";".join(repr(float(v)) for v in coord)
            f.write(f"{';'.join(map(str, key))},{y},{repr(float(w))},"
                    f"{repr(ev.prim_res)},{repr(ev.adj_res)}\n")


def _run_sg_rom_tr(cfg: RunConfig, out: Path):
    problem = cfg.make_problem()
    mu0 = cfg.mu0(problem.n_mu)
    grids_dir = out / "grids"
    grids_dir.mkdir(exist_ok=True)
    history = _CsvWriter(out / "history.csv", _TR_COLUMNS)
    events = _CsvWriter(out / "events.csv",
                        ("seq", "stage", "kind", "detail", "before", "after", "ok"))
    flushed = 0

    def on_iteration(row, state):
        nonlocal flushed
        history.write(row)
        for ev in state.events[flushed:]:
            events.write({"seq": flushed, "stage": ev.stage, "kind": ev.kind,
                          "detail": ev.detail.replace(",", ";"),
                          "before": ev.before, "after": ev.after, "ok": ev.ok})
            flushed += 1
        write_index_set(state.pair.grid, grids_dir / f"iter_{row['k']}.txt")

    try:
        mu_final, state = tr_run(problem, cfg.tr, mu0, on_iteration=on_iteration)
    finally:
        history.close()
        events.close()
    _write_basis_provenance(out, state.pair.basis)
    _write_final_nodes(out, state.pair, state.mu)
    gnorm = float(np.linalg.norm(state.pair.model_gradient(state.mu)))
    _write_cost(out, [("sg-rom-tr", tau, cost_metric(state.counters, tau))
                      for tau in _TAUS])
    _write_summary(out, {
        "method": "sg-rom-tr", "status": state.status, "iterations": state.k,
        "final_gnorm": gnorm, "grid_size": len(state.pair.grid),
        "basis_k": state.pair.basis.k,
        **{k: v for k, v in state.counters.snapshot().items()},
        "final_mu": " ".join(repr(float(v)) for v in mu_final),
    })
    return mu_final, state


def _run_sg_iso(cfg: RunConfig, out: Path, gtol=None):
    problem = cfg.make_problem()
    mu0 = cfg.mu0(problem.n_mu)
    base = cfg.values["baseline"]
    if gtol is None:
        gtol = base["gtol"]
        if math.isnan(gtol):
            gtol = cfg.tr.gtol
    counters = QueryCounters()
    history = _CsvWriter(out / "history.csv",
                         ("k", "J", "gnorm", "n_hp", "n_ha"))
    mu_final, info = sg_iso_baseline(problem, mu0, level=base["level"],
                                     gtol=gtol, max_iters=base["max_iters"],
                                     counters=counters)
    for row in info["history"]:
        history.write(row)
    history.close()
    _write_cost(out, [("sg-iso", tau, cost_metric(counters, tau))
                      for tau in _TAUS])
    _write_summary(out, {
        "method": "sg-iso", "status": info["status"],
        "iterations": len(info["history"]),
        "final_gnorm": info["history"][-1]["gnorm"],
        **{k: v for k, v in counters.snapshot().items()},
        "final_mu": " ".join(repr(float(v)) for v in mu_final),
    })
    return mu_final, counters, info


def run_optimize(cfg: RunConfig, out: Path) -> int:
    """Execute the configured method end to end and write its report."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(echo_config(cfg))
    try:
        if cfg.method == "sg-rom-tr":
            _, state = _run_sg_rom_tr(cfg, out)
            return EXIT_OK if state.status == "converged" else EXIT_MAX_ITERS
        _, _, info = _run_sg_iso(cfg, out)
        return EXIT_OK if info["status"] == "converged" else EXIT_MAX_ITERS
    except (SolverError, RomSolveError, LevelCapError, RefinementError) as exc:
        _dump_failure(out, exc)
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER_FAILURE


# ---------------------------------------------------------------------------
# validation suites
# ---------------------------------------------------------------------------

def suite_quadrature() -> tuple[bool, str]:
    """Rectangular combination vs direct tensor rule, and analytic moments."""
    worst = 0.0
    for lx in range(1, 5):
        for ly in range(1, 5):
            mis = MultiIndexSet.from_indices(
                [(i, j) for i in range(1, lx + 1) for j in range(1, ly + 1)])
            quad = assemble(mis)
            rx, ry = cc_rule(lx), cc_rule(ly)
            tensor = {}
            for kx, wx in zip(rx.keys, rx.weights):
                for ky, wy in zip(ry.keys, ry.weights):
                    tensor[(kx, ky)] = wx * wy
            if set(quad.keys) != set(tensor):
                return False, f"node mismatch at rect ({lx},{ly})"
            for key, w in zip(quad.keys, quad.weights):
                worst = max(worst, abs(w - tensor[key]))
    if worst > 1e-12:
        return False, f"weight discrepancy {worst:.2e} > 1e-12"

    moment_err = 0.0
    for level in (2, 3, 4):
        mis = MultiIndexSet.from_indices(
            [(i, j) for i in range(1, level + 1) for j in range(1, level + 1)])
        quad = assemble(mis)
        deg = {1: 1, 2: 3, 3: 5, 4: 9}[level]
        for px in range(0, deg + 1):
            for py in range(0, deg + 1 - px):
                exact = ((1.0 / (px + 1) if px % 2 == 0 else 0.0)
                         * (1.0 / (py + 1) if py % 2 == 0 else 0.0))
                got = integrate(quad, lambda y: y[0] ** px * y[1] ** py)
                moment_err = max(moment_err, abs(got - exact))
    if moment_err > 1e-10:
        return False, f"moment error {moment_err:.2e} > 1e-10"
    return True, f"max weight dev {worst:.2e}, max moment err {moment_err:.2e}"


def suite_fd_gradient(problem, n_samples: int, h: float, seed: int,
                      tol: float) -> tuple[bool, str]:
    """Adjoint gradient against central finite differences."""
    rng = np.random.default_rng(seed)
    box = problem.mu_sample_halfwidth
    worst = 0.0
    for _ in range(n_samples):
        y = rng.uniform(-1.0, 1.0, problem.n_y)
        mu = rng.uniform(-box, box, problem.n_mu)
        prim = solve_primal(problem, y, mu)
        adj = solve_adjoint(problem, prim.u, y, mu)
        g = adjoint_gradient(problem, adj.lam, prim.u, y, mu)
        gfd = fd_gradient(problem, y, mu, h=h)
        worst = max(worst, float(np.linalg.norm(g - gfd))
                    / max(float(np.linalg.norm(gfd)), 1e-30))
    ok = worst <= tol
    return ok, f"worst rel err {worst:.2e} (tol {tol:g}, {n_samples} samples)"


def suite_rom_properties(problem, seed: int) -> tuple[bool, str]:
    """Interpolation and warm-chained monotonicity of the reduced solves."""
    rng = np.random.default_rng(seed)
    box = problem.mu_sample_halfwidth
    mu = rng.uniform(-box, box, problem.n_mu)
    basis = ReducedBasis(problem.n_u)
    y0 = rng.uniform(-1.0, 1.0, problem.n_y)
    p0 = solve_primal(problem, y0, mu)
    a0 = solve_adjoint(problem, p0.u, y0, mu)
    basis.append_snapshots([p0.u, a0.lam], ["primal", "adjoint"], y0, mu)
    prim = solve_rom_primal(problem, basis, y0, mu)
    interp = prim.residual_norm <= 1e-8 * (1.0 + float(np.linalg.norm(p0.u)))
    if not interp:
        return False, f"interpolation residual {prim.residual_norm:.2e}"

    nodes = [rng.uniform(-1.0, 1.0, problem.n_y) for _ in range(3)]
    prev_q = {}
    worst = -math.inf
    for _ in range(5):
        for i, y in enumerate(nodes):
            q0 = None
            if i in prev_q:
                q0 = np.zeros(basis.k)
                q0[:len(prev_q[i][1])] = prev_q[i][1]
            p = solve_rom_primal(problem, basis, y, mu, q0=q0)
            if i in prev_q:
                worst = max(worst, (p.residual_norm - prev_q[i][0])
                            / (1.0 + prev_q[i][0]))
            prev_q[i] = (p.residual_norm, p.q)
        ya = rng.uniform(-1.0, 1.0, problem.n_y)
        pa = solve_primal(problem, ya, mu)
        aa = solve_adjoint(problem, pa.u, ya, mu)
        basis.append_snapshots([pa.u, aa.lam], ["primal", "adjoint"], ya, mu)
    ok = worst <= 1e-12
    return ok, f"worst relative residual increase {worst:.2e}"


def validation_seed_basis(problem) -> ReducedBasis:
    """One-column basis from the primal solve at the origin node.

    The seed parameter is a fixed non-symmetric ramp: a symmetric seed
    aligns with the symmetric part of typical states and spreads the
    bound-ratio distribution by an order of magnitude.
    """
    mu_seed = 0.3 * np.linspace(-1.0, 1.0, problem.n_mu)
    y0 = np.zeros(problem.n_y)
    prim = solve_primal(problem, y0, mu_seed)
    basis = ReducedBasis(problem.n_u)
    basis.append_snapshots([prim.u], ["primal"], y0, mu_seed)
    return basis


def suite_bound_ratios(problem, n_samples: int, seed: int,
                       csv_path: Path | None = None) -> tuple[bool, str]:
    """Residual-based bound ratios on the one-column seed basis."""
    if n_samples == 0:
        return True, "warning: n_samples = 0, vacuously passed"
    basis = validation_seed_basis(problem)
    qoi_est, grad_est = validate_bounds(problem, basis, n_samples, seed=seed)
    if csv_path is not None:
        with open(csv_path, "w") as f:
            f.write("sample,family,ratio\n")
            for i, r in enumerate(qoi_est.ratios):
                f.write(f"{i},qoi,{repr(float(r))}\n")
            for i, r in enumerate(grad_est.ratios):
                f.write(f"{i},grad,{repr(float(r))}\n")
    finite = (np.all(np.isfinite(qoi_est.ratios))
              and np.all(np.isfinite(grad_est.ratios)))
    spread_q = qoi_est.max_ratio / qoi_est.median_ratio
    spread_g = grad_est.max_ratio / grad_est.median_ratio
    ok = bool(finite and spread_q <= 10.0 and spread_g <= 10.0)
    return ok, (f"qoi max/med {spread_q:.2f}, grad max/med {spread_g:.2f}, "
                f"median ratios {qoi_est.median_ratio:.2e}/"
                f"{grad_est.median_ratio:.2e} (seed {seed})")


def run_validate(cfg: RunConfig, out: Path | None = None) -> int:
    """Run all verification suites; prints one pass/fail line per suite."""
    problem = cfg.make_problem()
    val = cfg.values["validate"]
    tol = 1e-6 if problem.name == "linear-diffusion" else 1e-5
    csv_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.echo").write_text(echo_config(cfg))
        csv_path = out / "validation.csv"
    suites = [
        ("quadrature", lambda: suite_quadrature()),
        ("fd-gradient", lambda: suite_fd_gradient(
            problem, val["fd_samples"], val["fd_step"], cfg.seed, tol)),
        ("rom-properties", lambda: suite_rom_properties(problem, cfg.seed)),
        ("bound-ratios", lambda: suite_bound_ratios(
            problem, val["n_samples"], cfg.seed, csv_path)),
    ]
    all_ok = True
    for name, fn in suites:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed suite is a failed suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return EXIT_OK if all_ok else EXIT_SUITE_FAILED


def run_compare(cfg: RunConfig, out: Path) -> int:
    """SG-ROM-TR vs SG-ISO on the same problem at matched gradient tolerance."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(echo_config(cfg))
    tr_dir = out / "sg-rom-tr"
    iso_dir = out / "sg-iso"
    tr_dir.mkdir(exist_ok=True)
    iso_dir.mkdir(exist_ok=True)
    try:
        mu_tr, state = _run_sg_rom_tr(cfg, tr_dir)
        gnorm_tr = float(np.linalg.norm(state.pair.model_gradient(state.mu)))
        base_gtol = cfg.values["baseline"]["gtol"]
        matched = max(gnorm_tr, cfg.tr.gtol) if math.isnan(base_gtol) else base_gtol
        mu_iso, iso_counters, info = _run_sg_iso(cfg, iso_dir, gtol=matched)
    except (SolverError, RomSolveError, LevelCapError, RefinementError) as exc:
        _dump_failure(out, exc)
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER_FAILURE

    problem = cfg.make_problem()
    level = min(cfg.values["baseline"]["level"], 6)
    j_tr, g_tr = tensor_reference(problem, mu_tr, level)
    j_iso, g_iso = tensor_reference(problem, mu_iso, level)
    with open(out / "compare.csv", "w") as f:
        f.write("method,tau,cost,J_ref,gnorm_ref,n_hp,n_ha,n_rp,n_ra\n")
        for name, counters, j_val, g_val in (
                ("sg-rom-tr", state.counters, j_tr, g_tr),
                ("sg-iso", iso_counters, j_iso, g_iso)):
            for tau in _TAUS:
                tau_s = "inf" if math.isinf(tau) else _fmt(tau)
                f.write(f"{name},{tau_s},{_fmt(cost_metric(counters, tau))},"
                        f"{_fmt(j_val)},{_fmt(float(np.linalg.norm(g_val)))},"
                        f"{counters.n_hp},{counters.n_ha},"
                        f"{counters.n_rp},{counters.n_ra}\n")
    print(f"sg-rom-tr: n_hp={state.counters.n_hp} "
          f"cost(tau=inf)={cost_metric(state.counters, math.inf):.1f}")
    print(f"sg-iso:    n_hp={iso_counters.n_hp} "
          f"cost(tau=inf)={cost_metric(iso_counters, math.inf):.1f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sgromtr",
        description="Risk-neutral optimization with adaptive sparse grids "
                    "and reduced-order models")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("optimize", "validate", "compare"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="path to the INI config")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
    args = parser.parse_args(argv)

    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.threads is not None:
        overrides["run.threads"] = args.threads
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    out = Path(args.out) if args.out is not None else Path("sgromtr-out")
    try:
        if args.command == "optimize":
            return run_optimize(cfg, out)
        if args.command == "validate":
            return run_validate(cfg, out if args.out is not None else None)
        return run_compare(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
