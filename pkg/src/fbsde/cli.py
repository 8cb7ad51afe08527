"""Batch experiment runner.

Subcommands: simulate, validate, solve, verify, compare, converge.  Every run
is driven by a plain-text config file plus a handful of overriding flags, is
seeded explicitly (no wall-clock seeding), and writes RFC-4180-style CSV
artifacts whose bytes are a deterministic function of config + seed.

Exit codes: 0 all executed checks pass (or a comparison is inapplicable),
1 at least one check failed, 2 config or model errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .fbm import TimeGrid, covariance_matrix, sample_paths
from .frac_calc import inner_product
from .model import DriverSpec, FuncSpec, ModelSpec, load_model, parse_model, validate
from .solver import (SolverParams, apriori_report, default_space_grid, picard_solve,
                     terminal_field)
from .verify import (bsde_residual, compare, default_ito_cases, default_moment_corpus,
                     default_product_cases, integral_moment_suite, ito_residual,
                     product_rule_residual)

__all__ = ["RunConfig", "parse_run_config", "serialize_run_config", "run", "main"]

_SUBCOMMANDS = ("simulate", "validate", "solve", "verify", "compare", "converge")


@dataclass(frozen=True)
class RunConfig:
    model: str
    out: str = "out"
    n_steps: int = 200
    n_space: int = 240
    x_span: float = 6.0
    tol: float = 1e-8
    max_iter: int = 20
    beta: float = 2.0
    n_paths: int = 10000
    seed: int = 0
    # compare-only section
    model2: str | None = None
    fbar: str | None = None
    fbar_lipschitz_c: float = 0.0
    gbar: str | None = None

    def __post_init__(self):
        if self.n_steps < 1 or self.n_space < 4 or self.n_paths < 1 or self.max_iter < 1:
            raise ValueError("grid/MC sizes must be positive")
        if self.x_span <= 0 or self.tol <= 0:
            raise ValueError("x_span and tol must be positive")


def parse_run_config(text: str) -> RunConfig:
    from .model import _parse_sections

    sections = _parse_sections(text)
    run = sections.get("run", {})
    grid = sections.get("grid", {})
    solver = sections.get("solver", {})
    mc = sections.get("mc", {})
    cmp_ = sections.get("compare", {})
    if "model" not in run:
        raise ValueError("config must name a model in [run]")
    if "seed" not in mc:
        raise ValueError("config must carry an explicit seed in [mc]")
    return RunConfig(
        model=run["model"],
        out=run.get("out", "out"),
        n_steps=int(grid.get("n_steps", 200)),
        n_space=int(grid.get("n_space", 240)),
        x_span=float(grid.get("x_span", 6.0)),
        tol=float(solver.get("tol", 1e-8)),
        max_iter=int(solver.get("max_iter", 20)),
        beta=float(solver.get("beta", 2.0)),
        n_paths=int(mc.get("n_paths", 10000)),
        seed=int(mc["seed"]),
        model2=cmp_.get("model2"),
        fbar=cmp_.get("fbar"),
        fbar_lipschitz_c=float(cmp_.get("fbar_lipschitz_C", 0.0)),
        gbar=cmp_.get("gbar"),
    )


def serialize_run_config(cfg: RunConfig) -> str:
    lines = [
        "[run]",
        f"model = {cfg.model}",
        f"out = {cfg.out}",
        "",
        "[grid]",
        f"n_steps = {cfg.n_steps}",
        f"n_space = {cfg.n_space}",
        f"x_span = {cfg.x_span!r}",
        "",
        "[solver]",
        f"tol = {cfg.tol!r}",
        f"max_iter = {cfg.max_iter}",
        f"beta = {cfg.beta!r}",
        "",
        "[mc]",
        f"n_paths = {cfg.n_paths}",
        f"seed = {cfg.seed}",
    ]
    if cfg.model2 is not None:
        lines += [
            "",
            "[compare]",
            f"model2 = {cfg.model2}",
            f"fbar = {cfg.fbar}",
            f"fbar_lipschitz_C = {cfg.fbar_lipschitz_c!r}",
            f"gbar = {cfg.gbar}",
        ]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- #
# fixtures and model resolution
# --------------------------------------------------------------------------- #

def list_fixtures() -> list:
    root = resources.files("fbsde") / "fixtures"
    return sorted(p.name for p in root.iterdir() if p.suffix in (".model", ".cfg"))


def _resolve_model(ref: str, config_dir: Path) -> ModelSpec:
    if ref.startswith("fixture:"):
        name = ref.split(":", 1)[1]
        text = (resources.files("fbsde") / "fixtures" / f"{name}.model").read_text()
        return parse_model(text)
    path = Path(ref)
    if not path.is_absolute():
        path = config_dir / path
    return load_model(path)


# --------------------------------------------------------------------------- #
# verdicts
# --------------------------------------------------------------------------- #

class Verdicts:
    """Accumulates one machine-readable line per executed check."""

    def __init__(self):
        self.rows = []

    def add(self, test: str, metric: str, target, tolerance, value, passed: bool):
        self.rows.append((test, metric, repr(target), repr(tolerance),
                          repr(value), "pass" if passed else "fail"))

    @property
    def all_pass(self) -> bool:
        return all(r[-1] == "pass" for r in self.rows)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("test,metric,target,tolerance,value,pass\n")
            for row in self.rows:
                fh.write(",".join(str(c) for c in row) + "\n")

    def print(self) -> None:
        for row in self.rows:
            print(f"[{row[-1].upper()}] {row[0]}: {row[1]} = {row[4]} "
                  f"(target {row[2]}, tol {row[3]})")


# --------------------------------------------------------------------------- #
# subcommand implementations
# --------------------------------------------------------------------------- #

def _grid_for(model: ModelSpec, cfg: RunConfig) -> TimeGrid:
    return TimeGrid(model.t_end, cfg.n_steps)


def _solver_params(cfg: RunConfig) -> SolverParams:
    return SolverParams(tol=cfg.tol, max_iter=cfg.max_iter, beta=cfg.beta)


def _cmd_simulate(model, cfg, out: Path, verdicts: Verdicts) -> None:
    grid = _grid_for(model, cfg)
    batch = sample_paths(grid, model.hurst, cfg.n_paths, cfg.seed)
    batch.write_csv(out / "paths.csv")
    emp = batch.values[:, 1:].T @ batch.values[:, 1:] / cfg.n_paths
    theo = covariance_matrix(grid, model.hurst)[1:, 1:]
    se = np.sqrt((np.outer(np.diag(emp), np.diag(emp)) + emp ** 2) / cfg.n_paths)
    frac = float(np.mean(np.abs(emp - theo) <= 3.0 * se))
    verdicts.add("simulate", "covariance_pass_fraction", 0.99, "lower bound",
                 frac, frac >= 0.99)


def _cmd_validate(model, cfg, out: Path, verdicts: Verdicts) -> int:
    grid = _grid_for(model, cfg)
    report = validate(model, grid, beta=cfg.beta)
    with open(out / "validation.csv", "w", newline="") as fh:
        fh.write("check,pass,detail\n")
        for c in report.checks:
            detail = c.detail.replace(",", ";")
            fh.write(f"{c.name},{'pass' if c.passed else 'fail'},{detail}\n")
    for c in report.checks:
        verdicts.add("validate", c.name, True, "-", c.passed, c.passed)
    if not report.passed:
        bad = report.failures()[0]
        print(f"model invariant violated: {bad.name}: {bad.detail}", file=sys.stderr)
        return 2
    return 0


def _cmd_solve(model, cfg, out: Path, verdicts: Verdicts) -> None:
    grid = _grid_for(model, cfg)
    table = model.kernel_table(grid)
    xgrid = default_space_grid(model, table, cfg.n_space, cfg.x_span)
    sol, trace = picard_solve(model, grid, xgrid, _solver_params(cfg))
    sol.write_csv(out / "solution.csv")
    trace.write_csv(out / "contraction.csv")
    prior = apriori_report(sol, model, cfg.beta, table)
    prior.write_csv(out / "apriori.csv")
    verdicts.add("solve", "converged", True, f"max_iter={cfg.max_iter}",
                 trace.converged, trace.converged)
    ratio = trace.max_ratio()
    if ratio is not None:
        verdicts.add("solve", "contraction_ratio", 0.75, "upper bound",
                     ratio, ratio <= 0.75)
    finite = bool(np.isfinite(prior.sup_ratio))
    verdicts.add("solve", "apriori_sup_ratio", "finite", "-",
                 prior.sup_ratio, finite)


def _cmd_verify(model, cfg, out: Path, verdicts: Verdicts) -> None:
    grid = _grid_for(model, cfg)
    params = _solver_params(cfg)
    table = model.kernel_table(grid)

    batch = sample_paths(grid, model.hurst, cfg.n_paths, cfg.seed)
    moments = integral_moment_suite(batch, default_moment_corpus())
    for row in moments.rows:
        verdicts.add("moments", row.name,
                     f"mean 0 var {row.variance_target:.6g}",
                     f"3se/{5}%", f"{row.mean:.6g}/{row.variance:.6g}", row.passed)

    i_t = grid.index_of(model.T)
    decim = tuple(f for f in (4, 2, 1) if grid.n_steps % f == 0 and i_t % f == 0)
    for fn, proc in default_ito_cases():
        rep = ito_residual(fn, proc, batch, decimations=decim)
        verdicts.add("ito", rep.name, f">= {rep.threshold}", "order",
                     "exact" if rep.exact else f"{rep.order:.3f}", rep.passed)
    for p1, p2 in default_product_cases():
        rep = product_rule_residual(p1, p2, batch, decimations=decim)
        verdicts.add("product", rep.name, f">= {rep.threshold}", "order",
                     "exact" if rep.exact else f"{rep.order:.3f}", rep.passed)

    xgrid = default_space_grid(model, table, cfg.n_space, cfg.x_span)
    sol, trace = picard_solve(model, grid, xgrid, params)
    verdicts.add("verify", "solver_converged", True, "-", trace.converged,
                 trace.converged)
    rep = bsde_residual(model, sol, batch, decimations=decim, table=table)
    verdicts.add("bsde", rep.name, f">= {rep.threshold}", "order",
                 "exact" if rep.exact else f"{rep.order:.3f}", rep.passed)
    ratio = trace.max_ratio()
    if ratio is not None:
        verdicts.add("contraction", "max_ratio", 0.75, "upper bound",
                     ratio, ratio <= 0.75)


def _cmd_compare(model, cfg, out: Path, verdicts: Verdicts, config_dir: Path) -> None:
    if cfg.model2 is None or cfg.fbar is None or cfg.gbar is None:
        raise ValueError("compare needs model2, fbar, and gbar in [compare]")
    model2 = _resolve_model(cfg.model2, config_dir)
    fbar = DriverSpec.parse(cfg.fbar, cfg.fbar_lipschitz_c)
    gbar = FuncSpec.parse(cfg.gbar)
    grid = _grid_for(model, cfg)
    table = model.kernel_table(grid)
    xgrid = default_space_grid(model, table, cfg.n_space, cfg.x_span)
    rep = compare(model, model2, fbar, gbar, grid, xgrid, _solver_params(cfg))
    with open(out / "ordering.csv", "w", newline="") as fh:
        fh.write("quantity,value\n")
        fh.write(f"min_gap,{rep.min_gap!r}\n")
        fh.write(f"min_gap_upper,{rep.min_gap_upper!r}\n")
        fh.write(f"min_gap_lower,{rep.min_gap_lower!r}\n")
        fh.write(f"violation_count,{rep.violation_count}\n")
        fh.write(f"rate_estimate,{rep.rate_estimate!r}\n")
        fh.write(f"beta_theory,{rep.beta_theory!r}\n")
        fh.write(f"claimed_rate,{rep.claimed_rate!r}\n")
        fh.write(f"inapplicable,{rep.inapplicable!r}\n")
        for i, n in enumerate(rep.sequence_norms, 1):
            fh.write(f"sequence_norm_{i},{n!r}\n")
    if rep.inapplicable is not None:
        verdicts.add("compare", "applicability", "hypotheses hold", "-",
                     rep.inapplicable, True)
        return
    verdicts.add("compare", "min_gap", f">= {-rep.tolerance}", rep.tolerance,
                 rep.min_gap, rep.min_gap >= -rep.tolerance)
    verdicts.add("compare", "sequence_norms_decreasing", True, "-",
                 rep.norms_decreasing, rep.norms_decreasing)


def _cmd_converge(model, cfg, out: Path, verdicts: Verdicts) -> None:
    """Space-refinement study at fixed time step: solve at n_space x {1,2,4}
    and fit the order of successive differences, measured in the
    marginal-weighted Y-norm on common nodes."""
    from .solver import SolutionField, weighted_norms

    grid = _grid_for(model, cfg)
    table = model.kernel_table(grid)
    params = _solver_params(cfg)
    fields = []
    for mult in (1, 2, 4):
        xgrid = default_space_grid(model, table, cfg.n_space * mult, cfg.x_span)
        sol, trace = picard_solve(model, grid, xgrid, params)
        if not trace.converged:
            verdicts.add("converge", f"converged_x{mult}", True, "-", False, False)
            return
        fields.append(sol)

    def _norm_gap(fine, coarse) -> float:
        restricted = SolutionField(grid, coarse.xgrid, fine.u[:, ::2].copy(),
                                   fine.z[:, ::2].copy())
        ny, _ = weighted_norms(restricted, coarse, model, cfg.beta, table)
        return ny

    d1 = _norm_gap(fields[1], fields[0])
    d2 = _norm_gap(fields[2], fields[1])
    scale = float(np.max(np.abs(fields[2].u))) + 1.0
    exact = max(d1, d2) <= 1e-9 * scale
    order = float("inf") if exact else float(np.log2(max(d1, 1e-300) / max(d2, 1e-300)))
    with open(out / "order_table.csv", "w", newline="") as fh:
        fh.write("n_space,diff_to_next,fitted_space_order\n")
        fh.write(f"{cfg.n_space},{d1!r},\n")
        fh.write(f"{cfg.n_space * 2},{d2!r},{'exact' if exact else repr(order)}\n")
        fh.write(f"{cfg.n_space * 4},,\n")
    value = "exact" if exact else f"{order:.3f}"
    verdicts.add("converge", "space_order", ">= 1.8", "-", value,
                 exact or order >= 1.8)


# --------------------------------------------------------------------------- #
# entry point
# --------------------------------------------------------------------------- #

def run(subcommand: str, cfg: RunConfig, config_dir: Path) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _resolve_model(cfg.model, config_dir)
    grid = _grid_for(model, cfg)
    try:
        grid.index_of(model.T)
    except ValueError:
        print(f"config error: T={model.T} is not a node of the {cfg.n_steps}-step "
              f"grid on [0, {model.t_end}]", file=sys.stderr)
        return 2

    verdicts = Verdicts()
    if subcommand == "validate":
        status = _cmd_validate(model, cfg, out, verdicts)
        verdicts.write(out / "verdict.csv")
        verdicts.print()
        return status

    report = validate(model, grid, beta=cfg.beta)
    if not report.passed:
        bad = report.failures()[0]
        print(f"model invariant violated: {bad.name}: {bad.detail}", file=sys.stderr)
        return 2

    if subcommand == "simulate":
        _cmd_simulate(model, cfg, out, verdicts)
    elif subcommand == "solve":
        _cmd_solve(model, cfg, out, verdicts)
    elif subcommand == "verify":
        _cmd_verify(model, cfg, out, verdicts)
    elif subcommand == "compare":
        _cmd_compare(model, cfg, out, verdicts, config_dir)
    elif subcommand == "converge":
        _cmd_converge(model, cfg, out, verdicts)
    else:
        raise ValueError(f"unknown subcommand {subcommand!r}")

    verdicts.write(out / "verdict.csv")
    verdicts.print()
    return 0 if verdicts.all_pass else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fbsde",
        description="Simulate fBm, solve anticipative fractional BSDEs, and "
                    "run the verification suites.")
    parser.add_argument("subcommand", nargs="?", choices=_SUBCOMMANDS)
    parser.add_argument("--config", help="run configuration file")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, help="RNG seed (overrides config)")
    parser.add_argument("--paths", type=int, help="Monte Carlo paths (overrides config)")
    parser.add_argument("--steps", type=int, help="time steps (overrides config)")
    parser.add_argument("--tol", type=float, help="solver tolerance (overrides config)")
    parser.add_argument("--version", action="store_true", help="print version and exit")
    parser.add_argument("--list-fixtures", action="store_true",
                        help="list shipped fixture files and exit")
    args = parser.parse_args(argv)

    if args.version:
        print(f"fbsde {__version__}")
        return 0
    if args.list_fixtures:
        for name in list_fixtures():
            print(name)
        return 0
    if args.subcommand is None or args.config is None:
        parser.print_usage(sys.stderr)
        print("a subcommand and --config are required", file=sys.stderr)
        return 2

    try:
        with open(args.config) as fh:
            cfg = parse_run_config(fh.read())
        overrides = {}
        if args.out is not None:
            overrides["out"] = args.out
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.paths is not None:
            overrides["n_paths"] = args.paths
        if args.steps is not None:
            overrides["n_steps"] = args.steps
        if args.tol is not None:
            overrides["tol"] = args.tol
        if overrides:
            cfg = replace(cfg, **overrides)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        return run(args.subcommand, cfg, Path(args.config).resolve().parent)
    except (ValueError, FileNotFoundError) as exc:
        print(f"config/model error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
