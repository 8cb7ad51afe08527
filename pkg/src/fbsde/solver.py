"""Anticipative BSDE solver.

The solution is represented in Markovian field form: Y_t = u(t, eta_t) and
Z_t = z(t, eta_t) with z = sigma_t d_x u.  A single "frozen" solve performs a
backward Crank-Nicolson sweep of

    d_t u + a(t) d_xx u + b(t) d_x u + f(t, x, u, sigma d_x u, A_y, A_z) = 0

where a(t) = sigma_hat_t sigma_t is the effective diffusion coefficient and
A_y, A_z are the anticipated driver arguments, computed by Gaussian smoothing
of the frozen field's delayed slices.  The outer Picard iteration refreshes
the frozen field window by window, walking backward over [0, T]; windows are
sized so that the iteration contracts in the exponentially weighted norms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_banded

from .fbm import TimeGrid
from .frac_calc import KernelTable, heat_smooth, _interp_linear_extrap
from .model import ModelSpec, drift_integral, _GH_NODES, _GH_WEIGHTS

__all__ = [
    "SpaceGrid",
    "SolverParams",
    "SolutionField",
    "ContractionTrace",
    "AprioriReport",
    "default_space_grid",
    "terminal_field",
    "solve_frozen",
    "picard_solve",
    "weighted_norms",
    "apriori_report",
]


@dataclass(frozen=True)
class SpaceGrid:
    """Uniform x-grid with n_cells intervals on [x_min, x_max]."""

    x_min: float
    x_max: float
    n_cells: int

    def __post_init__(self):
        if self.x_max <= self.x_min or self.n_cells < 4:
            raise ValueError("space grid needs x_max > x_min and >= 4 cells")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_cells

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_cells + 1)


@dataclass(frozen=True)
class SolverParams:
    tol: float = 1e-8
    max_iter: int = 20
    beta: float = 2.0
    n_windows: int | None = None   # None = contraction heuristic
    boundary_order: int = 2        # 2: curvature-copy ghosts, 1: linear ghosts


def default_space_grid(model: ModelSpec, table: KernelTable, n_cells: int = 240,
                       span: float = 6.0) -> SpaceGrid:
    """Domain covering the drifted mean range plus ``span`` marginal stds."""
    means = model.coefficients.eta0 + drift_integral(model, table.grid)
    max_std = float(np.sqrt(np.max(table.sigma_norm_sq)))
    pad = span * max(max_std, 1e-8)
    return SpaceGrid(float(np.min(means)) - pad, float(np.max(means)) + pad, n_cells)


@dataclass
class SolutionField:
    """Discrete (t, x) fields u (Y-field) and z (Z-field) on [0, T+K]."""

    tgrid: TimeGrid
    xgrid: SpaceGrid
    u: np.ndarray
    z: np.ndarray

    def copy(self) -> "SolutionField":
        return SolutionField(self.tgrid, self.xgrid, self.u.copy(), self.z.copy())

    def eval_u(self, k: int, xq) -> np.ndarray:
        return _interp_linear_extrap(np.asarray(xq, float), self.xgrid.nodes, self.u[k])

    def eval_z(self, k: int, xq) -> np.ndarray:
        return _interp_linear_extrap(np.asarray(xq, float), self.xgrid.nodes, self.z[k])

    def write_csv(self, path) -> None:
        xs = self.xgrid.nodes
        with open(path, "w", newline="") as fh:
            fh.write("t,x,u,z\n")
            for k, t in enumerate(self.tgrid.times):
                for j, x in enumerate(xs):
                    fh.write(f"{float(t)!r},{float(x)!r},"
                             f"{float(self.u[k, j])!r},{float(self.z[k, j])!r}\n")


@dataclass
class ContractionTrace:
    """Per-window record of the Picard iteration's successive-difference
    weighted norms."""

    beta: float
    window_bounds: list
    norms: list  # one list of (norm_Y, norm_Z) pairs per window
    window_converged: list
    iterations: int
    converged: bool
    n_windows: int

    def combined(self, w: int) -> list:
        return [math.hypot(a, b) for a, b in self.norms[w]]

    def max_ratio(self, floor: float = 1e-13) -> float | None:
        """Largest ratio of consecutive successive-difference norms, over all
        windows, ignoring pairs already at roundoff level."""
        worst = None
        for w in range(len(self.norms)):
            c = self.combined(w)
            for i in range(len(c) - 1):
                if c[i] > floor:
                    r = c[i + 1] / c[i]
                    worst = r if worst is None else max(worst, r)
        return worst

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("window,iteration,norm_Y,norm_Z\n")
            for w, pairs in enumerate(self.norms):
                for i, (ny, nz) in enumerate(pairs, 1):
                    fh.write(f"{w},{i},{ny!r},{nz!r}\n")


# --------------------------------------------------------------------------- #
# per-(model, grid) arrays
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class _ModelArrays:
    sigma: np.ndarray
    b: np.ndarray
    drift_cum: np.ndarray
    delta_idx: np.ndarray
    zeta_idx: np.ndarray
    i_T: int


def _model_arrays(model: ModelSpec, grid: TimeGrid) -> _ModelArrays:
    times = grid.times
    i_t = grid.index_of(model.T)
    sigma = np.asarray(model.coefficients.sigma(times), float)
    b = np.asarray(model.coefficients.b(times), float)
    drift = drift_integral(model, grid)

    def _round_delay(fn):
        img = times + np.asarray(fn(times), float)
        idx = np.clip(np.round(img / grid.dt).astype(int), 0, grid.n_steps)
        return np.maximum(idx, np.arange(len(times)))

    return _ModelArrays(sigma, b, drift, _round_delay(model.delays.delta),
                        _round_delay(model.delays.zeta), i_t)


def terminal_field(model: ModelSpec, grid: TimeGrid, xgrid: SpaceGrid) -> SolutionField:
    """Field holding the terminal data g, h on [T, T+K] (and, as a cheap
    initial guess, everywhere below T as well)."""
    xs = xgrid.nodes
    g = np.asarray(model.terminal.g(xs), float)
    h = np.asarray(model.terminal.h(xs), float)
    n_t = grid.n_steps + 1
    return SolutionField(grid, xgrid,
                         np.tile(g, (n_t, 1)), np.tile(h, (n_t, 1)))


# --------------------------------------------------------------------------- #
# spatial operators
# --------------------------------------------------------------------------- #

def _first_derivative(u: np.ndarray, dx: float) -> np.ndarray:
    out = np.empty_like(u)
    out[1:-1] = (u[2:] - u[:-2]) / (2 * dx)
    out[0] = (-3 * u[0] + 4 * u[1] - u[2]) / (2 * dx)
    out[-1] = (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * dx)
    return out


def _second_derivative(u: np.ndarray, dx: float, boundary_order: int) -> np.ndarray:
    out = np.empty_like(u)
    out[1:-1] = (u[:-2] - 2 * u[1:-1] + u[2:]) / dx ** 2
    if boundary_order >= 2:
        # ghost from quadratic extrapolation copies the neighbouring curvature
        out[0] = (u[0] - 2 * u[1] + u[2]) / dx ** 2
        out[-1] = (u[-1] - 2 * u[-2] + u[-3]) / dx ** 2
    else:
        out[0] = 0.0
        out[-1] = 0.0
    return out


def _apply_operator(u: np.ndarray, a: float, b: float, dx: float,
                    boundary_order: int) -> np.ndarray:
    return a * _second_derivative(u, dx, boundary_order) + b * _first_derivative(u, dx)


def _implicit_banded(a: float, b: float, dt: float, dx: float, n_nodes: int,
                     boundary_order: int) -> np.ndarray:
    """Banded (l=2, u=2) form of I - (dt/2) (a D2 + b D1)."""
    ab = np.zeros((5, n_nodes))
    half = 0.5 * dt
    lo = -half * (a / dx ** 2 - b / (2 * dx))
    di = 1.0 + dt * a / dx ** 2
    hi = -half * (a / dx ** 2 + b / (2 * dx))
    ab[1, 2:] = hi      # superdiagonal entries A[i, i+1]
    ab[2, 1:-1] = di    # diagonal
    ab[3, :-2] = lo     # subdiagonal A[i, i-1]

    if boundary_order >= 2:
        row0 = (a / dx ** 2 - 3 * b / (2 * dx),
                -2 * a / dx ** 2 + 4 * b / (2 * dx),
                a / dx ** 2 - b / (2 * dx))
        rown = (a / dx ** 2 + b / (2 * dx),
                -2 * a / dx ** 2 - 4 * b / (2 * dx),
                a / dx ** 2 + 3 * b / (2 * dx))
    else:
        row0 = (-b / dx, b / dx, 0.0)
        rown = (0.0, -b / dx, b / dx)

    ab[2, 0] = 1.0 - half * row0[0]
    ab[1, 1] = -half * row0[1]
    ab[0, 2] = -half * row0[2]
    ab[2, -1] = 1.0 - half * rown[2]
    ab[3, -2] = -half * rown[1]
    ab[4, -3] = -half * rown[0]
    return ab


def _boundary_rows_apply(u: np.ndarray, a: float, b: float, dx: float,
                         boundary_order: int, out: np.ndarray) -> None:
    if boundary_order >= 2:
        out[0] = a * (u[0] - 2 * u[1] + u[2]) / dx ** 2 \
            + b * (-3 * u[0] + 4 * u[1] - u[2]) / (2 * dx)
        out[-1] = a * (u[-1] - 2 * u[-2] + u[-3]) / dx ** 2 \
            + b * (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * dx)
    else:
        out[0] = b * (u[1] - u[0]) / dx
        out[-1] = b * (u[-1] - u[-2]) / dx


def _operator_matvec(u: np.ndarray, a: float, b: float, dx: float,
                     boundary_order: int) -> np.ndarray:
    out = np.empty_like(u)
    out[1:-1] = a * (u[:-2] - 2 * u[1:-1] + u[2:]) / dx ** 2 \
        + b * (u[2:] - u[:-2]) / (2 * dx)
    _boundary_rows_apply(u, a, b, dx, boundary_order, out)
    return out


# --------------------------------------------------------------------------- #
# frozen-anticipation sweep
# --------------------------------------------------------------------------- #

def _anticipated_rows(model: ModelSpec, table: KernelTable, arrays: _ModelArrays,
                      source: SolutionField, ks: range, dx: float):
    """A_y and A_z rows for every time index in ``ks``, smoothed from the
    frozen ``source`` field's delayed slices."""
    n_x = source.u.shape[1]
    ay = np.zeros((len(ks), n_x))
    az = np.zeros((len(ks), n_x))
    norm_sq = table.sigma_norm_sq
    drift = arrays.drift_cum
    for i, k in enumerate(ks):
        if model.driver.uses_anticipated_y:
            j = int(arrays.delta_idx[k])
            var = max(float(norm_sq[j] - norm_sq[k]), 0.0)
            shift = float(drift[j] - drift[k])
            ay[i] = heat_smooth(source.u[j], dx, var, shift)
        if model.driver.uses_anticipated_z:
            j = int(arrays.zeta_idx[k])
            var = max(float(norm_sq[j] - norm_sq[k]), 0.0)
            shift = float(drift[j] - drift[k])
            az[i] = heat_smooth(source.z[j], dx, var, shift)
    return ay, az


def solve_frozen(model: ModelSpec, table: KernelTable, anticipated: SolutionField,
                 window: tuple, params: SolverParams = SolverParams(),
                 base: SolutionField | None = None) -> SolutionField:
    """One backward Crank-Nicolson sweep over ``window`` = (t_lo, t_hi).

    The anticipated driver arguments are frozen from ``anticipated``; the
    current (u, sigma d_x u) enter the driver through a predictor-corrector
    source evaluation, which keeps the sweep second order in time.  Values
    outside the window are copied from ``base`` (default: ``anticipated``),
    whose slice at t_hi provides the terminal condition.
    """
    if base is None:
        base = anticipated
    grid = anticipated.tgrid
    xgrid = anticipated.xgrid
    dx = xgrid.dx
    dt = grid.dt
    xs = xgrid.nodes
    k_lo = grid.index_of(window[0])
    k_hi = grid.index_of(window[1])
    if k_hi <= k_lo:
        raise ValueError("window must contain at least one step")

    arrays = _model_arrays(model, grid)
    out = base.copy()
    ks = range(k_lo, k_hi + 1)
    ay, az = _anticipated_rows(model, table, arrays, anticipated, ks, dx)

    f = model.driver
    times = grid.times
    # cell-averaged coefficients: the diffusion average is exact because
    # a = (1/2) d/dt ||sigma||^2, which absorbs the t^{2H-1} singularity of
    # the first cell instead of sampling it at the endpoints
    norm_sq = table.sigma_norm_sq
    for k in range(k_hi - 1, k_lo - 1, -1):
        i = k - k_lo
        a_cell = float(norm_sq[k + 1] - norm_sq[k]) / (2.0 * dt)
        b_cell = 0.5 * float(arrays.b[k] + arrays.b[k + 1])
        u_next = out.u[k + 1]
        z_next = out.z[k + 1]
        f_next = f(times[k + 1], xs, u_next, z_next, ay[i + 1], az[i + 1])
        rhs = u_next + 0.5 * dt * _operator_matvec(
            u_next, a_cell, b_cell, dx, params.boundary_order)
        ab = _implicit_banded(a_cell, b_cell, dt, dx, len(xs),
                              params.boundary_order)
        u_pred = solve_banded((2, 2), ab, rhs + dt * f_next)
        z_pred = arrays.sigma[k] * _first_derivative(u_pred, dx)
        f_here = f(times[k], xs, u_pred, z_pred, ay[i], az[i])
        u_new = solve_banded((2, 2), ab, rhs + 0.5 * dt * (f_next + f_here))
        if not np.all(np.isfinite(u_new)) or np.max(np.abs(u_new)) > 1e14:
            raise RuntimeError(
                f"backward sweep diverged at t={times[k]:.6g} "
                "(boundary extrapolation overflow or unstable step)")
        out.u[k] = u_new
        out.z[k] = arrays.sigma[k] * _first_derivative(u_new, dx)
    return out


# --------------------------------------------------------------------------- #
# weighted norms
# --------------------------------------------------------------------------- #

def _marginal_moments(model: ModelSpec, table: KernelTable):
    means = model.coefficients.eta0 + drift_integral(model, table.grid)
    stds = np.sqrt(np.maximum(table.sigma_norm_sq, 0.0))
    return means, stds


def _expected_sq_rows(diff: np.ndarray, xs: np.ndarray, means: np.ndarray,
                      stds: np.ndarray, ks: range) -> np.ndarray:
    out = np.zeros(len(ks))
    for i, k in enumerate(ks):
        pts = means[k] + stds[k] * _GH_NODES
        vals = _interp_linear_extrap(pts, xs, diff[k])
        out[i] = float(np.dot(_GH_WEIGHTS, vals ** 2))
    return out


def _window_norms(field_a: SolutionField, field_b: SolutionField,
                  model: ModelSpec, table: KernelTable, beta: float,
                  ks: range) -> tuple:
    grid = field_a.tgrid
    xs = field_a.xgrid.nodes
    means, stds = _marginal_moments(model, table)
    t_sub = grid.times[ks.start:ks.stop]
    ey = _expected_sq_rows(field_a.u - field_b.u, xs, means, stds, ks)
    ez = _expected_sq_rows(field_a.z - field_b.z, xs, means, stds, ks)
    wy = np.exp(beta * t_sub)
    wz = wy * t_sub ** (2.0 * model.hurst - 1.0)
    if len(t_sub) < 2:
        return 0.0, 0.0
    ny = math.sqrt(max(float(np.trapezoid(wy * ey, t_sub)), 0.0))
    nz = math.sqrt(max(float(np.trapezoid(wz * ez, t_sub)), 0.0))
    return ny, nz


def weighted_norms(field_a: SolutionField, field_b: SolutionField,
                   model: ModelSpec, beta: float,
                   table: KernelTable | None = None) -> tuple:
    """Exponentially weighted L2 distances between two solution fields.

    Returns (||Y_a - Y_b||, ||Z_a - Z_b||) where the spatial expectation is
    taken against the Gaussian marginal law of eta at each node and the Z
    norm carries the t^{2H-1} weight.
    """
    if field_a.tgrid != field_b.tgrid or field_a.xgrid != field_b.xgrid:
        raise ValueError("fields must share their grids")
    if table is None:
        table = model.kernel_table(field_a.tgrid)
    ks = range(0, field_a.tgrid.n_steps + 1)
    return _window_norms(field_a, field_b, model, table, beta, ks)


# --------------------------------------------------------------------------- #
# Picard iteration over backward windows
# --------------------------------------------------------------------------- #

def _heuristic_windows(model: ModelSpec, i_t: int, grid: TimeGrid) -> int:
    c = model.driver.lipschitz_c
    h = model.hurst
    t_hor = model.T
    scale = max(t_hor, t_hor ** (2 - 2 * h) / (1 - h))
    n = math.ceil(8.0 * c * (model.delays.L + 1.0) * scale)
    return int(min(max(n, 1), i_t))


def _window_index_bounds(i_t: int, n_windows: int) -> list:
    bounds = sorted({int(round(v)) for v in np.linspace(0, i_t, n_windows + 1)})
    return bounds


def picard_solve(model: ModelSpec, grid: TimeGrid, xgrid: SpaceGrid,
                 params: SolverParams = SolverParams()):
    """Solve the anticipative BSDE on [0, T] (terminal data on [T, T+K]).

    Splits [0, T] into backward windows, freezes the anticipated field per
    window, and iterates `solve_frozen` until the combined weighted norm of
    successive differences falls below ``params.tol``.  If a window fails to
    converge under the automatic window count, the count is doubled and the
    solve restarted.  Returns (SolutionField, ContractionTrace); on final
    non-convergence the trace carries ``converged=False``.
    """
    table = model.kernel_table(grid)
    arrays = _model_arrays(model, grid)
    i_t = arrays.i_T
    auto = params.n_windows is None
    n_win = _heuristic_windows(model, i_t, grid) if auto else int(params.n_windows)
    n_win = min(max(n_win, 1), i_t)

    attempts = 0
    while True:
        field_, trace = _picard_attempt(model, grid, xgrid, table, i_t, n_win, params)
        attempts += 1
        if trace.converged or not auto or n_win >= i_t or attempts >= 4:
            return field_, trace
        n_win = min(2 * n_win, i_t)


def _picard_attempt(model: ModelSpec, grid: TimeGrid, xgrid: SpaceGrid,
                    table: KernelTable, i_t: int, n_win: int,
                    params: SolverParams):
    bounds = _window_index_bounds(i_t, n_win)
    times = grid.times
    current = terminal_field(model, grid, xgrid)
    norms: list = []
    window_ok: list = []
    total_iters = 0

    for w in range(len(bounds) - 2, -1, -1):
        k_lo, k_hi = bounds[w], bounds[w + 1]
        window = (times[k_lo], times[k_hi])
        # initial guess: extend the window's terminal slice backward in t
        current.u[k_lo:k_hi] = current.u[k_hi]
        current.z[k_lo:k_hi] = current.z[k_hi]
        w_norms = []
        ok = False
        for _ in range(params.max_iter):
            nxt = solve_frozen(model, table, current, window, params)
            ny, nz = _window_norms(nxt, current, model, table, params.beta,
                                   range(k_lo, k_hi + 1))
            w_norms.append((ny, nz))
            total_iters += 1
            current = nxt
            if math.hypot(ny, nz) < params.tol:
                ok = True
                break
        norms.insert(0, w_norms)
        window_ok.insert(0, ok)
        if not ok:
            break

    trace = ContractionTrace(
        beta=params.beta,
        window_bounds=[float(times[b]) for b in bounds],
        norms=norms,
        window_converged=window_ok,
        iterations=total_iters,
        converged=bool(window_ok and all(window_ok) and len(window_ok) == len(bounds) - 1),
        n_windows=n_win,
    )
    return current, trace


# --------------------------------------------------------------------------- #
# a priori estimate monitor
# --------------------------------------------------------------------------- #

@dataclass
class AprioriReport:
    """Pointwise left side and data functional of the a priori bound, plus
    the supremum of their ratio over the sampled times."""

    times: np.ndarray
    lhs: np.ndarray
    theta: np.ndarray
    sup_ratio: float
    zero_model: bool

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("t,lhs,theta,ratio\n")
            for t, a, b in zip(self.times, self.lhs, self.theta):
                r = a / b if b > 0 else 0.0
                fh.write(f"{float(t)!r},{float(a)!r},{float(b)!r},{float(r)!r}\n")


def apriori_report(solution: SolutionField, model: ModelSpec, beta: float,
                   table: KernelTable | None = None) -> AprioriReport:
    """Monitor of the energy bound: for each grid t in [0, T] compares

        e^{bt} E|Y_t|^2 + int_t^T e^{bs} s^{2H-1} E|Z_s|^2 ds

    against the data functional built from the terminal fields and the
    frozen driver value.  No fixed multiplicative constant is asserted; the
    report carries sup_t LHS/Theta so refinement studies can check that the
    ratio stays bounded.
    """
    grid = solution.tgrid
    if table is None:
        table = model.kernel_table(grid)
    means, stds = _marginal_moments(model, table)
    xs = solution.xgrid.nodes
    i_t = grid.index_of(model.T)
    times = grid.times
    t_sub = times[:i_t + 1]
    two_h = 2.0 * model.hurst

    ks = range(0, i_t + 1)
    ey = _expected_sq_rows(solution.u, xs, means, stds, ks)
    ez = _expected_sq_rows(solution.z, xs, means, stds, ks)
    ef0 = np.array([
        _gauss_sq(lambda p, k=k: model.driver.f0(times[k], p), means[k], stds[k])
        for k in ks
    ])

    w = np.exp(beta * t_sub)
    z_integrand = w * t_sub ** (two_h - 1.0) * ez
    z_tail = _right_cum_trapz(z_integrand, t_sub)
    lhs = w * ey + z_tail

    f0_tail = _right_cum_trapz(w * ef0, t_sub)
    eg_t = _gauss_sq(model.terminal.g, means[i_t], stds[i_t])
    theta_const = math.exp(beta * model.T) * eg_t
    tail_times = times[i_t:]
    if len(tail_times) >= 2:
        eg = np.array([_gauss_sq(model.terminal.g, means[k], stds[k])
                       for k in range(i_t, grid.n_steps + 1)])
        eh = np.array([_gauss_sq(model.terminal.h, means[k], stds[k])
                       for k in range(i_t, grid.n_steps + 1)])
        wt = np.exp(beta * tail_times)
        theta_const += float(np.trapezoid(
            wt * (eg + tail_times ** (two_h - 1.0) * eh), tail_times))
    theta = theta_const + f0_tail

    zero = bool(np.max(theta) <= 1e-300)
    if zero:
        sup_ratio = 0.0
    else:
        good = theta > 1e-300
        sup_ratio = float(np.max(lhs[good] / theta[good]))
    return AprioriReport(times=t_sub, lhs=lhs, theta=theta,
                         sup_ratio=sup_ratio, zero_model=zero)


def _gauss_sq(fn, mean: float, std: float) -> float:
    pts = mean + std * _GH_NODES
    vals = np.asarray(fn(pts), float)
    return float(np.dot(_GH_WEIGHTS, vals ** 2))


def _right_cum_trapz(values: np.ndarray, ts: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values)
    if len(ts) > 1:
        cells = 0.5 * (values[1:] + values[:-1]) * np.diff(ts)
        out[:-1] = np.cumsum(cells[::-1])[::-1]
    return out
