"""Problem specification: forward-process coefficients, delay structure,
driver, terminal data, validation, and a plain-text model file format.

Coefficient and terminal functions are picked by name from a small registry
(constant, linear, poly, exp, sin) with numeric parameters so that model
files round-trip bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .fbm import PathBatch, TimeGrid
from .frac_calc import KernelTable, build_kernel_table

__all__ = [
    "FuncSpec",
    "constant",
    "linear",
    "DriverSpec",
    "CoefficientSet",
    "DelaySpec",
    "TerminalData",
    "ModelSpec",
    "CheckResult",
    "ValidationReport",
    "validate",
    "eta_paths",
    "eta_marginal",
    "drift_integral",
    "parse_model",
    "serialize_model",
    "load_model",
    "save_model",
]


# --------------------------------------------------------------------------- #
# function registry
# --------------------------------------------------------------------------- #

def _eval_constant(p, w):
    return np.full_like(np.asarray(w, dtype=float), p[0])


def _eval_linear(p, w):
    return p[0] + p[1] * np.asarray(w, dtype=float)


def _eval_poly(p, w):
    w = np.asarray(w, dtype=float)
    out = np.zeros_like(w)
    for c in reversed(p):
        out = out * w + c
    return out


def _eval_exp(p, w):
    return p[0] * np.exp(p[1] * np.asarray(w, dtype=float))


def _eval_sin(p, w):
    return p[0] * np.sin(p[1] * np.asarray(w, dtype=float))


# name -> (required parameter count or None for variadic, evaluator)
_FUNCTIONS = {
    "constant": (1, _eval_constant),
    "linear": (2, _eval_linear),
    "poly": (None, _eval_poly),
    "exp": (2, _eval_exp),
    "sin": (2, _eval_sin),
}


@dataclass(frozen=True)
class FuncSpec:
    """A registry function of one real variable with numeric parameters."""

    name: str
    params: tuple

    def __post_init__(self):
        if self.name not in _FUNCTIONS:
            raise ValueError(f"unknown function {self.name!r}; "
                             f"registry: {sorted(_FUNCTIONS)}")
        count = _FUNCTIONS[self.name][0]
        if count is not None and len(self.params) != count:
            raise ValueError(f"{self.name} takes {count} parameters, "
                             f"got {len(self.params)}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    def __call__(self, w):
        out = _FUNCTIONS[self.name][1](self.params, w)
        return out if np.ndim(w) else float(out)

    def serialize(self) -> str:
        return " ".join([self.name] + [repr(p) for p in self.params])

    @staticmethod
    def parse(text: str) -> "FuncSpec":
        parts = text.split()
        if not parts:
            raise ValueError("empty function specification")
        return FuncSpec(parts[0], tuple(float(p) for p in parts[1:]))


def constant(c: float) -> FuncSpec:
    return FuncSpec("constant", (c,))


def linear(c0: float, c1: float) -> FuncSpec:
    return FuncSpec("linear", (c0, c1))


# --------------------------------------------------------------------------- #
# driver
# --------------------------------------------------------------------------- #

_DRIVER_KINDS = {"zero": 0, "constant": 1, "linear": 6}


@dataclass(frozen=True)
class DriverSpec:
    """Driver f(t, x, y, z, ay, az) with a declared Lipschitz constant.

    ``ay`` and ``az`` are the quasi-conditional (heat-smoothed) values of the
    delayed solution fields; "linear" drivers read
    f = c0 + cx*x + cy*y + cz*z + cay*ay + caz*az.
    """

    kind: str
    params: tuple
    lipschitz_c: float

    def __post_init__(self):
        if self.kind not in _DRIVER_KINDS:
            raise ValueError(f"unknown driver kind {self.kind!r}")
        count = _DRIVER_KINDS[self.kind]
        if len(self.params) != count:
            raise ValueError(f"driver {self.kind} takes {count} parameters, "
                             f"got {len(self.params)}")
        if self.lipschitz_c < 0:
            raise ValueError("lipschitz_c must be nonnegative")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    def __call__(self, t, x, y, z, ay, az):
        if self.kind == "zero":
            return np.zeros_like(np.asarray(x, dtype=float) + np.asarray(y, dtype=float))
        if self.kind == "constant":
            base = np.asarray(x, dtype=float) + np.asarray(y, dtype=float)
            return np.full_like(base, self.params[0])
        c0, cx, cy, cz, cay, caz = self.params
        return c0 + cx * np.asarray(x, float) + cy * np.asarray(y, float) \
            + cz * np.asarray(z, float) + cay * np.asarray(ay, float) \
            + caz * np.asarray(az, float)

    def f0(self, t, x):
        """Driver frozen at vanishing solution arguments."""
        zeros = np.zeros_like(np.asarray(x, dtype=float))
        return self(t, x, zeros, zeros, zeros, zeros)

    @property
    def uses_anticipated_y(self) -> bool:
        return self.kind == "linear" and self.params[4] != 0.0

    @property
    def uses_anticipated_z(self) -> bool:
        return self.kind == "linear" and self.params[5] != 0.0

    def serialize(self) -> str:
        return " ".join([self.kind] + [repr(p) for p in self.params])

    @staticmethod
    def parse(text: str, lipschitz_c: float) -> "DriverSpec":
        parts = text.split()
        return DriverSpec(parts[0], tuple(float(p) for p in parts[1:]), lipschitz_c)


# --------------------------------------------------------------------------- #
# model components
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class CoefficientSet:
    """Forward process eta_t = eta0 + int b ds + int sigma dB^H."""

    eta0: float
    b: FuncSpec
    sigma: FuncSpec
    hurst: float


@dataclass(frozen=True)
class DelaySpec:
    """Delay functions with horizon extension K and the declared constant L
    for the integral-domination condition on delayed integrands."""

    delta: FuncSpec
    zeta: FuncSpec
    K: float
    L: float


@dataclass(frozen=True)
class TerminalData:
    """Terminal fields on [T, T+K]: Y = g(eta), Z = h(eta), plus the declared
    polynomial growth degree."""

    g: FuncSpec
    h: FuncSpec
    growth_degree: int


@dataclass(frozen=True)
class ModelSpec:
    coefficients: CoefficientSet
    delays: DelaySpec
    driver: DriverSpec
    terminal: TerminalData
    T: float

    @property
    def t_end(self) -> float:
        return self.T + self.delays.K

    @property
    def hurst(self) -> float:
        return self.coefficients.hurst

    def kernel_table(self, grid: TimeGrid) -> KernelTable:
        return build_kernel_table(grid, self.coefficients.sigma, self.hurst)

    def with_driver_terminal(self, driver: DriverSpec, g: FuncSpec,
                             h: FuncSpec | None = None) -> "ModelSpec":
        term = TerminalData(g, h if h is not None else self.terminal.h,
                            self.terminal.growth_degree)
        return replace(self, driver=driver, terminal=term)


# --------------------------------------------------------------------------- #
# forward process
# --------------------------------------------------------------------------- #

def drift_integral(model: ModelSpec, grid: TimeGrid) -> np.ndarray:
    """Cumulative trapezoid integral of the drift b at the grid nodes."""
    b = model.coefficients.b(grid.times)
    out = np.zeros_like(grid.times)
    out[1:] = np.cumsum(0.5 * (b[1:] + b[:-1]) * grid.dt)
    return out


def eta_paths(model: ModelSpec, batch: PathBatch) -> np.ndarray:
    """Forward paths eta = eta0 + int b + left Riemann-Stieltjes sum of
    sigma against each fBm path (shape n_paths x (n_steps+1))."""
    if batch.hurst != model.hurst:
        raise ValueError(f"batch hurst {batch.hurst} != model hurst {model.hurst}")
    grid = batch.grid
    sigma = model.coefficients.sigma(grid.times)
    stoch = np.zeros_like(batch.values)
    stoch[:, 1:] = np.cumsum(batch.increments * sigma[:-1], axis=1)
    return model.coefficients.eta0 + drift_integral(model, grid) + stoch


def eta_marginal(model: ModelSpec, table: KernelTable, t: float) -> tuple:
    """(mean, variance) of the Gaussian marginal of eta at grid node t."""
    grid = table.grid
    if t < -1e-12 or t > grid.t_end * (1 + 1e-12):
        raise ValueError(f"t={t} outside [0, {grid.t_end}]")
    k = grid.index_of(t)
    mean = model.coefficients.eta0 + float(drift_integral(model, grid)[k])
    return mean, float(table.sigma_norm_sq[k])


# --------------------------------------------------------------------------- #
# validation
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def __str__(self) -> str:
        return "\n".join(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}"
                         for c in self.checks)


# integrand corpus for the delayed-integral domination check; the steep
# logistic ramps stand in for indicator functions
_CONDITION_II_CORPUS = (
    ("one", lambda s: np.ones_like(s)),
    ("s", lambda s: s),
    ("s_sq", lambda s: s ** 2),
    ("exp_s", lambda s: np.exp(s)),
    ("ind_mid", lambda s: 1.0 / (1.0 + np.exp(-80.0 * (s - 0.4)))),
    ("ind_late", lambda s: 1.0 / (1.0 + np.exp(-80.0 * (s - 0.8)))),
)

_N_DENSE = 4001


def _condition_ii_check(delay: FuncSpec, label: str, T: float, K: float,
                        L: float) -> CheckResult:
    s = np.linspace(0.0, T, _N_DENSE)
    ds = s[1] - s[0] if len(s) > 1 else 0.0
    full = np.linspace(0.0, T + K, _N_DENSE)
    dfull = full[1] - full[0]
    worst = np.inf
    worst_m = ""
    for name, m in _CONDITION_II_CORPUS:
        shifted = m(s + delay(s))
        plain = m(full)
        # cumulative-from-the-right integrals via trapezoid
        lhs_tail = _right_cumtrapz(shifted, ds)
        rhs_tail = _right_cumtrapz(plain, dfull)
        rhs_at = np.interp(s, full, rhs_tail)
        tol = 4.0 * (ds + dfull) * float(np.max(np.abs(plain))) * (1.0 + L)
        slack = float(np.min(L * rhs_at - lhs_tail))
        if slack < worst:
            worst, worst_m = slack, name
        if slack < -tol:
            return CheckResult(
                f"condition_ii_{label}", False,
                f"integral domination fails for m={name} (slack {slack:.3e}, L={L})")
    return CheckResult(f"condition_ii_{label}", True,
                       f"holds on corpus with L={L} (min slack {worst:.3e} at m={worst_m})")


def _right_cumtrapz(values: np.ndarray, dx: float) -> np.ndarray:
    out = np.zeros_like(values)
    out[:-1] = np.cumsum((0.5 * (values[1:] + values[:-1]) * dx)[::-1])[::-1]
    return out


def validate(model: ModelSpec, grid: TimeGrid, beta: float = 2.0,
             n_lipschitz: int = 1000) -> ValidationReport:
    """Check the model against its declared structural conditions.

    Runs: horizon/grid compatibility, the pointwise delay-horizon condition,
    the integral-domination condition on a fixed integrand corpus, the sign
    condition on sigma, a random spot-check of the driver's Lipschitz bound,
    finiteness of the weighted terminal integrals, and the polynomial-growth
    bound of the terminal data.  Deterministic and side-effect free.
    """
    checks = []
    T, K = model.T, model.delays.K

    # grid coverage and T on a node
    ok = abs(grid.t_end - (T + K)) <= 1e-9 * max(1.0, T + K)
    try:
        grid.index_of(T)
    except ValueError:
        ok = False
    checks.append(CheckResult(
        "grid_covers_horizon", ok,
        f"t_end={grid.t_end} vs T+K={T + K}; T on a node: {ok}"))

    # condition (i): t + delay(t) <= T + K at every node t <= T
    times = grid.times[grid.times <= T + 1e-12]
    tol_i = 1e-9 * max(1.0, T + K)
    for label, fn in (("delta", model.delays.delta), ("zeta", model.delays.zeta)):
        images = times + fn(times)
        bad = images > T + K + tol_i
        if np.any(bad):
            t_bad = float(times[bad][0])
            checks.append(CheckResult(
                f"condition_i_{label}", False,
                f"t + {label}(t) = {t_bad + float(fn(t_bad)):.6g} exceeds "
                f"T+K = {T + K:.6g} at t = {t_bad:.6g}"))
        else:
            margin = float(np.min(T + K - images))
            checks.append(CheckResult(
                f"condition_i_{label}", True,
                f"t + {label}(t) <= T+K on the grid (min margin {margin:.3e})"))

    # condition (ii) on the integrand corpus
    checks.append(_condition_ii_check(model.delays.delta, "delta", T, K, model.delays.L))
    checks.append(_condition_ii_check(model.delays.zeta, "zeta", T, K, model.delays.L))

    # delay rounding error on this grid
    for label, fn in (("delta", model.delays.delta), ("zeta", model.delays.zeta)):
        images = times + fn(times)
        nearest = np.round(images / grid.dt) * grid.dt
        err = float(np.max(np.abs(images - nearest)))
        checks.append(CheckResult(
            f"delay_rounding_{label}", err <= 0.5 * grid.dt + 1e-12,
            f"max node-rounding error {err:.3e} (bound dt/2 = {0.5 * grid.dt:.3e})"))

    # sigma sign
    sig = model.coefficients.sigma(grid.times)[1:]
    sig_ok = bool(np.all(sig > 0) or np.all(sig < 0))
    checks.append(CheckResult(
        "sigma_sign", sig_ok,
        "sigma is nonzero and single-signed on (0, T+K]" if sig_ok
        else "sigma vanishes or changes sign on (0, T+K]"))

    # Lipschitz spot-check on random tuples
    rng = np.random.default_rng(20240607)
    t_s = rng.uniform(0.0, T, n_lipschitz)
    x_s = rng.normal(0.0, 3.0, n_lipschitz)
    tup = rng.normal(0.0, 3.0, (8, n_lipschitz))
    f = model.driver
    lhs = np.abs(f(t_s, x_s, tup[0], tup[1], tup[2], tup[3])
                 - f(t_s, x_s, tup[4], tup[5], tup[6], tup[7]))
    rhs = f.lipschitz_c * np.sum(np.abs(tup[:4] - tup[4:]), axis=0)
    worst = float(np.max(lhs - rhs))
    lip_ok = worst <= 1e-9 * max(1.0, f.lipschitz_c)
    checks.append(CheckResult(
        "lipschitz", lip_ok,
        f"declared C={f.lipschitz_c}; worst excess {worst:.3e} over {n_lipschitz} tuples"))

    # weighted terminal integrals (finiteness, via Gaussian marginal quadrature)
    table = model.kernel_table(grid)
    val = _terminal_weighted_integrals(model, table, beta)
    fin = all(math.isfinite(v) for v in val)
    checks.append(CheckResult(
        "terminal_integrability", fin,
        f"int e^bt E|g|^2 = {val[0]:.6g}, int e^bt t^(2H-1) E|h|^2 = {val[1]:.6g} "
        f"(beta={beta})"))

    # polynomial growth of g, h on a wide abscissa
    deg = model.terminal.growth_degree
    xs = np.linspace(-50.0, 50.0, 401)
    denom = 1.0 + np.abs(xs) ** deg
    cg = float(np.max(np.abs(model.terminal.g(xs)) / denom))
    ch = float(np.max(np.abs(model.terminal.h(xs)) / denom))
    grow_ok = math.isfinite(cg) and math.isfinite(ch)
    checks.append(CheckResult(
        "terminal_growth", grow_ok,
        f"|g|,|h| <= c(1+|x|^{deg}) with c_g={cg:.4g}, c_h={ch:.4g}"))

    return ValidationReport(tuple(checks))


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(41)
_GH_WEIGHTS = _GH_WEIGHTS / np.sqrt(2.0 * np.pi)


def gauss_expectation(fn_values_at, mean: float, variance: float) -> float:
    """E[f(X)] for X ~ N(mean, variance) by probabilists' Gauss-Hermite."""
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    pts = mean + np.sqrt(variance) * _GH_NODES
    return float(np.dot(_GH_WEIGHTS, fn_values_at(pts)))


def _terminal_weighted_integrals(model: ModelSpec, table: KernelTable,
                                 beta: float) -> tuple:
    grid = table.grid
    times = grid.times
    mask = times >= model.T - 1e-12
    ts = times[mask]
    two_h = 2.0 * model.hurst
    drift = model.coefficients.eta0 + drift_integral(model, grid)[mask]
    var = table.sigma_norm_sq[mask]
    eg = np.array([gauss_expectation(lambda x: model.terminal.g(x) ** 2, m, v)
                   for m, v in zip(drift, var)])
    eh = np.array([gauss_expectation(lambda x: model.terminal.h(x) ** 2, m, v)
                   for m, v in zip(drift, var)])
    w = np.exp(beta * ts)
    if len(ts) < 2:
        return 0.0, 0.0
    ig = float(np.trapezoid(w * eg, ts))
    ih = float(np.trapezoid(w * ts ** (two_h - 1) * eh, ts))
    return ig, ih


# --------------------------------------------------------------------------- #
# model files
# --------------------------------------------------------------------------- #

_SECTION_ORDER = ("coefficients", "delays", "driver", "terminal", "grid")


def parse_model(text: str) -> ModelSpec:
    """Parse the sectioned plain-text model format (see `serialize_model`)."""
    sections = _parse_sections(text)
    missing = [s for s in _SECTION_ORDER if s not in sections]
    if missing:
        raise ValueError(f"model file missing sections: {missing}")
    co, de, dr, te, gr = (sections[k] for k in _SECTION_ORDER)
    coefficients = CoefficientSet(
        eta0=float(co["eta0"]),
        b=FuncSpec.parse(co["b"]),
        sigma=FuncSpec.parse(co["sigma"]),
        hurst=float(co["hurst"]),
    )
    delays = DelaySpec(
        delta=FuncSpec.parse(de["delta"]),
        zeta=FuncSpec.parse(de["zeta"]),
        K=float(de["K"]),
        L=float(de["L"]),
    )
    driver = DriverSpec.parse(dr["f"], float(dr["lipschitz_C"]))
    terminal = TerminalData(
        g=FuncSpec.parse(te["g"]),
        h=FuncSpec.parse(te["h"]),
        growth_degree=int(te["growth_degree"]),
    )
    return ModelSpec(coefficients, delays, driver, terminal, T=float(gr["T"]))


def serialize_model(model: ModelSpec) -> str:
    """Canonical text form; floats use repr so values round-trip bit-exactly."""
    co = model.coefficients
    de = model.delays
    te = model.terminal
    lines = [
        "[coefficients]",
        f"eta0 = {co.eta0!r}",
        f"hurst = {co.hurst!r}",
        f"b = {co.b.serialize()}",
        f"sigma = {co.sigma.serialize()}",
        "",
        "[delays]",
        f"delta = {de.delta.serialize()}",
        f"zeta = {de.zeta.serialize()}",
        f"K = {de.K!r}",
        f"L = {de.L!r}",
        "",
        "[driver]",
        f"f = {model.driver.serialize()}",
        f"lipschitz_C = {model.driver.lipschitz_c!r}",
        "",
        "[terminal]",
        f"g = {te.g.serialize()}",
        f"h = {te.h.serialize()}",
        f"growth_degree = {te.growth_degree}",
        "",
        "[grid]",
        f"T = {model.T!r}",
    ]
    return "\n".join(lines) + "\n"


def _parse_sections(text: str) -> dict:
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections[current] = {}
            continue
        if current is None or "=" not in line:
            raise ValueError(f"malformed line {lineno}: {raw!r}")
        key, value = line.split("=", 1)
        sections[current][key.strip()] = value.strip()
    return sections


def load_model(path) -> ModelSpec:
    with open(path) as fh:
        return parse_model(fh.read())


def save_model(model: ModelSpec, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_model(model))
