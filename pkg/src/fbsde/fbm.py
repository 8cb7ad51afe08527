"""Exact simulation of fractional Brownian motion with Hurst index H > 1/2.

Two exact-in-distribution samplers are provided: Cholesky factorisation of
the covariance Gram matrix (default for small grids) and circulant embedding
of the stationary increment process (Davies-Harte, used for large grids).
Both draw their Gaussians from per-path counter-based streams so that the
result is independent of any parallel scheduling of paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TimeGrid",
    "PathBatch",
    "covariance",
    "covariance_matrix",
    "sample_paths",
    "decimate",
    "CHOLESKY_MAX_STEPS",
]

# Above this many steps the O(n^3) Cholesky route is abandoned in favour of
# circulant embedding.
CHOLESKY_MAX_STEPS = 2048

_JITTER_SCALE = 1e-12


def _check_hurst(hurst: float) -> None:
    if not 0.5 < hurst < 1.0:
        raise ValueError(f"hurst must lie in (1/2, 1), got {hurst}")


# --------------------------------------------------------------------------- #
# grids and batches
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < t_1 < ... < t_n = t_end."""

    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.t_end <= 0.0:
            raise ValueError(f"t_end must be positive, got {self.t_end}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_end, self.n_steps + 1)

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Node index of time ``t``; raises if ``t`` is not a grid node."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.n_steps or abs(k * self.dt - t) > tol * max(1.0, self.t_end):
            raise ValueError(f"t={t} is not a node of the grid (dt={self.dt})")
        return k

    def nearest_index(self, t: float) -> int:
        """Nearest node index, clamped to the grid."""
        return min(max(int(round(t / self.dt)), 0), self.n_steps)


@dataclass(frozen=True)
class PathBatch:
    """Seeded ensemble of fBm sample paths on a uniform grid.

    ``values[p, k]`` is path p evaluated at t_k; every path starts at 0.
    Instances are immutable and safe to share.
    """

    grid: TimeGrid
    hurst: float
    n_paths: int
    seed: int
    values: np.ndarray = field(repr=False)
    method: str = "cholesky"

    def __post_init__(self):
        _check_hurst(self.hurst)
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        expected = (self.n_paths, self.grid.n_steps + 1)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} != {expected}")
        self.values.setflags(write=False)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)

    def write_csv(self, path) -> None:
        """One row per path, columns = node times, leading metadata comment."""
        times = self.grid.times
        with open(path, "w", newline="") as fh:
            fh.write(f"# hurst={self.hurst!r} seed={self.seed} dt={self.grid.dt!r}\n")
            fh.write(",".join(repr(float(t)) for t in times) + "\n")
            for row in self.values:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def decimate(batch: PathBatch, factor: int) -> PathBatch:
    """Restrict a batch to every ``factor``-th node (same paths, coarser grid)."""
    if factor < 1 or batch.grid.n_steps % factor != 0:
        raise ValueError(f"decimation factor {factor} must divide n_steps={batch.grid.n_steps}")
    coarse = TimeGrid(batch.grid.t_end, batch.grid.n_steps // factor)
    return PathBatch(
        grid=coarse,
        hurst=batch.hurst,
        n_paths=batch.n_paths,
        seed=batch.seed,
        values=batch.values[:, ::factor].copy(),
        method=batch.method,
    )


# --------------------------------------------------------------------------- #
# covariance
# --------------------------------------------------------------------------- #

def covariance(t, s, hurst: float):
    """E[B^H_t B^H_s] = (t^{2H} + s^{2H} - |t-s|^{2H}) / 2."""
    _check_hurst(hurst)
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(t < 0) or np.any(s < 0):
        raise ValueError("times must be nonnegative")
    two_h = 2.0 * hurst
    out = 0.5 * (t ** two_h + s ** two_h - np.abs(t - s) ** two_h)
    return out if out.ndim else float(out)


def covariance_matrix(grid: TimeGrid, hurst: float) -> np.ndarray:
    """Gram matrix of the fBm covariance at all grid nodes (t=0 included)."""
    times = grid.times
    return covariance(times[:, None], times[None, :], hurst)


# --------------------------------------------------------------------------- #
# sampling
# --------------------------------------------------------------------------- #

def _path_normals(seed: int, n_paths: int, n: int) -> np.ndarray:
    """(n, n_paths) standard normals, one Philox stream per (seed, path index)."""
    children = np.random.SeedSequence(seed).spawn(n_paths)
    out = np.empty((n, n_paths))
    for p, child in enumerate(children):
        out[:, p] = np.random.Generator(np.random.Philox(child)).standard_normal(n)
    return out


def _cholesky_factor(grid: TimeGrid, hurst: float) -> np.ndarray:
    # The t=0 row/column is degenerate (zero variance) and dropped here;
    # B^H_0 = 0 is prepended after sampling.
    cov = covariance_matrix(grid, hurst)[1:, 1:]
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        jitter = _JITTER_SCALE * float(np.max(np.diag(cov)))
        cov = cov + jitter * np.eye(cov.shape[0])
        # One jitter attempt only: a larger fudge would corrupt the
        # statistical acceptance tests downstream.
        return np.linalg.cholesky(cov)


def _sample_cholesky(grid: TimeGrid, hurst: float, n_paths: int, seed: int) -> np.ndarray:
    n = grid.n_steps
    lower = _cholesky_factor(grid, hurst)
    z = _path_normals(seed, n_paths, n)
    values = np.zeros((n_paths, n + 1))
    values[:, 1:] = (lower @ z).T
    return values


def _fgn_autocovariance(hurst: float, dt: float, n: int) -> np.ndarray:
    k = np.arange(n + 1, dtype=float)
    two_h = 2.0 * hurst
    gamma = 0.5 * dt ** two_h * (
        (k + 1.0) ** two_h - 2.0 * k ** two_h + np.abs(k - 1.0) ** two_h
    )
    return gamma


def _circulant_sqrt_eigs(grid: TimeGrid, hurst: float) -> np.ndarray:
    m = grid.n_steps
    gamma = _fgn_autocovariance(hurst, grid.dt, m)
    first_row = np.concatenate([gamma[:m], [gamma[m]], gamma[1:m][::-1]])
    eigs = np.fft.fft(first_row).real
    floor = -1e-10 * float(np.max(eigs))
    if np.min(eigs) < floor:
        raise np.linalg.LinAlgError(
            f"circulant embedding spectrum is negative (min eig {np.min(eigs):.3e})"
        )
    return np.sqrt(np.clip(eigs, 0.0, None))


def _sample_circulant(grid: TimeGrid, hurst: float, n_paths: int, seed: int) -> np.ndarray:
    m = grid.n_steps
    sqrt_eigs = _circulant_sqrt_eigs(grid, hurst)
    normals = _path_normals(seed, n_paths, 2 * m)  # (2m, n_paths)

    spectrum = np.zeros((2 * m, n_paths), dtype=complex)
    spectrum[0] = sqrt_eigs[0] / np.sqrt(2 * m) * normals[0]
    spectrum[m] = sqrt_eigs[m] / np.sqrt(2 * m) * normals[1]
    j = np.arange(1, m)
    scale = (sqrt_eigs[j] / np.sqrt(4 * m))[:, None]
    spectrum[j] = scale * (normals[2 * j] + 1j * normals[2 * j + 1])
    spectrum[2 * m - j] = np.conj(spectrum[j])

    fgn = np.fft.fft(spectrum, axis=0).real[:m]  # (m, n_paths)
    values = np.zeros((n_paths, m + 1))
    values[:, 1:] = np.cumsum(fgn.T, axis=1)
    return values


def sample_paths(
    grid: TimeGrid,
    hurst: float,
    n_paths: int,
    seed: int,
    method: str = "auto",
) -> PathBatch:
    """Draw an exact-in-distribution fBm ensemble on ``grid``.

    ``method`` is "cholesky", "circulant", or "auto" (Cholesky up to
    ``CHOLESKY_MAX_STEPS`` steps, circulant embedding beyond). The result is
    a deterministic function of (grid, hurst, n_paths, seed, method).
    """
    _check_hurst(hurst)
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if method == "auto":
        method = "cholesky" if grid.n_steps <= CHOLESKY_MAX_STEPS else "circulant"
    if method == "cholesky":
        values = _sample_cholesky(grid, hurst, n_paths, seed)
    elif method == "circulant":
        values = _sample_circulant(grid, hurst, n_paths, seed)
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    return PathBatch(grid=grid, hurst=hurst, n_paths=n_paths, seed=seed,
                     values=values, method=method)
