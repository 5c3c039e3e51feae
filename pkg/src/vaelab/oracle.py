"""One-dimensional check that a Gaussian posterior approximation becomes exact
as the decoder noise shrinks.

Given a ground-truth density p with CDF F, the decoder f = F^-1 o Phi maps
standard normal z onto p, and g = Phi^-1 o F is its inverse. For noise sigma
the approximate posterior is Q(z|x) = N(g(x), (g'(x) sigma)^2), and the true
posterior is P(z|x) proportional to N(x | f(z), sigma^2) phi(z). Everything is
tabulated and integrated with the trapezoid rule.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.special import ndtr, ndtri

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class GridCoverageError(ValueError):
    """The quadrature grid misses the mass it is supposed to cover."""


class NonMonotoneCdfError(ValueError):
    pass


class ConvergenceError(AssertionError):
    """KL did not shrink from the largest to the smallest sigma."""


def _trapz(y, x):
    return np.trapezoid(y, x)


@dataclass(frozen=True)
class Density1D:
    pdf: Callable
    cdf: Callable
    inverse_cdf: Callable
    support: tuple


def _bisect(fn, target, lo, hi, tol=1e-10, max_iter=200):
    """Vectorized bisection for increasing ``fn``: fn(x) = target on [lo, hi]."""
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), np.shape(target)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), np.shape(target)).copy()
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = fn(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= tol):
            break
    return 0.5 * (lo + hi)


def gaussian_density(mean: float = 0.0, std: float = 1.0, width: float = 8.0) -> Density1D:
    def pdf(x):
        u = (np.asarray(x, dtype=np.float64) - mean) / std
        return np.exp(-0.5 * u * u - _LOG_SQRT_2PI) / std

    return Density1D(pdf, lambda x: ndtr((np.asarray(x, dtype=np.float64) - mean) / std),
                     lambda u: mean + std * ndtri(u),
                     (mean - width * std, mean + width * std))


def mixture_density(means: Sequence[float], stds: Sequence[float],
                    weights: Sequence[float] = None, width: float = 8.0) -> Density1D:
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    w = np.full(len(means), 1.0 / len(means)) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    support = (float((means - width * stds).min()), float((means + width * stds).max()))

    def pdf(x):
        u = (np.asarray(x, dtype=np.float64)[..., None] - means) / stds
        return (w * np.exp(-0.5 * u * u - _LOG_SQRT_2PI) / stds).sum(-1)

    def cdf(x):
        return (w * ndtr((np.asarray(x, dtype=np.float64)[..., None] - means) / stds)).sum(-1)

    def inverse_cdf(u):
        return _bisect(cdf, np.asarray(u, dtype=np.float64), support[0], support[1])

    return Density1D(pdf, cdf, inverse_cdf, support)


def std_normal_logpdf(z):
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * z * z - _LOG_SQRT_2PI


class AppendixInstance:
    """Tabulated f, g, g' for one ground-truth density and noise level."""

    def __init__(self, p_gt: Density1D, sigma: float, grid_points: int = 8192):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        if grid_points < 4096:
            raise ValueError("need at least 4096 grid points")
        self.p_gt = p_gt
        self.sigma = float(sigma)
        lo, hi = p_gt.support
        self.grid = np.linspace(lo, hi, grid_points)
        dens = p_gt.pdf(self.grid)
        if np.any(dens <= 0):
            raise ValueError("ground-truth density must be strictly positive on its support")
        F = p_gt.cdf(self.grid)
        dF = np.diff(F)
        if np.any(dF < 0):
            raise NonMonotoneCdfError("tabulated CDF decreases")
        # Fritsch-Carlson: the Hermite piece is monotone iff (a, b) lies in the radius-3 disc
        with np.errstate(divide="ignore", invalid="ignore"):
            secant = dF / np.diff(self.grid)
            a, b = dens[:-1] / secant, dens[1:] / secant
        ok = (dF == 0) | (a * a + b * b <= 9.0)
        if not np.all(ok):
            raise NonMonotoneCdfError(f"interpolant not monotone on {int((~ok).sum())} interval(s)")
        self.F_tab = F
        self._F = CubicHermiteSpline(self.grid, F, dens, extrapolate=False)

    def cdf(self, x):
        x = np.clip(np.asarray(x, dtype=np.float64), self.grid[0], self.grid[-1])
        return self._F(x)

    def inverse_cdf(self, u):
        """Invert the interpolated CDF by bisection inside the bracketing cell."""
        u = np.asarray(u, dtype=np.float64)
        idx = np.clip(np.searchsorted(self.F_tab, u), 1, len(self.grid) - 1)
        return _bisect(self.cdf, u, self.grid[idx - 1], self.grid[idx], tol=1e-12)

    def f(self, z):
        return self.inverse_cdf(ndtr(np.asarray(z, dtype=np.float64)))

    def g(self, x):
        return ndtri(self.cdf(x))

    def g_prime(self, x):
        gx = self.g(x)
        return self.p_gt.pdf(x) / np.exp(std_normal_logpdf(gx))

    def q_params(self, x) -> tuple:
        """Mean and standard deviation of Q(z|x)."""
        return float(self.g(x)), float(self.g_prime(x) * self.sigma)


def build_instance(p_gt: Density1D, sigma: float, grid_points: int = 8192) -> AppendixInstance:
    return AppendixInstance(p_gt, sigma, grid_points)


def _log_posterior_unnorm(inst: AppendixInstance, x: float, z: np.ndarray) -> np.ndarray:
    r = (x - inst.f(z)) / inst.sigma
    return -0.5 * r * r - _LOG_SQRT_2PI - math.log(inst.sigma) + std_normal_logpdf(z)


def log_posterior_pdf(inst: AppendixInstance, x: float, z_grid) -> np.ndarray:
    z = np.asarray(z_grid, dtype=np.float64)
    logp = _log_posterior_unnorm(inst, x, z)
    peak = logp.max()
    if not np.isfinite(peak) or peak < -700:
        raise GridCoverageError(f"posterior integrand underflows everywhere on the grid (x={x})")
    logZ = peak + math.log(_trapz(np.exp(logp - peak), z))
    return logp - logZ


def posterior_pdf(inst: AppendixInstance, x: float, z_grid) -> np.ndarray:
    """P_sigma(z | x) on ``z_grid``, normalized by the trapezoid rule."""
    return np.exp(log_posterior_pdf(inst, x, z_grid))


def kl_on_grid(log_q: np.ndarray, log_p: np.ndarray, z: np.ndarray) -> float:
    """Trapezoid estimate of integral q log(q/p) dz from log densities."""
    q = np.exp(log_q)
    return float(_trapz(q * (log_q - log_p), z))


def kl_q_vs_posterior(inst: AppendixInstance, x: float, n_std: float = 10.0,
                      grid_points: int = 16385) -> float:
    """D[Q_sigma(z|x) || P_sigma(z|x)] in nats."""
    m, s = inst.q_params(x)
    if not (np.isfinite(m) and s > 0):
        raise GridCoverageError(f"x={x} lies outside the tabulated support")
    # widen until the posterior tails are negligible at both edges
    for _ in range(8):
        z = np.linspace(m - n_std * s, m + n_std * s, grid_points)
        log_p = log_posterior_pdf(inst, x, z)
        if max(log_p[0], log_p[-1]) - log_p.max() < math.log(1e-14):
            break
        n_std *= 1.5
    else:
        raise GridCoverageError(f"posterior mass reaches the grid edge at x={x}, sigma={inst.sigma}")
    u = (z - m) / s
    log_q = -0.5 * u * u - _LOG_SQRT_2PI - math.log(s)
    return kl_on_grid(log_q, log_p, z)


def convergence_sweep(p_gt: Density1D, sigmas: Sequence[float], xs: Sequence[float],
                      grid_points: int = 8192, check: bool = True) -> list:
    """Rows of (sigma, x, kl_nats, grid_points) for every sigma and x.

    ``sigmas`` must be strictly decreasing. With ``check`` set, raises
    :class:`ConvergenceError` unless KL at the last sigma is below KL at the
    first for every x.
    """
    sigmas = [float(s) for s in sigmas]
    if not sigmas or any(b >= a for a, b in zip(sigmas, sigmas[1:])):
        raise ValueError("sigmas must be non-empty and strictly decreasing")
    rows = []
    for sigma in sigmas:
        inst = build_instance(p_gt, sigma, grid_points)
        for x in xs:
            rows.append((sigma, float(x), kl_q_vs_posterior(inst, float(x)), grid_points))
    if check and len(sigmas) > 1:
        first = {r[1]: r[2] for r in rows if r[0] == sigmas[0]}
        last = {r[1]: r[2] for r in rows if r[0] == sigmas[-1]}
        bad = [x for x in first if not last[x] < first[x]]
        if bad:
            raise ConvergenceError(f"KL did not decrease from sigma={sigmas[0]} to "
                                   f"sigma={sigmas[-1]} at x={bad}")
    return rows


def sweep_table(rows) -> dict:
    """Pivot sweep rows into {x: [kl for each sigma in order]}."""
    out = {}
    for _, x, kl, _ in rows:
        out.setdefault(x, []).append(kl)
    return out


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma", "x", "kl_nats", "grid_points"])
        for sigma, x, kl, n in rows:
            w.writerow([repr(sigma), repr(x), repr(kl), n])


FAMILIES = {
    "affine": lambda: gaussian_density(3.0, 2.0),
    "mixture": lambda: mixture_density([-2.0, 2.0], [1.0, 1.0]),
}
