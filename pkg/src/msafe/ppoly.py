"""Exact piecewise-polynomial algebra on an interval.

Pieces are stored in *local* coordinates: on the interval
[breakpoints[i], breakpoints[i+1]] the function is

    sum_j coeffs[i, j] * (x - breakpoints[i])**j

Local coordinates keep the coefficients well conditioned under the dyadic
rescalings used to generate high-level basis functions.

Evaluation convention: at an interior breakpoint the right-hand piece is
used; at the right end of the piece range the last piece is used.  Inside
the domain but outside the piece range the function is identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class DomainError(ValueError):
    """Evaluation point outside the function's domain."""


@lru_cache(maxsize=64)
def _leggauss(n):
    return np.polynomial.legendre.leggauss(n)


def gauss_nodes(degree):
    """Gauss-Legendre nodes/weights on [-1, 1] exact for polynomials of `degree`."""
    n = degree // 2 + 1
    return _leggauss(n)


def _shift_poly(coeffs, a):
    """Re-expand sum_j c_j x**j around x = a: returns d with p(x) = sum_j d_j (x-a)**j."""
    c = list(coeffs)
    d = np.zeros(len(c), dtype=object if any(not isinstance(v, float) for v in c) else float)
    for j in range(len(c)):
        # d_j = sum_{k>=j} C(k, j) c_k a^(k-j)
        acc = 0
        for k in range(j, len(c)):
            acc += _binom(k, j) * c[k] * a ** (k - j)
        d[j] = acc
    return d


@lru_cache(maxsize=None)
def _binom(n, k):
    from math import comb

    return comb(n, k)


@dataclass(frozen=True)
class PiecewisePolynomial:
    """A piecewise polynomial with compact piece support inside its domain."""

    breakpoints: np.ndarray  # (m+1,) strictly increasing
    coeffs: np.ndarray  # (m, degree+1), ascending local powers
    domain: tuple = (0.0, 1.0)

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        cf = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if bp.ndim != 1 or bp.size < 2:
            raise ValueError("need at least two breakpoints")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if cf.shape[0] != bp.size - 1:
            raise ValueError("piece count must equal breakpoint count - 1")
        lo, hi = self.domain
        if bp[0] < lo - 1e-12 or bp[-1] > hi + 1e-12:
            raise ValueError("breakpoints outside domain")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "coeffs", cf)

    @property
    def degree(self):
        return self.coeffs.shape[1] - 1

    @property
    def support(self):
        return float(self.breakpoints[0]), float(self.breakpoints[-1])

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        lo, hi = self.domain
        if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
            raise DomainError(f"evaluation outside domain [{lo}, {hi}]")
        bp = self.breakpoints
        idx = np.searchsorted(bp, x, side="right") - 1
        inside = (idx >= 0) & (x <= bp[-1])
        idx = np.clip(idx, 0, len(bp) - 2)
        s = x - bp[idx]
        out = np.zeros_like(x)
        c = self.coeffs
        for j in range(c.shape[1] - 1, -1, -1):
            out = out * s + c[idx, j]
        out = np.where(inside, out, 0.0)
        return float(out[0]) if scalar else out

    def derivative(self, order=1):
        """Piecewise derivative (distributional terms at knots are dropped)."""
        cf = self.coeffs
        for _ in range(order):
            if cf.shape[1] == 1:
                cf = np.zeros((cf.shape[0], 1))
                continue
            cf = cf[:, 1:] * np.arange(1, cf.shape[1])
        return PiecewisePolynomial(self.breakpoints, cf, self.domain)

    def integral(self):
        """Exact integral over the whole domain."""
        widths = np.diff(self.breakpoints)
        powers = np.arange(1, self.coeffs.shape[1] + 1)
        # antiderivative of c_j s^j evaluated at the piece width
        return float(np.sum(self.coeffs / powers * widths[:, None] ** powers))

    def scaled_to_half(self, side):
        """Return f(2x - side) for side in {0, 1}, mapped into local coordinates."""
        if side not in (0, 1):
            raise ValueError("side must be 0 or 1")
        bp = (self.breakpoints + side) / 2.0
        scale = 2.0 ** np.arange(self.coeffs.shape[1])
        return PiecewisePolynomial(bp, self.coeffs * scale, self.domain)

    def translated(self, offset, new_domain):
        bp = self.breakpoints + offset
        return PiecewisePolynomial(bp, self.coeffs, new_domain)


def from_global_coeffs(breakpoints, global_coeffs, domain=(0.0, 1.0)):
    """Build from per-piece coefficients in the *global* variable x (ascending)."""
    bp = np.asarray(breakpoints, dtype=float)
    pieces = []
    for i, gc in enumerate(global_coeffs):
        pieces.append([float(v) for v in _shift_poly(gc, bp[i])])
    width = max(len(p) for p in pieces)
    cf = np.zeros((len(pieces), width))
    for i, p in enumerate(pieces):
        cf[i, : len(p)] = p
    return PiecewisePolynomial(bp, cf, domain)


def piecewise_linear(xs, ys, domain=None):
    """Continuous piecewise-linear interpolant through (xs, ys)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size < 2:
        raise ValueError("need at least two samples")
    if np.any(np.diff(xs) <= 0):
        raise ValueError("sample times must be strictly increasing (no duplicates)")
    slopes = np.diff(ys) / np.diff(xs)
    cf = np.column_stack([ys[:-1], slopes])
    if domain is None:
        domain = (float(xs[0]), float(xs[-1]))
    return PiecewisePolynomial(xs, cf, domain)


def _merged_grid(f, g):
    lo = max(f.breakpoints[0], g.breakpoints[0])
    hi = min(f.breakpoints[-1], g.breakpoints[-1])
    if hi <= lo:
        return None
    pts = np.concatenate([f.breakpoints, g.breakpoints])
    pts = pts[(pts >= lo) & (pts <= hi)]
    pts = np.unique(np.concatenate([pts, [lo, hi]]))
    return pts


def inner_product(f, g):
    """Exact L2 inner product of two piecewise polynomials on a common domain."""
    grid = _merged_grid(f, g)
    if grid is None:
        return 0.0
    nodes, weights = gauss_nodes(f.degree + g.degree)
    left, right = grid[:-1], grid[1:]
    half = 0.5 * (right - left)
    mid = 0.5 * (right + left)
    x = mid[:, None] + half[:, None] * nodes[None, :]
    vals = f(x.ravel()) * g(x.ravel())
    return float(np.sum(vals.reshape(x.shape) @ weights * half))


def moment(f, k):
    """Exact integral of x**k * f(x) over the support of f."""
    bp = f.breakpoints
    nodes, weights = gauss_nodes(f.degree + k)
    left, right = bp[:-1], bp[1:]
    half = 0.5 * (right - left)
    mid = 0.5 * (right + left)
    x = mid[:, None] + half[:, None] * nodes[None, :]
    vals = (x.ravel() ** k) * f(x.ravel())
    return float(np.sum(vals.reshape(x.shape) @ weights * half))


def l2_norm(f):
    return float(np.sqrt(max(inner_product(f, f), 0.0)))
