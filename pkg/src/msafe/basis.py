"""Multiscale piecewise-cubic bases and clamped B-spline bases on [0, 1].

The multiscale family is a hierarchy M0 + W1 + W2 + ... where level 0 holds
the four interpolatory cubics, level 1 holds four piecewise cubics with four
vanishing moments, and level l >= 2 is generated by the dyadic contractions
f -> f(2x) and f -> f(2x - 1) applied to the previous level.  Every function
of level l >= 1 is L2-orthogonal to all coarser levels and is supported on a
single interval of length at most 2**(1-l).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction as Fr

import numpy as np
from scipy.interpolate import BSpline, PPoly

from .ppoly import PiecewisePolynomial, from_global_coeffs, inner_product


class UnsupportedDegreeError(ValueError):
    """Raised when no seed basis is available for the requested degree."""


# Interpolatory level-0 cubics: w0i(t_j) = delta_ij at t_j = (j+1)/5.
_W0_GLOBAL = [
    [Fr(4), Fr(-65, 3), Fr(75, 2), Fr(-125, 6)],
    [Fr(-6), Fr(95, 2), Fr(-100), Fr(125, 2)],
    [Fr(4), Fr(-35), Fr(175, 2), Fr(-125, 2)],
    [Fr(-1), Fr(55, 6), Fr(-25), Fr(125, 6)],
]

# Level-1 piecewise cubics with vanishing moments 0..3; two pieces split at 1/2.
_W1_GLOBAL = [
    (
        [Fr(19, 48), Fr(-320, 48), Fr(1080, 48), Fr(-920, 48)],
        [Fr(-2669, 48), Fr(11360, 48), Fr(-15720, 48), Fr(7080, 48)],
    ),
    (
        [Fr(91, 48), Fr(-2700, 48), Fr(15720, 48), Fr(-23480, 48)],
        [Fr(-101, 48), Fr(660, 48), Fr(-1080, 48), Fr(520, 48)],
    ),
    (
        [Fr(-1, 48), Fr(-60, 48), Fr(480, 48), Fr(-520, 48)],
        [Fr(-10369, 48), Fr(41700, 48), Fr(-54720, 48), Fr(23480, 48)],
    ),
    (
        [Fr(51, 48), Fr(-1160, 48), Fr(5520, 48), Fr(-7080, 48)],
        [Fr(-141, 48), Fr(920, 48), Fr(-1680, 48), Fr(920, 48)],
    ),
]

COLLOCATION_POINTS = tuple((i + 1) / 5.0 for i in range(4))


def _seed_w0():
    return [from_global_coeffs([0.0, 1.0], [g]) for g in _W0_GLOBAL]


def _seed_w1():
    return [
        from_global_coeffs([0.0, 0.5, 1.0], [lo, hi]) for lo, hi in _W1_GLOBAL
    ]


@dataclass(frozen=True)
class CollocationSeed:
    """The explicit degree-3 seed: collocation points, level-0 and level-1 cubics."""

    t_points: tuple
    w0: list
    w1: list


def collocation_seed(p=3):
    if p != 3:
        raise UnsupportedDegreeError(
            f"seed basis unavailable for degree p={p}; only p=3 is shipped"
        )
    return CollocationSeed(COLLOCATION_POINTS, _seed_w0(), _seed_w1())


@dataclass(frozen=True)
class BasisSet:
    """An ordered basis with level tags and (second-derivative) Gram matrices.

    Multiscale sets are ordered level 0, level 1, ..., level n so truncation
    amounts to dropping trailing functions.  Immutable after construction.
    """

    kind: str  # "multiscale" or "spline"
    functions: list
    levels: np.ndarray
    gram: np.ndarray
    d2gram: np.ndarray
    degree: int
    level: int = 0  # multiscale resolution n (0 for spline)

    def __len__(self):
        return len(self.functions)

    @property
    def dim(self):
        return len(self.functions)

    def truncated_dim(self, m):
        """Number of leading functions with level <= m."""
        return int(np.sum(self.levels <= m))


def gram_matrices(functions, deriv_order=2):
    """L2 Gram matrix and the Gram of piecewise `deriv_order`-th derivatives."""
    dim = len(functions)
    gram = np.zeros((dim, dim))
    dgram = np.zeros((dim, dim))
    derivs = [f.derivative(deriv_order) for f in functions]
    for i in range(dim):
        for j in range(i, dim):
            gram[i, j] = gram[j, i] = inner_product(functions[i], functions[j])
            dgram[i, j] = dgram[j, i] = inner_product(derivs[i], derivs[j])
    return gram, dgram


def _next_level(funcs):
    # Contraction to [0, 1/2] first, then to [1/2, 1]: keeps support order.
    return [f.scaled_to_half(0) for f in funcs] + [f.scaled_to_half(1) for f in funcs]


def build_multiscale_basis(p, n):
    """Multiscale piecewise-polynomial basis of degree p and resolution n.

    Returns 2**n * (p+1) functions in level order.  Only p=3 has a shipped
    seed; the dyadic generation itself is degree-generic.
    """
    if p < 0 or n < 0:
        raise ValueError("need p >= 0 and n >= 0")
    seed = collocation_seed(p)
    functions = list(seed.w0)
    levels = [0] * len(seed.w0)
    current = list(seed.w1)
    for lvl in range(1, n + 1):
        functions.extend(current)
        levels.extend([lvl] * len(current))
        current = _next_level(current)
    gram, d2 = gram_matrices(functions)
    return BasisSet(
        kind="multiscale",
        functions=functions,
        levels=np.asarray(levels),
        gram=gram,
        d2gram=d2,
        degree=p,
        level=n,
    )


def _ppoly_to_piecewise(pp, domain=(0.0, 1.0)):
    """Convert a scipy PPoly (descending local powers) to our representation."""
    lo, hi = domain
    x = pp.x
    keep = [i for i in range(len(x) - 1) if x[i + 1] > x[i] and x[i] >= lo - 1e-12 and x[i + 1] <= hi + 1e-12]
    bp = [x[i] for i in keep] + [x[keep[-1] + 1]]
    cf = np.array([pp.c[::-1, i] for i in keep])
    # trim identically-zero leading/trailing pieces (outside the B-spline support)
    nz = np.nonzero(np.any(np.abs(cf) > 1e-14, axis=1))[0]
    if nz.size:
        first, last = nz[0], nz[-1]
        bp = bp[first : last + 2]
        cf = cf[first : last + 1]
    return PiecewisePolynomial(np.asarray(bp), cf, domain)


def bspline_family(q, degree=3, domain=(0.0, 1.0)):
    """q B-splines of the given degree on a uniform open knot vector."""
    if q < degree + 1:
        raise ValueError(f"need at least degree+1 = {degree + 1} spline functions, got {q}")
    lo, hi = domain
    interior = np.linspace(lo, hi, q - degree + 1)[1:-1]
    knots = np.concatenate([[lo] * (degree + 1), interior, [hi] * (degree + 1)])
    funcs = []
    for i in range(q):
        c = np.zeros(q)
        c[i] = 1.0
        pp = PPoly.from_spline(BSpline(knots, c, degree, extrapolate=False))
        funcs.append(_ppoly_to_piecewise(pp, domain))
    return funcs


def build_spline_basis(q):
    """Cubic B-spline basis of dimension q on [0, 1] (clamped, uniform knots)."""
    funcs = bspline_family(q, degree=3)
    gram, d2 = gram_matrices(funcs)
    return BasisSet(
        kind="spline",
        functions=funcs,
        levels=np.zeros(q, dtype=int),
        gram=gram,
        d2gram=d2,
        degree=3,
    )


def decay_constant(p=3):
    """The constant c_p in the level-decay bound, computed from the built seed.

    |integral f w| <= c_p * 2**(-(p+1) n) * max|f^(p)| for every w of level n,
    with c_p = sqrt(2p+3) / ((p+1)! * 2**(p+1)) * max_{v in W1} ||v||_L2.
    """
    from math import factorial, sqrt

    seed = collocation_seed(p)
    max_norm = max(sqrt(inner_product(v, v)) for v in seed.w1)
    return sqrt(2 * p + 3) / (factorial(p + 1) * 2 ** (p + 1)) * max_norm
