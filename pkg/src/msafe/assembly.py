"""Sparse design blocks and penalty matrices for the historical model.

Each sensor k yields an N x (dim_t * dim_z) block whose row i stacks, column
by z-column, the products s_l(z_i) * integral of the rescaled history window
against the j-th time-basis function.  Multiscale columns above the chosen
truncation level are never computed; magnitude sparsification can then drop
all but the largest entries of a block.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .ppoly import PiecewisePolynomial, gauss_nodes, piecewise_linear


class WindowError(ValueError):
    """A historical window falls outside the signal's time range."""


@dataclass(frozen=True)
class ZMap:
    """Affine map taking observed positions onto [0, 1]."""

    lo: float
    hi: float

    @classmethod
    def fit(cls, positions):
        lo, hi = float(np.min(positions)), float(np.max(positions))
        if hi <= lo:
            hi = lo + 1.0  # constant positions: map everything to 0
        return cls(lo, hi)

    def __call__(self, z):
        return (np.asarray(z, dtype=float) - self.lo) / (self.hi - self.lo)


@dataclass(frozen=True)
class Dataset:
    """Sampled signals, positions and responses with a historical window."""

    times: np.ndarray  # (N,) sampling instants
    signal_times: np.ndarray  # common signal grid, covers every window
    signals: np.ndarray  # (K, len(signal_times))
    positions: np.ndarray  # (N,)
    responses: np.ndarray  # (N,)
    window: float  # delta, seconds

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        st = np.asarray(self.signal_times, dtype=float)
        X = np.atleast_2d(np.asarray(self.signals, dtype=float))
        z = np.asarray(self.positions, dtype=float)
        y = np.asarray(self.responses, dtype=float)
        if not (len(t) == len(z) == len(y)):
            raise ValueError("times, positions and responses must share length")
        if np.any(np.diff(st) <= 0):
            raise ValueError("signal time grid must be strictly increasing")
        if X.shape[1] != len(st):
            raise ValueError("signals must be sampled on the signal time grid")
        if self.window <= 0:
            raise ValueError("window must be positive")
        bad = (t - self.window < st[0] - 1e-12) | (t > st[-1] + 1e-12)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise WindowError(
                f"historical window [{t[i] - self.window:g}, {t[i]:g}] at row {i} "
                f"outside signal range [{st[0]:g}, {st[-1]:g}]"
            )
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "signal_times", st)
        object.__setattr__(self, "signals", X)
        object.__setattr__(self, "positions", z)
        object.__setattr__(self, "responses", y)

    @property
    def n_obs(self):
        return len(self.times)

    @property
    def n_sensors(self):
        return self.signals.shape[0]


@dataclass(frozen=True)
class DesignBlock:
    """One sensor's sparse design block plus truncation/sparsification metadata."""

    sensor: int
    matrix: sp.csr_matrix  # N x (dim_t * dim_z)
    dim_t: int
    dim_z: int
    t_levels: np.ndarray  # level tag per time-basis column (zeros for spline)
    truncation_level: int
    kept_fraction: float = 1.0

    @property
    def shape(self):
        return self.matrix.shape


@dataclass(frozen=True)
class PenaltyMatrix:
    """SPD penalty f*G + phi_t*g*Gw + phi_z*h*Gs with its Cholesky factor."""

    matrix: np.ndarray
    chol: np.ndarray  # lower triangular


class PenaltyNotSPDError(ValueError):
    pass


def interpolate_signal(samples):
    """Continuous piecewise-linear interpolant through (time, value) samples."""
    samples = np.asarray(samples, dtype=float)
    return piecewise_linear(samples[:, 0], samples[:, 1])


def historical_window(signal, t_i, delta):
    """The time-reversed, rescaled window X(t_i - delta * tau) on [0, 1]."""
    lo, hi = signal.domain
    if t_i - delta < lo - 1e-12 or t_i > hi + 1e-12:
        raise WindowError(
            f"window [{t_i - delta:g}, {t_i:g}] outside signal domain [{lo:g}, {hi:g}]"
        )
    interior = signal.breakpoints[
        (signal.breakpoints > t_i - delta + 1e-14) & (signal.breakpoints < t_i - 1e-14)
    ]
    taus = np.unique(np.concatenate([[0.0, 1.0], (t_i - interior) / delta]))
    vals = signal(np.clip(t_i - delta * taus, lo, hi))
    return piecewise_linear(taus, vals, domain=(0.0, 1.0))


class _AssemblyPlan:
    """Shared per-row quadrature data reused across all sensors of a dataset."""

    def __init__(self, dataset, t_basis, m):
        if m is None or t_basis.kind != "multiscale":
            m = int(t_basis.levels.max()) if len(t_basis.levels) else 0
        self.m = m
        keep = np.nonzero(t_basis.levels <= m)[0]
        self.kept_cols = keep
        funcs = [t_basis.functions[j] for j in keep]
        bp = np.unique(np.concatenate([f.breakpoints for f in funcs]))
        sig_deg = 1  # signals are piecewise linear
        nodes, weights = gauss_nodes(t_basis.degree + sig_deg)
        st = dataset.signal_times
        self.rows = []
        for t_i in dataset.times:
            interior = st[(st > t_i - dataset.window + 1e-14) & (st < t_i - 1e-14)]
            taus = np.unique(np.concatenate([bp, (t_i - interior) / dataset.window]))
            half = 0.5 * np.diff(taus)
            mid = 0.5 * (taus[1:] + taus[:-1])
            x = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
            w = (half[:, None] * weights[None, :]).ravel()
            W = np.array([f(x) for f in funcs])  # kept_dim x nodes
            self.rows.append((t_i - dataset.window * x, w * 1.0, W))


def _z_values(dataset, z_basis, zmap):
    z01 = np.clip(zmap(dataset.positions), 0.0, 1.0)
    return np.array([[f(z) for f in z_basis.functions] for z in z01])  # N x q


def assemble_block(dataset, sensor, t_basis, z_basis, m=None, zmap=None, _plan=None, _zvals=None):
    """Assemble the design block for one sensor, truncated at level m.

    Integrals are exact for the piecewise-linear signals against the
    piecewise-polynomial basis; truncated columns are never computed.
    """
    if not 0 <= sensor < dataset.n_sensors:
        raise ValueError(f"sensor index {sensor} out of range")
    if zmap is None:
        zmap = ZMap.fit(dataset.positions)
    plan = _plan if _plan is not None else _AssemblyPlan(dataset, t_basis, m)
    if t_basis.kind == "multiscale" and m is not None and m > t_basis.level:
        raise ValueError(f"truncation level m={m} exceeds basis level n={t_basis.level}")
    zvals = _zvals if _zvals is not None else _z_values(dataset, z_basis, zmap)
    dim_t, dim_z = t_basis.dim, z_basis.dim
    X = dataset.signals[sensor]
    st = dataset.signal_times
    dense = np.zeros((dataset.n_obs, dim_t * dim_z))
    kept = plan.kept_cols
    for i, (tquery, w, W) in enumerate(plan.rows):
        sig = np.interp(tquery, st, X)
        integrals = W @ (sig * w)  # one value per kept t-column
        srow = zvals[i]
        nz = np.nonzero(np.abs(srow) > 0)[0]
        for l in nz:
            dense[i, l * dim_t + kept] = srow[l] * integrals
    return DesignBlock(
        sensor=sensor,
        matrix=sp.csr_matrix(dense),
        dim_t=dim_t,
        dim_z=dim_z,
        t_levels=t_basis.levels.copy(),
        truncation_level=plan.m,
    )


def assemble_all(dataset, t_basis, z_basis, m=None, zmap=None):
    """Assemble blocks for every sensor, sharing the per-row quadrature plan."""
    if zmap is None:
        zmap = ZMap.fit(dataset.positions)
    plan = _AssemblyPlan(dataset, t_basis, m)
    zvals = _z_values(dataset, z_basis, zmap)
    return [
        assemble_block(dataset, k, t_basis, z_basis, m, zmap, _plan=plan, _zvals=zvals)
        for k in range(dataset.n_sensors)
    ], zmap


def sparsify(block, keep):
    """Retain the ceil(keep * rows * cols) largest-magnitude entries of a block.

    cols counts only the columns present in the truncated model, so the keep
    fraction has the same meaning with and without truncation.  Ties are
    broken deterministically by (row, col) order.
    """
    if not 0 < keep <= 1:
        raise ValueError("keep fraction must be in (0, 1]")
    rows, cols = block.matrix.shape
    model_cols = cols
    if block.truncation_level is not None and block.t_levels is not None:
        kept_t = int(np.sum(block.t_levels <= block.truncation_level))
        model_cols = block.dim_z * kept_t
    target = int(np.ceil(keep * rows * model_cols))
    coo = block.matrix.tocoo()
    if coo.nnz <= target:
        return replace(block, kept_fraction=min(block.kept_fraction, keep))
    order = np.lexsort((coo.col, coo.row, -np.abs(coo.data)))[:target]
    mat = sp.csr_matrix(
        (coo.data[order], (coo.row[order], coo.col[order])), shape=(rows, cols)
    )
    return replace(block, matrix=mat, kept_fraction=keep)


def spectral_norm(matrix, tol=1e-8, max_iter=10_000, seed=0):
    """2-norm by power iteration on A^T A with a fixed seed."""
    if matrix.shape[0] == 0 or matrix.shape[1] == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(matrix.shape[1])
    nv = np.linalg.norm(v)
    if nv == 0:
        return 0.0
    v /= nv
    sigma = 0.0
    for _ in range(max_iter):
        u = matrix @ v
        w = matrix.T @ u
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        new_sigma = np.sqrt(nw)
        v = w / nw
        if abs(new_sigma - sigma) <= tol * max(new_sigma, 1e-300):
            return float(new_sigma)
        sigma = new_sigma
    return float(sigma)


def truncation_error(full_block, m):
    """Spectral norm of the columns dropped by truncating at level m."""
    dropped_t = np.nonzero(full_block.t_levels > m)[0]
    if dropped_t.size == 0:
        return 0.0
    cols = np.concatenate(
        [l * full_block.dim_t + dropped_t for l in range(full_block.dim_z)]
    )
    sub = full_block.matrix[:, np.sort(cols)].toarray()
    return spectral_norm(sub)


def penalty_components(t_basis, z_basis):
    """Kronecker penalty pieces (G, Gw, Gs) in vec-by-z-column ordering."""
    G = np.kron(z_basis.gram, t_basis.gram)
    Gw = np.kron(z_basis.gram, t_basis.d2gram)
    Gs = np.kron(z_basis.d2gram, t_basis.gram)
    return G, Gw, Gs


def build_penalty(t_basis, z_basis, f=1.0, g=1.0, h=1.0, phi_t=0.0, phi_z=0.0):
    """Penalty matrix f*G + phi_t*g*Gw + phi_z*h*Gs with cached Cholesky."""
    if f <= 0:
        raise ValueError("f must be positive to keep the penalty SPD")
    if min(g, h, phi_t, phi_z) < 0:
        raise ValueError("g, h, phi_t, phi_z must be nonnegative")
    G, Gw, Gs = penalty_components(t_basis, z_basis)
    return penalty_from_components(G, Gw, Gs, f, g, h, phi_t, phi_z)


def penalty_from_components(G, Gw, Gs, f=1.0, g=1.0, h=1.0, phi_t=0.0, phi_z=0.0):
    M = f * G + phi_t * g * Gw + phi_z * h * Gs
    # extreme adaptive weights can mix scales badly enough that the exact
    # Cholesky breaks down in floating point; a relative jitter restores it
    scale = np.trace(M) / M.shape[0]
    for jitter in (0.0, 1e-14, 1e-12, 1e-10, 1e-8):
        try:
            Mj = M if jitter == 0.0 else M + (jitter * scale) * np.eye(M.shape[0])
            L = np.linalg.cholesky(Mj)
            return PenaltyMatrix(matrix=Mj, chol=L)
        except np.linalg.LinAlgError:
            continue
    raise PenaltyNotSPDError("penalty not SPD")


def dump_block(block, path):
    """Write a block as a row-major triplet file: header then row,col,value lines."""
    coo = block.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r} {c} {v:.17g}\n")


def load_block_matrix(path):
    """Read a triplet file back into a CSR matrix."""
    with open(path) as fh:
        rows, cols, nnz = (int(v) for v in fh.readline().split())
        r = np.empty(nnz, dtype=int)
        c = np.empty(nnz, dtype=int)
        v = np.empty(nnz)
        for i in range(nnz):
            parts = fh.readline().split()
            r[i], c[i], v[i] = int(parts[0]), int(parts[1]), float(parts[2])
    return sp.csr_matrix((v, (r, c)), shape=(rows, cols))
