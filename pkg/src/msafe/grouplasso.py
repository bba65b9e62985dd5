"""Group LASSO with per-group quadratic-form penalties.

The penalty sqrt(beta' G_k beta) is turned into a plain Euclidean group norm
by the substitution u_k = L_k' beta_k with G_k = L_k L_k'.  When a block has
structurally empty columns (multiscale truncation), the substitution is
carried out on the occupied columns only, with the penalty reduced to its
Schur complement; this is an exact reformulation and the returned beta
includes the penalty-minimizing completion on the truncated columns.

The solver is cyclic blockwise majorization-minimization: each group takes a
gradient step scaled by the largest eigenvalue of twice its Gram matrix,
followed by group soft-thresholding.  The objective is

    || sum_k A_k u_k - y ||^2 + lambda * sum_k ||u_k||_2

with no 1/N factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_triangular


class SingularFactorError(ValueError):
    pass


class TransformedBlock:
    """A design block in substituted coordinates, A_k @ L_k^{-T}, kept factored.

    Exposes matvec/rmatvec without materializing the (dense) product, plus
    the maps between u- and beta-coordinates.
    """

    def __init__(self, matrix, chol, kept_cols=None, completion=None, full_dim=None):
        self.matrix = matrix  # N x du, occupied columns only (sparse or dense)
        self.chol = chol  # du x du lower triangular
        self.kept_cols = kept_cols  # None = all columns kept
        self.completion = completion  # maps beta_S -> beta on dropped columns
        self.full_dim = matrix.shape[1] if full_dim is None else full_dim
        if not np.all(np.isfinite(chol.diagonal())) or np.any(chol.diagonal() <= 0):
            raise SingularFactorError("Cholesky factor is singular")

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def dim_u(self):
        return self.matrix.shape[1]

    def matvec(self, u):
        return self.matrix @ solve_triangular(self.chol, u, lower=True, trans="T")

    def rmatvec(self, r):
        return solve_triangular(self.chol, self.matrix.T @ r, lower=True)

    def dense(self):
        A = self.matrix.toarray() if sp.issparse(self.matrix) else self.matrix
        return solve_triangular(self.chol, A.T, lower=True).T

    def beta_from_u(self, u):
        b = solve_triangular(self.chol, u, lower=True, trans="T")
        if self.kept_cols is None:
            return b
        beta = np.zeros(self.full_dim)
        beta[self.kept_cols] = b
        dropped = np.setdiff1d(np.arange(self.full_dim), self.kept_cols)
        if dropped.size:
            beta[dropped] = self.completion @ b
        return beta

    def u_from_beta(self, beta):
        if self.kept_cols is None:
            return self.chol.T @ beta
        return self.chol.T @ beta[self.kept_cols]


def substitute(block, penalty, reduce="auto"):
    """Substitute a penalty into a design block: A_tilde = A @ L^{-T}.

    With reduce="auto" (default) and structurally empty columns present, the
    problem is reduced to the occupied columns via the Schur complement of
    the penalty; reduce=False forces the full-dimension substitution.
    """
    A = block.matrix if hasattr(block, "matrix") else sp.csr_matrix(block)
    d = A.shape[1]
    occupied = np.unique(A.tocoo().col) if sp.issparse(A) else np.nonzero(np.any(A != 0, axis=0))[0]
    do_reduce = reduce if reduce != "auto" else occupied.size < d
    if not do_reduce or occupied.size == d:
        return TransformedBlock(A, penalty.chol)
    S = occupied
    Sc = np.setdiff1d(np.arange(d), S)
    G = penalty.matrix
    G_cc = G[np.ix_(Sc, Sc)]
    G_cs = G[np.ix_(Sc, S)]
    W = np.linalg.solve(G_cc, G_cs)  # G_cc^{-1} G_cs
    schur = G[np.ix_(S, S)] - G_cs.T @ W
    schur = 0.5 * (schur + schur.T)
    try:
        L = np.linalg.cholesky(schur)
    except np.linalg.LinAlgError as exc:
        raise SingularFactorError("reduced penalty not SPD") from exc
    return TransformedBlock(A[:, S].tocsr() if sp.issparse(A) else A[:, S],
                            L, kept_cols=S, completion=-W, full_dim=d)


@dataclass
class GroupProblem:
    """Post-substitution group-LASSO instance."""

    blocks: list  # TransformedBlock per group
    response: np.ndarray
    lam: float

    def __post_init__(self):
        y = np.asarray(self.response, dtype=float)
        if any(b.shape[0] != len(y) for b in self.blocks):
            raise ValueError("all blocks must share the response's row count")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        self.response = y

    @property
    def group_sizes(self):
        return [b.dim_u for b in self.blocks]

    def objective(self, us):
        r = self.residual(us)
        return float(r @ r + self.lam * sum(np.linalg.norm(u) for u in us))

    def residual(self, us):
        r = -self.response.copy()
        for b, u in zip(self.blocks, us):
            if np.any(u):
                r += b.matvec(u)
        return r


@dataclass
class SolverReport:
    iterations: int
    objective: float
    kkt: float
    active_groups: list
    converged: bool
    trace: list = field(default_factory=list)


def lambda_max(problem):
    """Smallest lambda at which the all-zero solution satisfies the KKT conditions."""
    y = problem.response
    if not np.any(y):
        raise ValueError("response is identically zero")
    return max(2.0 * np.linalg.norm(b.rmatvec(y)) for b in problem.blocks)


def majorization_constants(problem, tol=1e-10, max_iter=10_000, seed=0):
    """Largest eigenvalue of 2 A_k' A_k per group, by seeded power iteration."""
    etas = []
    for b in problem.blocks:
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(b.dim_u)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = b.rmatvec(b.matvec(v))
            nw = np.linalg.norm(w)
            if nw == 0:
                lam = 0.0
                break
            v = w / nw
            if abs(nw - lam) <= tol * max(nw, 1e-300):
                lam = nw
                break
            lam = nw
        etas.append(2.0 * lam)
    return np.asarray(etas)


def _group_threshold(v, t):
    nv = np.linalg.norm(v)
    if nv <= t:
        return np.zeros_like(v)
    return (1.0 - t / nv) * v


def solve(problem, tol=1e-8, max_iter=100_000, us0=None, etas=None, trace=None):
    """Cyclic blockwise MM solve; returns (betas, report).

    Terminates when max_k eta_k * ||du_k||_inf < tol.  Betas are mapped back
    to original coordinates (including the completion on truncated columns).
    """
    if etas is None:
        etas = majorization_constants(problem)
    lam = problem.lam
    us = [np.zeros(d) for d in problem.group_sizes] if us0 is None else [u.copy() for u in us0]
    r = problem.residual(us)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        delta = 0.0
        for k, b in enumerate(problem.blocks):
            eta = etas[k]
            if eta <= 0:
                continue
            grad = 2.0 * b.rmatvec(r)
            new_u = _group_threshold(us[k] - grad / eta, lam / eta)
            du = new_u - us[k]
            if np.any(du):
                r += b.matvec(du)
                us[k] = new_u
                delta = max(delta, eta * np.max(np.abs(du)))
        if trace is not None:
            trace.append(
                {"iteration": it, "objective": problem.objective(us), "kkt": kkt_from_us(problem, us)}
            )
        if delta < tol:
            converged = True
            break
    betas = [b.beta_from_u(u) for b, u in zip(problem.blocks, us)]
    report = SolverReport(
        iterations=it,
        objective=problem.objective(us),
        kkt=kkt_from_us(problem, us),
        active_groups=[k for k, u in enumerate(us) if np.linalg.norm(u) > 0],
        converged=converged,
        trace=trace or [],
    )
    return betas, report


def kkt_from_us(problem, us):
    """Max KKT residual over groups, for a candidate in u-coordinates."""
    r = problem.residual(us)
    lam = problem.lam
    worst = 0.0
    for b, u in zip(problem.blocks, us):
        g = 2.0 * b.rmatvec(r)
        nu = np.linalg.norm(u)
        if nu > 0:
            worst = max(worst, np.linalg.norm(g + lam * u / nu))
        else:
            worst = max(worst, max(np.linalg.norm(g) - lam, 0.0))
    return float(worst)


def kkt_residual(problem, coefficients):
    """Max KKT residual for a candidate solution given in beta-coordinates."""
    us = [b.u_from_beta(beta) for b, beta in zip(problem.blocks, coefficients)]
    return kkt_from_us(problem, us)


def solve_path(problem, lambdas, tol=1e-8, max_iter=100_000):
    """Warm-started solves over a strictly descending lambda list."""
    lambdas = list(lambdas)
    if any(b >= a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError("lambda path must be strictly descending")
    etas = majorization_constants(problem)
    results = []
    us = None
    for lam in lambdas:
        problem.lam = lam
        betas, report = solve(problem, tol=tol, max_iter=max_iter, us0=us, etas=etas)
        us = [b.u_from_beta(beta) for b, beta in zip(problem.blocks, betas)]
        results.append((betas, report))
    return results
