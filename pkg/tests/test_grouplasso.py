"""Group-LASSO solver: closed forms, independent oracle, KKT, fast path."""

import numpy as np
import pytest

from msafe.assembly import build_penalty, penalty_from_components
from msafe.basis import build_multiscale_basis, build_spline_basis
from msafe.fastpath import PackedProblem
from msafe.grouplasso import (
    GroupProblem,
    SingularFactorError,
    TransformedBlock,
    kkt_from_us,
    kkt_residual,
    lambda_max,
    majorization_constants,
    solve,
    solve_path,
    substitute,
)


def identity_block(d):
    return TransformedBlock(np.eye(d), np.eye(d))


def random_problem(rng, n=15, n_groups=3, max_cols=4, lam=0.5):
    blocks = []
    for _ in range(n_groups):
        d = int(rng.integers(1, max_cols + 1))
        A = rng.standard_normal((n, d))
        blocks.append(TransformedBlock(A, np.eye(d)))
    y = rng.standard_normal(n)
    return GroupProblem(blocks, y, lam)


def stacked(problem):
    A = np.hstack([b.dense() for b in problem.blocks])
    sizes = [b.dim_u for b in problem.blocks]
    return A, sizes


def prox_gradient_oracle(problem, iters=50_000):
    """Monolithic proximal-gradient (ISTA) reference on the stacked design."""
    A, sizes = stacked(problem)
    y = problem.response
    L = 2.0 * np.linalg.eigvalsh(A.T @ A)[-1]
    step = 1.0 / max(L, 1e-12)
    offs = np.concatenate([[0], np.cumsum(sizes)])
    u = np.zeros(A.shape[1])
    for _ in range(iters):
        grad = 2.0 * A.T @ (A @ u - y)
        v = u - step * grad
        for g in range(len(sizes)):
            seg = v[offs[g] : offs[g + 1]]
            nv = np.linalg.norm(seg)
            t = step * problem.lam
            seg[:] = 0.0 if nv <= t else (1.0 - t / nv) * seg
        if np.max(np.abs(v - u)) < 1e-14:
            u = v
            break
        u = v
    return [u[offs[g] : offs[g + 1]] for g in range(len(sizes))]


def test_single_orthonormal_group_closed_form():
    # A with orthonormal columns: u* = (1 - lam / (2 ||A'y||))_+ A'y
    rng = np.random.default_rng(0)
    A, _ = np.linalg.qr(rng.standard_normal((10, 3)))
    y = rng.standard_normal(10)
    b = A.T @ y
    for lam in (0.1, 1.0, 2 * np.linalg.norm(b) + 1.0):
        problem = GroupProblem([TransformedBlock(A, np.eye(3))], y, lam)
        betas, report = solve(problem, tol=1e-12)
        shrink = max(1.0 - lam / (2.0 * np.linalg.norm(b)), 0.0)
        assert np.allclose(betas[0], shrink * b, atol=1e-9)
        assert report.converged


def test_lambda_max_threshold():
    rng = np.random.default_rng(1)
    problem = random_problem(rng)
    lm = lambda_max(problem)
    problem.lam = lm * 1.001
    betas, _ = solve(problem, tol=1e-12)
    assert all(np.linalg.norm(b) == 0 for b in betas)
    problem.lam = lm * 0.95
    betas, _ = solve(problem, tol=1e-12)
    assert any(np.linalg.norm(b) > 1e-8 for b in betas)


def test_objective_matches_prox_gradient_oracle():
    for seed in range(6):
        rng = np.random.default_rng(seed)
        problem = random_problem(rng, lam=float(rng.uniform(0.1, 2.0)))
        betas, report = solve(problem, tol=1e-12)
        us = [b.u_from_beta(beta) for b, beta in zip(problem.blocks, betas)]
        oracle = prox_gradient_oracle(problem)
        assert problem.objective(us) <= problem.objective(oracle) + 1e-6
        assert abs(problem.objective(us) - problem.objective(oracle)) < 1e-6


def test_kkt_residual_small_at_solution():
    rng = np.random.default_rng(3)
    problem = random_problem(rng)
    betas, report = solve(problem, tol=1e-12)
    assert kkt_residual(problem, betas) < 1e-7
    assert report.kkt < 1e-7


def test_kkt_flags_non_solution():
    rng = np.random.default_rng(4)
    problem = random_problem(rng, lam=0.1)
    bad = [np.ones(b.dim_u) for b in problem.blocks]
    assert kkt_from_us(problem, bad) > 1e-3


def test_majorization_constants_match_eigenvalues():
    rng = np.random.default_rng(5)
    problem = random_problem(rng)
    etas = majorization_constants(problem, tol=1e-13)
    for b, eta in zip(problem.blocks, etas):
        A = b.dense()
        assert eta == pytest.approx(2.0 * np.linalg.eigvalsh(A.T @ A)[-1], rel=1e-6)


def test_warm_start_agrees_with_cold_start():
    rng = np.random.default_rng(6)
    problem = random_problem(rng)
    lambdas = [2.0, 1.0, 0.5, 0.1]
    path = solve_path(problem, lambdas, tol=1e-12)
    for lam, (betas_w, _) in zip(lambdas, path):
        problem.lam = lam
        betas_c, _ = solve(problem, tol=1e-12)
        for bw, bc in zip(betas_w, betas_c):
            assert np.allclose(bw, bc, atol=1e-7)


def test_solve_path_requires_descending_lambdas():
    rng = np.random.default_rng(7)
    problem = random_problem(rng)
    with pytest.raises(ValueError):
        solve_path(problem, [0.1, 0.5])


def test_substitution_penalty_equivalence():
    # ||u||, u = L' beta, equals sqrt(beta' G beta)
    t_basis = build_multiscale_basis(3, 1)
    z_basis = build_spline_basis(5)
    pen = build_penalty(t_basis, z_basis, phi_t=0.2, phi_z=0.1)
    rng = np.random.default_rng(8)
    A = rng.standard_normal((10, pen.matrix.shape[0]))
    tb = substitute(type("B", (), {"matrix": A})(), pen, reduce=False)
    beta = rng.standard_normal(pen.matrix.shape[0])
    u = tb.u_from_beta(beta)
    assert np.linalg.norm(u) == pytest.approx(np.sqrt(beta @ pen.matrix @ beta), rel=1e-10)
    assert np.allclose(tb.beta_from_u(u), beta, atol=1e-9)
    # matvec consistency: A_tilde u = A beta
    assert np.allclose(tb.matvec(u), A @ beta, atol=1e-9)


def test_schur_reduction_solves_same_problem():
    # structurally empty columns: reduced and full substitutions agree on the
    # solution and on the penalty value (completion included)
    rng = np.random.default_rng(9)
    d, n = 8, 20
    M = rng.standard_normal((d, d + 2))
    pen = penalty_from_components(M @ M.T, np.zeros((d, d)), np.zeros((d, d)))
    A = rng.standard_normal((n, d))
    A[:, [2, 5, 6]] = 0.0  # structurally empty
    import scipy.sparse as sp

    block = type("B", (), {"matrix": sp.csr_matrix(A)})()
    red = substitute(block, pen)
    full = substitute(block, pen, reduce=False)
    assert red.dim_u == 5
    y = rng.standard_normal(n)
    for lam in (0.05, 0.5):
        pr = GroupProblem([red], y, lam)
        pf = GroupProblem([full], y, lam)
        br, _ = solve(pr, tol=1e-13)
        bf, _ = solve(pf, tol=1e-13)
        assert np.allclose(br[0], bf[0], atol=1e-6)
        # identical objectives in beta-space
        pen_r = np.sqrt(br[0] @ pen.matrix @ br[0])
        pen_f = np.sqrt(bf[0] @ pen.matrix @ bf[0])
        assert pen_r == pytest.approx(pen_f, abs=1e-8)


def test_singular_factor_rejected():
    with pytest.raises(SingularFactorError):
        TransformedBlock(np.eye(3), np.diag([1.0, 0.0, 1.0]))


def test_fastpath_matches_reference_to_machine_precision():
    rng = np.random.default_rng(10)
    problem = random_problem(rng, n=20, n_groups=4)
    etas = majorization_constants(problem)
    lambdas = np.array([3.0, 1.0, 0.3, 0.1, 0.03])
    ref = solve_path(problem, lambdas, tol=1e-10, max_iter=5000)
    packed = PackedProblem(problem.blocks, problem.response)
    U, iters, conv = packed.solve_path(lambdas, etas, tol=1e-10, max_iter=5000)
    offs = np.concatenate([[0], np.cumsum([b.dim_u for b in problem.blocks])])
    for li, (betas, report) in enumerate(ref):
        us = [b.u_from_beta(beta) for b, beta in zip(problem.blocks, betas)]
        flat = np.concatenate(us)
        # same updates and same termination rule: identical iteration counts,
        # coefficients equal to accumulation-order rounding
        assert np.allclose(U[li], flat, atol=1e-12)
        assert iters[li] == report.iterations
        assert bool(conv[li]) == report.converged
