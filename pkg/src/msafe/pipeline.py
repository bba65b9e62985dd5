"""Multistage sensor selection and ridge kernel estimation.

Orchestrates the full procedure in either mode:

* multiscale: kernels in (multiscale cubic, level n) x (cubic splines, dim q),
  blocks truncated at level m and magnitude-sparsified;
* spline: kernels in (cubic splines) x (cubic splines), dense blocks.

Each selection stage runs 5-fold cross-validation over the (lambda, phi_t,
phi_z) grid, refits on all data at the winner, shrinks the active set, and
updates the adaptive weights from the inverse kernel norms.  The final
estimation stage solves a smooth ridge model over the surviving sensors.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from . import assembly, basis, grouplasso
from .assembly import PenaltyMatrix, penalty_from_components
from .fastpath import PackedProblem
from .grouplasso import GroupProblem, TransformedBlock, majorization_constants, substitute

ACTIVE_NORM_TOL = 1e-10
WEIGHT_NORM_FLOOR = 1e-12
WEIGHT_CAP = 1e12


@dataclass
class CvGrid:
    """Hyperparameter grids: natural-log lambda and phi grids, log10 ridge phi."""

    log_lambda: np.ndarray = field(
        default_factory=lambda: np.arange(-20.0, 0.0 + 1e-9, 0.25)
    )
    log_phi_t: np.ndarray = field(
        default_factory=lambda: np.arange(-10.0, 0.0 + 1e-9, 2.5)
    )
    log_phi_z: np.ndarray = field(
        default_factory=lambda: np.arange(-10.0, 0.0 + 1e-9, 2.5)
    )
    ridge_log10_phi: tuple = (-1.0, -2.0, -3.0, -4.0, -5.0)
    folds: int = 5
    # with relative_lambda the log_lambda values (<= 0) are offsets from
    # log(lambda_max) of the stage-one problem, as in the usual p >= n
    # lasso-path convention of stopping well above lambda -> 0
    relative_lambda: bool = False

    def lambdas_descending(self, lam_max=1.0):
        scale = float(lam_max) if self.relative_lambda else 1.0
        return scale * np.sort(np.exp(np.asarray(self.log_lambda, dtype=float)))[::-1]

    def phi_pairs(self):
        for lt in np.asarray(self.log_phi_t, dtype=float):
            for lz in np.asarray(self.log_phi_z, dtype=float):
                yield float(np.exp(lt)), float(np.exp(lz))


@dataclass
class ModelConfig:
    mode: str = "multiscale"  # or "spline"
    p: int = 3
    n: int = 2
    m: int = 2
    q: int = 10
    keep_fraction: float | None = 0.1  # multiscale only; None disables
    stages: int = 5
    seed: int = 0
    grid: CvGrid = field(default_factory=CvGrid)
    solver_tol: float = 1e-8
    solver_max_iter: int = 100_000
    smoother_dim: int = 35

    def __post_init__(self):
        if self.mode not in ("multiscale", "spline"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "multiscale" and self.m > self.n:
            raise ValueError("truncation level m must not exceed n")
        if self.keep_fraction is not None and not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must be in (0, 1]")
        if self.stages < 1:
            raise ValueError("need at least one stage")


@dataclass
class StageState:
    index: int
    active: list
    weights: dict  # sensor -> (f, g, h)
    betas: dict  # sensor -> coefficient vector
    chosen: dict  # lambda, phi_t, phi_z
    cv_mse: float


@dataclass
class FitResult:
    selected: list
    betas: dict
    chosen: dict
    cv_mse: float
    timings: dict
    mode: str
    t_basis: object
    z_basis: object
    truncation_level: int
    keep_fraction: float | None
    zmap: object
    ridge_fallback: bool = False

    def kernel_value(self, sensor, tau, z):
        """Evaluate the estimated kernel gamma_k(tau, z) (z in original units)."""
        beta = self.betas[sensor]
        dim_t = self.t_basis.dim
        z01 = float(np.clip(self.zmap(z), 0.0, 1.0))
        tvals = np.array([f(tau) for f in self.t_basis.functions])
        zvals = np.array([f(z01) for f in self.z_basis.functions])
        B = beta.reshape(self.z_basis.dim, dim_t).T  # columns stacked by z index
        return float(tvals @ B @ zvals)


class BasisMismatchError(ValueError):
    pass


def fold_assignment(n, folds, seed):
    """Contiguous time-ordered folds with a seeded circular rotation."""
    offset = int(np.random.default_rng(seed).integers(n))
    sizes = [len(c) for c in np.array_split(np.arange(n), folds)]
    labels = np.repeat(np.arange(folds), sizes)
    out = np.empty(n, dtype=int)
    out[(np.arange(n) + offset) % n] = labels
    return out


def _bases_for(config):
    if config.mode == "multiscale":
        t_basis = basis.build_multiscale_basis(config.p, config.n)
        m = config.m
    else:
        t_basis = basis.build_spline_basis(config.q)
        m = 0
    z_basis = basis.build_spline_basis(config.q)
    return t_basis, z_basis, m


def prepare_blocks(dataset, config, sparsify=True):
    """Assemble (and, in multiscale mode, truncate + sparsify) all sensor blocks.

    Sparsification is a selection-stage device; pass sparsify=False to get the
    exact truncated blocks (used for the final ridge estimation).
    """
    t_basis, z_basis, m = _bases_for(config)
    blocks, zmap = assembly.assemble_all(
        dataset, t_basis, z_basis, m=m if config.mode == "multiscale" else None
    )
    if sparsify and config.mode == "multiscale" and config.keep_fraction is not None:
        blocks = [assembly.sparsify(b, config.keep_fraction) for b in blocks]
    comps = assembly.penalty_components(t_basis, z_basis)
    return t_basis, z_basis, blocks, zmap, comps


def _row_subset(tblock, rows):
    return TransformedBlock(
        tblock.matrix[rows],
        tblock.chol,
        kept_cols=tblock.kept_cols,
        completion=tblock.completion,
        full_dim=tblock.full_dim,
    )


def _predictions_over_path(tblocks, U, offsets):
    """Predictions sum_k A_k u_k for every lambda on the path (rows x nl)."""
    nl = U.shape[0]
    pred = np.zeros((tblocks[0].shape[0], nl))
    for g, b in enumerate(tblocks):
        Ug = U[:, offsets[g] : offsets[g + 1]]
        if not np.any(Ug):
            continue
        W = solve_triangular(b.chol, Ug.T, lower=True, trans="T")
        pred += b.matrix @ W
    return pred


def _quad(beta, M):
    return float(beta @ M @ beta)


def select_sensors(dataset=None, mode="multiscale", stages=None, grid=None, config=None,
                   *, _prepared=None, responses=None):
    """Run the multistage adaptive selection; returns the list of stage states."""
    if config is None:
        config = ModelConfig(mode=mode)
    if stages is not None:
        config = replace(config, stages=stages)
    if grid is not None:
        config = replace(config, grid=grid)
    if _prepared is None:
        _prepared = prepare_blocks(dataset, config)
    _, _, blocks, _, comps = _prepared
    y = dataset.responses if responses is None else responses
    return _run_selection(blocks, np.asarray(y, dtype=float), comps, config)


def _run_selection(blocks, y, comps, config):
    G, Gw, Gs = comps
    grid = config.grid
    n = len(y)
    folds = fold_assignment(n, grid.folds, config.seed)
    sensors = [b.sensor for b in blocks]
    active = list(sensors)
    weights = {k: (1.0, 1.0, 1.0) for k in sensors}
    block_by_sensor = {b.sensor: b for b in blocks}
    history = []

    for stage in range(1, config.stages + 1):
        candidates = []  # (mean_mse, -lam, -phi_t, -phi_z, payload)
        for phi_t, phi_z in grid.phi_pairs():
            tblocks, etas = _substituted(block_by_sensor, active, weights, G, Gw, Gs, phi_t, phi_z)
            lambdas = grid.lambdas_descending(_lambda_scale(grid, tblocks, y))
            offsets = np.concatenate([[0], np.cumsum([b.dim_u for b in tblocks])])
            fold_mse = np.zeros((grid.folds, len(lambdas)))
            for f in range(grid.folds):
                tr = np.nonzero(folds != f)[0]
                va = np.nonzero(folds == f)[0]
                train_blocks = [_row_subset(b, tr) for b in tblocks]
                packed = PackedProblem(train_blocks, y[tr])
                U, _, _ = packed.solve_path(
                    lambdas, etas, tol=config.solver_tol, max_iter=config.solver_max_iter
                )
                val_blocks = [_row_subset(b, va) for b in tblocks]
                pred = _predictions_over_path(val_blocks, U, offsets)
                fold_mse[f] = np.mean((pred - y[va][:, None]) ** 2, axis=0)
            mean_mse = fold_mse.mean(axis=0)
            for li, lam in enumerate(lambdas):
                candidates.append((mean_mse[li], -lam, -phi_t, -phi_z, (phi_t, phi_z, lam)))
        candidates.sort(key=lambda c: c[:4])
        best_mse, _, _, _, (phi_t, phi_z, lam) = candidates[0]

        # refit on all data at the winner
        tblocks, etas = _substituted(block_by_sensor, active, weights, G, Gw, Gs, phi_t, phi_z)
        lambdas = grid.lambdas_descending(_lambda_scale(grid, tblocks, y))
        packed = PackedProblem(tblocks, y)
        path = lambdas[lambdas >= lam - 1e-300]
        U, _, _ = packed.solve_path(path, etas, tol=config.solver_tol,
                                    max_iter=config.solver_max_iter)
        u_final = U[-1]
        offsets = np.concatenate([[0], np.cumsum([b.dim_u for b in tblocks])])
        betas = {}
        for g, k in enumerate(active):
            u = u_final[offsets[g] : offsets[g + 1]]
            betas[k] = tblocks[g].beta_from_u(u)
        new_active = [k for k in active if np.linalg.norm(betas[k]) > ACTIVE_NORM_TOL]
        new_weights = {}
        for k in new_active:
            b = betas[k]
            new_weights[k] = tuple(
                min(1.0 / norm, WEIGHT_CAP) if norm >= WEIGHT_NORM_FLOOR else WEIGHT_CAP
                for norm in (
                    np.sqrt(max(_quad(b, G), 0.0)),
                    np.sqrt(max(_quad(b, Gw), 0.0)),
                    np.sqrt(max(_quad(b, Gs), 0.0)),
                )
            )
        state = StageState(
            index=stage,
            active=sorted(new_active),
            weights=dict(new_weights),
            betas={k: betas[k] for k in new_active},
            chosen={"lambda": float(lam), "phi_t": phi_t, "phi_z": phi_z},
            cv_mse=float(best_mse),
        )
        history.append(state)
        if not new_active:
            break
        stable = set(new_active) == set(active) and all(
            abs(a - b) <= 1e-6 * max(abs(b), 1e-300)
            for k in new_active
            for a, b in zip(new_weights[k], weights.get(k, (np.inf,) * 3))
        )
        active = state.active
        weights = new_weights
        if stable:
            break
    return history


def _lambda_scale(grid, tblocks, y):
    if not grid.relative_lambda:
        return 1.0
    return max(2.0 * np.linalg.norm(b.rmatvec(y)) for b in tblocks)


def _substituted(block_by_sensor, active, weights, G, Gw, Gs, phi_t, phi_z):
    tblocks = []
    cache = {}
    for k in active:
        f, g, h = weights[k]
        key = (f, g, h)
        if key not in cache:
            cache[key] = penalty_from_components(G, Gw, Gs, f, g, h, phi_t, phi_z)
        tblocks.append(substitute(block_by_sensor[k], cache[key]))
    problem = GroupProblem(tblocks, np.zeros(tblocks[0].shape[0]), 0.0)
    etas = majorization_constants(problem)
    return tblocks, etas


class _RidgeSystem:
    """Reduced ridge normal equations over the active blocks' occupied columns."""

    def __init__(self, blocks, G, Gw, Gs):
        self.blocks = blocks
        self.cols = []
        self.completions = []
        self.schur_parts = []  # (Gr, Gwr, Gsr) pre-reduced per block
        self.A = []
        d = G.shape[0]
        for b in blocks:
            S = np.unique(b.matrix.tocoo().col)
            if S.size == 0:
                S = np.arange(min(1, d))
            self.cols.append(S)
            self.A.append(b.matrix[:, S].toarray())
        self.G, self.Gw, self.Gs = G, Gw, Gs
        self.full_dim = d

    def design(self, rows=None):
        A = np.hstack(self.A)
        return A if rows is None else A[rows]

    def penalty(self, phi, phi_t, phi_z):
        M = phi * self.G + phi_t * self.Gw + phi_z * self.Gs
        outs = []
        for S in self.cols:
            Sc = np.setdiff1d(np.arange(self.full_dim), S)
            if Sc.size == 0:
                outs.append((M[np.ix_(S, S)], None, None))
                continue
            Mcc = M[np.ix_(Sc, Sc)]
            Mcs = M[np.ix_(Sc, S)]
            W = np.linalg.solve(Mcc, Mcs)
            red = M[np.ix_(S, S)] - Mcs.T @ W
            outs.append((0.5 * (red + red.T), -W, Sc))
        return outs

    def solve(self, y, phi, phi_t, phi_z, rows=None):
        A = self.design(rows)
        yr = y if rows is None else y[rows]
        pens = self.penalty(phi, phi_t, phi_z)
        H = A.T @ A
        off = 0
        for (red, _, _), S in zip(pens, self.cols):
            H[off : off + S.size, off : off + S.size] += red
            off += S.size
        c, low = cho_factor(H, lower=True)
        beta_red = cho_solve((c, low), A.T @ yr)
        return beta_red, pens

    def expand(self, beta_red, pens):
        betas = {}
        off = 0
        for b, S, (red, W, Sc) in zip(self.blocks, self.cols, pens):
            bs = beta_red[off : off + S.size]
            full = np.zeros(self.full_dim)
            full[S] = bs
            if W is not None and Sc.size:
                full[Sc] = W @ bs
            betas[b.sensor] = full
            off += S.size
        return betas


def _ridge_cv(system, y, phis, grid, folds_idx, fallback_phi):
    """Grid-search (phi, phi_t, phi_z) by CV; returns winner + fallback flag."""
    n = len(y)
    candidates = []
    fallback = False
    for phi in phis:
        for phi_t, phi_z in grid.phi_pairs():
            use_phi = phi
            mses = []
            try:
                for f in range(grid.folds):
                    tr = np.nonzero(folds_idx != f)[0]
                    va = np.nonzero(folds_idx == f)[0]
                    beta_red, _ = system.solve(y, use_phi, phi_t, phi_z, rows=tr)
                    pred = system.design(va) @ beta_red
                    mses.append(float(np.mean((pred - y[va]) ** 2)))
            except np.linalg.LinAlgError:
                use_phi = fallback_phi
                fallback = True
                mses = []
                for f in range(grid.folds):
                    tr = np.nonzero(folds_idx != f)[0]
                    va = np.nonzero(folds_idx == f)[0]
                    beta_red, _ = system.solve(y, use_phi, phi_t, phi_z, rows=tr)
                    pred = system.design(va) @ beta_red
                    mses.append(float(np.mean((pred - y[va]) ** 2)))
            candidates.append(
                (float(np.mean(mses)), -use_phi, -phi_t, -phi_z, (use_phi, phi_t, phi_z))
            )
    candidates.sort(key=lambda c: c[:4])
    mse, _, _, _, winner = candidates[0]
    return mse, winner, fallback


def estimate_kernels(blocks, y, active, comps, grid, mode, seed):
    G, Gw, Gs = comps
    block_by_sensor = {b.sensor: b for b in blocks}
    act = sorted(active)
    if not act:
        raise ValueError("active sensor set is empty")
    system = _RidgeSystem([block_by_sensor[k] for k in act], G, Gw, Gs)
    y = np.asarray(y, dtype=float)
    folds_idx = fold_assignment(len(y), grid.folds, seed)
    if mode == "multiscale":
        phis = [10.0 ** v for v in grid.ridge_log10_phi]
    else:
        phis = [0.0]
    fallback_phi = 10.0 ** min(grid.ridge_log10_phi)
    cv_mse, (phi, phi_t, phi_z), fallback = _ridge_cv(
        system, y, phis, grid, folds_idx, fallback_phi
    )
    try:
        beta_red, pens = system.solve(y, phi, phi_t, phi_z)
    except np.linalg.LinAlgError:
        fallback = True
        phi = fallback_phi
        beta_red, pens = system.solve(y, phi, phi_t, phi_z)
    betas = system.expand(beta_red, pens)
    return {
        "betas": betas,
        "chosen": {"phi": phi, "phi_t": phi_t, "phi_z": phi_z},
        "cv_mse": float(cv_mse),
        "ridge_fallback": fallback,
    }


def predict_blocks(blocks, betas):
    """y_hat = sum_k A_k beta_k over the sensors present in `betas`."""
    by_sensor = {b.sensor: b for b in blocks}
    n = next(iter(by_sensor.values())).shape[0]
    pred = np.zeros(n)
    for k, beta in betas.items():
        b = by_sensor[k]
        if b.shape[1] != len(beta):
            raise BasisMismatchError(
                f"block for sensor {k} has {b.shape[1]} columns, beta has {len(beta)}"
            )
        pred += b.matrix @ beta
    return pred


def predict(fit, dataset):
    """Predict responses for a dataset using the fitted bases and z-map."""
    if dataset.n_sensors <= max(fit.selected, default=0):
        raise BasisMismatchError("dataset has fewer sensors than the fit expects")
    blocks, _ = assembly.assemble_all(
        dataset,
        fit.t_basis,
        fit.z_basis,
        m=fit.truncation_level if fit.mode == "multiscale" else None,
        zmap=fit.zmap,
    )
    return predict_blocks(blocks, fit.betas)


@dataclass
class RunResult:
    fit: FitResult
    stages: list
    timings: dict

    def report(self):
        return {
            "mode": self.fit.mode,
            "selected": list(self.fit.selected),
            "chosen": self.fit.chosen,
            "cv_mse": self.fit.cv_mse,
            "ridge_fallback": self.fit.ridge_fallback,
            "stages": [
                {
                    "index": s.index,
                    "active": list(s.active),
                    "chosen": s.chosen,
                    "cv_mse": s.cv_mse,
                    "weights": {str(k): list(v) for k, v in sorted(s.weights.items())},
                }
                for s in self.stages
            ],
            "timings": self.timings,
        }


def run_full(dataset, config):
    """Assemble, select over R stages, and ridge-estimate; returns RunResult."""
    t0 = time.perf_counter()
    prepared = prepare_blocks(dataset, config)
    t_basis, z_basis, blocks, zmap, comps = prepared
    t_assembly = time.perf_counter() - t0

    t0 = time.perf_counter()
    stages = _run_selection(blocks, dataset.responses, comps, config)
    t_select = time.perf_counter() - t0

    active = stages[-1].active if stages else []
    t0 = time.perf_counter()
    if active:
        est_blocks = blocks
        if config.mode == "multiscale" and config.keep_fraction is not None:
            # ridge estimation works on the exact truncated blocks
            est_blocks = [
                assembly.assemble_block(dataset, k, t_basis, z_basis, config.m, zmap)
                for k in sorted(active)
            ]
        est = estimate_kernels(
            est_blocks, dataset.responses, active, comps, config.grid, config.mode, config.seed
        )
    else:
        est = {"betas": {}, "chosen": {}, "cv_mse": float("nan"), "ridge_fallback": False}
    t_estimate = time.perf_counter() - t0

    fit = FitResult(
        selected=sorted(active),
        betas=est["betas"],
        chosen=est["chosen"],
        cv_mse=est["cv_mse"],
        timings={"assembly": t_assembly, "selection": t_select, "estimation": t_estimate},
        mode=config.mode,
        t_basis=t_basis,
        z_basis=z_basis,
        truncation_level=config.m if config.mode == "multiscale" else 0,
        keep_fraction=config.keep_fraction if config.mode == "multiscale" else None,
        zmap=zmap,
        ridge_fallback=est["ridge_fallback"],
    )
    return RunResult(fit=fit, stages=stages, timings=fit.timings)


class RawRecording:
    """Raw displacement + EMG recording prior to velocity extraction."""

    def __init__(self, times, displacement, signal_times, signals, window):
        self.times = np.asarray(times, dtype=float)
        self.displacement = np.asarray(displacement, dtype=float)
        self.signal_times = np.asarray(signal_times, dtype=float)
        self.signals = np.atleast_2d(np.asarray(signals, dtype=float))
        self.window = float(window)


def preprocess(raw, smoother_dim=35, gcv_grid=None):
    """Velocities from a penalized order-6 spline smoother, GCV-tuned.

    Fits displacement with degree-5 B-splines penalized on the third
    derivative, differentiates analytically at the sampling times, and
    returns the assembled Dataset.
    """
    t = raw.times
    z = raw.displacement
    n = len(t)
    if n < 8:
        raise ValueError("too few displacement samples for the order-6 smoother")
    dim = min(smoother_dim, n - 2)
    if dim < 6:
        raise ValueError("too few displacement samples for the order-6 smoother")
    t0, t1 = float(t[0]), float(t[-1])
    span = t1 - t0
    s = (t - t0) / span
    funcs = basis.bspline_family(dim, degree=5)
    B = np.array([[f(si) for f in funcs] for si in s])
    _, P = basis.gram_matrices(funcs, deriv_order=3)
    BtB = B.T @ B
    Btz = B.T @ z
    if gcv_grid is None:
        gcv_grid = np.logspace(-14, 4, 37)
    best = None
    for mu in gcv_grid:
        H = BtB + mu * P
        try:
            c, low = cho_factor(H, lower=True)
        except np.linalg.LinAlgError:
            continue
        coef = cho_solve((c, low), Btz)
        hat_trace = float(np.trace(cho_solve((c, low), BtB)))
        resid = z - B @ coef
        denom = max(n - hat_trace, 1e-8)
        score = n * float(resid @ resid) / denom**2
        if best is None or score < best[0]:
            best = (score, coef)
    if best is None:
        raise ValueError("smoother normal equations were never positive definite")
    coef = best[1]
    dfuncs = [f.derivative() for f in funcs]
    dB = np.array([[f(si) for f in dfuncs] for si in s])
    velocities = (dB @ coef) / span
    return assembly.Dataset(
        times=t,
        signal_times=raw.signal_times,
        signals=raw.signals,
        positions=z,
        responses=velocities,
        window=raw.window,
    )
