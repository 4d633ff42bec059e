"""Quadratic surrogate in eta, l1 solver and stability selection."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from ._kernels import cd_gram, lasso_homotopy
from .model import GlarmaParams, PanelData, forward_recursion, hessian_eta_blocks, score_eta

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(1, 10) / 10, 1))


class DegenerateCurvatureError(ValueError):
    pass


@dataclass
class QuadraticProblem:
    """Least-squares form ``0.5 ||response - design @ eta||^2`` of the surrogate.

    Columns are ordered condition-major: column ``i * T + t`` is ``eta[i, t]``.
    ``row_block[r]`` is the condition whose eigenvector produced row ``r``.
    """

    design: np.ndarray
    response: np.ndarray
    kept_eigen: np.ndarray
    dropped: int
    column_index_map: np.ndarray
    row_block: np.ndarray
    eta0: np.ndarray
    gradient: np.ndarray
    n_negative: int = 0

    @property
    def n_rows(self) -> int:
        return self.design.shape[0]

    @property
    def n_cols(self) -> int:
        return self.design.shape[1]

    def column_blocks(self) -> list:
        blocks = self.column_index_map[:, 0]
        return [np.flatnonzero(blocks == b) for b in np.unique(blocks)]


def build_quadratic_problem(eta0, gamma_hat, data: PanelData,
                            floor_ratio: float = 1e-8) -> QuadraticProblem:
    """Eigen-transform the second-order expansion of the likelihood at ``eta0``.

    With ``-H = U diag(lam) U'`` the negated eta-Hessian and ``g`` the
    eta-score, rows are ``sqrt(lam_k) u_k'`` for the design and
    ``sqrt(lam_k) u_k' eta0 + u_k' g / sqrt(lam_k)`` for the response.
    Eigenvalues below ``floor_ratio`` times the largest one are dropped, so
    the problem may have fewer rows than columns.
    """
    eta0 = np.asarray(eta0, dtype=np.float64)
    params = GlarmaParams(eta0, gamma_hat)
    ws = forward_recursion(params, data)
    grad = score_eta(params, data, ws)
    blocks = hessian_eta_blocks(params, data, ws)
    I, T = data.I, data.T

    eig = [np.linalg.eigh(-B) for B in blocks]
    top = max(float(ev[-1]) for ev, _ in eig)
    if not top > 0:
        raise DegenerateCurvatureError("degenerate curvature: no positive eigenvalue "
                                       "in the negated eta-Hessian")
    floor = floor_ratio * top
    design_rows, response, kept, row_block = [], [], [], []
    dropped = n_negative = 0
    for i, (ev, U) in enumerate(eig):
        n_negative += int(np.count_nonzero(ev < 0))
        keep = ev >= floor
        dropped += int(np.count_nonzero(~keep))
        lam = ev[keep]
        Uk = U[:, keep]
        root = np.sqrt(lam)
        rows = np.zeros((lam.size, I * T))
        rows[:, i * T:(i + 1) * T] = root[:, None] * Uk.T
        design_rows.append(rows)
        response.append(root * (Uk.T @ eta0[i]) + (Uk.T @ grad[i]) / root)
        kept.append(lam)
        row_block.append(np.full(lam.size, i))
    cmap = np.column_stack([np.repeat(np.arange(I), T), np.tile(np.arange(T), I)])
    return QuadraticProblem(
        design=np.vstack(design_rows),
        response=np.concatenate(response),
        kept_eigen=np.concatenate(kept),
        dropped=dropped,
        column_index_map=cmap,
        row_block=np.concatenate(row_block),
        eta0=eta0.ravel().copy(),
        gradient=grad.ravel(),
        n_negative=n_negative,
    )


def lambda_grid(problem: QuadraticProblem, n_lambda: int = 100,
                ratio: float = 1e-4) -> np.ndarray:
    """Descending log-spaced penalty grid from ``max |X'y| / r`` down."""
    X, y = problem.design, problem.response
    if X.shape[0] == 0:
        raise ValueError("empty problem")
    lam_max = float(np.max(np.abs(X.T @ y))) / X.shape[0]
    if lam_max == 0.0:
        return np.array([0.0])
    if ratio == 1.0 or n_lambda == 1:
        return np.array([lam_max])
    return np.exp(np.linspace(np.log(lam_max), np.log(ratio * lam_max), n_lambda))


class LassoFit(NamedTuple):
    coef: np.ndarray
    sweeps: int
    converged: bool


def _solve_gram(G, c, lam, tol, max_sweeps, warm_start="path", start=None):
    p = c.shape[0]
    if start is not None:
        beta = np.array(start, dtype=np.float64)
    else:
        beta = np.zeros(p)
        if warm_start == "path":
            lasso_homotopy(G, c, lam, beta, 20 * p + 20)
        elif warm_start != "zero":
            raise ValueError(f"unknown warm_start {warm_start!r}")
    sweeps, ok = cd_gram(G, c, lam, beta, tol, max_sweeps)
    return beta, int(sweeps), bool(ok)


def lasso_cd(design, response, lam: float, tol: float = 1e-8,
             max_sweeps: int = 10000, warm_start: str = "path",
             start=None) -> LassoFit:
    """Minimize ``0.5 ||response - design @ b||^2 + lam ||b||_1``.

    Cyclic coordinate descent with soft-thresholding. Convergence means the
    KKT conditions hold to ``tol`` in the gradient ``design' (response -
    design @ b)``. On non-convergence the last iterate is returned with
    ``converged=False``.

    With ``warm_start="path"`` the sweeps start from the homotopy solution at
    ``lam``, which plain cyclic updates approach very slowly when ``lam`` is
    tiny and there are fewer rows than columns. ``"zero"`` starts from 0;
    an explicit ``start`` vector overrides both.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    X = np.ascontiguousarray(design, dtype=np.float64)
    y = np.asarray(response, dtype=np.float64)
    G = X.T @ X
    c = X.T @ y
    beta, sweeps, ok = _solve_gram(G, c, float(lam), tol, max_sweeps, warm_start, start)
    return LassoFit(beta, sweeps, ok)


def kkt_residual(design, response, coef, lam: float) -> float:
    grad = design.T @ (response - design @ coef)
    viol = np.where(coef == 0, np.abs(grad) - lam, np.abs(grad - lam * np.sign(coef)))
    return float(max(np.max(viol), 0.0))


@dataclass
class StabilityResult:
    frequencies: np.ndarray
    lambda_used: float
    eta_hat: np.ndarray
    n_subsamples: int
    thresholds: tuple = DEFAULT_THRESHOLDS
    primary_threshold: float = 0.6
    empty_support: bool = False
    n_unconverged: int = 0
    counts: Optional[np.ndarray] = field(default=None, repr=False)

    def support(self, threshold: Optional[float] = None) -> np.ndarray:
        thr = self.primary_threshold if threshold is None else threshold
        return np.flatnonzero(self.frequencies > thr)


def seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def child_seeds(seed, n: int) -> list:
    """``n`` independent child sequences of ``seed``.

    Unlike ``SeedSequence.spawn`` this keeps no state, so asking twice for the
    children of the same seed gives the same streams.
    """
    ss = seed_sequence(seed)
    return [np.random.SeedSequence(ss.entropy, spawn_key=ss.spawn_key + (k,),
                                   pool_size=ss.pool_size) for k in range(n)]


def subsample_streams(seed, n: int) -> list:
    """One generator per subsample, independent of scheduling order."""
    return [np.random.default_rng(s) for s in child_seeds(seed, n)]


def refit_on_support(design, response, support) -> np.ndarray:
    coef = np.zeros(design.shape[1])
    if len(support):
        sol, *_ = np.linalg.lstsq(design[:, support], response, rcond=None)
        coef[support] = sol
    return coef


def _subsample_selected(X, y, row_block, col_blocks, rows, lam, tol, max_sweeps):
    selected = np.zeros(X.shape[1], dtype=bool)
    ok = True
    for b, cols in enumerate(col_blocks):
        r = rows if row_block is None else rows[row_block[rows] == b]
        if r.size == 0:
            continue
        Xs = X[np.ix_(r, cols)]
        G = Xs.T @ Xs
        c = Xs.T @ y[r]
        beta, _, conv = _solve_gram(G, c, lam, tol, max_sweeps)
        ok &= conv
        selected[cols] = beta != 0.0
    return selected, ok


def stability_selection(problem: QuadraticProblem, lam: float,
                        n_subsamples: int = 1000, seed=0,
                        thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                        primary_threshold: float = 0.6, tol: float = 1e-8,
                        max_sweeps: int = 10000, workers: int = 1) -> StabilityResult:
    """Selection frequencies over random half-subsamples of the rows.

    Each subsample draws ``floor(r / 2)`` rows without replacement from its
    own seeded stream and solves the l1 problem on them; a column counts as
    selected when its coefficient is non-zero. Condition blocks of the design
    are solved separately since the objective separates across them. The
    returned ``eta_hat`` is the least-squares refit on the support at
    ``primary_threshold``.
    """
    X = np.ascontiguousarray(problem.design)
    y = problem.response
    r = X.shape[0]
    if r < 2:
        raise ValueError("stability selection needs at least two rows")
    if any(not 0 < t < 1 for t in thresholds):
        raise ValueError("thresholds must lie in (0, 1)")
    half = r // 2
    streams = subsample_streams(seed, n_subsamples)
    draws = [np.sort(g.choice(r, size=half, replace=False)) for g in streams]
    row_block = getattr(problem, "row_block", None)
    col_blocks = problem.column_blocks() if row_block is not None else [np.arange(X.shape[1])]

    def run(chunk):
        counts = np.zeros(X.shape[1], dtype=np.int64)
        bad = 0
        for s in chunk:
            sel, ok = _subsample_selected(X, y, row_block, col_blocks, draws[s],
                                          lam, tol, max_sweeps)
            counts += sel
            bad += not ok
        return counts, bad

    chunks = np.array_split(np.arange(n_subsamples), max(1, workers))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(ch) for ch in chunks]
    counts = sum(p[0] for p in parts)
    unconverged = sum(p[1] for p in parts)
    if unconverged:
        logger.info("%d of %d subsample fits hit the sweep limit", unconverged, n_subsamples)
    freq = counts / n_subsamples
    support = np.flatnonzero(freq > primary_threshold)
    eta_hat = refit_on_support(X, y, support)
    return StabilityResult(
        frequencies=freq, lambda_used=float(lam), eta_hat=eta_hat,
        n_subsamples=n_subsamples, thresholds=tuple(thresholds),
        primary_threshold=primary_threshold, empty_support=support.size == 0,
        n_unconverged=int(unconverged), counts=counts,
    )
