"""Newton-Raphson estimation of the moving-average coefficients, eta fixed."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import (GlarmaParams, PanelData, RecursionOverflowError,
                    forward_recursion, hessian_gamma, log_likelihood, score_gamma)

logger = logging.getLogger(__name__)

_SLACK = 1e-10


@dataclass
class NewtonConfig:
    tol: float = 1e-6
    max_iter: int = 100
    step_halving_max: int = 20

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1 or self.step_halving_max < 1:
            raise ValueError("max_iter and step_halving_max must be >= 1")


@dataclass
class NewtonTrace:
    gamma_path: list = field(default_factory=list)
    loglik_path: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    pinv_used: bool = False
    gradient_steps: int = 0


def newton_direction(score: np.ndarray, hessian: np.ndarray):
    """Ascent direction from the score and Hessian of the log-likelihood.

    Returns ``(direction, floored)``. When ``-hessian`` is positive definite
    the direction is the plain Newton step ``-hessian^{-1} score``. Otherwise
    the eigenvalues of ``-hessian`` are replaced by their absolute values and
    those below ``1e-10`` times the spectral radius are dropped.
    """
    evals, evecs = np.linalg.eigh(-hessian)
    radius = np.max(np.abs(evals)) if evals.size else 0.0
    if radius == 0.0 or not np.isfinite(radius):
        return np.zeros_like(score), True
    floor = 1e-10 * radius
    if np.all(evals > floor):
        return np.linalg.solve(-hessian, score), False
    mag = np.abs(evals)
    inv = np.where(mag > floor, 1.0 / np.where(mag > floor, mag, 1.0), 0.0)
    return evecs @ (inv * (evecs.T @ score)), True


def _loglik(eta, gamma, data):
    try:
        params = GlarmaParams(eta, gamma)
        ws = forward_recursion(params, data)
    except (RecursionOverflowError, ValueError):
        return -np.inf, None, None
    L = log_likelihood(params, data, ws)
    return (L if np.isfinite(L) else -np.inf), params, ws


def _line_search(eta, gamma, direction, L0, data, halvings):
    step = 1.0
    for _ in range(halvings + 1):
        cand = gamma + step * direction
        L, params, ws = _loglik(eta, cand, data)
        if L >= L0 - _SLACK:
            return cand, L, params, ws
        step *= 0.5
    return None


def estimate_gamma(eta0, gamma0, data: PanelData, cfg: NewtonConfig | None = None):
    """Maximize the conditional log-likelihood in gamma with eta held at ``eta0``.

    Each iteration takes the Newton step, halved until the likelihood does not
    decrease; if halving fails a normalized gradient step is tried instead.
    Stops once successive iterates differ by less than ``cfg.tol`` in sup-norm.

    Returns
    -------
    gamma_hat : ndarray
    trace : NewtonTrace
    """
    cfg = cfg or NewtonConfig()
    gamma = np.atleast_1d(np.asarray(gamma0, dtype=np.float64)).ravel().copy()
    trace = NewtonTrace()
    if gamma.size == 0:
        trace.converged = True
        return gamma, trace

    L, params, ws = _loglik(eta0, gamma, data)
    if not np.isfinite(L):
        raise RecursionOverflowError("log-likelihood is not finite at gamma0")
    trace.gamma_path.append(gamma.copy())
    trace.loglik_path.append(L)

    for r in range(1, cfg.max_iter + 1):
        trace.iterations = r
        s = score_gamma(params, data, ws)
        H = hessian_gamma(params, data, ws)
        direction, floored = newton_direction(s, H)
        trace.pinv_used |= floored
        found = _line_search(eta0, gamma, direction, L, data, cfg.step_halving_max)
        if found is None:
            grad = s / max(1.0, float(np.max(np.abs(s))))
            found = _line_search(eta0, gamma, grad, L, data, cfg.step_halving_max)
            if found is None:
                logger.debug("no ascent step at iteration %d", r)
                trace.converged = float(np.max(np.abs(s))) < 1e-8
                break
            trace.gradient_steps += 1
        new_gamma, L, params, ws = found
        change = float(np.max(np.abs(new_gamma - gamma)))
        gamma = new_gamma
        trace.gamma_path.append(gamma.copy())
        trace.loglik_path.append(L)
        if change < cfg.tol:
            trace.converged = True
            break
    return gamma, trace
