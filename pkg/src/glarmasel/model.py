"""Multivariate Poisson GLARMA model: recursion, likelihood and derivatives.

Series are stored row-wise. Row ``s`` of a panel is replicate ``j`` of
condition ``i``; rows are grouped by condition so that every condition owns a
contiguous slice of rows. All indices are 0-based, so the lag-``k`` working
residual at position ``t`` is ``E[:, t - k]`` and is taken as zero whenever
``t - k < 0``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

W_CLAMP = 50.0


class ClampWarning(RuntimeWarning):
    """Raised when the linear predictor had to be clamped before ``exp``."""


class IndefiniteCurvatureWarning(RuntimeWarning):
    """The negated eta-Hessian has a materially negative eigenvalue."""


class RecursionOverflowError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PanelData:
    """Dense count panel.

    Parameters
    ----------
    counts : ndarray of shape (n_series, T)
        Non-negative integer counts. Rows are grouped by condition.
    condition : ndarray of shape (n_series,)
        Condition index of each row, non-decreasing.
    """

    counts: np.ndarray
    condition: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        cond = np.asarray(self.condition, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] == 0 or counts.shape[1] == 0:
            raise ValueError("counts must be a non-empty (n_series, T) array")
        if cond.shape != (counts.shape[0],):
            raise ValueError("condition must have one entry per row of counts")
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise ValueError("counts must be finite and non-negative")
        if np.any(counts != np.round(counts)):
            raise ValueError("counts must be integer valued")
        if cond[0] != 0 or np.any(np.diff(cond) < 0) or np.any(np.diff(cond) > 1):
            raise ValueError("rows must be grouped by condition 0..I-1 in order")
        counts = counts.astype(np.float64)
        counts.flags.writeable = False
        cond.flags.writeable = False
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "condition", cond)

    @classmethod
    def from_array(cls, Y) -> "PanelData":
        """Build from an array indexed ``(i, j, t)`` with equal replicates."""
        Y = np.asarray(Y)
        if Y.ndim != 3:
            raise ValueError("expected an (I, J, T) array")
        I, J, T = Y.shape
        return cls(Y.reshape(I * J, T), np.repeat(np.arange(I), J))

    @classmethod
    def from_blocks(cls, blocks) -> "PanelData":
        """Build from a list of ``(n_i, T)`` arrays, one per condition."""
        blocks = [np.atleast_2d(np.asarray(b)) for b in blocks]
        cond = np.concatenate([np.full(b.shape[0], i) for i, b in enumerate(blocks)])
        return cls(np.vstack(blocks), cond)

    @property
    def I(self) -> int:
        return int(self.condition[-1]) + 1

    @property
    def T(self) -> int:
        return self.counts.shape[1]

    @property
    def n_series(self) -> int:
        return self.counts.shape[0]

    @property
    def rep_counts(self) -> np.ndarray:
        return np.bincount(self.condition, minlength=self.I)

    def rows(self, i: int) -> slice:
        starts = np.concatenate([[0], np.cumsum(self.rep_counts)])
        return slice(int(starts[i]), int(starts[i + 1]))

    def cell(self, i: int, j: int, t: int) -> float:
        return float(self.counts[self.rows(i)][j, t])

    def condition_means(self) -> np.ndarray:
        """Replicate means, shape (I, T)."""
        sums = np.zeros((self.I, self.T))
        np.add.at(sums, self.condition, self.counts)
        return sums / self.rep_counts[:, None]

    def to_array(self) -> np.ndarray:
        """(I, J, T) view; only valid when every condition has J replicates."""
        n = self.rep_counts
        if np.any(n != n[0]):
            raise ValueError("unequal replicate counts")
        return self.counts.reshape(self.I, int(n[0]), self.T)


@dataclass(frozen=True)
class GlarmaParams:
    eta: np.ndarray
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        eta = np.atleast_2d(np.asarray(self.eta, dtype=np.float64))
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=np.float64)).ravel()
        if not (np.all(np.isfinite(eta)) and np.all(np.isfinite(gamma))):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "gamma", gamma)

    @property
    def q(self) -> int:
        return self.gamma.shape[0]


@dataclass
class RecursionWorkspace:
    """Per-series recursion state for one ``(params, data)`` pair.

    ``dW_deta`` holds one ``(n_i, T, T)`` array per condition indexed
    ``[j, t, t0]``; entries with ``t0 > t`` are structurally zero.
    """

    W: np.ndarray
    E: np.ndarray
    mu: np.ndarray
    n_clamped: int = 0
    dW_dgamma: Optional[np.ndarray] = None
    d2W_dgamma2: Optional[np.ndarray] = None
    dW_deta: Optional[list] = None

    def feedback(self, gamma: np.ndarray) -> np.ndarray:
        """``c[s, t, k-1] = gamma_k (1 + E[s, t-k])``, zero when ``t - k < 0``."""
        S, T = self.E.shape
        q = gamma.shape[0]
        c = np.zeros((S, T, q))
        for k in range(1, q + 1):
            if k < T:
                c[:, k:, k - 1] = gamma[k - 1] * (1.0 + self.E[:, :-k])
        return c


def _check_shapes(params: GlarmaParams, data: PanelData):
    if params.eta.shape != (data.I, data.T):
        raise ValueError(
            f"eta has shape {params.eta.shape}, expected {(data.I, data.T)}")


def forward_recursion(params: GlarmaParams, data: PanelData) -> RecursionWorkspace:
    """Run the coupled ``W``/``E`` recursion over every series in one pass."""
    _check_shapes(params, data)
    Y = data.counts
    S, T = Y.shape
    gamma = params.gamma
    q = gamma.shape[0]
    eta_rows = params.eta[data.condition]
    W = np.empty((S, T))
    E = np.empty((S, T))
    mu = np.empty((S, T))
    n_clamped = 0
    for t in range(T):
        w = eta_rows[:, t].copy()
        for k in range(1, min(q, t) + 1):
            w += gamma[k - 1] * E[:, t - k]
        bad = ~np.isfinite(w)
        if bad.any():
            s = int(np.flatnonzero(bad)[0])
            i = int(data.condition[s])
            j = s - data.rows(i).start
            raise RecursionOverflowError(
                f"non-finite W at (i={i}, j={j}, t={t})")
        wc = np.clip(w, -W_CLAMP, W_CLAMP)
        n_clamped += int(np.count_nonzero(wc != w))
        W[:, t] = w
        mu[:, t] = np.exp(wc)
        E[:, t] = Y[:, t] * np.exp(-wc) - 1.0
    if n_clamped:
        warnings.warn(f"{n_clamped} linear predictor values clamped to "
                      f"[-{W_CLAMP:g}, {W_CLAMP:g}]", ClampWarning, stacklevel=2)
    return RecursionWorkspace(W=W, E=E, mu=mu, n_clamped=n_clamped)


def log_likelihood(params: GlarmaParams, data: PanelData,
                   workspace: Optional[RecursionWorkspace] = None) -> float:
    if workspace is None:
        workspace = forward_recursion(params, data)
    return float(np.sum(data.counts * workspace.W - workspace.mu))


def _gamma_derivatives(ws: RecursionWorkspace, gamma: np.ndarray):
    if ws.dW_dgamma is not None:
        return
    E = ws.E
    S, T = E.shape
    q = gamma.shape[0]
    c = ws.feedback(gamma)
    d1 = np.zeros((S, T, q))
    d2 = np.zeros((S, T, q, q))
    for t in range(T):
        for a in range(q):
            if t - a - 1 >= 0:
                d1[:, t, a] = E[:, t - a - 1]
        for k in range(1, min(q, t) + 1):
            ck = c[:, t, k - 1]
            d1[:, t] -= ck[:, None] * d1[:, t - k]
            outer = d1[:, t - k, :, None] * d1[:, t - k, None, :]
            d2[:, t] += ck[:, None, None] * (outer - d2[:, t - k])
        # source terms from differentiating E_{t-a} with respect to gamma_b
        for a in range(q):
            lag = t - a - 1
            if lag < 0:
                continue
            term = (1.0 + E[:, lag])[:, None] * d1[:, lag, :]
            d2[:, t, a, :] -= term
            d2[:, t, :, a] -= term
    ws.dW_dgamma = d1
    ws.d2W_dgamma2 = d2


def _eta_derivatives(ws: RecursionWorkspace, gamma: np.ndarray, data: PanelData):
    if ws.dW_deta is not None:
        return
    T = data.T
    q = gamma.shape[0]
    c = ws.feedback(gamma)
    blocks = []
    for i in range(data.I):
        rows = data.rows(i)
        ci = c[rows]
        D = np.zeros((ci.shape[0], T, T))
        for t in range(T):
            D[:, t, t] = 1.0
            for k in range(1, min(q, t) + 1):
                D[:, t, :t] -= ci[:, t, k - 1, None] * D[:, t - k, :t]
        blocks.append(D)
    ws.dW_deta = blocks


def _ensure(params, data, workspace):
    if workspace is None:
        workspace = forward_recursion(params, data)
    return workspace


def score_gamma(params: GlarmaParams, data: PanelData,
                workspace: Optional[RecursionWorkspace] = None) -> np.ndarray:
    ws = _ensure(params, data, workspace)
    _gamma_derivatives(ws, params.gamma)
    resid = data.counts - ws.mu
    return np.einsum("st,stk->k", resid, ws.dW_dgamma)


def hessian_gamma(params: GlarmaParams, data: PanelData,
                  workspace: Optional[RecursionWorkspace] = None) -> np.ndarray:
    ws = _ensure(params, data, workspace)
    _gamma_derivatives(ws, params.gamma)
    resid = data.counts - ws.mu
    d1 = ws.dW_dgamma
    H = np.einsum("st,stkl->kl", resid, ws.d2W_dgamma2)
    H -= np.einsum("st,stk,stl->kl", ws.mu, d1, d1)
    return 0.5 * (H + H.T)


def score_eta(params: GlarmaParams, data: PanelData,
              workspace: Optional[RecursionWorkspace] = None) -> np.ndarray:
    """Gradient with respect to eta, returned with shape (I, T)."""
    ws = _ensure(params, data, workspace)
    _eta_derivatives(ws, params.gamma, data)
    resid = data.counts - ws.mu
    out = np.empty((data.I, data.T))
    for i, D in enumerate(ws.dW_deta):
        out[i] = np.einsum("st,stu->u", resid[data.rows(i)], D)
    return out


def _second_order_weights(resid: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Backward adjoint of the second-derivative recursion.

    Returns ``b`` such that ``sum_t resid_t d2W_t = sum_t b_t dW_t dW_t'``.
    """
    S, T, q = c.shape
    abar = np.zeros((S, T))
    b = np.zeros((S, T))
    for t in range(T - 1, -1, -1):
        acc = np.zeros(S)
        for k in range(1, q + 1):
            if t + k < T:
                acc += c[:, t + k, k - 1] * abar[:, t + k]
        b[:, t] = acc
        abar[:, t] = resid[:, t] - acc
    return b


def hessian_eta_blocks(params: GlarmaParams, data: PanelData,
                       workspace: Optional[RecursionWorkspace] = None) -> list:
    """Per-condition ``T x T`` blocks of the eta-Hessian.

    The second-derivative tensor of ``W`` is never formed: it only enters
    contracted against ``Y - exp(W)``, which a backward pass folds into
    per-position weights on ``dW dW'``.
    """
    ws = _ensure(params, data, workspace)
    _eta_derivatives(ws, params.gamma, data)
    resid = data.counts - ws.mu
    c = ws.feedback(params.gamma)
    b = _second_order_weights(resid, c)
    blocks = []
    for i, D in enumerate(ws.dW_deta):
        rows = data.rows(i)
        w = b[rows] - ws.mu[rows]
        H = np.tensordot(D, D * w[:, :, None], axes=([0, 1], [0, 1]))
        blocks.append(0.5 * (H + H.T))
    return blocks


def hessian_eta(params: GlarmaParams, data: PanelData,
                workspace: Optional[RecursionWorkspace] = None,
                tol: float = 1e-8) -> np.ndarray:
    """Full ``(I*T) x (I*T)`` eta-Hessian, condition-major ordering.

    Entries linking different conditions are exactly zero. Warns with
    :class:`IndefiniteCurvatureWarning` when the negated matrix has an
    eigenvalue below ``-tol`` times its largest eigenvalue.
    """
    blocks = hessian_eta_blocks(params, data, workspace)
    T = data.T
    H = np.zeros((data.I * T, data.I * T))
    top, bottom = 0.0, 0.0
    for i, B in enumerate(blocks):
        H[i * T:(i + 1) * T, i * T:(i + 1) * T] = B
        ev = np.linalg.eigvalsh(-B)
        top, bottom = max(top, ev[-1]), min(bottom, ev[0])
    if bottom < -tol * max(top, 0.0):
        warnings.warn(f"negated eta-Hessian is indefinite (min eigenvalue "
                      f"{bottom:.3g}, max {top:.3g})",
                      IndefiniteCurvatureWarning, stacklevel=2)
    return H


def eta_second_derivatives(params: GlarmaParams, data: PanelData, row: int,
                           workspace: Optional[RecursionWorkspace] = None) -> np.ndarray:
    """Materialize ``d2W[t, t0, t1]`` for a single series (diagnostics only)."""
    ws = _ensure(params, data, workspace)
    _eta_derivatives(ws, params.gamma, data)
    i = int(data.condition[row])
    D = ws.dW_deta[i][row - data.rows(i).start]
    c = ws.feedback(params.gamma)[row]
    T = data.T
    q = params.q
    D2 = np.zeros((T, T, T))
    for t in range(T):
        for k in range(1, min(q, t) + 1):
            prev = D[t - k]
            D2[t] += c[t, k - 1] * (np.outer(prev, prev) - D2[t - k])
    return D2
