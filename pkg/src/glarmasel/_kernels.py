"""Compiled inner loops for the l1 solvers."""

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def _kkt_violation(grad, beta, lam):
    worst = 0.0
    for j in range(beta.shape[0]):
        if beta[j] == 0.0:
            v = abs(grad[j]) - lam
        elif beta[j] > 0.0:
            v = abs(grad[j] - lam)
        else:
            v = abs(grad[j] + lam)
        if v > worst:
            worst = v
    return worst


@numba.njit(cache=True, nogil=True)
def _sweep(G, grad, beta, lam, idx, n_idx):
    moved = 0.0
    p = G.shape[0]
    for m in range(n_idx):
        j = idx[m]
        gjj = G[j, j]
        if gjj <= 0.0:
            continue
        old = beta[j]
        z = grad[j] + gjj * old
        if z > lam:
            new = (z - lam) / gjj
        elif z < -lam:
            new = (z + lam) / gjj
        else:
            new = 0.0
        if new != old:
            d = new - old
            for k in range(p):
                grad[k] -= G[k, j] * d
            beta[j] = new
            step = abs(d) * np.sqrt(gjj)
            if step > moved:
                moved = step
    return moved


@numba.njit(cache=True, nogil=True)
def cd_gram(G, c, lam, beta, tol, max_sweeps):
    """Cyclic coordinate descent on ``0.5 b'Gb - c'b + lam |b|_1``.

    ``beta`` is updated in place. Alternates passes over the active set with
    full passes; stops when the KKT residual, recomputed from scratch, is at
    most ``tol``. Returns ``(sweeps, converged)``.
    """
    p = G.shape[0]
    grad = c - G @ beta
    full = np.arange(p)
    active = np.empty(p, dtype=np.int64)
    sweeps = 0
    while sweeps < max_sweeps:
        _sweep(G, grad, beta, lam, full, p)
        sweeps += 1
        n_act = 0
        for j in range(p):
            if beta[j] != 0.0:
                active[n_act] = j
                n_act += 1
        while sweeps < max_sweeps:
            moved = _sweep(G, grad, beta, lam, active, n_act)
            sweeps += 1
            if moved <= tol * 1e-2:
                break
        if _kkt_violation(grad, beta, lam) <= 0.5 * tol:
            grad[:] = c - G @ beta
            if _kkt_violation(grad, beta, lam) <= tol:
                return sweeps, True
    grad[:] = c - G @ beta
    return sweeps, _kkt_violation(grad, beta, lam) <= tol


@numba.njit(cache=True, nogil=True)
def _penalized_nll(X, y, beta, lam):
    n = X.shape[0]
    eta = X @ beta
    total = 0.0
    for s in range(n):
        e = min(max(eta[s], -50.0), 50.0)
        total += np.exp(e) - y[s] * eta[s]
    return total / n + lam * np.sum(np.abs(beta))


@numba.njit(cache=True, nogil=True)
def poisson_lasso_irls(X, y, lam, beta, tol, max_irls, max_sweeps):
    """Poisson l1 regression without intercept by damped IRLS.

    Minimizes ``-(1/n) sum(y x'b - exp(x'b)) + lam |b|_1``; each weighted
    least-squares subproblem is solved by :func:`cd_gram`, and the update is
    halved until the penalized objective does not increase. ``beta`` is
    updated in place. Returns ``(iterations, converged)``.
    """
    n, p = X.shape
    obj = _penalized_nll(X, y, beta, lam)
    for it in range(max_irls):
        eta = X @ beta
        w = np.exp(np.minimum(np.maximum(eta, -50.0), 50.0))
        z = eta + (y - w) / w
        Xw = X * (w / n).reshape(-1, 1)
        G = X.T @ Xw
        c = Xw.T @ z
        target = beta.copy()
        cd_gram(G, c, lam, target, 1e-10, max_sweeps)
        step = 1.0
        accepted = False
        for _ in range(30):
            cand = beta + step * (target - beta)
            new_obj = _penalized_nll(X, y, cand, lam)
            if new_obj <= obj + 1e-12 * abs(obj):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            return it + 1, False
        change = np.max(np.abs(cand - beta))
        beta[:] = cand
        obj = new_obj
        if change < tol:
            return it + 1, True
    return max_irls, False


@numba.njit(cache=True, nogil=True)
def _chol_solve(A, b):
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Returns ``(x, ok)``; ``ok`` is False when a pivot is not safely positive.
    """
    n = A.shape[0]
    L = np.zeros((n, n))
    scale = 0.0
    for i in range(n):
        scale = max(scale, A[i, i])
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if s <= 1e-13 * scale:
            return np.zeros(n), False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    x = b.copy()
    for i in range(n):
        s = x[i]
        for k in range(i):
            s -= L[i, k] * x[k]
        x[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x, True


@numba.njit(cache=True, nogil=True)
def lasso_homotopy(G, c, lam_target, beta, max_steps):
    """Follow the lasso path from the all-zero solution down to ``lam_target``.

    Piecewise-linear path of ``argmin 0.5 b'Gb - c'b + lam |b|_1`` with
    variables joining when their correlation reaches ``lam`` and leaving when
    their coefficient crosses zero. Writes the solution into ``beta`` and
    returns ``(steps, reached)``; ``reached`` is False if the active Gram
    matrix became singular or ``max_steps`` ran out first.
    """
    p = c.shape[0]
    beta[:] = 0.0
    r = c.copy()
    lam = 0.0
    first = -1
    for j in range(p):
        if G[j, j] > 0.0 and abs(r[j]) > lam:
            lam = abs(r[j])
            first = j
    if first < 0 or lam <= lam_target:
        return 0, True
    active = np.zeros(p, dtype=np.bool_)
    sign = np.zeros(p)
    active[first] = True
    sign[first] = 1.0 if r[first] > 0 else -1.0
    # a variable that just left may not re-enter at the boundary it left from
    blocked = -1
    blocked_sign = 0.0
    for step in range(max_steps):
        idx = np.flatnonzero(active)
        nA = idx.shape[0]
        GA = np.empty((nA, nA))
        sA = np.empty(nA)
        for a in range(nA):
            sA[a] = sign[idx[a]]
            for b in range(nA):
                GA[a, b] = G[idx[a], idx[b]]
        d, ok = _chol_solve(GA, sA)
        if not ok:
            return step, False
        direction = np.zeros(p)
        for a in range(nA):
            direction[idx[a]] = d[a]
        slope = G @ direction
        delta = lam - lam_target
        event = -1
        joining = False
        tiny = 1e-14 * lam
        for k in range(p):
            if active[k] or G[k, k] <= 0.0:
                continue
            den = 1.0 - slope[k]
            if den > 0.0 and not (k == blocked and blocked_sign > 0):
                cand = (lam - r[k]) / den
                if tiny < cand < delta:
                    delta, event, joining = cand, k, True
            den = 1.0 + slope[k]
            if den > 0.0 and not (k == blocked and blocked_sign < 0):
                cand = (lam + r[k]) / den
                if tiny < cand < delta:
                    delta, event, joining = cand, k, True
        for a in range(nA):
            k = idx[a]
            if direction[k] != 0.0:
                cand = -beta[k] / direction[k]
                if tiny < cand < delta:
                    delta, event, joining = cand, k, False
        for k in range(p):
            beta[k] += delta * direction[k]
            r[k] -= delta * slope[k]
        lam -= delta
        if event < 0:
            return step + 1, True
        blocked = -1
        if joining:
            active[event] = True
            sign[event] = 1.0 if r[event] > 0 else -1.0
        else:
            active[event] = False
            beta[event] = 0.0
            blocked = event
            blocked_sign = sign[event]
    return max_steps, False
