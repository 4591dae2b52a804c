"""Independent reference implementations used as test oracles.

Everything here is written directly from the defining formulas with explicit
risk-set matrices or plain loops, sharing no code with the package.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import minimize


def risk_matrix(times):
    """``R[i, j] = 1`` when subject ``j`` is still at risk at ``times[i]``."""
    t = np.asarray(times, dtype=float)
    return (t[None, :] >= t[:, None]).astype(float)


def partial_loglik(beta, times, statuses, x, weights=None):
    """Weighted Breslow log-partial likelihood by direct summation."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != len(times):
        x = x.T
    w = np.ones(len(times)) if weights is None else np.asarray(weights, dtype=float)
    eta = x @ np.asarray(beta, dtype=float)
    R = risk_matrix(times)
    denom = R @ (w * np.exp(eta))
    d = np.asarray(statuses, dtype=bool)
    return float(np.sum(w[d] * (eta[d] - np.log(denom[d]))))


def partial_loglik_batch(betas, times, statuses, x):
    """Unweighted log-partial likelihood for many coefficient vectors at once."""
    eta = np.asarray(betas, dtype=float) @ np.asarray(x, dtype=float).T   # (G, n)
    R = risk_matrix(times)
    denom = np.exp(eta) @ R.T                                             # (G, n)
    d = np.asarray(statuses, dtype=bool)
    return np.sum(eta[:, d] - np.log(denom[:, d]), axis=1)


def grid_search_cox(times, statuses, x, lo=-5.0, hi=5.0, step=0.05):
    """Maximise the partial likelihood by a dense grid followed by polishing.

    Returns ``(beta, on_boundary)``; `on_boundary` flags a grid maximum on
    the edge of the box, in which case the optimum may lie outside it.
    """
    x = np.asarray(x, dtype=float)
    p = x.shape[1]
    axis = np.arange(lo, hi + step / 2, step)
    grid = np.stack(np.meshgrid(*([axis] * p), indexing="ij"), axis=-1).reshape(-1, p)
    vals = partial_loglik_batch(grid, times, statuses, x)
    best = grid[int(np.argmax(vals))]
    on_boundary = bool(np.any(np.isclose(np.abs(best), hi)))

    def neg(b):
        return -partial_loglik(b, times, statuses, x)

    b = best
    for _ in range(4):
        res = minimize(neg, b, method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 20000,
                                "initial_simplex": b + 0.02 * np.vstack([np.zeros(p), np.eye(p)])})
        b = res.x
    return b, on_boundary


def breslow_increments(beta, times, statuses, x, weights):
    """Baseline hazard increment at every distinct event time, by loops."""
    beta = np.asarray(beta, dtype=float)
    event_times = sorted({float(t) for t, d in zip(times, statuses) if d == 1})
    out = []
    for s in event_times:
        num = sum(w for t, d, w in zip(times, statuses, weights) if d == 1 and t == s)
        den = sum(w * math.exp(float(np.dot(xi, beta)))
                  for t, xi, w in zip(times, x, weights) if t >= s)
        out.append(num / den)
    return np.array(event_times), np.array(out)


def mixture_log_density(t, d, xi, beta, knots, increments):
    """``d (log h0(t) + b'x) - exp(b'x) H0(t)`` from the increments; -inf for zero hazard."""
    eta = float(np.dot(xi, beta))
    H = sum(h for s, h in zip(knots, increments) if s <= t)
    val = -math.exp(eta) * H
    if d == 1:
        h = sum(h for s, h in zip(knots, increments) if s == t)
        val += (math.log(h) + eta) if h > 0 else -math.inf
    return val


def km_by_product(times, statuses, at):
    """Kaplan-Meier survival at `at` by the product formula."""
    s = 1.0
    for u in sorted({t for t, d in zip(times, statuses) if d == 1 and t <= at}):
        n_risk = sum(1 for t in times if t >= u)
        d_u = sum(1 for t, d in zip(times, statuses) if d == 1 and t == u)
        s *= 1.0 - d_u / n_risk
    return s


def logrank_by_tables(ta, sa, tb, sb):
    """Log-rank chi-square statistic from the 2x2 table at each event time."""
    times = sorted({t for t, d in zip(list(ta) + list(tb), list(sa) + list(sb)) if d == 1})
    o_minus_e = 0.0
    var = 0.0
    for u in times:
        na = sum(1 for t in ta if t >= u)
        nb = sum(1 for t in tb if t >= u)
        da = sum(1 for t, d in zip(ta, sa) if d == 1 and t == u)
        db = sum(1 for t, d in zip(tb, sb) if d == 1 and t == u)
        n, dd = na + nb, da + db
        o_minus_e += da - dd * na / n
        if n > 1:
            var += dd * (na / n) * (nb / n) * (n - dd) / (n - 1)
    return o_minus_e ** 2 / var
