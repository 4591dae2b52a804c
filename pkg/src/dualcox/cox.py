"""Weighted Cox proportional-hazards estimation.

Risk-set sums use a single ascending sort of the observed times followed by
suffix accumulation, so every likelihood evaluation is O(n p^2) after the
O(n log n) setup held in :class:`CoxData`. Tied event times share one risk set
(Breslow's approximation).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import (
    AllWeightsZero,
    DimensionMismatch,
    EmptyRiskSet,
    NumericalError,
    SingularHessian,
)
from .survival import StepFunction, TrialDataset

WEIGHT_FLOOR = 1e-6
DIVERGENCE_THRESHOLD = 50.0
RIDGE = 1e-8
INFINITE_STEP_TOL = 1e-4


class CoxData:
    """Survival data pre-sorted for risk-set accumulation.

    Parameters
    ----------
    times, statuses : array_like, shape (n,)
    covariates : array_like, shape (n, p)
    """

    def __init__(self, times, statuses, covariates):
        times = np.asarray(times, dtype=float).reshape(-1)
        statuses = np.asarray(statuses).reshape(-1).astype(int)
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates.reshape(-1, 1)
        n = times.shape[0]
        if statuses.shape[0] != n or covariates.shape[0] != n:
            raise DimensionMismatch("times, statuses and covariates differ in length")
        self.n = n
        self.p = covariates.shape[1]
        self.times = times
        self.statuses = statuses
        self.covariates = covariates
        self.order = np.argsort(times, kind="stable")
        self.t = times[self.order]
        self.d = statuses[self.order]
        self.X = covariates[self.order]
        # start of each row's tie group: the risk set {j: t_j >= t_i} begins there
        self.first = np.searchsorted(self.t, self.t, side="left")
        self.event_times = np.unique(self.t[self.d == 1])
        self._xx = self.X[:, :, None] * self.X[:, None, :]

    def sorted_weights(self, weights):
        if weights is None:
            return np.ones(self.n)
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != self.n:
            raise DimensionMismatch(f"expected {self.n} weights, got {w.shape[0]}")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        return w[self.order]


def as_cox_data(data) -> CoxData:
    """Coerce a :class:`TrialDataset`, a ``(times, statuses, covariates)`` triple
    or an existing :class:`CoxData` into :class:`CoxData`."""
    if isinstance(data, CoxData):
        return data
    if isinstance(data, TrialDataset):
        return CoxData(data.times, data.statuses, data.covariates)
    times, statuses, covariates = data
    return CoxData(times, statuses, covariates)


def _suffix(a):
    return np.flip(np.cumsum(np.flip(a, axis=0), axis=0), axis=0)


def _check_weights(cd: CoxData, w):
    if not np.any(w > 0):
        raise AllWeightsZero("all weights are zero")
    if not np.any((cd.d == 1) & (w > 0)):
        raise AllWeightsZero("no event carries positive weight")


def _evaluate(cd: CoxData, beta, w, order=2):
    """Log-partial likelihood and (optionally) its gradient and Hessian.

    `w` is already in sorted order.
    """
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.shape[0] != cd.p:
        raise DimensionMismatch(f"beta has length {beta.shape[0]}, expected {cd.p}")
    eta = cd.X @ beta
    pos = w > 0
    shift = eta[pos].max()
    e = np.where(pos, w * np.exp(np.minimum(eta - shift, 700.0)), 0.0)
    s0 = _suffix(e)[cd.first]
    ev = (cd.d == 1) & pos
    if np.any(s0[ev] <= 0):
        raise EmptyRiskSet("a weighted event time has an empty weighted risk set")
    we = w[ev]
    loglik = float(np.sum(we * (eta[ev] - shift - np.log(s0[ev]))))
    if order == 0:
        return loglik, None, None
    s1 = _suffix(e[:, None] * cd.X)[cd.first][ev]
    xbar = s1 / s0[ev, None]
    grad = we @ (cd.X[ev] - xbar)
    s2 = _suffix(e[:, None, None] * cd._xx)[cd.first][ev]
    cov = s2 / s0[ev, None, None] - xbar[:, :, None] * xbar[:, None, :]
    hess = -np.tensordot(we, cov, axes=1)
    hess = 0.5 * (hess + hess.T)
    return loglik, grad, hess


def _floored(w, weight_floor):
    return np.where(w >= weight_floor, w, 0.0) if weight_floor > 0 else w


def weighted_partial_loglik(beta, data, weights=None) -> float:
    """Weighted log-partial likelihood.

    ``sum_i d_i w_i [b'x_i - log sum_{j: t_j >= t_i} w_j exp(b'x_j)]``
    """
    cd = as_cox_data(data)
    w = cd.sorted_weights(weights)
    _check_weights(cd, w)
    return _evaluate(cd, beta, w, order=0)[0]


def partial_lik_gradient_hessian(beta, data, weights=None):
    """Analytic gradient and Hessian of :func:`weighted_partial_loglik`."""
    cd = as_cox_data(data)
    w = cd.sorted_weights(weights)
    _check_weights(cd, w)
    _, grad, hess = _evaluate(cd, beta, w)
    return grad, hess


@dataclass(frozen=True)
class CoxOptions:
    max_iter: int = 100
    grad_tol: float = 1e-8
    step_halving_max: int = 20
    weight_floor: float = WEIGHT_FLOOR


@dataclass(frozen=True, eq=False)
class WeightedCoxFit:
    beta: np.ndarray
    std_errors: np.ndarray
    log_partial_lik: float
    iterations: int
    converged: bool
    covariance: np.ndarray
    gradient: np.ndarray
    loglik_path: tuple[float, ...] = field(default=())
    monotone_likelihood: bool = False
    ridge_used: bool = False

    @property
    def hazard_ratios(self) -> np.ndarray:
        return np.exp(self.beta)

    @property
    def wald_z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.beta / self.std_errors

    @property
    def wald_p(self) -> np.ndarray:
        z = np.nan_to_num(self.wald_z, nan=0.0)
        return 2.0 * stats.norm.sf(np.abs(z))


def _newton_direction(grad, hess):
    """Solve (-H) s = g via Cholesky, with a single ridge retry."""
    neg = -hess
    for ridge in (0.0, RIDGE):
        try:
            chol = np.linalg.cholesky(neg + ridge * np.eye(neg.shape[0]))
        except np.linalg.LinAlgError:
            continue
        y = np.linalg.solve(chol, grad)
        return np.linalg.solve(chol.T, y), ridge > 0
    raise SingularHessian("information matrix is singular even after ridge")


def _covariance(hess):
    neg = -hess
    for ridge in (0.0, RIDGE):
        try:
            chol = np.linalg.cholesky(neg + ridge * np.eye(neg.shape[0]))
        except np.linalg.LinAlgError:
            continue
        inv_chol = np.linalg.inv(chol)
        return inv_chol.T @ inv_chol, ridge > 0
    raise SingularHessian("information matrix is singular even after ridge")


def fit_weighted_cox(data, weights=None, options: CoxOptions | None = None,
                     beta0=None) -> WeightedCoxFit:
    """Maximize the weighted log-partial likelihood by damped Newton-Raphson.

    Starts from `beta0` (zero by default). A warm start whose information matrix
    is singular is abandoned for the zero start, unless a coefficient already
    exceeds the divergence threshold: then the fit stays at `beta0`, so the
    objective never falls below its value at the warm start. A Newton step is halved until the
    objective does not decrease, at most ``options.step_halving_max`` times.
    Iteration stops when the gradient's max-norm drops below
    ``options.grad_tol``. Rows with weight below ``options.weight_floor`` are
    dropped from the fit.

    A fit that fails to converge is returned with ``converged=False`` and a
    warning. When any coefficient exceeds 50 in magnitude the likelihood is
    taken to be monotone, iteration stops and ``monotone_likelihood`` is set.
    The flag is also set when the gradient has vanished but the next Newton
    step would still move a coefficient by more than ``1e-4 * max(1, |b|)``.
    """
    opts = options or CoxOptions()
    cd = as_cox_data(data)
    w = _floored(cd.sorted_weights(weights), opts.weight_floor)
    _check_weights(cd, w)
    beta = np.zeros(cd.p) if beta0 is None else np.array(beta0, dtype=float).reshape(-1)
    if beta.shape[0] != cd.p:
        raise DimensionMismatch(f"beta0 has length {beta.shape[0]}, expected {cd.p}")

    loglik, grad, hess = _evaluate(cd, beta, w)
    path = [loglik]
    iterations = 0
    converged = False
    monotone = False
    ridge_used = False
    while True:
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < opts.grad_tol:
            converged = True
            break
        if iterations >= opts.max_iter:
            break
        try:
            step, ridged = _newton_direction(grad, hess)
        except SingularHessian:
            if np.max(np.abs(beta)) > DIVERGENCE_THRESHOLD:
                # already diverged along a flat ridge: stay put rather than restart lower
                monotone = True
                break
            if beta0 is not None:
                # a warm start on a flat ridge; the cold start is well defined
                return fit_weighted_cox(cd, weights, opts, None)
            raise
        ridge_used |= ridged
        scale = 1.0
        accepted = None
        rounding = 1e-12 * max(1.0, abs(loglik))
        for _ in range(opts.step_halving_max + 1):
            cand = beta + scale * step
            try:
                l2, g2, h2 = _evaluate(cd, cand, w)
            except (FloatingPointError, NumericalError):
                l2 = -np.inf
            if np.isfinite(l2):
                if l2 >= loglik:
                    accepted = (cand, l2, g2, h2)
                    break
                # at the optimum, round-off can mask a genuine improvement
                if l2 >= loglik - rounding and np.max(np.abs(g2)) < gnorm:
                    accepted = (cand, l2, g2, h2)
                    break
            scale *= 0.5
        if accepted is None:
            break
        beta, loglik, grad, hess = accepted
        path.append(loglik)
        iterations += 1
        if np.max(np.abs(beta)) > DIVERGENCE_THRESHOLD:
            monotone = True
            break

    monotone |= bool(np.max(np.abs(beta)) > DIVERGENCE_THRESHOLD)
    try:
        cov, ridged = _covariance(hess)
    except SingularHessian:
        if not monotone:
            raise
        # a diverged fit has no usable information matrix: report infinite uncertainty
        cov, ridged = np.diag(np.full(cd.p, np.inf)), True
    if converged and not monotone:
        # a vanishing gradient with a still-large Newton step means the optimum is at
        # infinity: the likelihood flattens exponentially along a separating direction
        remaining = np.abs(cov @ grad)
        if np.any(remaining > INFINITE_STEP_TOL * np.maximum(1.0, np.abs(beta))):
            monotone = True
    if monotone:
        warnings.warn(f"monotone likelihood: a coefficient diverges (max |b| = "
                      f"{float(np.max(np.abs(beta))):.3g}); estimates are infinite in the limit",
                      RuntimeWarning, stacklevel=2)
    elif not converged:
        warnings.warn(f"Newton-Raphson did not converge (max |gradient| = "
                      f"{float(np.max(np.abs(grad))):.3g})", RuntimeWarning, stacklevel=2)
    return WeightedCoxFit(
        beta=beta,
        std_errors=np.sqrt(np.diag(cov)),
        log_partial_lik=loglik,
        iterations=iterations,
        converged=converged,
        covariance=cov,
        gradient=grad,
        loglik_path=tuple(path),
        monotone_likelihood=monotone,
        ridge_used=ridge_used or ridged,
    )


@dataclass(frozen=True, eq=False)
class BreslowBaseline:
    """Discrete baseline hazard: increments at event times and their running sum.

    The log-scale step functions stay finite when a diverging coefficient
    vector pushes the increments beyond the floating-point range.
    """

    increments: StepFunction
    cumulative: StepFunction
    log_increments: StepFunction
    log_cumulative: StepFunction

    def hazard_at(self, t):
        """Hazard increment at `t` (zero off the event-time knots)."""
        return self.increments.jump_at(t)

    def cumulative_at(self, t):
        return self.cumulative(t)

    def log_hazard_at(self, t):
        """Log hazard increment at `t` (-inf off the event-time knots)."""
        t = np.asarray(t, dtype=float)
        knots = self.log_increments.knots
        idx = np.clip(np.searchsorted(knots, t, side="left"), 0, max(knots.size - 1, 0))
        hit = (knots[idx] == t) if knots.size else np.zeros(t.shape, dtype=bool)
        out = np.where(hit, self.log_increments.values[idx] if knots.size else 0.0, -np.inf)
        return float(out) if out.ndim == 0 else out

    def log_cumulative_at(self, t):
        return self.log_cumulative(t)


def breslow_baseline(beta, data, weights=None, weight_floor: float = 0.0) -> BreslowBaseline:
    """Weighted Breslow baseline hazard.

    The increment at an event time ``t`` is the summed weight of the events at
    ``t`` divided by ``sum_{j: t_j >= t} w_j exp(b'x_j)``. Knots are all distinct
    event times of `data`, so an event whose weight is zero contributes a zero
    increment. Risk-set sums are accumulated on the log scale.
    """
    cd = as_cox_data(data)
    w = _floored(cd.sorted_weights(weights), weight_floor)
    if not np.any(w > 0):
        raise AllWeightsZero("all weights are zero")
    beta = np.asarray(beta, dtype=float).reshape(-1)
    eta = cd.X @ beta
    pos = w > 0
    with np.errstate(divide="ignore"):
        log_e = np.where(pos, np.log(np.where(pos, w, 1.0)) + eta, -np.inf)
    log_s0 = np.flip(np.logaddexp.accumulate(np.flip(log_e)))
    knots = cd.event_times
    start = np.searchsorted(cd.t, knots, side="left")
    log_denom = log_s0[start]
    ev = cd.d == 1
    numer = np.bincount(np.searchsorted(knots, cd.t[ev]), weights=w[ev],
                        minlength=knots.size)
    if np.any((numer > 0) & ~np.isfinite(log_denom)):
        raise EmptyRiskSet("positively weighted event with an empty risk set")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        log_inc = np.where(numer > 0, np.log(numer) - log_denom, -np.inf)
        log_cum = np.logaddexp.accumulate(log_inc)
        inc = np.exp(log_inc)
        cum = np.exp(log_cum)
    return BreslowBaseline(
        increments=StepFunction(knots, inc, 0.0),
        cumulative=StepFunction(knots, cum, 0.0),
        log_increments=StepFunction(knots, log_inc, -np.inf),
        log_cumulative=StepFunction(knots, log_cum, -np.inf),
    )
