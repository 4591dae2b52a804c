"""Semi-supervised two-component Cox mixture fitted by EM.

Component 1 is the responder group, component 2 the non-responder group.
Labeled (experimental-arm) rows carry their known component as a fixed one-hot
membership row; unlabeled (control-arm) rows get posterior memberships from the
E-step. The M-step updates the mixing probabilities as the column means of the
membership matrix and fits one weighted Cox model per component, with the
membership column as case weights, followed by its weighted Breslow baseline.

All density work is done in log space. A zero density is represented by
:data:`LOG_ZERO` rather than ``-inf`` so that sums stay finite.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cox import (
    BreslowBaseline,
    CoxData,
    CoxOptions,
    WeightedCoxFit,
    as_cox_data,
    breslow_baseline,
    fit_weighted_cox,
    weighted_partial_loglik,
)
from .errors import ComponentCollapsed, DualCoxError, EmptyLabeledComponent
from .survival import TrialDataset

log = logging.getLogger(__name__)

LOG_ZERO = -1e300
INIT_METHODS = ("pi_prior", "uniform_random", "boundary_bernoulli")
CONVERGENCE_MODES = ("and", "or-compat")
COLLAPSE_MASS = 1.0


class MaxIterWarning(RuntimeWarning):
    pass


def _safe_log(a):
    a = np.asarray(a, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), LOG_ZERO)


@dataclass(frozen=True, eq=False)
class DualCoxModel:
    pi: np.ndarray
    betas: np.ndarray
    baselines: tuple[BreslowBaseline, BreslowBaseline]

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        if pi.shape != (2,) or np.any(pi < 0) or np.any(pi > 1) or abs(pi.sum() - 1) > 1e-12:
            raise ValueError(f"invalid mixing probabilities {pi}")

    @property
    def baseline_increments(self):
        return tuple(b.increments for b in self.baselines)

    @property
    def baseline_cumulative(self):
        return tuple(b.cumulative for b in self.baselines)

    def swapped(self) -> "DualCoxModel":
        return DualCoxModel(self.pi[::-1].copy(), self.betas[::-1].copy(),
                            (self.baselines[1], self.baselines[0]))


def component_log_density(time, status, x, beta, baseline: BreslowBaseline):
    """Log density of one Cox component with a discrete baseline.

    ``status * (log h0(t) + b'x) - exp(b'x) * H0(t)``; works elementwise on
    arrays of subjects (`x` of shape ``(n, p)``). A zero hazard at an event
    gives :data:`LOG_ZERO`.
    """
    time = np.asarray(time, dtype=float)
    status = np.asarray(status)
    x = np.asarray(x, dtype=float)
    eta = x @ np.asarray(beta, dtype=float)
    log_h = baseline.log_hazard_at(time)
    log_H = baseline.log_cumulative_at(time)
    # exp(eta) * H evaluated as exp(eta + log H): finite even when H itself overflows
    with np.errstate(over="ignore"):
        surv_part = -np.exp(eta + log_H)
    event_part = np.where(status == 1, log_h + eta, 0.0)
    out = np.where((status == 1) & np.isneginf(log_h), LOG_ZERO, event_part + surv_part)
    out = np.maximum(out, LOG_ZERO)
    return float(out) if np.ndim(out) == 0 else out


def log_densities(dataset: TrialDataset, model: DualCoxModel) -> np.ndarray:
    """``(n, 2)`` matrix of per-component log densities."""
    return np.column_stack([
        component_log_density(dataset.times, dataset.statuses, dataset.covariates,
                              model.betas[k], model.baselines[k])
        for k in range(2)
    ])


def labeled_memberships(dataset: TrialDataset) -> np.ndarray:
    """One-hot rows for labeled samples; zeros for unlabeled rows."""
    z = np.zeros((dataset.n, 2))
    lab = dataset.labeled
    z[lab, dataset.response[lab] - 1] = 1.0
    return z


def _joint_log(logf, pi):
    return logf + _safe_log(pi)[None, :]


def e_step(dataset: TrialDataset, model: DualCoxModel, logf=None) -> np.ndarray:
    """Posterior memberships; labeled rows are returned as their fixed one-hot rows.

    Rows where both components have zero density fall back to the prior ``pi``.
    """
    if logf is None:
        logf = log_densities(dataset, model)
    u = labeled_memberships(dataset)
    unl = ~dataset.labeled
    if not unl.any():
        return u
    a = _joint_log(logf[unl], model.pi)
    norm = np.logaddexp(a[:, 0], a[:, 1])
    post = np.exp(a - norm[:, None])
    degenerate = np.all(a <= LOG_ZERO / 2, axis=1)
    if degenerate.any():
        log.debug("%d unlabeled rows have zero density under both components",
                  int(degenerate.sum()))
        post[degenerate] = model.pi
    post[:, 1] = 1.0 - post[:, 0]
    u[unl] = post
    return u


def m_step_pi(memberships) -> np.ndarray:
    """Mixing probabilities as the column means of the full membership matrix."""
    return np.asarray(memberships, dtype=float).mean(axis=0)


@dataclass(frozen=True, eq=False)
class ComponentFit:
    beta: np.ndarray
    fit: WeightedCoxFit
    baseline: BreslowBaseline


def m_step_beta_and_baseline(dataset: TrialDataset, memberships, cox_options=None,
                             beta_start=None, cox_data: CoxData | None = None):
    """Weighted Cox fit and Breslow baseline for each component.

    Column ``k`` of `memberships` supplies the case weights of component ``k``;
    the same (floored) weights enter both the coefficient fit and the baseline.
    """
    opts = cox_options or CoxOptions()
    cd = cox_data if cox_data is not None else as_cox_data(dataset)
    u = np.asarray(memberships, dtype=float)
    for k in range(2):
        mass = float(u[:, k].sum())
        if mass < COLLAPSE_MASS:
            raise ComponentCollapsed(
                f"component {k + 1} has total membership {mass:.3g} < {COLLAPSE_MASS}; "
                "try other initial values or more restarts")
    out = []
    for k in range(2):
        start = None if beta_start is None else beta_start[k]
        fit = fit_weighted_cox(cd, u[:, k], opts, beta0=start)
        base = breslow_baseline(fit.beta, cd, u[:, k], weight_floor=opts.weight_floor)
        out.append(ComponentFit(fit.beta, fit, base))
    return tuple(out)


def observed_loglik(dataset: TrialDataset, model: DualCoxModel, logf=None) -> float:
    """Observed-data log-likelihood of the mixture.

    Labeled rows contribute ``log pi_z + log f_z``; unlabeled rows contribute
    ``log sum_k pi_k f_k``.
    """
    if logf is None:
        logf = log_densities(dataset, model)
    a = _joint_log(logf, model.pi)
    lab = dataset.labeled
    terms = []
    if lab.any():
        terms.append(a[lab, dataset.response[lab] - 1])
    if (~lab).any():
        terms.append(np.logaddexp(a[~lab, 0], a[~lab, 1]))
    return math.fsum(np.concatenate(terms))


def expected_complete_loglik(memberships, model: DualCoxModel, logf) -> float:
    u = np.asarray(memberships, dtype=float)
    a = _joint_log(logf, model.pi)
    return math.fsum(np.where(u > 0, u * a, 0.0).ravel())


def profile_complete_loglik(cox_data, memberships, model: DualCoxModel,
                            weight_floor: float) -> float:
    """Weighted log-partial likelihoods of both components plus ``sum u log pi``."""
    u = np.asarray(memberships, dtype=float)
    total = 0.0
    for k in range(2):
        w = np.where(u[:, k] >= weight_floor, u[:, k], 0.0)
        total += weighted_partial_loglik(model.betas[k], cox_data, w)
    return total + math.fsum(np.where(u > 0, u * _safe_log(model.pi)[None, :], 0.0).ravel())


def check_convergence(values: Sequence[float], abstol: float = 1e-5,
                      reltol: float = 1e-7, mode: str = "and"):
    """Stopping rule on the last two monitored log-likelihood values.

    ``"and"`` requires ``|dl| < abstol`` and ``|dl / l| < reltol`` together;
    ``"or-compat"`` stops when ``|dl| < abstol`` or
    ``|dl| < |reltol * (l + reltol)|``. Returns ``(converged, reason)``.
    """
    if mode not in CONVERGENCE_MODES:
        raise ValueError(f"unknown convergence mode {mode!r}")
    if len(values) < 2:
        return False, "too few iterations"
    now, last = float(values[-1]), float(values[-2])
    if not (math.isfinite(now) and math.isfinite(last)):
        return False, "non-finite log-likelihood"
    diff = abs(now - last)
    abs_ok = diff < abstol
    if mode == "and":
        rel_ok = (diff == 0.0) if now == 0 else diff / abs(now) < reltol
        if abs_ok and rel_ok:
            return True, "absolute and relative change below tolerance"
        return False, "not converged"
    if abs_ok:
        return True, "absolute change below tolerance"
    if diff < abs(reltol * (now + reltol)):
        return True, "relative change below tolerance"
    return False, "not converged"


def _rng(seed: int, restart: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(restart)])))


def initialize(dataset: TrialDataset, method: str = "pi_prior", seed: int = 0,
               restart: int = 0):
    """Initial memberships and mixing probabilities.

    ``pi0`` is the labeled responder / non-responder split. Unlabeled rows get
    ``u_1`` drawn from Bernoulli(0.5) (``"boundary_bernoulli"``), Uniform(0, 1)
    (``"uniform_random"``) or set to ``pi0[0]`` (``"pi_prior"``).
    """
    if method not in INIT_METHODS:
        raise ValueError(f"unknown init method {method!r}; choose from {INIT_METHODS}")
    z = labeled_memberships(dataset)
    counts = z[dataset.labeled].sum(axis=0)
    if np.any(counts == 0):
        missing = [k + 1 for k in range(2) if counts[k] == 0]
        raise EmptyLabeledComponent(f"no labeled rows in component(s) {missing}")
    pi0 = counts / counts.sum()
    unl = ~dataset.labeled
    m = int(unl.sum())
    rng = _rng(seed, restart)
    if method == "pi_prior":
        u1 = np.full(m, pi0[0])
    elif method == "uniform_random":
        u1 = rng.random(m)
    else:
        u1 = (rng.random(m) < 0.5).astype(float)
    z[unl, 0] = u1
    z[unl, 1] = 1.0 - u1
    return z, pi0


def classify(memberships) -> np.ndarray:
    """Argmax component per row (1 or 2); exact ties go to component 1."""
    u = np.asarray(memberships, dtype=float)
    return np.where(u[:, 0] >= u[:, 1], 1, 2)


@dataclass(frozen=True)
class FitOptions:
    init_method: str = "pi_prior"
    restarts: int = 1
    seed: int = 0
    abstol: float = 1e-5
    reltol: float = 1e-7
    max_em_iter: int = 1000
    convergence: str = "and"
    cox: CoxOptions = field(default_factory=CoxOptions)

    def __post_init__(self):
        if self.init_method not in INIT_METHODS:
            raise ValueError(f"unknown init method {self.init_method!r}")
        if self.convergence not in CONVERGENCE_MODES:
            raise ValueError(f"unknown convergence mode {self.convergence!r}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class EmTrace:
    observed_loglik: list = field(default_factory=list)
    complete_loglik: list = field(default_factory=list)
    profile_loglik: list = field(default_factory=list)
    pi: list = field(default_factory=list)
    max_dbeta: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.observed_loglik)


@dataclass(frozen=True, eq=False)
class FitReport:
    model: DualCoxModel
    memberships: np.ndarray
    component_fits: tuple[WeightedCoxFit, WeightedCoxFit]
    trace: EmTrace
    unlabeled_index: np.ndarray
    restart: int = 0
    seed: int = 0
    init_method: str = "pi_prior"
    failed_restarts: int = 0

    @property
    def classifications(self) -> np.ndarray:
        """Component labels of the unlabeled rows, in dataset order."""
        return classify(self.memberships[self.unlabeled_index])

    @property
    def all_classes(self) -> np.ndarray:
        return classify(self.memberships)

    @property
    def loglik(self) -> float:
        return self.trace.observed_loglik[-1]

    @property
    def iterations(self) -> int:
        return self.trace.iterations

    @property
    def converged(self) -> bool:
        return self.trace.converged

    @property
    def control_response_rate(self) -> float:
        """Share of unlabeled rows classified as responders (nan if none)."""
        c = self.classifications
        return float(np.mean(c == 1)) if c.size else float("nan")

    @property
    def experimental_response_rate(self) -> float:
        lab = np.setdiff1d(np.arange(self.memberships.shape[0]), self.unlabeled_index)
        return float(self.memberships[lab, 0].mean()) if lab.size else float("nan")


def _run_em(dataset, cd, u, pi, opts: FitOptions):
    trace = EmTrace()
    betas = np.zeros((2, dataset.p))
    floor = opts.cox.weight_floor
    comps = model = logf = u_new = None
    for _ in range(opts.max_em_iter):
        comps = m_step_beta_and_baseline(dataset, u, opts.cox, beta_start=betas, cox_data=cd)
        new_betas = np.vstack([c.beta for c in comps])
        model = DualCoxModel(np.asarray(pi, dtype=float),
                             new_betas, (comps[0].baseline, comps[1].baseline))
        logf = log_densities(dataset, model)
        trace.observed_loglik.append(observed_loglik(dataset, model, logf))
        trace.complete_loglik.append(expected_complete_loglik(u, model, logf))
        if opts.convergence == "or-compat":
            trace.profile_loglik.append(profile_complete_loglik(cd, u, model, floor))
        trace.pi.append(tuple(float(v) for v in model.pi))
        trace.max_dbeta.append(float(np.max(np.abs(new_betas - betas))))
        betas = new_betas
        u_new = e_step(dataset, model, logf)
        series = trace.observed_loglik if opts.convergence == "and" else trace.profile_loglik
        done, reason = check_convergence(series, opts.abstol, opts.reltol, opts.convergence)
        if done:
            trace.converged, trace.reason = True, reason
            break
        u, pi = u_new, m_step_pi(u_new)
    else:
        trace.reason = "maximum EM iterations reached"
        warnings.warn("EM iterations reached max_em_iter", MaxIterWarning, stacklevel=3)
    return model, u_new, tuple(c.fit for c in comps), trace


def fit(dataset: TrialDataset, options: FitOptions | None = None) -> FitReport:
    """Fit the two-component semi-supervised Cox mixture.

    With ``options.restarts = R`` the EM is run from R initial values (seeded
    from ``(options.seed, r)``) and the run with the largest observed-data
    log-likelihood is kept, ties going to fewer iterations, then to the lower
    restart index.
    """
    opts = options or FitOptions()
    cd = as_cox_data(dataset)
    unl_index = np.flatnonzero(~dataset.labeled)

    if unl_index.size == 0:
        u, pi = initialize(dataset, "pi_prior", opts.seed)
        comps = m_step_beta_and_baseline(dataset, u, opts.cox, cox_data=cd)
        model = DualCoxModel(pi, np.vstack([c.beta for c in comps]),
                             (comps[0].baseline, comps[1].baseline))
        logf = log_densities(dataset, model)
        trace = EmTrace(
            observed_loglik=[observed_loglik(dataset, model, logf)],
            complete_loglik=[expected_complete_loglik(u, model, logf)],
            profile_loglik=[profile_complete_loglik(cd, u, model, opts.cox.weight_floor)],
            pi=[tuple(float(v) for v in pi)],
            max_dbeta=[float(np.max(np.abs(model.betas)))],
            converged=True,
            reason="fully labeled: no E-step required",
        )
        return FitReport(model, u, tuple(c.fit for c in comps), trace, unl_index,
                         0, opts.seed, opts.init_method)

    best = None
    failures = []
    for r in range(opts.restarts):
        u0, pi0 = initialize(dataset, opts.init_method, opts.seed, r)
        try:
            model, u, fits, trace = _run_em(dataset, cd, u0, pi0, opts)
        except ComponentCollapsed as exc:
            failures.append(exc)
            log.info("restart %d failed: %s", r, exc)
            continue
        key = (-trace.observed_loglik[-1], trace.iterations, r)
        if best is None or key < best[0]:
            best = (key, FitReport(model, u, fits, trace, unl_index, r, opts.seed,
                                   opts.init_method))
    if best is None:
        raise failures[-1]
    return replace(best[1], failed_restarts=len(failures))


__all__ = [
    "ComponentFit", "DualCoxError", "DualCoxModel", "EmTrace", "FitOptions", "FitReport",
    "LOG_ZERO", "MaxIterWarning", "check_convergence", "classify", "component_log_density",
    "e_step", "fit", "initialize", "labeled_memberships", "log_densities",
    "m_step_beta_and_baseline", "m_step_pi", "observed_loglik",
]
