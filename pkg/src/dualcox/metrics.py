"""Scoring metrics and time-dependent ROC diagnostics.

The ROC estimators are the incident sensitivity / dynamic specificity pair
under proportional hazards: sensitivity at ``(c, t)`` is the share of the risk
set ``{Y >= t}`` with marker above ``c``, each subject weighted by
``exp(b'x)``; specificity is the unweighted share of the survivor set
``{Y > t}`` with marker at or below ``c``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .cox import CoxOptions, fit_weighted_cox
from .errors import EmptyInput, EmptyRiskSet, EmptySurvivorSet


def classification_accuracy(predicted, truth) -> float:
    predicted = np.asarray(predicted).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if predicted.size == 0:
        raise EmptyInput("no labels to score")
    if predicted.shape != truth.shape:
        raise ValueError("predicted and truth differ in length")
    return float(np.mean(predicted == truth))


def bias_stats(estimates, truth: float):
    """Mean, SD (n - 1 denominator), bias and relative bias of replicate estimates.

    Relative bias is ``None`` when `truth` is zero; SD is nan for a single estimate.
    """
    est = np.asarray(estimates, dtype=float).reshape(-1)
    if est.size == 0:
        raise EmptyInput("no estimates")
    mean = math.fsum(est) / est.size
    sd = math.sqrt(math.fsum((est - mean) ** 2) / (est.size - 1)) if est.size > 1 else float("nan")
    bias = mean - truth
    rel = bias / truth if truth != 0 else None
    return mean, sd, bias, rel


def _weights(lp, mask):
    lp = np.asarray(lp, dtype=float)
    shift = lp[mask].max()
    return np.exp(lp - shift)


def incident_sensitivity(c, t, markers, times, linear_predictors) -> float:
    markers = np.asarray(markers, dtype=float)
    times = np.asarray(times, dtype=float)
    at_risk = times >= t
    if not at_risk.any():
        raise EmptyRiskSet(f"no subject at risk at t={t}")
    w = _weights(linear_predictors, at_risk)[at_risk]
    return float(np.sum(w * (markers[at_risk] > c)) / np.sum(w))


def dynamic_specificity(c, t, markers, times) -> float:
    markers = np.asarray(markers, dtype=float)
    times = np.asarray(times, dtype=float)
    surv = times > t
    n_t = int(surv.sum())
    if n_t == 0:
        raise EmptySurvivorSet(f"no subject survives past t={t}")
    return 1.0 - float(np.sum(markers[surv] > c)) / n_t


@dataclass(frozen=True, eq=False)
class RocCurveAtTime:
    t: float
    thresholds: np.ndarray
    sensitivity: np.ndarray
    one_minus_specificity: np.ndarray
    auc: float


def roc_at_time(t, times, linear_predictors, markers=None) -> RocCurveAtTime:
    """ROC curve at time `t`, thresholds swept from the largest marker down to -inf.

    `markers` default to the linear predictors. Thresholds are the distinct
    marker values of the risk set in decreasing order followed by -inf. The
    largest marker gives the point (0, 0) and -inf gives (1, 1), so the curve
    always spans both corners. AUC is the trapezoidal area.
    """
    times = np.asarray(times, dtype=float)
    lp = np.asarray(linear_predictors, dtype=float)
    markers = lp if markers is None else np.asarray(markers, dtype=float)
    at_risk = times >= t
    surv = times > t
    if not at_risk.any():
        raise EmptyRiskSet(f"no subject at risk at t={t}")
    if not surv.any():
        raise EmptySurvivorSet(f"no subject survives past t={t}")
    w = _weights(lp, at_risk)[at_risk]
    m_risk = markers[at_risk]
    m_surv = markers[surv]
    thresholds = np.concatenate((np.unique(m_risk)[::-1], [-np.inf]))
    # counts of marker > c for every threshold via sorted cumulative sums
    order = np.argsort(m_risk)
    ms = m_risk[order]
    wcum = np.concatenate(([0.0], np.cumsum(w[order])))
    above_w = wcum[-1] - wcum[np.searchsorted(ms, thresholds, side="right")]
    sens = above_w / wcum[-1]
    ss = np.sort(m_surv)
    fpr = (ss.size - np.searchsorted(ss, thresholds, side="right")) / ss.size
    sens[-1], fpr[-1] = 1.0, 1.0
    auc = float(np.trapezoid(sens, fpr)) if hasattr(np, "trapezoid") else float(np.trapz(sens, fpr))
    return RocCurveAtTime(float(t), thresholds, sens, fpr, auc)


def auc_over_times(time_grid, times, linear_predictors, markers=None):
    """AUC at each grid time; times with an empty risk or survivor set are skipped.

    Returns ``(curves, omitted)`` where `curves` is a list of
    :class:`RocCurveAtTime` and `omitted` lists the skipped times.
    """
    curves, omitted = [], []
    for t in time_grid:
        try:
            curves.append(roc_at_time(t, times, linear_predictors, markers))
        except (EmptyRiskSet, EmptySurvivorSet):
            omitted.append(float(t))
    return curves, omitted


def roc_curves_csv(curves, group: str | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["t", "c", "sensitivity", "one_minus_specificity"]
    w.writerow((["group"] if group is not None else []) + head)
    for cur in curves:
        for c, se, fp in zip(cur.thresholds, cur.sensitivity, cur.one_minus_specificity):
            row = [f"{cur.t:.10g}", f"{c:.10g}", f"{se:.10g}", f"{fp:.10g}"]
            w.writerow(([group] if group is not None else []) + row)
    return buf.getvalue()


SUBGROUPS = ("responders", "non_responders", "overall")


def subgroup_auc(dataset, groups, time_grid, cox_options: CoxOptions | None = None):
    """AUC(t) from separate Cox fits on responders, non-responders and everyone.

    `groups` assigns every row of `dataset` to component 1 or 2. Each group gets
    its own unweighted Cox fit and its own linear predictor as the marker.
    Returns ``{name: (curves, omitted)}`` as from :func:`auc_over_times`.
    """
    groups = np.asarray(groups)
    out = {}
    for name, mask in zip(SUBGROUPS, (groups == 1, groups == 2,
                                      np.ones(dataset.n, dtype=bool))):
        sub = dataset if mask.all() else dataset.subset(mask)
        cfit = fit_weighted_cox(sub, None, cox_options)
        lp = sub.covariates @ cfit.beta
        out[name] = auc_over_times(time_grid, sub.times, lp)
    return out
