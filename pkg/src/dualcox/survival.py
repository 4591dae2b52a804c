"""Survival-data containers, validation, Kaplan-Meier and the log-rank test."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import (
    DimensionMismatch,
    MissingResponseOnLabeled,
    NoEvents,
    NonFiniteCovariate,
    NonPositiveTime,
    ResponsePresentOnUnlabeled,
    SchemaError,
)

RESERVED_COLUMNS = ("id", "time", "status", "arm", "response")


@dataclass(frozen=True)
class SurvivalSample:
    """One subject.

    ``response`` is 1 (responder) or 2 (non-responder) for labeled subjects and
    ``None`` otherwise.
    """

    time: float
    status: int
    covariates: tuple[float, ...]
    labeled: bool
    response: int | None = None
    id: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.time) and self.time > 0):
            raise NonPositiveTime(f"time must be positive and finite, got {self.time!r}")
        if self.status not in (0, 1):
            raise SchemaError(f"status must be 0 or 1, got {self.status!r}")
        if self.labeled and self.response is None:
            raise MissingResponseOnLabeled(f"labeled sample {self.id!r} has no response")
        if not self.labeled and self.response is not None:
            raise ResponsePresentOnUnlabeled(f"unlabeled sample {self.id!r} has a response")
        if self.response is not None and self.response not in (1, 2):
            raise SchemaError(f"response must be 1 or 2, got {self.response!r}")
        if not all(math.isfinite(v) for v in self.covariates):
            raise NonFiniteCovariate(f"sample {self.id!r} has a non-finite covariate")

    @property
    def arm(self) -> str:
        return "labeled" if self.labeled else "unlabeled"


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Column-ordered collection of validated samples.

    The arrays are the canonical storage; :attr:`samples` rebuilds row objects
    on demand. ``response`` holds 0 for unlabeled rows.
    """

    ids: tuple[str, ...]
    times: np.ndarray
    statuses: np.ndarray
    covariates: np.ndarray
    labeled: np.ndarray
    response: np.ndarray
    covariate_names: tuple[str, ...]

    def __post_init__(self):
        for name in ("times", "statuses", "covariates", "labeled", "response"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def from_arrays(cls, times, statuses, covariates, labeled, response=None,
                    covariate_names=None, ids=None) -> "TrialDataset":
        """Build a dataset from arrays, enforcing every row invariant."""
        times = np.asarray(times, dtype=float).reshape(-1)
        n = times.shape[0]
        statuses = np.asarray(statuses).reshape(-1)
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates.reshape(n, -1)
        labeled = np.asarray(labeled, dtype=bool).reshape(-1)
        if response is None:
            response = np.zeros(n, dtype=int)
        response = np.asarray(response).reshape(-1)
        if not (statuses.shape[0] == covariates.shape[0] == labeled.shape[0]
                == response.shape[0] == n):
            raise DimensionMismatch("all columns must have the same number of rows")
        if n < 2:
            raise DimensionMismatch(f"need at least 2 samples, got {n}")
        p = covariates.shape[1]
        if covariate_names is None:
            covariate_names = tuple(f"x{j + 1}" for j in range(p))
        covariate_names = tuple(covariate_names)
        if len(covariate_names) != p:
            raise DimensionMismatch(
                f"{len(covariate_names)} covariate names for {p} covariate columns")
        if ids is None:
            ids = tuple(str(i + 1) for i in range(n))

        bad = np.flatnonzero(~(np.isfinite(times) & (times > 0)))
        if bad.size:
            raise NonPositiveTime(f"row {bad[0]}: time must be positive and finite")
        if not np.isin(statuses, (0, 1)).all():
            raise SchemaError("status must be 0 or 1")
        bad = np.flatnonzero(~np.isfinite(covariates).all(axis=1))
        if bad.size:
            raise NonFiniteCovariate(f"row {bad[0]}: non-finite covariate")
        bad = np.flatnonzero(labeled & ~np.isin(response, (1, 2)))
        if bad.size:
            raise MissingResponseOnLabeled(f"row {bad[0]}: labeled row lacks a response")
        bad = np.flatnonzero(~labeled & (response != 0))
        if bad.size:
            raise ResponsePresentOnUnlabeled(f"row {bad[0]}: unlabeled row has a response")

        return cls(
            ids=tuple(str(i) for i in ids),
            times=times.copy(),
            statuses=statuses.astype(int),
            covariates=covariates.copy(),
            labeled=labeled.copy(),
            response=response.astype(int),
            covariate_names=covariate_names,
        )

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_labeled(self) -> int:
        return int(self.labeled.sum())

    @property
    def n_unlabeled(self) -> int:
        return self.n - self.n_labeled

    @property
    def labeled_fraction(self) -> float:
        return self.n_labeled / self.n

    @property
    def censoring_rate(self) -> float:
        return 1.0 - float(self.statuses.mean())

    @property
    def has_tied_event_times(self) -> bool:
        ev = self.times[self.statuses == 1]
        return np.unique(ev).size < ev.size

    @property
    def samples(self) -> list[SurvivalSample]:
        return [
            SurvivalSample(
                time=float(self.times[i]),
                status=int(self.statuses[i]),
                covariates=tuple(float(v) for v in self.covariates[i]),
                labeled=bool(self.labeled[i]),
                response=int(self.response[i]) if self.labeled[i] else None,
                id=self.ids[i],
            )
            for i in range(self.n)
        ]

    def subset(self, mask) -> "TrialDataset":
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(int)
        return TrialDataset.from_arrays(
            self.times[idx], self.statuses[idx], self.covariates[idx],
            self.labeled[idx], self.response[idx], self.covariate_names,
            [self.ids[i] for i in idx])

    def summary(self) -> dict:
        return {
            "n": self.n,
            "n_labeled": self.n_labeled,
            "n_unlabeled": self.n_unlabeled,
            "censoring_rate": self.censoring_rate,
            "tied_event_times": self.has_tied_event_times,
        }


def _parse_float(value, what, line):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise SchemaError(f"{what} is not a number: {value!r}", line=line) from None


def _parse_int(value, what, allowed, line):
    text = str(value).strip()
    try:
        out = int(text)
    except ValueError:
        try:
            f = float(text)
        except ValueError:
            raise SchemaError(f"{what} must be one of {allowed}, got {value!r}",
                              line=line) from None
        if not f.is_integer():
            raise SchemaError(f"{what} must be one of {allowed}, got {value!r}", line=line)
        out = int(f)
    if out not in allowed:
        raise SchemaError(f"{what} must be one of {allowed}, got {value!r}", line=line)
    return out


def validate_dataset(rows: Iterable[Mapping], covariate_names: Sequence[str],
                     first_line: int | None = None) -> TrialDataset:
    """Validate raw tabular records into a :class:`TrialDataset`.

    Each record maps ``id``, ``time``, ``status``, ``arm`` (1 = experimental,
    labeled; 0 = control, unlabeled), ``response`` (1, 2 or empty) and every
    name in `covariate_names` to a value. Values may be strings as read from a
    CSV file. When `first_line` is given, errors carry the source line number
    of the offending record (``first_line`` for the first record).
    """
    covariate_names = tuple(covariate_names)
    if not covariate_names:
        raise DimensionMismatch("at least one covariate is required")
    ids, times, statuses, xs, labeled, response = [], [], [], [], [], []
    for k, row in enumerate(rows):
        line = None if first_line is None else first_line + k
        missing = [c for c in ("time", "status", "arm", *covariate_names) if c not in row]
        if missing:
            raise DimensionMismatch(f"missing field(s) {missing}", line=line)
        t = _parse_float(row["time"], "time", line)
        if not (math.isfinite(t) and t > 0):
            raise NonPositiveTime(f"time must be positive, got {row['time']!r}", line=line)
        status = _parse_int(row["status"], "status", (0, 1), line)
        arm = _parse_int(row["arm"], "arm", (0, 1), line)
        raw_resp = row.get("response")
        raw_resp = "" if raw_resp is None else str(raw_resp).strip()
        if arm == 1 and raw_resp == "":
            raise MissingResponseOnLabeled("labeled (arm=1) row lacks a response", line=line)
        if arm == 0 and raw_resp != "":
            raise ResponsePresentOnUnlabeled("control (arm=0) row has a response", line=line)
        resp = _parse_int(raw_resp, "response", (1, 2), line) if arm == 1 else 0
        x = []
        for name in covariate_names:
            v = _parse_float(row[name], f"covariate {name!r}", line)
            if not math.isfinite(v):
                raise NonFiniteCovariate(f"covariate {name!r} is not finite", line=line)
            x.append(v)
        ids.append(str(row.get("id", k + 1)))
        times.append(t)
        statuses.append(status)
        xs.append(x)
        labeled.append(arm == 1)
        response.append(resp)
    if len(times) < 2:
        raise DimensionMismatch(f"need at least 2 samples, got {len(times)}")
    return TrialDataset.from_arrays(times, statuses, np.array(xs, dtype=float), labeled,
                                    response, covariate_names, ids)


def read_csv(path, covariates: Sequence[str] | None = None) -> TrialDataset:
    """Read a trial CSV file.

    The header must contain ``id,time,status,arm,response``; covariates default
    to every other column in file order.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise SchemaError("empty file or missing header row", line=1)
        header = [h.strip() for h in header]
        reader.fieldnames = header
        absent = [c for c in RESERVED_COLUMNS if c not in header]
        if absent:
            raise SchemaError(f"header lacks required column(s) {absent}", line=1)
        if covariates is None:
            covariates = [h for h in header if h not in RESERVED_COLUMNS]
        unknown = [c for c in covariates if c not in header]
        if unknown:
            raise SchemaError(f"covariate column(s) {unknown} not in header", line=1)
        rows = []
        for k, row in enumerate(reader):
            if None in row or any(v is None for v in row.values()):
                raise SchemaError(f"expected {len(header)} fields", line=reader.line_num)
            rows.append(row)
    return validate_dataset(rows, covariates, first_line=2)


def write_csv(dataset: TrialDataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*RESERVED_COLUMNS, *dataset.covariate_names])
        for i in range(dataset.n):
            resp = str(dataset.response[i]) if dataset.labeled[i] else ""
            w.writerow([dataset.ids[i], repr(float(dataset.times[i])), int(dataset.statuses[i]),
                        int(dataset.labeled[i]), resp,
                        *(repr(float(v)) for v in dataset.covariates[i])])


class StepFunction:
    """Right-continuous step function.

    Evaluation at ``t`` returns the value attached to the last knot ``<= t``,
    or `value_before_first` when ``t`` precedes every knot.
    """

    def __init__(self, knots, values, value_before_first=0.0):
        knots = np.asarray(knots, dtype=float).reshape(-1)
        values = np.asarray(values, dtype=float).reshape(-1)
        if knots.shape != values.shape:
            raise DimensionMismatch("knots and values must have equal length")
        if knots.size > 1 and not np.all(np.diff(knots) > 0):
            raise ValueError("knots must be strictly increasing")
        knots.setflags(write=False)
        values.setflags(write=False)
        self.knots = knots
        self.values = values
        self.value_before_first = float(value_before_first)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        padded = np.concatenate(([self.value_before_first], self.values))
        out = padded[idx + 1]
        return float(out) if out.ndim == 0 else out

    def jump_at(self, t):
        """Value at `t` if `t` is exactly a knot, else 0 (increment semantics)."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="left")
        safe = np.minimum(idx, max(self.knots.size - 1, 0))
        hit = (idx < self.knots.size) & (self.knots[safe] == t) if self.knots.size else \
            np.zeros(t.shape, dtype=bool)
        out = np.where(hit, self.values[safe] if self.knots.size else 0.0, 0.0)
        return float(out) if out.ndim == 0 else out

    def __len__(self):
        return self.knots.size

    def __repr__(self):
        return f"StepFunction(n_knots={self.knots.size}, value_before_first={self.value_before_first})"


def _event_table(times, statuses):
    """Distinct event times with at-risk counts and event counts."""
    times = np.asarray(times, dtype=float).reshape(-1)
    statuses = np.asarray(statuses).reshape(-1)
    if times.shape != statuses.shape:
        raise DimensionMismatch("times and statuses differ in length")
    if times.size and not np.all(times > 0):
        raise NonPositiveTime("times must be positive")
    if not np.isin(statuses, (0, 1)).all():
        raise SchemaError("statuses must be 0 or 1")
    event_times = np.unique(times[statuses == 1])
    if event_times.size == 0:
        raise NoEvents("no observed events")
    sorted_t = np.sort(times)
    at_risk = times.size - np.searchsorted(sorted_t, event_times, side="left")
    deaths = np.bincount(np.searchsorted(event_times, times[statuses == 1]),
                         minlength=event_times.size)
    return event_times, at_risk, deaths


def kaplan_meier(times, statuses) -> StepFunction:
    """Kaplan-Meier survivor curve with knots at the distinct event times."""
    event_times, at_risk, deaths = _event_table(times, statuses)
    surv = np.cumprod((at_risk - deaths) / at_risk)
    return StepFunction(event_times, surv, value_before_first=1.0)


def logrank_test(times_a, statuses_a, times_b, statuses_b) -> tuple[float, float]:
    """Two-sample Mantel-Haenszel log-rank test.

    Returns the chi-square statistic (1 df) and its upper-tail p-value.
    """
    for t, s in ((times_a, statuses_a), (times_b, statuses_b)):
        if not np.any(np.asarray(s) == 1):
            raise NoEvents("each group needs at least one event")
    ta = np.asarray(times_a, dtype=float)
    sa = np.asarray(statuses_a)
    tb = np.asarray(times_b, dtype=float)
    sb = np.asarray(statuses_b)
    times = np.concatenate([ta, tb])
    statuses = np.concatenate([sa, sb])
    event_times, n_all, d_all = _event_table(times, statuses)
    n_a = ta.size - np.searchsorted(np.sort(ta), event_times, side="left")
    d_a = np.array([np.sum((ta == t) & (sa == 1)) for t in event_times])

    expected = d_all * n_a / n_all
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(
            n_all > 1,
            d_all * (n_a / n_all) * (1 - n_a / n_all) * (n_all - d_all) / (n_all - 1),
            0.0,
        )
    diff = math.fsum(d_a - expected)
    v = math.fsum(var)
    if v <= 0:
        return 0.0, 1.0
    statistic = diff * diff / v
    if abs(diff) < 1e-12 * max(1.0, math.fsum(d_all)):
        statistic = 0.0
    return float(statistic), float(stats.chi2.sf(statistic, df=1))
