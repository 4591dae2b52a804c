"""Two-component Cox mixture data generator and replication-study runner.

Random streams come from numpy's Philox4x64 counter-based generator. Replicate
``r`` of a study seeded with ``s`` draws from ``SeedSequence([s, r])``, so each
replicate is reproducible on its own and independent of scheduling.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .em import FitOptions, fit
from .errors import BisectionFailed, DualCoxError
from .metrics import bias_stats, classification_accuracy

BETA1_TRUE = (-1.0, 0.5, 3.0, 0.8)
BETA2_TRUE = (2.0, -0.1, -3.0, 0.2)
COVARIATE_NAMES = ("bin1", "bin2", "norm1", "norm2")


@dataclass(frozen=True)
class SimConfig:
    n: int = 1000
    pi_true: tuple[float, float] = (0.3, 0.7)
    beta1_true: tuple[float, ...] = BETA1_TRUE
    beta2_true: tuple[float, ...] = BETA2_TRUE
    scale: float = 35.0
    c: float = 6.5
    labeled_fraction: float = 0.5
    seed: int = 1
    replications: int = 1000

    def __post_init__(self):
        if abs(sum(self.pi_true) - 1.0) > 1e-12 or min(self.pi_true) < 0:
            raise ValueError(f"pi_true must be a probability pair, got {self.pi_true}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not math.isfinite(self.c):
            raise ValueError("c must be finite")
        if len(self.beta1_true) != len(self.beta2_true):
            raise ValueError("beta vectors differ in length")
        if len(self.beta1_true) != 4:
            raise ValueError("the generator draws exactly 4 covariates")
        if not 0 <= self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must lie in [0, 1]")
        if self.n < 2 or self.replications < 1:
            raise ValueError("need n >= 2 and replications >= 1")

    @property
    def n_component1(self) -> int:
        # round half up; Python's round() would use banker's rounding
        return int(math.floor(self.n * self.pi_true[0] + 0.5))

    @property
    def n_labeled(self) -> int:
        return int(math.floor(self.n * self.labeled_fraction))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(float(x)) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SimConfig":
        """Parse a flat ``key = value`` file whose keys are the field names."""
        parser = configparser.ConfigParser()
        parser.read_string("[sim]\n" + text)
        raw = dict(parser["sim"])
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ValueError(f"unknown config key(s): {unknown}")
        kwargs = {}
        for key, value in raw.items():
            default = getattr(cls(), key)
            if isinstance(default, tuple):
                kwargs[key] = tuple(float(v) for v in value.split(","))
            elif isinstance(default, int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "SimConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True, eq=False)
class SimulatedData:
    dataset: object
    true_labels: np.ndarray


def replicate_rng(seed: int, replicate_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), int(replicate_index)])
    return np.random.Generator(np.random.Philox(ss))


def survival_time(u, linear_predictor, scale):
    """Exponential event time ``-scale * log(u) / exp(x'b)``."""
    return -scale * np.log(u) / np.exp(linear_predictor)


def _draw(config: SimConfig, replicate_index: int):
    rng = replicate_rng(config.seed, replicate_index)
    n = config.n
    x = np.empty((n, 4))
    x[:, :2] = rng.binomial(1, 0.5, size=(n, 2))
    x[:, 2:] = rng.standard_normal((n, 2))
    n1 = config.n_component1
    labels = np.where(np.arange(n) < n1, 1, 2)
    betas = np.array([config.beta1_true, config.beta2_true])
    eta = np.einsum("ij,ij->i", x, betas[labels - 1])
    # open interval (0, 1): u = 1 would give a zero event time
    u = rng.uniform(np.nextafter(0.0, 1.0), 1.0, size=n)
    event_time = survival_time(u, eta, config.scale)
    cens_unit = rng.uniform(0.0, 1.0, size=n)
    labeled_idx = rng.permutation(n)[:config.n_labeled]
    return x, labels, event_time, cens_unit, labeled_idx


def generate_dataset(config: SimConfig, replicate_index: int = 0) -> SimulatedData:
    """Simulate one trial.

    The first ``round(n * pi1)`` rows come from component 1. Censoring times are
    Uniform(0, e^c); a uniformly random ``floor(n * labeled_fraction)`` rows are
    labeled with their true component.
    """
    from .survival import TrialDataset

    x, labels, event_time, cens_unit, labeled_idx = _draw(config, replicate_index)
    censor_time = cens_unit * math.exp(config.c)
    times = np.minimum(event_time, censor_time)
    status = (event_time <= censor_time).astype(int)
    # a zero censoring draw would give time 0; nudge it to the smallest positive float
    times = np.maximum(times, np.nextafter(0.0, 1.0))
    labeled = np.zeros(config.n, dtype=bool)
    labeled[labeled_idx] = True
    response = np.where(labeled, labels, 0)
    ids = [f"r{replicate_index}_{i + 1}" for i in range(config.n)]
    ds = TrialDataset.from_arrays(times, status, x, labeled, response, COVARIATE_NAMES, ids)
    return SimulatedData(ds, labels)


def censoring_rate(config: SimConfig, replicate_index: int = 0) -> float:
    _, _, event_time, cens_unit, _ = _draw(config, replicate_index)
    return float(np.mean(event_time > cens_unit * math.exp(config.c)))


def mean_censoring_rate(config: SimConfig, reps: int) -> float:
    return math.fsum(censoring_rate(config, r) for r in range(reps)) / reps


def calibrate_censoring(config: SimConfig, target_rate: float, reps: int = 50,
                        tol: float = 0.01, lo: float = -10.0, hi: float = 30.0,
                        max_iter: int = 60) -> float:
    """Find ``c`` whose mean simulated censoring rate is within `tol` of target.

    Replicates reuse the same random streams for every candidate ``c``, which
    makes the mean rate a non-increasing step function of ``c``.
    """
    if not 0 < target_rate < 1:
        raise ValueError("target_rate must lie in (0, 1)")
    draws = [_draw(config, r) for r in range(reps)]

    def rate(c):
        scale = math.exp(c)
        return math.fsum(float(np.mean(t > u * scale)) for _, _, t, u, _ in draws) / reps

    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        r = rate(mid)
        if best is None or abs(r - target_rate) < abs(best[1] - target_rate):
            best = (mid, r)
        if abs(r - target_rate) < 1e-4:
            break
        if r > target_rate:
            lo = mid
        else:
            hi = mid
    if best is None or abs(best[1] - target_rate) > tol:
        raise BisectionFailed(f"could not reach censoring rate {target_rate} "
                              f"(best {best[1] if best else float('nan'):.4f})")
    return best[0]


@dataclass(frozen=True)
class ReplicationResult:
    index: int
    betas: tuple[float, ...] = ()
    pi1: float = float("nan")
    accuracy: float = float("nan")
    censoring_rate: float = float("nan")
    iterations: int = 0
    loglik: float = float("nan")
    swapped: bool = False
    error: str = ""


def run_one(config: SimConfig, fit_options: FitOptions, index: int) -> ReplicationResult:
    """Generate, fit and score a single replicate.

    Accuracy is computed on the unlabeled rows. If it is below 0.5 the fitted
    components are taken to be label-swapped and every estimate is swapped
    before scoring.
    """
    sim = generate_dataset(config, index)
    ds = sim.dataset
    cens = ds.censoring_rate
    try:
        report = fit(ds, fit_options)
    except DualCoxError as exc:
        return ReplicationResult(index, censoring_rate=cens,
                                 error=f"{type(exc).__name__}: {exc}")
    truth = sim.true_labels[report.unlabeled_index]
    pred = report.classifications
    acc = classification_accuracy(pred, truth)
    betas = report.model.betas
    pi1 = float(report.model.pi[0])
    swapped = acc < 0.5
    if swapped:
        acc = classification_accuracy(3 - pred, truth)
        betas = betas[::-1]
        pi1 = 1.0 - pi1
    return ReplicationResult(
        index=index,
        betas=tuple(float(b) for b in betas.ravel()),
        pi1=pi1,
        accuracy=acc,
        censoring_rate=cens,
        iterations=report.iterations,
        loglik=report.loglik,
        swapped=swapped,
    )


def _run_chunk(args):
    config, fit_options, indices = args
    return [run_one(config, fit_options, i) for i in indices]


@dataclass(frozen=True)
class ParameterSummary:
    name: str
    truth: float
    mean: float
    sd: float
    bias: float
    relative_bias: float | None


@dataclass(frozen=True)
class ReplicationSummary:
    parameters: tuple[ParameterSummary, ...]
    accuracy_mean: float
    accuracy_sd: float
    censoring_mean: float
    censoring_range: tuple[float, float]
    iterations_mean: float
    iterations_range: tuple[int, int]
    n_replications: int
    n_failed: int
    failures: tuple[str, ...] = ()
    results: tuple[ReplicationResult, ...] = field(default=(), repr=False)

    def parameter(self, name: str) -> ParameterSummary:
        for p in self.parameters:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "mean", "sd", "bias", "relative_bias"])

        def fmt(v):
            return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.10g}"

        for p in self.parameters:
            w.writerow([p.name, fmt(p.mean), fmt(p.sd), fmt(p.bias), fmt(p.relative_bias)])
        w.writerow(["accuracy", fmt(self.accuracy_mean), fmt(self.accuracy_sd), "", ""])
        w.writerow(["censoring_rate", fmt(self.censoring_mean), "", "", ""])
        w.writerow(["em_iterations", fmt(self.iterations_mean), "", "", ""])
        w.writerow(["failed_replications", str(self.n_failed), "", "", ""])
        return buf.getvalue()


def parameter_names(p: int = 4) -> list[str]:
    return [f"beta{k}{j}" for k in (1, 2) for j in range(1, p + 1)]


def summarize(config: SimConfig, results) -> ReplicationSummary:
    results = sorted(results, key=lambda r: r.index)
    ok = [r for r in results if not r.error]
    failed = [f"replicate {r.index}: {r.error}" for r in results if r.error]
    truth = list(config.beta1_true) + list(config.beta2_true)
    names = parameter_names(len(config.beta1_true))
    params = []
    if ok:
        est = np.array([r.betas for r in ok])
        for j, name in enumerate(names):
            params.append(ParameterSummary(name, truth[j], *bias_stats(est[:, j], truth[j])))
        params.append(ParameterSummary("pi1", config.pi_true[0],
                                       *bias_stats([r.pi1 for r in ok], config.pi_true[0])))
        acc = [r.accuracy for r in ok]
        acc_mean = math.fsum(acc) / len(acc)
        acc_sd = bias_stats(acc, 1.0)[1]
        iters = [r.iterations for r in ok]
        it_mean, it_range = math.fsum(iters) / len(iters), (min(iters), max(iters))
    else:
        acc_mean = acc_sd = it_mean = float("nan")
        it_range = (0, 0)
    cens = [r.censoring_rate for r in results]
    return ReplicationSummary(
        parameters=tuple(params),
        accuracy_mean=acc_mean,
        accuracy_sd=acc_sd,
        censoring_mean=math.fsum(cens) / len(cens),
        censoring_range=(min(cens), max(cens)),
        iterations_mean=it_mean,
        iterations_range=it_range,
        n_replications=len(results),
        n_failed=len(failed),
        failures=tuple(failed),
        results=tuple(results),
    )


def run_replications(config: SimConfig, fit_options: FitOptions | None = None,
                     replications: int | None = None, threads: int = 1) -> ReplicationSummary:
    """Fit ``replications`` simulated trials and aggregate the estimates.

    Failed replicates are excluded from the estimates and listed in
    ``failures``. Output does not depend on `threads`.
    """
    fit_options = fit_options or FitOptions()
    reps = config.replications if replications is None else replications
    if reps < 1:
        raise ValueError("replications must be >= 1")
    indices = list(range(reps))
    if threads <= 1 or reps == 1:
        results = [run_one(config, fit_options, i) for i in indices]
    else:
        chunks = [indices[k::threads] for k in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = [r for chunk in pool.map(_run_chunk,
                                               [(config, fit_options, c) for c in chunks])
                       for r in chunk]
    return summarize(config, results)
