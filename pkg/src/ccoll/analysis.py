"""Error-propagation formulas, their Monte Carlo checks, and quality metrics.

The per-compression error model is a normal ``N(mu, sigma^2)`` truncated to
``[mu - eb, mu + eb]`` with ``eb = 3 * sigma`` by default.  Aggregation over
``n`` contributions is analysed for Sum, Average and Max/Min reductions.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq
from scipy.stats import truncnorm

#: probability mass of a normal within two standard deviations
TWO_SIGMA_COVERAGE = math.erf(math.sqrt(2.0))
_BATCH = 1 << 22


@dataclass(frozen=True)
class ErrorModel:
    n: int
    sigma: float
    mu: float = 0.0
    eb: Optional[float] = None

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")
        if self.eb is None:
            object.__setattr__(self, "eb", 3.0 * self.sigma)
        elif not self.eb > 0:
            raise ValueError(f"eb must be positive, got {self.eb!r}")

    @classmethod
    def from_error_bound(cls, n: int, eb: float, mu: float = 0.0) -> "ErrorModel":
        return cls(n, eb / 3.0, mu, eb)


def sum_error_distribution(model: ErrorModel):
    """(mean, variance) of the sum of ``n`` independent per-compression errors."""
    return model.n * model.mu, model.n * model.sigma ** 2


def sum_interval(model: ErrorModel) -> float:
    """Half-width of the two-sigma interval of the summed error."""
    return 2.0 * math.sqrt(model.n) * model.sigma


def sum_interval_in_eb(n: int) -> float:
    """Two-sigma half-width as a multiple of ``eb`` when ``eb = 3 sigma``."""
    return 2.0 * math.sqrt(n) / 3.0


def avg_error_distribution(model: ErrorModel):
    return model.mu, model.sigma ** 2 / model.n


def maxmin_error_variance(n: int, sigma: float) -> float:
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    return (2.0 - (n + 2) / 2.0 ** n) * sigma ** 2


# ---------------------------------------------------------------------------
# Monte Carlo


def truncated_scale(sigma: float, eb: float) -> float:
    """Scale of the parent normal whose truncation to ``[-eb, eb]`` has std ``sigma``.

    Truncation removes tail mass, so the parent must be slightly wider than
    ``sigma``.  Requires ``sigma < eb / sqrt(3)`` (the uniform limit).
    """
    limit = eb / math.sqrt(3.0)
    if not sigma < limit:
        raise ValueError(f"sigma={sigma!r} is not attainable inside +/-{eb!r}")

    def excess(scale):
        return truncnorm.std(-eb / scale, eb / scale, scale=scale) - sigma

    return brentq(excess, sigma * (1 - 1e-12), sigma * 1e3, xtol=sigma * 1e-15, rtol=1e-15)


def truncated_normal(rng: np.random.Generator, size, mu: float, sigma: float, eb: float) -> np.ndarray:
    """Draws with mean ``mu`` and std ``sigma`` confined to ``[mu - eb, mu + eb]``.

    Sampled by rejection from the parent normal of :func:`truncated_scale`.
    """
    scale = truncated_scale(sigma, eb)
    out = rng.normal(mu, scale, size)
    flat = out.reshape(-1)
    bad = np.flatnonzero(np.abs(flat - mu) > eb)
    while bad.size:
        flat[bad] = rng.normal(mu, scale, bad.size)
        bad = bad[np.abs(flat[bad] - mu) > eb]
    return out


def _batches(trials: int, n: int):
    per = max(1, _BATCH // max(n, 1))
    done = 0
    while done < trials:
        take = min(per, trials - done)
        yield take
        done += take


def _check_trials(trials):
    if int(trials) != trials or trials < 1:
        raise ValueError(f"trials must be a positive integer, got {trials!r}")
    return int(trials)


@dataclass(frozen=True)
class MonteCarloResult:
    mean: float
    variance: float
    coverage: float
    trials: int


def _moments(sums, sq, inside, trials):
    mean = sums / trials
    return MonteCarloResult(mean, sq / trials - mean ** 2, inside / trials, trials)


def monte_carlo_sum(model: ErrorModel, trials: int, seed: int, average: bool = False) -> MonteCarloResult:
    """Aggregate ``n`` truncated-normal errors per trial.

    ``coverage`` is the fraction of trials inside the two-sigma interval of
    the closed form (``2 sqrt(n) sigma`` for sums, ``2 sigma / sqrt(n)`` for
    averages).
    """
    trials = _check_trials(trials)
    rng = np.random.default_rng(seed)
    n = model.n
    half = sum_interval(model) if not average else 2.0 * model.sigma / math.sqrt(n)
    center = n * model.mu if not average else model.mu
    total = sq = inside = 0.0
    for take in _batches(trials, n):
        e = truncated_normal(rng, (take, n), model.mu, model.sigma, model.eb).sum(axis=1)
        if average:
            e /= n
        total += e.sum()
        sq += np.square(e).sum()
        inside += np.count_nonzero(np.abs(e - center) <= half)
    return _moments(total, sq, inside, trials)


def monte_carlo_avg(model: ErrorModel, trials: int, seed: int) -> MonteCarloResult:
    return monte_carlo_sum(model, trials, seed, average=True)


def monte_carlo_maxmin(n: int, sigma: float, trials: int, seed: int) -> MonteCarloResult:
    """Selection model for Max/Min chains.

    Each trial draws the number of compressed contributions ``K`` with
    ``P(K=j) = 2**-j`` for ``j = 1..n`` and ``P(K=0) = 2**-n``, then sums
    ``K`` independent ``N(0, sigma^2)`` errors.
    """
    trials = _check_trials(trials)
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    rng = np.random.default_rng(seed)
    half = 2.0 * math.sqrt(maxmin_error_variance(n, sigma))
    total = sq = inside = 0.0
    for take in _batches(trials, 1):
        k = rng.geometric(0.5, take)
        k[k > n] = 0
        # a sum of k iid N(0, s^2) draws is N(0, k s^2)
        e = rng.standard_normal(take) * sigma * np.sqrt(k)
        total += e.sum()
        sq += np.square(e).sum()
        inside += np.count_nonzero(np.abs(e) <= half)
    return _moments(total, sq, inside, trials)


def relative_deviation(estimate: float, reference: float) -> float:
    if reference == 0:
        return 0.0 if estimate == 0 else math.inf
    return abs(estimate - reference) / abs(reference)


# ---------------------------------------------------------------------------
# quality metrics


@dataclass(frozen=True)
class QualityReport:
    psnr: float
    nrmse: float
    max_abs_error: float
    value_range: float
    rmse: float


def _pair(reference, candidate):
    ref = np.asarray(reference, dtype=np.float64).reshape(-1)
    cand = np.asarray(candidate, dtype=np.float64).reshape(-1)
    if ref.size != cand.size:
        raise ValueError(f"length mismatch: {ref.size} vs {cand.size}")
    if ref.size == 0:
        raise ValueError("empty input")
    return ref, cand


def quality(reference, candidate) -> QualityReport:
    """PSNR and NRMSE normalised by the value range of ``reference``.

    Identical inputs give ``nrmse == 0`` and ``psnr == inf``.
    """
    ref, cand = _pair(reference, candidate)
    diff = cand - ref
    rmse = math.sqrt(np.mean(np.square(diff)))
    value_range = float(ref.max() - ref.min())
    max_abs = float(np.abs(diff).max())
    if rmse == 0:
        return QualityReport(math.inf, 0.0, max_abs, value_range, 0.0)
    if value_range == 0:
        return QualityReport(-math.inf, math.inf, max_abs, value_range, rmse)
    nrmse = rmse / value_range
    return QualityReport(20.0 * math.log10(value_range / rmse), nrmse, max_abs, value_range, rmse)


def psnr_from_nrmse(nrmse: float) -> float:
    return math.inf if nrmse == 0 else -20.0 * math.log10(nrmse)


@dataclass(frozen=True)
class NormalFit:
    mean: float
    std: float
    bin_edges: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)

    @property
    def samples(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
            writer.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        writer.writerow(["mle", repr(self.mean), repr(self.std)])
        return buf.getvalue()


def fit_normal(errors, bins: int = 64) -> NormalFit:
    """Maximum-likelihood normal fit (1/n variance) plus a histogram."""
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise ValueError("no errors to fit")
    mean = float(e.mean())
    std = float(np.sqrt(np.mean(np.square(e - mean))))
    counts, edges = np.histogram(e, bins=bins)
    return NormalFit(mean, std, edges, counts)


def fit_errors(original, decoded, bins: int = 64) -> NormalFit:
    """Fit the elementwise errors ``decoded - original``."""
    ref, cand = _pair(original, decoded)
    return fit_normal(cand - ref, bins)


# ---------------------------------------------------------------------------
# empirical coverage of the real C-Allreduce


@dataclass(frozen=True)
class CoverageResult:
    coverage: float
    sigma_emp: float
    half_width: float
    max_abs_error: float
    hard_bound: float
    bound_held: bool
    trials: int


def empirical_allreduce_coverage(world_size: int, field_values, eb: float, trials: int = 200,
                                 seed: int = 0, mode: str = "virtual") -> CoverageResult:
    """Run compressed Sum-Allreduce on perturbed copies of ``field_values``.

    Each trial gives every rank ``a * field + b`` with its own random scale
    ``a`` and offset ``b``.  ``sigma_emp`` is the standard deviation of the
    error of a single compression of those inputs; coverage is the fraction
    of output elements (all ranks, all trials) within ``2 sqrt(n) sigma_emp``
    of the uncompressed result.
    """
    from . import codec
    from .collectives import Variant, allreduce
    from .reference import allreduce as reference_allreduce
    from .transport import CommWorld

    n = int(world_size)
    if trials < 100:
        raise ValueError(f"at least 100 trials are required, got {trials}")
    base = np.ascontiguousarray(field_values, dtype=np.float32).reshape(-1)
    if base.size == 0 or base.size % n:
        raise ValueError(f"field of {base.size} elements cannot be split over {n} ranks")
    if not np.isfinite(base).all():
        raise ValueError("field must be finite")
    eb = codec.check_error_bound(eb)

    rng = np.random.default_rng(seed)
    world = CommWorld(n, mode)
    errors = []
    single = []
    worst = 0.0
    bound_held = True
    hard_bound = n * eb
    for _ in range(trials):
        scale = rng.uniform(0.5, 1.5, n).astype(np.float32)
        offset = rng.uniform(-1.0, 1.0, n).astype(np.float32)
        inputs = [base * scale[r] + offset[r] for r in range(n)]
        for x in inputs:
            single.append(codec.decompress(codec.compress(x, eb)).astype(np.float64) - x)
        exact = reference_allreduce(inputs, "sum").astype(np.float64)
        outputs, _ = allreduce(world, Variant.CCOLL, inputs, "sum", eb)
        err = np.stack([o.astype(np.float64) - exact for o in outputs])
        trial_max = float(np.abs(err).max())
        worst = max(worst, trial_max)
        bound_held &= trial_max <= hard_bound
        errors.append(err.reshape(-1))

    sigma_emp = float(np.concatenate(single).std())
    half = 2.0 * math.sqrt(n) * sigma_emp
    all_err = np.concatenate(errors)
    coverage = float(np.count_nonzero(np.abs(all_err) <= half)) / all_err.size
    return CoverageResult(coverage, sigma_emp, half, worst, hard_bound, bool(bound_held), trials)
