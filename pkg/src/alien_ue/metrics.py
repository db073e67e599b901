"""Evaluation protocol: misclassification ROC-AUC, risk-coverage AURC,
ECE, bootstrap aggregation, Spearman correlation, and average ranks.

Scores follow the toolkit-wide convention higher = more uncertain; errors
are 0/1 with 1 = base model wrong.
"""

import concurrent.futures
import dataclasses

import numpy as np

from .env import worker_count
from .errors import DegenerateDataError, MissingArtifactError, ValidationError

BOOTSTRAP_REDRAW_CAP = 100


def _as_scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ValidationError("scores must be a 1-d vector")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores contain non-finite values")
    return s


def _as_errors(errors, n: int) -> np.ndarray:
    e = np.asarray(errors, dtype=np.float64)
    if e.shape != (n,):
        raise ValidationError(f"errors length {e.shape} does not match {n} scores")
    if not np.all((e == 0.0) | (e == 1.0)):
        raise ValidationError("errors must be 0/1 indicators")
    return e


def average_ranks(values) -> np.ndarray:
    """1-based ranks of a vector, ties averaged (rank 1 = smallest)."""
    x = np.asarray(values, dtype=np.float64)
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts
    return ((starts + ends + 1) / 2.0)[inverse]


def roc_auc(scores, errors) -> float:
    """P(random error outranks random correct example), ties 0.5; rank-sum."""
    s = _as_scores(scores)
    e = _as_errors(errors, s.size)
    n_pos = int(e.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataError("ROC-AUC undefined: error labels are single-class")
    ranks = average_ranks(s)
    u = ranks[e == 1.0].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclasses.dataclass
class RiskCoverage:
    coverage: np.ndarray  # k/n for k = 1..n
    risk: np.ndarray  # error rate among the k most confident examples
    aurc: float
    oracle_aurc: float


def risk_coverage(scores, errors) -> RiskCoverage:
    """Risk-coverage curve over all n coverage levels (discrete mean AURC).

    Most confident first: ascending score, ties broken by original index.
    The oracle re-sorts so every correct example precedes every error.
    """
    s = _as_scores(scores)
    n = s.size
    if n < 1:
        raise ValidationError("need at least one example")
    e = _as_errors(errors, n)
    order = np.lexsort((np.arange(n), s))
    k = np.arange(1, n + 1, dtype=np.float64)
    risk = np.cumsum(e[order]) / k
    n_correct = n - int(e.sum())
    oracle_risk = np.maximum(0.0, k - n_correct) / k
    return RiskCoverage(
        coverage=k / n,
        risk=risk,
        aurc=float(risk.mean()),
        oracle_aurc=float(oracle_risk.mean()),
    )


def ece(scores, errors, n_bins: int = 10) -> float:
    """Expected calibration error with equal-width confidence bins.

    Confidence = 1 - score, so scores must already lie in [0, 1]
    (rescale unbounded scores with rescale_unit first). Bins are
    left-closed/right-open, top bin closed; empty bins contribute 0.
    """
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    s = _as_scores(scores)
    e = _as_errors(errors, s.size)
    if s.size and (s.min() < 0.0 or s.max() > 1.0):
        raise ValidationError("scores outside [0, 1]; rescale before computing ECE")
    conf = 1.0 - s
    idx = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    acc_sum = np.bincount(idx, weights=1.0 - e, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    nonempty = counts > 0
    gaps = np.abs(acc_sum[nonempty] - conf_sum[nonempty]) / counts[nonempty]
    return float((counts[nonempty] / s.size * gaps).sum())


def rescale_unit(scores) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant vector maps to all 0.5."""
    s = _as_scores(scores)
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.full_like(s, 0.5)
    return (s - lo) / (hi - lo)


def spearman(x, y) -> float:
    """Pearson correlation of average ranks (ties averaged)."""
    xs = _as_scores(x)
    ys = _as_scores(y)
    if xs.size != ys.size:
        raise ValidationError("length mismatch between the two vectors")
    if xs.size < 2:
        raise ValidationError("need at least 2 observations")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise DegenerateDataError("Spearman undefined for a constant vector")
    rx = average_ranks(xs)
    ry = average_ranks(ys)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx * rx).sum() * (ry * ry).sum()))


# ---------------------------------------------------------------------------
# Bootstrap aggregation
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class MetricSummary:
    mean: float
    std: float

    def to_dict(self):
        return {"mean": self.mean, "std": self.std}


@dataclasses.dataclass
class EvalReport:
    roc_auc: MetricSummary
    aurc: MetricSummary
    oracle_aurc: MetricSummary
    ece: MetricSummary
    n_boot: int
    seed: int
    ece_bins: int = 10

    def to_dict(self):
        return {
            "roc_auc": self.roc_auc.to_dict(),
            "aurc": self.aurc.to_dict(),
            "oracle_aurc": self.oracle_aurc.to_dict(),
            "ece": self.ece.to_dict(),
            "n_boot": self.n_boot,
            "seed": self.seed,
            "ece_bins": self.ece_bins,
        }


def _resample_indices(seed: int, index: int, n: int, errors: np.ndarray) -> np.ndarray:
    """Size-n resample with replacement from stream (seed, index).

    Degenerate draws (single error class) redraw from stream
    (seed, index, retry); exceeding the cap is an error.
    """
    for retry in range(BOOTSTRAP_REDRAW_CAP + 1):
        key = (index,) if retry == 0 else (index, retry)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))
        idx = rng.integers(0, n, size=n)
        total = errors[idx].sum()
        if 0 < total < n:
            return idx
    raise DegenerateDataError(
        f"bootstrap resample {index} stayed single-class after {BOOTSTRAP_REDRAW_CAP} redraws"
    )


def bootstrap_eval(scores, errors, n_boot: int = 20, seed: int = 0,
                   ece_bins: int = 10) -> EvalReport:
    """Mean +- sample std (divisor n_boot-1) of each metric over n_boot
    resamples of size n with replacement. One seeded stream per resample
    index, so serial and parallel execution agree bit-for-bit."""
    if n_boot < 2:
        raise ValidationError("n_boot must be >= 2")
    s = _as_scores(scores)
    e = _as_errors(errors, s.size)
    if s.size and (s.min() < 0.0 or s.max() > 1.0):
        raise ValidationError("scores outside [0, 1]; rescale before bootstrap_eval")

    def one(index: int):
        idx = _resample_indices(seed, index, s.size, e)
        rc = risk_coverage(s[idx], e[idx])
        return (
            roc_auc(s[idx], e[idx]),
            rc.aurc,
            rc.oracle_aurc,
            ece(s[idx], e[idx], ece_bins),
        )

    workers = worker_count()
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(n_boot)))
    else:
        rows = [one(i) for i in range(n_boot)]
    arr = np.array(rows)

    def summary(col: int) -> MetricSummary:
        return MetricSummary(mean=float(arr[:, col].mean()), std=float(arr[:, col].std(ddof=1)))

    return EvalReport(
        roc_auc=summary(0),
        aurc=summary(1),
        oracle_aurc=summary(2),
        ece=summary(3),
        n_boot=n_boot,
        seed=seed,
        ece_bins=ece_bins,
    )


def average_rank(table: dict, lower_is_better: bool = False) -> dict:
    """Mean rank per method across dataset columns (1 = best, ties averaged).

    ``table`` maps method -> dataset -> value; every method must cover every
    dataset (no imputation).
    """
    methods = list(table.keys())
    if len(methods) < 2:
        raise ValidationError("need at least 2 methods to rank")
    datasets = sorted({ds for cols in table.values() for ds in cols})
    if not datasets:
        raise ValidationError("need at least 1 dataset column")
    for method in methods:
        missing = [ds for ds in datasets if ds not in table[method]]
        if missing:
            raise MissingArtifactError(f"method {method!r} missing datasets {missing}")
    totals = np.zeros(len(methods))
    for ds in datasets:
        vals = np.array([table[m][ds] for m in methods], dtype=np.float64)
        totals += average_ranks(vals if lower_is_better else -vals)
    return {m: float(totals[i] / len(datasets)) for i, m in enumerate(methods)}
