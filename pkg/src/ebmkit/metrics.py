"""Evaluation metrics: calibration error, OOD AUROC, histograms.

ECE uses equal-width bins over [0, 1] with right-inclusive upper edges
(bin count configurable, default 20; recorded in every report). AUROC
is the Mann-Whitney rank statistic with midrank ties, which avoids
threshold-grid approximation error. All emitters write plot-ready CSV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import energy as en
from . import nn

__all__ = [
    "EceReport", "RocResult", "Histogram",
    "ece", "auroc", "histogram", "score_dataset",
    "ece_to_csv", "roc_to_csv", "histogram_to_csv",
]

DEFAULT_ECE_BINS = 20


@dataclass(frozen=True)
class EceBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float     # 0.0 for empty bins
    accuracy: float            # 0.0 for empty bins


@dataclass(frozen=True)
class EceReport:
    n_bins: int
    bins: tuple
    value: float

    def recompute(self) -> float:
        total = sum(b.count for b in self.bins)
        return sum((b.count / total) * abs(b.accuracy - b.mean_confidence)
                   for b in self.bins if b.count)


@dataclass(frozen=True)
class RocResult:
    auroc: float
    curve: tuple    # ordered (fpr, tpr) points from (0,0) to (1,1)


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    density: np.ndarray        # integrates to 1 over the edges


def ece(confidences, correct, n_bins: int = DEFAULT_ECE_BINS) -> EceReport:
    """Expected calibration error with reliability-diagram bin data."""
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    hit = np.asarray(correct, dtype=bool).reshape(-1)
    if conf.size == 0:
        raise ValueError("ece: empty input")
    if conf.size != hit.size:
        raise ValueError("ece: confidences and correctness lengths differ")
    if conf.min() < 0.0 or conf.max() > 1.0:
        raise ValueError("ece: confidences must lie in [0, 1]")
    if n_bins < 1:
        raise ValueError("ece: n_bins must be >= 1")

    # right-inclusive upper edges: bin i covers (i/n, (i+1)/n], bin 0 includes 0
    idx = np.ceil(conf * n_bins).astype(np.int64) - 1
    idx = np.clip(idx, 0, n_bins - 1)
    bins = []
    value = 0.0
    total = conf.size
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        if count:
            mean_conf = float(conf[mask].mean())
            acc = float(hit[mask].mean())
            value += (count / total) * abs(acc - mean_conf)
        else:
            mean_conf = 0.0
            acc = 0.0
        bins.append(EceBin(b / n_bins, (b + 1) / n_bins, count, mean_conf, acc))
    return EceReport(n_bins=n_bins, bins=tuple(bins), value=value)


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores_in: Sequence[float], scores_out: Sequence[float]) -> RocResult:
    """P(in-distribution score > out score), ties counted half."""
    s_in = np.asarray(scores_in, dtype=np.float64).reshape(-1)
    s_out = np.asarray(scores_out, dtype=np.float64).reshape(-1)
    if s_in.size == 0 or s_out.size == 0:
        raise ValueError("auroc: both score lists must be non-empty")

    ranks = _midranks(np.concatenate([s_in, s_out]))
    rank_sum = ranks[:s_in.size].sum()
    u = rank_sum - s_in.size * (s_in.size + 1) / 2.0
    value = float(u / (s_in.size * s_out.size))

    # threshold sweep for the curve: predict "in" when score >= t
    thresholds = np.unique(np.concatenate([s_in, s_out]))[::-1]
    curve = [(0.0, 0.0)]
    for t in thresholds:
        tpr = float(np.mean(s_in >= t))
        fpr = float(np.mean(s_out >= t))
        curve.append((fpr, tpr))
    if curve[-1] != (1.0, 1.0):
        curve.append((1.0, 1.0))
    return RocResult(auroc=value, curve=tuple(curve))


def histogram(values, n_bins: int, value_range: Optional[tuple] = None) -> Histogram:
    """Density-normalized histogram; range defaults to [min, max]."""
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if vals.size == 0:
        raise ValueError("histogram: empty input")
    if n_bins < 1:
        raise ValueError("histogram: n_bins must be >= 1")
    density, edges = np.histogram(vals, bins=n_bins, range=value_range, density=True)
    return Histogram(edges=edges, density=density)


def score_dataset(model, params, dataset, kind: en.ScoreKind,
                  batch_size: int = 256) -> np.ndarray:
    """Chosen OOD score for every example, in dataset order."""
    if not isinstance(kind, en.ScoreKind):
        raise ValueError(f"score_dataset: invalid score kind {kind!r}")
    x = dataset.x if hasattr(dataset, "x") else np.asarray(dataset, dtype=np.float64)
    out = []
    for start in range(0, x.shape[0], batch_size):
        batch = x[start:start + batch_size]
        if kind is en.ScoreKind.APPROXIMATE_MASS:
            out.append(en.approximate_mass_score(model, params, batch))
        else:
            logits = en.model_logits(model, _as_tensors(params), _tensor(batch))
            if kind is en.ScoreKind.LOG_DENSITY_PROXY:
                out.append(en.log_px_proxy(logits).value)
            else:
                out.append(en.max_softmax_score(logits))
    return np.concatenate(out)


def _tensor(x):
    from . import autodiff as ad
    return ad.Tensor(x)


def _as_tensors(params):
    from . import autodiff as ad
    if isinstance(params, nn.Parameters):
        return {k: ad.Tensor(v) for k, v in params.arrays.items()}
    return params


# ---------------------------------------------------------------------------
# CSV emission (headers documented in the README and stable)

def ece_to_csv(report: EceReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lower", "bin_upper", "count", "mean_confidence", "accuracy"])
        for b in report.bins:
            writer.writerow([f"{b.lower:.10g}", f"{b.upper:.10g}", b.count,
                             f"{b.mean_confidence:.12g}", f"{b.accuracy:.12g}"])


def roc_to_csv(result: RocResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        for fpr, tpr in result.curve:
            writer.writerow([f"{fpr:.12g}", f"{tpr:.12g}"])


def histogram_to_csv(hist: Histogram, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lower", "bin_upper", "density"])
        for lo, hi, d in zip(hist.edges[:-1], hist.edges[1:], hist.density):
            writer.writerow([f"{lo:.12g}", f"{hi:.12g}", f"{d:.12g}"])
