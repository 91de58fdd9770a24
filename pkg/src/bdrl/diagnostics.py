"""Batch-means standard errors and within-group convergence tracking."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .training import ParameterTable, max_pair_discrepancy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BatchMeansReport:
    grand_mean: float
    standard_error: float
    batch_count: int
    batch_size: int
    batch_means: Tuple[float, ...]
    dropped: int = 0


def batch_means(samples: Sequence[float], n_batches: int) -> BatchMeansReport:
    """Mean and standard error from ``n_batches`` adjacent non-overlapping batches.

    A tail remainder that does not fill a batch is dropped and counted.
    """
    y = np.asarray(samples, dtype=np.float64).ravel()
    if n_batches < 1:
        raise ValueError("batch count must be >= 1")
    if n_batches > len(y):
        raise ValueError(f"batch count {n_batches} exceeds sample count {len(y)}")
    m = len(y) // n_batches
    dropped = len(y) - m * n_batches
    if dropped:
        log.info("batch means: dropping %d trailing samples", dropped)
    means = y[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    mu = float(means.mean())
    se = 0.0
    if n_batches > 1:
        se = math.sqrt(float(np.sum((means - mu) ** 2)) / (n_batches * (n_batches - 1)))
    return BatchMeansReport(mu, se, n_batches, m, tuple(float(v) for v in means), dropped)


def batch_sensitivity(samples: Sequence[float], b_range: Iterable[int]) -> list:
    """Standard error as a function of batch count: list of ``(B, se)``."""
    bs = sorted(set(int(b) for b in b_range))
    if not bs or bs[0] < 2:
        raise ValueError("batch counts must be >= 2")
    return [(b, batch_means(samples, b).standard_error) for b in bs]


def track_convergence(table: ParameterTable, groups: Mapping[int, Sequence[int]], epoch: int,
                      probes: Mapping[int, Tuple[np.ndarray, np.ndarray]]) -> list:
    """Per group, max over agent pairs of summed W2 across the group's probe pairs."""
    out = []
    for g in sorted(groups):
        s, a = probes[g]
        out.append({"epoch": int(epoch), "group": int(g),
                    "max_pair_w2": max_pair_discrepancy(table, groups[g], s, a)})
    return out


def _fmt(v):
    return format(v, ".9g") if isinstance(v, float) else v


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], comment: Optional[str] = None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_batch_report(path, reports: Iterable[Tuple[str, BatchMeansReport]], comment=None):
    write_csv(path, ["label", "B", "M", "grand_mean", "se"],
              ([lab, r.batch_count, r.batch_size, r.grand_mean, r.standard_error]
               for lab, r in reports), comment)


def write_convergence(path, trace: Iterable[Mapping], comment=None):
    write_csv(path, ["epoch", "group", "max_pair_w2"],
              ([r["epoch"], r["group"], float(r["max_pair_w2"])] for r in trace), comment)
