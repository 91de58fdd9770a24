"""K-means grouping of agents by baseline features, with elbow selection of K."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

N_RESTARTS = 10
# second-difference peak below this share of the total inertia drop counts as "no elbow"
LOW_CONFIDENCE_SHARE = 0.1


@dataclass(frozen=True)
class GroupAssignment:
    labels: Dict[int, int]
    centroids: np.ndarray  # (K, d), standardized feature space
    inertia: float

    @property
    def k(self) -> int:
        return len(self.centroids)

    def groups(self) -> Dict[int, list]:
        out: Dict[int, list] = {g: [] for g in range(self.k)}
        for aid, g in sorted(self.labels.items()):
            out[g].append(aid)
        return out


@dataclass(frozen=True)
class ElbowResult:
    k: int
    curve: Tuple[Tuple[int, float], ...]
    low_confidence: bool


def standardize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std(axis=0)
    return (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def _plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def lloyd(x: np.ndarray, centers: np.ndarray, max_iters: int):
    """Lloyd iterations; returns ``(labels, centers, inertia, history)``."""
    history = []
    labels = None
    for _ in range(max_iters):
        d2 = _sq_dists(x, centers)
        new = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = centers.copy()
        for g in range(len(centers)):
            members = labels == g
            if members.any():
                centers[g] = x[members].mean(axis=0)
            else:
                # reseed from the point farthest from its current centroid
                far = int(np.argmax(_sq_dists(x, centers)[np.arange(len(x)), labels]))
                centers[g] = x[far]
                labels = labels.copy()
                labels[far] = g
    d2 = _sq_dists(x, centers)
    labels = d2.argmin(axis=1)
    return labels, centers, float(d2[np.arange(len(x)), labels].sum()), history


def kmeans(features, k: int, seed: int = 0, max_iters: int = 300,
           agent_ids: Optional[Sequence[int]] = None,
           restarts: int = N_RESTARTS) -> GroupAssignment:
    """Best of ``restarts`` k-means++ runs on standardized features."""
    x = standardize(features)
    n = len(x)
    if k < 1:
        raise ValueError("K must be >= 1")
    if k > n:
        raise ValueError(f"K={k} exceeds number of agents {n}")
    ids = list(range(n)) if agent_ids is None else [int(a) for a in agent_ids]
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        labels, centers, inertia, _ = lloyd(x, _plus_plus(x, k, rng), max_iters)
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia)
    labels, centers, inertia = best
    labels = _canonical(labels, k)
    order = _first_seen(labels, k)
    return GroupAssignment({a: int(g) for a, g in zip(ids, labels)}, centers[order], inertia)


def _first_seen(labels, k):
    seen = []
    for g in labels:
        if g not in seen:
            seen.append(int(g))
    return seen + [g for g in range(k) if g not in seen]


def _canonical(labels: np.ndarray, k: int) -> np.ndarray:
    """Relabel clusters in order of first appearance, so ids do not depend on restart luck."""
    remap = {old: new for new, old in enumerate(_first_seen(labels, k))}
    return np.array([remap[int(g)] for g in labels])


def elbow_from_curve(curve: Sequence[Tuple[int, float]]) -> ElbowResult:
    """Pick the K with the largest second difference of the inertia curve."""
    curve = tuple((int(k), float(v)) for k, v in sorted(curve))
    ks = [k for k, _ in curve]
    inert = np.array([v for _, v in curve])
    drop = inert[0] - inert[-1]
    if len(ks) < 3 or drop <= 1e-12 * max(inert[0], 1.0):
        return ElbowResult(ks[0], curve, True)
    second = inert[:-2] - 2 * inert[1:-1] + inert[2:]
    i = int(np.argmax(second))
    return ElbowResult(ks[i + 1], curve, bool(second[i] < LOW_CONFIDENCE_SHARE * drop))


def elbow_select(features, k_range: Sequence[int], seed: int = 0) -> ElbowResult:
    ks = sorted(set(int(k) for k in k_range))
    if len(ks) < 3:
        raise ValueError("k_range must span at least 3 values")
    ks = [k for k in ks if k <= len(features)]
    return elbow_from_curve([(k, kmeans(features, k, seed).inertia) for k in ks])


def write_inertia_csv(path, curve, header_comment: Optional[str] = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "inertia"])
        for k, inertia in curve:
            w.writerow([k, format(inertia, ".9g")])
