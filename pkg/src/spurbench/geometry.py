"""Radial/angular decomposition of embeddings and the statistics built on it.

An embedding ``z`` splits into a magnitude ``r = |z|`` and a direction
``z / r``. Background mixing is diagnosed by comparing magnitudes and
cosine-to-clean-prototype between clean and mixed samples, with a
Mann-Whitney U test on each channel. Distribution alignment between two
embedding sets is summarized by an RBF-kernel MMD and the cosine between
the set centroids.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist, pdist

from .errors import GeometryError

EXACT_LIMIT = 64     # exact U distribution when |a|*|b| <= this
Z_95 = 1.96


@dataclass(frozen=True)
class Decomposition:
    magnitude: float
    direction: np.ndarray


def decompose(v) -> Decomposition:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise GeometryError("non-finite vector")
    r = float(np.linalg.norm(v))
    if r == 0.0:
        raise GeometryError("no direction: zero vector")
    return Decomposition(r, v / r)


def cosine_to(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Cosine between each row of ``x`` and the unit vector ``p``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return (x @ p) / np.linalg.norm(x, axis=1)


def clean_prototype(clean_vectors) -> np.ndarray:
    """Normalized mean of raw (unnormalized) clean vectors."""
    x = np.atleast_2d(np.asarray(clean_vectors, dtype=np.float64))
    if x.shape[0] == 0:
        raise GeometryError("degenerate prototype: no clean vectors")
    m = x.mean(axis=0)
    n = np.linalg.norm(m)
    if n == 0.0:
        raise GeometryError("degenerate prototype: mean is zero")
    return m / n


def mean_ci(x) -> tuple[float, float]:
    """Mean and 1.96*sd/sqrt(n) half-width (sample sd; zero for n = 1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise GeometryError("empty sample")
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return float(x.mean()), Z_95 * sd / math.sqrt(x.size)


# ---------------------------------------------------------------- U test

def _u_statistic(ranks_a: np.ndarray, n: int) -> float:
    return float(ranks_a.sum() - n * (n + 1) / 2.0)


def _exact_p(ranks: np.ndarray, n: int, u: float) -> float:
    """Two-sided p from the permutation distribution of U over all rankings."""
    total = 0
    le = ge = 0
    for idx in itertools.combinations(range(ranks.size), n):
        v = _u_statistic(ranks[list(idx)], n)
        total += 1
        # midranks are multiples of 1/2; compare with a small tolerance
        le += v <= u + 1e-9
        ge += v >= u - 1e-9
    return min(1.0, 2.0 * min(le, ge) / total)


def _asymptotic_p(ranks: np.ndarray, n: int, m: int, u: float) -> float:
    big_n = n + m
    _, counts = np.unique(ranks, return_counts=True)
    tie = float(np.sum(counts ** 3 - counts))
    var = n * m / 12.0 * ((big_n + 1) - tie / (big_n * (big_n - 1)))
    if var <= 0:
        return 1.0
    dev = max(abs(u - n * m / 2.0) - 0.5, 0.0)
    p = 2.0 * stats.norm.sf(dev / math.sqrt(var))
    # keep p strictly positive when the tail underflows
    return float(min(1.0, max(p, np.finfo(float).tiny)))


def mann_whitney_u(a, b, method: str = "auto") -> tuple[float, float]:
    """Rank-sum U of ``a`` (midranks for ties) and its two-sided p-value.

    ``method`` is ``"exact"``, ``"asymptotic"`` or ``"auto"`` (exact when
    ``len(a) * len(b) <= 64``).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise GeometryError("mann_whitney_u needs two non-empty samples")
    if method not in ("auto", "exact", "asymptotic"):
        raise GeometryError(f"unknown method {method!r}")
    ranks = stats.rankdata(np.concatenate([a, b]))
    u = _u_statistic(ranks[:n], n)
    if method == "exact" or (method == "auto" and n * m <= EXACT_LIMIT):
        return u, _exact_p(ranks, n, u)
    return u, _asymptotic_p(ranks, n, m, u)


# ---------------------------------------------------------------- reports

@dataclass(frozen=True)
class GeometryReport:
    label: str
    n_clean: int
    n_mixed: int
    clean_mag: float
    clean_mag_ci: float
    mixed_mag: float
    mixed_mag_ci: float
    mag_u: float
    mag_p: float
    clean_cos: float
    mixed_cos: float
    cos_diff: float
    cos_u: float
    cos_p: float
    per_class: Mapping[str, "GeometryReport"] = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("per_class")
        return d

    def to_dict(self) -> dict:
        d = self.row()
        d["per_class"] = {k: v.row() for k, v in sorted(self.per_class.items())}
        return d


def _condition_report(label, clean_x, mixed_x, clean_cos, mixed_cos) -> GeometryReport:
    cm, mm = np.linalg.norm(clean_x, axis=1), np.linalg.norm(mixed_x, axis=1)
    c_mean, c_ci = mean_ci(cm)
    m_mean, m_ci = mean_ci(mm)
    mag_u, mag_p = mann_whitney_u(cm, mm)
    cos_u, cos_p = mann_whitney_u(clean_cos, mixed_cos)
    cc, mc = float(np.mean(clean_cos)), float(np.mean(mixed_cos))
    return GeometryReport(label, cm.size, mm.size, c_mean, c_ci, m_mean, m_ci, mag_u, mag_p,
                          cc, mc, abs(cc - mc), cos_u, cos_p)


def contraction_report(clean_x, clean_labels: Sequence[str], mixed_x, mixed_labels: Sequence[str],
                       prototypes: Mapping[str, np.ndarray] | None = None,
                       label: str = "pooled") -> GeometryReport:
    """Clean-vs-mixed magnitude and cosine statistics, pooled and per class.

    Cosines are taken to each sample's own clean class prototype; when
    ``prototypes`` is omitted they are built from ``clean_x``.
    """
    clean_x = np.atleast_2d(np.asarray(clean_x, dtype=np.float64))
    mixed_x = np.atleast_2d(np.asarray(mixed_x, dtype=np.float64))
    clean_labels, mixed_labels = np.asarray(clean_labels), np.asarray(mixed_labels)
    if clean_x.shape[0] == 0 or mixed_x.shape[0] == 0:
        raise GeometryError("contraction_report needs non-empty clean and mixed sets")
    if clean_x.shape[0] != clean_labels.size or mixed_x.shape[0] != mixed_labels.size:
        raise GeometryError("labels do not match vectors")
    if clean_x.shape[1] != mixed_x.shape[1]:
        raise GeometryError(f"dimension mismatch: {clean_x.shape[1]} vs {mixed_x.shape[1]}")
    classes = sorted(set(clean_labels) | set(mixed_labels))
    if prototypes is None:
        missing = [c for c in classes if not np.any(clean_labels == c)]
        if missing:
            raise GeometryError(f"missing clean reference for class {missing[0]!r}")
        prototypes = {c: clean_prototype(clean_x[clean_labels == c]) for c in classes}
    for c in classes:
        if c not in prototypes:
            raise GeometryError(f"missing clean reference for class {c!r}")

    def cosines(x, labels):
        out = np.empty(labels.size)
        for c in set(labels):
            sel = labels == c
            out[sel] = cosine_to(x[sel], prototypes[c])
        return out

    clean_cos, mixed_cos = cosines(clean_x, clean_labels), cosines(mixed_x, mixed_labels)
    per_class = {}
    for c in classes:
        cs, ms = clean_labels == c, mixed_labels == c
        if cs.any() and ms.any():
            per_class[c] = _condition_report(c, clean_x[cs], mixed_x[ms], clean_cos[cs], mixed_cos[ms])
    pooled = _condition_report(label, clean_x, mixed_x, clean_cos, mixed_cos)
    return GeometryReport(**{**pooled.row(), "per_class": per_class})


@dataclass(frozen=True)
class DistributionReport:
    mmd: float              # max(0, mmd2_unbiased)
    mmd2_unbiased: float
    centroid_cosine: float
    bandwidth: float
    n_x: int
    n_y: int

    def to_dict(self) -> dict:
        return asdict(self)


def median_bandwidth(z: np.ndarray) -> float:
    d = pdist(z)
    h = float(np.median(d)) if d.size else 0.0
    return h if h > 0 else 1.0


def rbf_kernel(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * bandwidth ** 2))


def mmd2_unbiased(x: np.ndarray, y: np.ndarray, bandwidth: float) -> float:
    n, m = x.shape[0], y.shape[0]
    kxx, kyy, kxy = rbf_kernel(x, x, bandwidth), rbf_kernel(y, y, bandwidth), rbf_kernel(x, y, bandwidth)
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def mmd_rbf(x, y, bandwidth: float | None = None) -> DistributionReport:
    """Unbiased RBF MMD^2 (median pairwise distance bandwidth by default)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise GeometryError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise GeometryError("mmd_rbf needs at least two samples per set")
    if bandwidth is None:
        bandwidth = median_bandwidth(np.vstack([x, y]))
    elif not bandwidth > 0:
        raise GeometryError("bandwidth must be > 0")
    raw = mmd2_unbiased(x, y, bandwidth)
    mx, my = x.mean(axis=0), y.mean(axis=0)
    denom = np.linalg.norm(mx) * np.linalg.norm(my)
    cc = float(np.clip(mx @ my / denom, -1.0, 1.0)) if denom > 0 else 0.0
    return DistributionReport(max(0.0, raw), raw, cc, float(bandwidth), x.shape[0], y.shape[0])


# ---------------------------------------------------------------- output

GEOMETRY_COLUMNS = ["label", "n_clean", "n_mixed", "clean_mag", "clean_mag_ci", "mixed_mag",
                    "mixed_mag_ci", "mag_u", "mag_p", "clean_cos", "mixed_cos", "cos_diff",
                    "cos_u", "cos_p"]


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_geometry_csv(path: str | Path, reports: Sequence[GeometryReport],
                       per_class: bool = True) -> None:
    """One row per condition, then (optionally) one row per class as ``label/class``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GEOMETRY_COLUMNS)
        for rep in reports:
            rows = [rep.row()]
            if per_class:
                for c, sub in sorted(rep.per_class.items()):
                    rows.append({**sub.row(), "label": f"{rep.label}/{c}"})
            for r in rows:
                w.writerow([_fmt(r[k]) for k in GEOMETRY_COLUMNS])


def write_json(path: str | Path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
