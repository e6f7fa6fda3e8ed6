"""k-nearest-neighbor domain-gap scoring.

Each source transition ``x = s ⊕ a ⊕ s'`` gets

    rho(x) = log ||x - x_tar^(k)|| - log ||x - x_src^(k)||

where the two terms are k-th neighbor distances to the target set and to the
source set (the source query skips the row itself). Shifting by the smallest
source score and mapping ``w = 1 / (1 + rho_hat)`` turns this into a
proximity weight in ``(0, 1]``; larger means more target-like.

All distances are Euclidean in z-normalized space, with statistics fitted on
the union of source and target.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .datasets import NormStats, compute_norm_stats, require_nonempty
from .errors import DimensionError, NonFiniteError, ValidationError
from .validation import check_features

DEFAULT_K = 5
DISTANCE_FLOOR = 1e-12
_CHUNK = 1 << 16


class NnIndex:
    """Exact k-NN index over z-normalized points.

    Backed by an unbalanced (sliding-midpoint) k-d tree. With ``rotate`` the
    tree is built in the principal-axis basis of the normalized points (a
    rotation, so Euclidean distances are unchanged). Candidate neighbors are
    re-measured in the original normalized coordinates, which is what every
    reported distance refers to.
    """

    def __init__(self, points, norm=None, rotate=False, leafsize=16):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValidationError(f"need a non-empty (n, d) point array, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise NonFiniteError("index points contain NaN or Inf")
        self.dim = pts.shape[1]
        self.norm = norm if norm is not None else NormStats.identity(self.dim)
        if self.norm.mean.shape != (self.dim,):
            raise DimensionError(f"NormStats of width {self.norm.mean.shape[0]} for points of width {self.dim}")
        self._z = self.norm.normalize(pts)
        self._rotation = None
        tree_pts = self._z
        if rotate and self.dim > 1 and len(pts) > 1:
            sample = self._z[:: max(1, len(pts) // 100_000)]
            _, vecs = np.linalg.eigh(np.cov(sample, rowvar=False))
            self._rotation = vecs[:, ::-1]
            tree_pts = self._z @ self._rotation
        self._tree = cKDTree(tree_pts, leafsize=leafsize, balanced_tree=False)

    def __len__(self):
        return self._z.shape[0]

    @property
    def n_points(self):
        return len(self)

    def _normalize_queries(self, queries):
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim == 1:
            q = q[None, :]
        if q.ndim != 2 or q.shape[1] != self.dim:
            raise DimensionError(f"query shape {q.shape} does not match index dimension {self.dim}")
        if not np.isfinite(q).all():
            raise NonFiniteError("queries contain NaN or Inf")
        return self.norm.normalize(q)

    def neighbor_distances(self, queries, k, exclude_self=False, n_jobs=-1):
        """Sorted distances to the ``k`` nearest neighbors, shape ``(n_queries, k)``.

        With ``exclude_self`` exactly one zero-distance match per query is
        dropped, so a duplicate of the query that is a different row still counts.
        """
        k = int(k)
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
        need = k + 1 if exclude_self else k
        if need > len(self):
            raise ValidationError(
                f"k={k} needs {need} indexed points{' (self excluded)' if exclude_self else ''}, "
                f"index holds {len(self)}")
        zq = self._normalize_queries(queries)
        margin = 2 if self._rotation is not None else 0
        kq = min(need + margin, len(self))
        out = np.empty((zq.shape[0], k))
        for lo in range(0, zq.shape[0], _CHUNK):
            zc = zq[lo: lo + _CHUNK]
            tq = zc @ self._rotation if self._rotation is not None else zc
            _, idx = self._tree.query(tq, k=list(range(1, kq + 1)), workers=n_jobs)
            diff = self._z[idx] - zc[:, None, :]
            dist = np.sort(np.sqrt(np.sum(diff * diff, axis=-1)), axis=1)
            if exclude_self:
                skip = (dist[:, 0] == 0.0).astype(np.intp)
                cols = skip[:, None] + np.arange(k)
                out[lo: lo + len(zc)] = np.take_along_axis(dist, cols, axis=1)
            else:
                out[lo: lo + len(zc)] = dist[:, :k]
        return out

    def kth_distance(self, queries, k, exclude_self=False, n_jobs=-1):
        """Distance to the k-th nearest neighbor for every query row."""
        return self.neighbor_distances(queries, k, exclude_self, n_jobs)[:, -1]


def build_index(points, norm=None, **kwargs):
    return NnIndex(points, norm, **kwargs)


def knn_distance(index, query, k, exclude_self=False):
    """k-th neighbor distance of a single query point."""
    return float(index.kth_distance(np.atleast_2d(query), k, exclude_self)[0])


# --------------------------------------------------------------------------- score tables


@dataclass
class ScoreTable:
    """Per-row gap scores aligned by index with a dataset."""

    rho: np.ndarray
    rho_hat: np.ndarray
    weight: np.ndarray
    k: int
    fingerprint: str = ""
    rho_min: float = 0.0
    n_floored: int = 0

    def __len__(self):
        return len(self.rho)

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "rho", "rho_hat", "weight"])
            for i, (a, b, c) in enumerate(zip(self.rho, self.rho_hat, self.weight)):
                w.writerow([i, f"{a:.17g}", f"{b:.17g}", f"{c:.17g}"])

    @classmethod
    def load_csv(cls, path, k=DEFAULT_K, fingerprint="", rho_min=None):
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if arr.shape[1] != 4 or not np.array_equal(arr[:, 0], np.arange(len(arr))):
            raise ValidationError(f"{path}: expected columns row,rho,rho_hat,weight with consecutive rows")
        rho = arr[:, 1]
        if rho_min is None:
            rho_min = float(np.min(rho - arr[:, 2]))
        return cls(rho, arr[:, 2], arr[:, 3], int(k), fingerprint, float(rho_min))

    def extend(self, other, fingerprint=""):
        if other.k != self.k:
            raise ValidationError(f"cannot join score tables built with k={self.k} and k={other.k}")
        return ScoreTable(np.concatenate([self.rho, other.rho]), np.concatenate([self.rho_hat, other.rho_hat]),
                          np.concatenate([self.weight, other.weight]), self.k, fingerprint, self.rho_min,
                          self.n_floored + other.n_floored)


def normalize_scores(rho, rho_min):
    """``rho_hat = max(rho - rho_min, 0)`` and ``w = 1 / (1 + rho_hat)``."""
    rho_hat = np.maximum(np.asarray(rho, dtype=np.float64) - rho_min, 0.0)
    return rho_hat, 1.0 / (1.0 + rho_hat)


def _floored_log(d, floor):
    n_floored = int(np.count_nonzero(d < floor))
    return np.log(np.maximum(d, floor)), n_floored


class KnnGapScorer(BaseEstimator):
    """Estimator form of the k-NN gap score.

    ``fit(X, domain)`` takes stacked ``s ⊕ a ⊕ s'`` rows with ``domain`` 0 for
    source and 1 for target. After fitting, ``rho_`` / ``weight_`` hold the
    self-excluded scores of the source rows, ``score_samples`` gives raw
    scores for new rows against the fitted source set, and ``transform``
    maps new rows to weights using the same shift as the training rows.
    """

    def __init__(self, k=DEFAULT_K, distance_floor=DISTANCE_FLOOR, rotate=False, n_jobs=-1):
        self.k = k
        self.distance_floor = distance_floor
        self.rotate = rotate
        self.n_jobs = n_jobs

    def fit(self, X, domain, norm=None):
        X = check_features(X)
        domain = np.asarray(domain).reshape(-1)
        if domain.shape[0] != X.shape[0]:
            raise DimensionError(f"{X.shape[0]} rows but {domain.shape[0]} domain labels")
        if not np.isin(domain, (0, 1)).all():
            raise ValidationError("domain labels must be 0 (source) or 1 (target)")
        src, tar = X[domain == 0], X[domain == 1]
        n, m = len(src), len(tar)
        if m < self.k:
            raise ValidationError(f"target set has {m} rows, needs >= k={self.k}")
        if n < self.k + 1:
            raise ValidationError(f"source set has {n} rows, needs >= k+1={self.k + 1}")
        if norm is None:
            mean = X.mean(axis=0)
            std = np.sqrt(np.mean((X - mean) ** 2, axis=0))
            norm = NormStats(mean, np.where(std < 1e-8, 1.0, std), 0.0, 1.0, len(X))
        self.norm_ = norm
        self.n_features_in_ = X.shape[1]
        self.target_index_ = NnIndex(tar, norm, rotate=self.rotate)
        self.source_index_ = NnIndex(src, norm, rotate=self.rotate)
        self.nu_tar_ = self.target_index_.kth_distance(src, self.k, n_jobs=self.n_jobs)
        self.nu_src_ = self.source_index_.kth_distance(src, self.k, exclude_self=True, n_jobs=self.n_jobs)
        log_tar, f1 = _floored_log(self.nu_tar_, self.distance_floor)
        log_src, f2 = _floored_log(self.nu_src_, self.distance_floor)
        self.rho_ = log_tar - log_src
        self.n_floored_ = f1 + f2
        self.rho_min_ = float(self.rho_.min())
        self.rho_hat_, self.weight_ = normalize_scores(self.rho_, self.rho_min_)
        d = X.shape[1]
        self.kl_divergence_ = float(d * np.mean(self.rho_) + math.log(m / (n - 1)))
        return self

    def score_samples(self, X):
        """Raw gap scores of rows that are not part of the fitted source set."""
        check_is_fitted(self, "rho_")
        X = check_features(X, n_features=self.n_features_in_)
        log_tar, _ = _floored_log(self.target_index_.kth_distance(X, self.k, n_jobs=self.n_jobs),
                                  self.distance_floor)
        log_src, _ = _floored_log(self.source_index_.kth_distance(X, self.k, n_jobs=self.n_jobs),
                                  self.distance_floor)
        return log_tar - log_src

    def transform(self, X):
        return normalize_scores(self.score_samples(X), self.rho_min_)[1]

    def score_table(self, fingerprint=""):
        check_is_fitted(self, "rho_")
        return ScoreTable(self.rho_, self.rho_hat_, self.weight_, int(self.k), fingerprint,
                          self.rho_min_, self.n_floored_)


def _stack(src, tar):
    require_nonempty(src, "source dataset")
    require_nonempty(tar, "target dataset")
    if src.features().shape[1] != tar.features().shape[1]:
        raise DimensionError("source and target datasets have different transition widths")
    X = np.concatenate([src.features(), tar.features()])
    domain = np.concatenate([np.zeros(len(src), np.int8), np.ones(len(tar), np.int8)])
    return X, domain


def fit_scorer(src, tar, k=DEFAULT_K, n_jobs=-1):
    X, domain = _stack(src, tar)
    norm = compute_norm_stats(src, tar)
    return KnnGapScorer(k=k, n_jobs=n_jobs).fit(X, domain, norm=norm)


def score_source(src, tar, k=DEFAULT_K, n_jobs=-1):
    """ScoreTable for every row of ``src`` against ``tar``."""
    return fit_scorer(src, tar, k, n_jobs).score_table(src.fingerprint())


def rescore(rows, scorer):
    """ScoreTable for rows outside the fitted source set (e.g. generated ones).

    The source-side reference stays the real source set and the shift stays
    the real-source minimum, so scores below it clamp to ``rho_hat = 0``.
    """
    rho = scorer.score_samples(rows.features())
    rho_hat, w = normalize_scores(rho, scorer.rho_min_)
    return ScoreTable(rho, rho_hat, w, int(scorer.k), rows.fingerprint(), scorer.rho_min_)


def kl_estimate(src, tar, k=DEFAULT_K, n_jobs=-1):
    """k-NN estimate of KL(P_src || P_tar), bias constant included."""
    return fit_scorer(src, tar, k, n_jobs).kl_divergence_


# --------------------------------------------------------------------------- selection


def _weights_of(table):
    w = table.weight if isinstance(table, ScoreTable) else np.asarray(table, dtype=np.float64)
    if w.size == 0:
        raise ValidationError("score table is empty")
    return w


def n_selected(n, xi):
    """``ceil(n * (1 - xi/100))`` without float round-up (0.3 * 100 is 30.000000000000004)."""
    return math.ceil(round(n * (100.0 - xi) / 100.0, 9))


def quantile_threshold(table, xi):
    """Weight threshold keeping the top ``100 - xi`` percent of rows (ties all kept)."""
    if not 0.0 <= xi < 100.0:
        raise ValidationError(f"selection ratio xi must be in [0, 100), got {xi}")
    w = _weights_of(table)
    count = n_selected(len(w), xi)
    return float(np.sort(w)[::-1][count - 1])


def selection_weights(table, xi, reference=None):
    """``omega = w * 1(w >= threshold)``; the threshold comes from ``reference`` if given."""
    w = _weights_of(table)
    thr = quantile_threshold(reference if reference is not None else table, xi)
    return np.where(w >= thr, w, 0.0)


# --------------------------------------------------------------------------- diagnostics


@dataclass
class Histogram:
    """Shared bin edges and two count columns."""

    edges: np.ndarray
    counts_a: np.ndarray
    counts_b: np.ndarray
    columns: tuple = ("count_src", "count_tar")
    meta: dict = None

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", *self.columns])
            for lo, hi, a, b in zip(self.edges[:-1], self.edges[1:], self.counts_a, self.counts_b):
                w.writerow([f"{lo:.9g}", f"{hi:.9g}", int(a), int(b)])


def shared_histogram(a, b, bins, columns):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    return Histogram(edges, np.histogram(a, edges)[0], np.histogram(b, edges)[0], columns)


def nn_distance_histogram(src, tar, bins=50, n_jobs=-1):
    """Histograms of log10 1-NN distances: source->target and target->target (self excluded)."""
    require_nonempty(src, "source dataset")
    require_nonempty(tar, "target dataset")
    norm = compute_norm_stats(src, tar)
    index = NnIndex(tar.features(), norm)
    d_src = index.kth_distance(src.features(), 1, n_jobs=n_jobs)
    d_tar = index.kth_distance(tar.features(), 1, exclude_self=True, n_jobs=n_jobs)
    log_src = np.log10(np.maximum(d_src, DISTANCE_FLOOR))
    log_tar = np.log10(np.maximum(d_tar, DISTANCE_FLOOR))
    hist = shared_histogram(log_src, log_tar, bins, ("count_src", "count_tar"))
    hist.meta = {"axis": "log10 distance", "target_self_excluded": True,
                 "floored_src": int(np.count_nonzero(d_src < DISTANCE_FLOOR)),
                 "floored_tar": int(np.count_nonzero(d_tar < DISTANCE_FLOOR))}
    return hist


def gap_histogram(real_rho, generated_rho, bins=50):
    return shared_histogram(real_rho, generated_rho, bins, ("count_real", "count_generated"))


def probability_histogram(p_sa, p_sas, bins=10):
    """Counts of the two classifiers' target probabilities over fixed [0, 1] bins."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    return Histogram(edges, np.histogram(p_sa, edges)[0], np.histogram(p_sas, edges)[0],
                     ("count_sa", "count_sas"))
