"""k-means clustering of day embeddings.

Embeddings are z-scored per feature, centroids seeded with k-means++ (pure D²
sampling), refined with Lloyd iterations, best of several restarts by
inertia, and scored with the Euclidean silhouette.
"""

import datetime
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.cluster import kmeans_plusplus
from sklearn.metrics import silhouette_score

from csv_helper import iter_csv_rows, write_csv
from errors import ClusterError

logger = logging.getLogger(__name__)

Key = Tuple[str, datetime.date]

MIN_STD = 1e-12
_SEED_BOUND = 2 ** 32 - 1


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    retained: np.ndarray  # boolean mask over the original features


@dataclass(frozen=True)
class KMeansConfig:
    k: int = 5
    k_min: int = 2
    k_max: int = 10
    restarts: int = 10
    max_iter: int = 300
    tol: float = 1e-4

    def __post_init__(self):
        if not 2 <= self.k_min <= self.k_max:
            raise ClusterError(f"invalid k range {self.k_min}..{self.k_max}")
        if self.k < 1 or self.restarts < 1 or self.max_iter < 1 or self.tol <= 0:
            raise ClusterError("k, restarts and max_iter must be positive and tol > 0")

    @property
    def k_range(self) -> range:
        return range(self.k_min, self.k_max + 1)


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    seed: int
    silhouette: Optional[float] = None
    stats: Optional[StandardizationStats] = None
    n_iter: int = 0
    inertia_history: List[float] = field(default_factory=list)


@dataclass
class SweepResult:
    rows: List[Tuple[int, float, float]]
    best_k: int
    models: Dict[int, ClusterModel]
    stats: Optional[StandardizationStats] = None


# ----------------------------------------------------------------------------
# Standardisation
# ----------------------------------------------------------------------------
def standardize(X) -> Tuple[np.ndarray, StandardizationStats]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ClusterError("standardize needs an (n, d) matrix with n >= 2")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    retained = std > MIN_STD
    dropped = int((~retained).sum())
    if dropped:
        logger.warning(f"Dropping {dropped} zero-variance feature(s) before clustering")
    stats = StandardizationStats(mean, std, retained)
    return apply_standardization(X, stats), stats


def apply_standardization(X, stats: StandardizationStats) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return (X[:, stats.retained] - stats.mean[stats.retained]) / stats.std[stats.retained]


def unstandardize(Xs, stats: StandardizationStats) -> np.ndarray:
    """Inverse transform on the retained features."""
    return np.asarray(Xs, dtype=np.float64) * stats.std[stats.retained] + stats.mean[stats.retained]


# ----------------------------------------------------------------------------
# k-means
# ----------------------------------------------------------------------------
def _check_k(X: np.ndarray, k: int):
    if k < 1:
        raise ClusterError(f"k must be >= 1, got {k}")
    if k > X.shape[0]:
        raise ClusterError(f"k={k} exceeds the number of points ({X.shape[0]})")


def _squared_distances(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - centers[None, :, :]
    return np.einsum('nkd,nkd->nk', diff, diff)


def kmeans_pp_init(X, k: int, rng: np.random.Generator) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    _check_k(X, k)
    centers, _ = kmeans_plusplus(X, n_clusters=k, random_state=int(rng.integers(_SEED_BOUND)),
                                 n_local_trials=1)
    return centers


def _assign(X: np.ndarray, centers: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d2 = _squared_distances(X, centers)
    labels = d2.argmin(axis=1)
    return labels, d2


def _repair_empty(X: np.ndarray, centers: np.ndarray, labels: np.ndarray, d2: np.ndarray):
    """Reseed each empty cluster on the point farthest from its own centroid."""
    k = centers.shape[0]
    for _ in range(k):
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        j = int(empty[0])
        own = d2[np.arange(len(labels)), labels]
        own[counts[labels] <= 1] = -1.0  # never strip a singleton
        far = int(own.argmax())
        centers[j] = X[far]
        d2 = _squared_distances(X, centers)
        labels = d2.argmin(axis=1)
        labels[far] = j
    return centers, labels, d2


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    history: List[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels, d2 = _assign(X, centers)
        centers, labels, d2 = _repair_empty(X, centers, labels, d2)
        inertia = float(d2[np.arange(len(labels)), labels].sum())
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            logger.warning(f"Lloyd iteration {n_iter} increased inertia {history[-1]:.6g} -> {inertia:.6g}")
        history.append(inertia)
        new_centers = np.vstack([X[labels == j].mean(axis=0) for j in range(centers.shape[0])])
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if shift < tol:
            break
    labels, d2 = _assign(X, centers)
    centers, labels, d2 = _repair_empty(X, centers, labels, d2)
    inertia = float(d2[np.arange(len(labels)), labels].sum())
    history.append(inertia)
    return centers, labels, inertia, n_iter, history


def kmeans_fit(X, k: int, rng: np.random.Generator, restarts: int = 10, max_iter: int = 300,
               tol: float = 1e-4, stats: Optional[StandardizationStats] = None,
               score: bool = True) -> ClusterModel:
    X = np.asarray(X, dtype=np.float64)
    _check_k(X, k)
    seeds = rng.integers(_SEED_BOUND, size=max(1, restarts))
    best: Optional[ClusterModel] = None
    for seed in seeds:
        init = kmeans_pp_init(X, k, np.random.default_rng(int(seed)))
        centers, labels, inertia, n_iter, history = _lloyd(X, init.copy(), max_iter, tol)
        if best is None or inertia < best.inertia:
            best = ClusterModel(k=k, centroids=centers, labels=labels, inertia=inertia, seed=int(seed),
                                stats=stats, n_iter=n_iter, inertia_history=history)
    if score and k >= 2:
        best.silhouette = silhouette(X, best.labels)
    logger.debug(f"k={k}: inertia={best.inertia:.6g} silhouette={best.silhouette}")
    return best


def silhouette(X, labels) -> float:
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    n_labels = len(np.unique(labels))
    if n_labels < 2:
        raise ClusterError("silhouette needs at least two clusters")
    if n_labels == X.shape[0]:
        return 0.0  # every point is a singleton
    return float(silhouette_score(X, labels, metric='euclidean'))


def sweep_k(X, rng: np.random.Generator, k_range: Iterable[int] = range(2, 11), restarts: int = 10,
            standardized: bool = False) -> SweepResult:
    """Fit one model per k and pick the best k by silhouette.

    With ``standardized=False`` the input is z-scored first.
    """
    X = np.asarray(X, dtype=np.float64)
    stats = None
    if not standardized:
        X, stats = standardize(X)
    ks = sorted(set(k_range))
    if not ks or ks[0] < 2:
        raise ClusterError("k_range must contain values >= 2")
    _check_k(X, ks[-1])
    rows, models = [], {}
    for k in ks:
        model = kmeans_fit(X, k, rng, restarts=restarts, stats=stats)
        models[k] = model
        rows.append((k, model.silhouette, model.inertia))
        logger.info(f"k={k}: silhouette={model.silhouette:.4f} inertia={model.inertia:.4f}")
    best_k = max(rows, key=lambda r: (r[1], -r[0]))[0]
    return SweepResult(rows, best_k, models, stats)


def fit_clusters(X, k: int, rng: np.random.Generator, restarts: int = 10) -> ClusterModel:
    """Standardize raw embeddings and fit k-means on them."""
    Xs, stats = standardize(X)
    return kmeans_fit(Xs, k, rng, restarts=restarts, stats=stats)


def assign(model: ClusterModel, X) -> np.ndarray:
    """Label new (raw) embeddings with a fitted model."""
    X = np.asarray(X, dtype=np.float64)
    if model.stats is not None:
        X = apply_standardization(X, model.stats)
    labels, _ = _assign(X, model.centroids)
    return labels


# ----------------------------------------------------------------------------
# Assignment tables
# ----------------------------------------------------------------------------
def cluster_timeline(assignments: Dict[Key, int], participant_id: str) -> List[Tuple[datetime.date, int]]:
    timeline = sorted((date, label) for (pid, date), label in assignments.items() if pid == participant_id)
    if not timeline:
        raise ClusterError(f"no assignments for participant {participant_id!r}")
    return timeline


def write_timeline(path, timelines: Dict[str, List[Tuple[datetime.date, int]]]):
    """One row per recorded day; ``changed`` is 1 when the cluster differs from the previous day's."""
    rows = []
    for pid in sorted(timelines):
        previous = None
        for date, label in timelines[pid]:
            rows.append({"participant_id": pid, "date": date.isoformat(), "cluster": int(label),
                         "changed": int(previous is not None and label != previous)})
            previous = label
    write_csv(path, rows, ["participant_id", "date", "cluster", "changed"])


def write_assignments(path, keys: Sequence[Key], labels: Sequence[int]):
    write_csv(path, ({"participant_id": pid, "date": date.isoformat(), "cluster": int(label)}
                     for (pid, date), label in zip(keys, labels)),
              ["participant_id", "date", "cluster"])


def read_assignments(path) -> Dict[Key, int]:
    out: Dict[Key, int] = {}
    with open(path, 'rb') as f:
        for line, row in iter_csv_rows(f, ("participant_id", "date", "cluster")):
            try:
                out[(row["participant_id"], datetime.date.fromisoformat(row["date"]))] = int(row["cluster"])
            except (TypeError, ValueError):
                raise ClusterError(f"{path} line {line}: malformed assignment row")
    return out


def write_sweep(path, result: SweepResult):
    write_csv(path, ({"k": k, "silhouette": repr(float(s)), "inertia": repr(float(i))} for k, s, i in result.rows),
              ["k", "silhouette", "inertia"])
