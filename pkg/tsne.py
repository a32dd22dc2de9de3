"""Exact t-SNE to two dimensions.

Row bandwidths come from a bisection on the conditional entropy, the joint
affinities are symmetrised, and the layout is fitted by gradient descent with
momentum, per-coordinate gains and an early exaggeration phase.
"""

import datetime
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import pdist, squareform

from cluster import standardize
from csv_helper import write_csv
from errors import TsneError
from settings import derive_seed

logger = logging.getLogger(__name__)

Key = Tuple[str, datetime.date]

ENTROPY_TOL = 1e-5
MAX_BISECTION_STEPS = 50
MIN_GAIN = 0.01


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    early_exaggeration: float = 12.0
    learning_rate: Union[str, float] = 'auto'
    n_iter: int = 1000
    exaggeration_iters: int = 250
    momentum: float = 0.5
    final_momentum: float = 0.8
    init_std: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.n_iter < self.exaggeration_iters:
            raise TsneError(f"n_iter ({self.n_iter}) must be >= exaggeration_iters ({self.exaggeration_iters})")
        if self.perplexity <= 1:
            raise TsneError(f"perplexity must be > 1, got {self.perplexity}")
        if self.learning_rate != 'auto':
            try:
                lr = float(self.learning_rate)
            except (TypeError, ValueError):
                raise TsneError(f"learning_rate must be 'auto' or a number, got {self.learning_rate!r}")
            if lr <= 0:
                raise TsneError("learning_rate must be positive")
            object.__setattr__(self, 'learning_rate', lr)

    def check(self, n: int):
        if n < 4:
            raise TsneError(f"t-SNE needs at least 4 points, got {n}")
        if self.perplexity >= (n - 1) / 3:
            raise TsneError(f"perplexity {self.perplexity} too large for {n} points (must be < {(n - 1) / 3:.4g})")

    def resolve_learning_rate(self, n: int) -> float:
        if self.learning_rate == 'auto':
            return n / 48
        return float(self.learning_rate)

    def to_dict(self):
        return {
            "perplexity": self.perplexity,
            "early_exaggeration": self.early_exaggeration,
            "learning_rate": self.learning_rate,
            "n_iter": self.n_iter,
            "exaggeration_iters": self.exaggeration_iters,
            "momentum": self.momentum,
            "final_momentum": self.final_momentum,
            "init_std": self.init_std,
            "seed": self.seed,
        }


@dataclass
class TsneResult:
    Y: np.ndarray
    kl_history: List[float] = field(default_factory=list)
    learning_rate: float = 0.0
    exaggeration_kl: Optional[float] = None  # KL against the true P when exaggeration ends


# ----------------------------------------------------------------------------
# Affinities
# ----------------------------------------------------------------------------
def _entropy(Ds: np.ndarray, beta: np.ndarray, offdiag: np.ndarray):
    P = np.exp(-Ds * beta[:, None]) * offdiag
    sumP = P.sum(axis=1)
    H = np.log(sumP) + beta * (Ds * P).sum(axis=1) / sumP
    return H, P / sumP[:, None]


def conditional_affinities(X, perplexity: float, tol: float = ENTROPY_TOL,
                           max_steps: int = MAX_BISECTION_STEPS) -> np.ndarray:
    """Row-stochastic P(j|i) whose row entropies equal log(perplexity)."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 4:
        raise TsneError(f"affinities need at least 4 points, got {n}")
    if not 1 < perplexity < n - 1:
        raise TsneError(f"perplexity {perplexity} is infeasible for {n} points")
    offdiag = ~np.eye(n, dtype=bool)
    D = squareform(pdist(X, 'sqeuclidean'))
    # shifting a row by its nearest distance leaves the conditional unchanged
    row_min = np.where(offdiag, D, np.inf).min(axis=1)
    Ds = np.where(offdiag, D - row_min[:, None], 0.0)

    row_mean = Ds.sum(axis=1) / (n - 1)
    beta = np.where(row_mean > 0, 1.0 / np.where(row_mean > 0, row_mean, 1.0), 1.0)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    flat = Ds.max(axis=1) == 0  # equidistant rows: entropy does not depend on beta
    target = np.log(perplexity)

    H, P = _entropy(Ds, beta, offdiag)
    for _ in range(max_steps):
        done = flat | (np.abs(H - target) < tol)
        if done.all():
            break
        up = (H > target) & ~done
        down = (H < target) & ~done
        lo = np.where(up, beta, lo)
        hi = np.where(down, beta, hi)
        beta = np.where(up, np.where(np.isinf(hi), beta * 2, (beta + hi) / 2), beta)
        beta = np.where(down, (beta + lo) / 2, beta)
        H, P = _entropy(Ds, beta, offdiag)

    bad = ~(flat | (np.abs(H - target) < tol))
    if bad.any():
        raise TsneError(f"perplexity search did not converge for {int(bad.sum())} row(s)")
    logger.debug(f"Mean sigma: {np.mean(np.sqrt(1 / beta)):.4g}")
    return P


def pairwise_affinities(X, perplexity: float = 30.0) -> np.ndarray:
    C = conditional_affinities(X, perplexity)
    return (C + C.T) / (2 * C.shape[0])


# ----------------------------------------------------------------------------
# Objective
# ----------------------------------------------------------------------------
def _student_t(Y: np.ndarray) -> np.ndarray:
    num = 1.0 / (1.0 + squareform(pdist(Y, 'sqeuclidean')))
    np.fill_diagonal(num, 0.0)
    return num


def joint_q(Y) -> np.ndarray:
    num = _student_t(np.asarray(Y, dtype=np.float64))
    return num / num.sum()


def kl_divergence(P, Y) -> float:
    P = np.asarray(P, dtype=np.float64)
    Q = joint_q(Y)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def kl_gradient(P, Y) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    num = _student_t(Y)
    W = (P - num / num.sum()) * num
    return 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)


# ----------------------------------------------------------------------------
# Fitting
# ----------------------------------------------------------------------------
def tsne_fit(X, config: TsneConfig = TsneConfig(), rng: Optional[np.random.Generator] = None) -> TsneResult:
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    config.check(n)
    Xs, _ = standardize(X)
    P = pairwise_affinities(Xs, config.perplexity)
    lr = config.resolve_learning_rate(n)
    rng = rng or np.random.default_rng(derive_seed(config.seed, 'tsne'))

    Y = rng.normal(0.0, config.init_std, size=(n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    result = TsneResult(Y, learning_rate=lr)
    logger.info(f"t-SNE on {n} points: perplexity={config.perplexity} lr={lr:.4g}")

    for it in range(config.n_iter):
        exaggerating = it < config.exaggeration_iters
        target = P * config.early_exaggeration if exaggerating else P
        momentum = config.momentum if exaggerating else config.final_momentum
        grad = kl_gradient(target, Y)
        gains = np.where((grad > 0) != (update > 0), gains + 0.2, gains * 0.8)
        np.maximum(gains, MIN_GAIN, out=gains)
        update = momentum * update - lr * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
        if not np.all(np.isfinite(Y)):
            raise TsneError(f"t-SNE diverged at iteration {it + 1}")
        kl = kl_divergence(P, Y)
        result.kl_history.append(kl)
        if it + 1 == config.exaggeration_iters:
            result.exaggeration_kl = kl
        if (it + 1) % 100 == 0:
            logger.debug(f"Iteration {it + 1}: KL {kl:.5f}")
    result.Y = Y
    logger.info(f"t-SNE finished, KL {result.kl_history[-1] if result.kl_history else float('nan'):.5f}")
    return result


def sample_rows(n_total: int, n_sample: Optional[int], rng: np.random.Generator) -> np.ndarray:
    """Sorted random subset of row indices; every row when n_sample is None or too large."""
    if n_sample is None or n_sample >= n_total:
        return np.arange(n_total)
    if n_sample < 1:
        raise TsneError(f"sample size must be positive, got {n_sample}")
    return np.sort(rng.choice(n_total, size=n_sample, replace=False))


def write_coordinates(path, keys: Sequence[Key], Y: np.ndarray):
    write_csv(path, ({"participant_id": pid, "date": date.isoformat(), "y1": repr(float(y[0])), "y2": repr(float(y[1]))}
                     for (pid, date), y in zip(keys, Y)),
              ["participant_id", "date", "y1", "y2"])


def write_kl_history(path, result: TsneResult):
    write_csv(path, ({"iteration": i, "kl": repr(kl)} for i, kl in enumerate(result.kl_history, start=1)),
              ["iteration", "kl"])
