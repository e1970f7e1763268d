"""Small 2D Gaussian mixture fit (EM with k-means++ seeding).

Used to summarize the particle cloud: the summed area of the component
covariance ellipses drives the adaptive particle count.
"""

from dataclasses import dataclass

import numpy as np

__all__ = ["GmmComponent", "fit_gmm", "ellipse_area"]

COV_FLOOR = 1e-6
MAX_ITERS = 50
LL_TOL = 1e-6


@dataclass
class GmmComponent:
    weight: float
    mean: np.ndarray  # (2,)
    cov: np.ndarray  # (2, 2)


def _kmeanspp_seeds(points, k, rng):
    n = len(points)
    centers = np.empty((k, 2))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
            continue
        probs = d2 / total
        centers[j] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def _floor_cov(cov):
    """Symmetrize and clip eigenvalues so every covariance stays SPD."""
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.maximum(evals, COV_FLOOR)
    return (evecs * evals) @ evecs.T


def fit_gmm(points, k, rng):
    """Fit a k-component full-covariance GMM to 2D points via EM.

    Runs at most MAX_ITERS iterations or until the total log-likelihood
    changes by less than LL_TOL.  Covariance eigenvalues are floored at
    COV_FLOOR so degenerate clouds (all particles identical) yield point
    components instead of singular matrices.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(points)
    if n < k:
        raise ValueError(f"need at least {k} points to fit {k} components")

    means = _kmeanspp_seeds(points, k, rng)
    covs = np.array([_floor_cov(np.cov(points.T) if n > 1 else np.zeros((2, 2))) for _ in range(k)])
    weights = np.full(k, 1.0 / k)

    prev_ll = -np.inf
    for _ in range(MAX_ITERS):
        # E-step: log responsibilities under each component
        log_prob = np.empty((n, k))
        for j in range(k):
            diff = points - means[j]
            chol = np.linalg.cholesky(covs[j])
            sol = np.linalg.solve(chol, diff.T)
            maha = np.sum(sol**2, axis=0)
            log_det = 2.0 * np.sum(np.log(np.diag(chol)))
            log_prob[:, j] = -0.5 * (maha + log_det + 2.0 * np.log(2.0 * np.pi)) + np.log(weights[j])
        m = log_prob.max(axis=1, keepdims=True)
        log_norm = m + np.log(np.exp(log_prob - m).sum(axis=1, keepdims=True))
        ll = float(log_norm.sum())
        resp = np.exp(log_prob - log_norm)

        # M-step
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / n
        means = (resp.T @ points) / nk[:, None]
        for j in range(k):
            diff = points - means[j]
            covs[j] = _floor_cov((resp[:, j][:, None] * diff).T @ diff / nk[j])

        if abs(ll - prev_ll) < LL_TOL:
            break
        prev_ll = ll

    return [GmmComponent(weight=float(weights[j]), mean=means[j].copy(), cov=covs[j].copy()) for j in range(k)]


def ellipse_area(components):
    """Summed area of the 1-sigma covariance ellipses: sum_k pi * sqrt(det cov_k)."""
    return float(sum(np.pi * np.sqrt(np.linalg.det(c.cov)) for c in components))
