"""Fixed class-centroid mixture prior on a hypersphere."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class CentroidPrior:
    centroids: np.ndarray          # (M, K)
    radius: float
    min_separation: float
    subject_ids: tuple[int, ...]   # subject_ids[i] owns centroids[i]
    seed: int = 0

    @property
    def M(self) -> int:
        return self.centroids.shape[0]

    @property
    def K(self) -> int:
        return self.centroids.shape[1]

    @property
    def label_map(self) -> dict[int, int]:
        return {sid: i for i, sid in enumerate(self.subject_ids)}

    def index_of(self, subject_id: int) -> int:
        try:
            return self.label_map[int(subject_id)]
        except KeyError:
            raise KeyError(f"subject {subject_id} has no centroid") from None

    def with_centroids(self, centroids: np.ndarray) -> "CentroidPrior":
        return CentroidPrior(np.asarray(centroids, dtype=np.float64), self.radius,
                             self.min_separation, self.subject_ids, self.seed)


def _min_pairwise(x: np.ndarray) -> float:
    d = np.linalg.norm(x[:, None] - x[None], axis=-1)
    d[np.diag_indices(len(x))] = np.inf
    return float(d.min())


def place_centroids(M: int, K: int, R: float = 10.0, d_min: float = 10.0, seed: int = 0,
                    subject_ids=None, max_iter: int = 10_000, tol: float = 1e-13) -> CentroidPrior:
    """Spread M points on the radius-R sphere in R^K by projected repulsion.

    Start from uniform random directions, then follow the gradient of an
    inverse-square Riesz energy projected back onto the sphere until the
    configuration stops moving or the iteration budget runs out.
    """
    if M < 1 or K < 1 or R <= 0 or d_min < 0:
        raise ValueError("need M, K >= 1, R > 0, d_min >= 0")
    rng = np.random.default_rng(seed)
    if K == 1:
        # the 0-sphere has no tangent directions; alternate the two poles
        x = np.where(np.arange(M) % 2 == 0, 1.0, -1.0)[:, None]
    else:
        x = rng.standard_normal((M, K))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    step = 0.05
    if M > 1 and K > 1:
        for _ in range(max_iter):
            diff = x[:, None, :] - x[None, :, :]
            d2 = np.einsum("ijk,ijk->ij", diff, diff)
            np.fill_diagonal(d2, np.inf)
            force = (diff / d2[..., None] ** 2).sum(axis=1)
            # keep only the tangential component
            force -= np.einsum("ij,ij->i", force, x)[:, None] * x
            scale = np.abs(force).max()
            if scale == 0:
                break
            new = x + step * force / max(scale, 1.0)
            new /= np.linalg.norm(new, axis=1, keepdims=True)
            moved = np.abs(new - x).max()
            x = new
            if moved < tol:
                break
    centroids = R * x
    # renormalise exactly on the sphere
    centroids *= R / np.linalg.norm(centroids, axis=1, keepdims=True)
    sep = _min_pairwise(centroids) if M > 1 else np.inf
    if sep < d_min:
        raise PlacementError(
            f"could not reach separation {d_min} for M={M}, K={K}, R={R}; best {sep:.6g}")
    ids = tuple(range(1, M + 1)) if subject_ids is None else tuple(int(s) for s in subject_ids)
    if len(ids) != M or len(set(ids)) != M:
        raise ValueError("subject_ids must be M distinct ids")
    return CentroidPrior(centroids, float(R), float(d_min), ids, seed)


def sample_prior(prior: CentroidPrior, subject_id, rng: np.random.Generator,
                 centroids: np.ndarray | None = None) -> np.ndarray:
    """z* = mu_i + standard normal noise; vectorised over an array of ids."""
    mu = prior.centroids if centroids is None else centroids
    ids = np.atleast_1d(subject_id)
    idx = np.array([prior.index_of(s) for s in ids])
    z = mu[idx] + rng.standard_normal((len(idx), mu.shape[1]))
    return z[0] if np.ndim(subject_id) == 0 else z


def log_mixture_likelihood(prior: CentroidPrior | np.ndarray, z) -> np.ndarray | float:
    """log p(z) for the equal-weight mixture of N(mu_i, I)."""
    mu = prior.centroids if isinstance(prior, CentroidPrior) else np.asarray(prior)
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    M, K = mu.shape
    if z2.shape[1] != K:
        raise ValueError(f"z has length {z2.shape[1]}, prior has K={K}")
    sq = ((z2[:, None, :] - mu[None, :, :]) ** 2).sum(axis=-1)
    out = logsumexp(-0.5 * sq, axis=1) - np.log(M) - 0.5 * K * np.log(2 * np.pi)
    return float(out[0]) if single else out


def mixture_likelihood(prior, z):
    return np.exp(log_mixture_likelihood(prior, z))
