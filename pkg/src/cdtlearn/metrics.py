"""Pairwise-difference covariances and Mahalanobis distances.

Feature maps are tensors shaped ``(B, H, W, D)``. Each of the ``H*W`` grid
positions contributes one ``D``-dimensional difference vector, so a batch of
``B`` pairs yields ``N = B*H*W`` samples for the covariance.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, InsufficientSamplesError
from .jacobi import sym_eig

POLARITIES = ("positive", "negative")
RIDGE_FRACTION = 1e-4
RIDGE_FLOOR = 1e-6


@dataclass
class PairCovariance:
    """Covariance of pair differences (``polarity`` says which kind of pair).

    ``tensor`` is only set when the estimate was built with ``track_grad``;
    it then carries the graph back to the feature maps.
    """

    sigma: np.ndarray
    mean: np.ndarray
    sample_count: int
    polarity: str
    ridge: float = 0.0
    tensor: T.Tensor = field(default=None, repr=False, compare=False)

    @property
    def dim(self):
        return self.sigma.shape[0]

    def as_tensor(self):
        return self.tensor if self.tensor is not None else T.Tensor(self.sigma)

    def eig(self):
        return sym_eig(self.sigma)

    def to_json(self):
        return {
            "polarity": self.polarity,
            "d": int(self.dim),
            "sigma": [float(x) for x in self.sigma.ravel()],
            "mean": [float(x) for x in self.mean],
            "sample_count": int(self.sample_count),
        }

    @classmethod
    def from_json(cls, obj):
        d = int(obj["d"])
        sigma = np.asarray(obj["sigma"], dtype=np.float64)
        if sigma.size != d * d:
            raise DimensionError(f"sigma has {sigma.size} entries, expected {d * d}")
        return cls(
            sigma=sigma.reshape(d, d),
            mean=np.asarray(obj["mean"], dtype=np.float64),
            sample_count=int(obj["sample_count"]),
            polarity=obj["polarity"],
        )


def identity_metric(d, polarity="positive"):
    """Euclidean metric wrapped as a PairCovariance."""
    return PairCovariance(np.eye(d), np.zeros(d), 2, polarity)


def positions(fmap):
    """Flatten ``(B, H, W, D)`` maps into ``(B*H*W, D)`` position vectors."""
    fmap = T.as_tensor(fmap)
    if fmap.ndim != 4:
        raise DimensionError(f"expected a (B, H, W, D) feature map, got {fmap.shape}")
    b, h, w, d = fmap.shape
    return fmap.reshape(b * h * w, d)


def difference_tensor(a, b):
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"feature map shapes differ: {a.shape} vs {b.shape}")
    return a - b


def ridge_for(sigma_emp):
    d = sigma_emp.shape[0]
    return max(RIDGE_FRACTION * float(np.trace(sigma_emp)) / d, RIDGE_FLOOR)


def difference_covariance(diffs, polarity, track_grad=False):
    """Unbiased covariance of difference vectors ``diffs`` (shape ``(N, D)``) plus a ridge.

    The ridge is ``max(1e-4 * trace / D, 1e-6)`` times the identity, which keeps
    rank-deficient batches strictly positive definite.
    """
    if polarity not in POLARITIES:
        raise ContractError(f"polarity must be one of {POLARITIES}, got {polarity!r}")
    r = T.as_tensor(diffs)
    if r.ndim != 2:
        raise DimensionError(f"difference vectors must be (N, D), got {r.shape}")
    n, d = r.shape
    if n < 2:
        raise InsufficientSamplesError(f"need at least 2 difference vectors, got {n}")

    x = r.data
    mu = x.mean(axis=0)
    centered = x - mu
    emp = centered.T @ centered / (n - 1)
    emp = 0.5 * (emp + emp.T)
    eps = ridge_for(emp)
    sigma = emp + eps * np.eye(d)

    tensor = None
    if track_grad and r.requires_grad:
        mu_t = T.broadcast_to(T.mean(r, axis=0, keepdims=True), (n, d))
        c = r - mu_t
        tensor = T.scale(c.T @ c, 1.0 / (n - 1)) + T.Tensor(eps * np.eye(d))
    return PairCovariance(sigma, mu, n, polarity, eps, tensor)


def estimate_covariance(first, second, polarity, track_grad=False):
    """Covariance of position-wise differences ``first - second`` over a batch of map pairs."""
    diff = difference_tensor(first, second)
    if not track_grad:
        diff = diff.detach()
    return difference_covariance(positions(diff), polarity, track_grad=track_grad)


def quadratic_rows(r, sigma):
    """Row-wise ``r_i^T sigma r_i`` for ``r`` of shape ``(N, D)``; differentiable in both."""
    r, sigma = T.as_tensor(r), T.as_tensor(sigma)
    return T.tsum(T.mul(r @ sigma, r), axis=1)


def mahalanobis_sq(x, y, metric):
    """Squared Mahalanobis distance ``(x-y)^T S (x-y)``.

    ``x`` and ``y`` may be single vectors (scalar result) or ``(N, D)`` row
    batches (one distance per row).
    """
    x, y = T.as_tensor(x), T.as_tensor(y)
    sigma = metric.as_tensor() if isinstance(metric, PairCovariance) else T.as_tensor(metric)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {y.shape}")
    d = sigma.shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"vectors have dimension {x.shape[-1]}, metric has {d}")
    if x.ndim == 1:
        r = (x - y).reshape(1, d)
        return quadratic_rows(r, sigma).reshape(())
    return quadratic_rows(x - y, sigma)


def alignment_energy(diffs, metric):
    """Mean of ``r^T S r`` over the difference vectors (plain numpy, no graph)."""
    r = np.atleast_2d(np.asarray(diffs, dtype=np.float64))
    if r.size == 0:
        raise ContractError("alignment_energy needs at least one vector")
    sigma = metric.sigma if isinstance(metric, PairCovariance) else np.asarray(metric)
    if r.shape[1] != sigma.shape[0]:
        raise DimensionError(f"vectors have dimension {r.shape[1]}, metric has {sigma.shape[0]}")
    return float(np.mean(np.einsum("ni,ij,nj->n", r, sigma, r)))
