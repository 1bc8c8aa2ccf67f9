"""Training losses: cross-domain triplet, triplet, and large-margin cosine."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .metrics import PairCovariance, positions, quadratic_rows

NORM_TOL = 1e-6
LMCL_FORMS = ("paper", "cosface")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 1.0
    rho: float = 1.0
    m: float = 0.5
    s: float = 10.0
    lmcl_form: str = "paper"

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError(f"tau must be positive, got {self.tau}")
        if not self.rho > 0:
            raise ContractError(f"rho must be positive, got {self.rho}")
        if not self.s > 0:
            raise ContractError(f"s must be positive, got {self.s}")
        if not 0 <= self.m < 1:
            raise ContractError(f"m must lie in [0, 1), got {self.m}")
        if self.lmcl_form not in LMCL_FORMS:
            raise ContractError(f"lmcl_form must be one of {LMCL_FORMS}, got {self.lmcl_form!r}")


def _sigma(metric):
    return metric.as_tensor() if isinstance(metric, PairCovariance) else T.as_tensor(metric)


def _check_normalized(x, what):
    norms = np.linalg.norm(x.data, axis=-1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise ContractError(f"{what} must be l2-normalized (max |norm-1| = {np.max(np.abs(norms - 1.0)):.3g})")


def position_energy(first, second, metric):
    """Per-sample mean over grid positions of squared Mahalanobis distances.

    ``first`` and ``second`` are ``(B, H, W, D)`` maps; result has shape ``(B,)``.
    """
    first, second = T.as_tensor(first), T.as_tensor(second)
    if first.shape != second.shape:
        raise DimensionError(f"feature map shapes differ: {first.shape} vs {second.shape}")
    sigma = _sigma(metric)
    b, h, w, d = first.shape
    if sigma.shape != (d, d):
        raise DimensionError(f"covariance is {sigma.shape}, feature depth is {d}")
    q = quadratic_rows(positions(first - second), sigma)
    return T.mean(q.reshape(b, h * w), axis=1)


def cdt_margins(anchor, positive, negative, sigma_pos, sigma_neg, tau):
    """Pre-hinge CDT arguments, one per triplet."""
    if T.as_tensor(anchor).shape[0] == 0:
        raise ContractError("cdt_loss needs at least one triplet")
    e_pos = position_energy(anchor, positive, sigma_pos)
    e_neg = position_energy(anchor, negative, sigma_neg)
    return e_pos - e_neg + float(tau)


def cdt_loss(anchor, positive, negative, sigma_pos, sigma_neg, tau=1.0):
    """Cross-domain triplet loss.

    Distances between (anchor, positive) maps use ``sigma_pos`` and between
    (anchor, negative) maps use ``sigma_neg``; both metrics are expected to
    come from a different domain than the maps.
    """
    return T.mean(T.relu(cdt_margins(anchor, positive, negative, sigma_pos, sigma_neg, tau)))


def triplet_loss(anchor, positive, negative, rho=1.0):
    """Mean hinge of ``|a-p|^2 - |a-n|^2 + rho`` over l2-normalized ``(B, e)`` embeddings."""
    anchor, positive, negative = T.as_tensor(anchor), T.as_tensor(positive), T.as_tensor(negative)
    if not anchor.shape == positive.shape == negative.shape:
        raise DimensionError(
            f"triplet shapes differ: {anchor.shape}, {positive.shape}, {negative.shape}"
        )
    if anchor.ndim != 2 or anchor.shape[0] == 0:
        raise ContractError(f"triplet_loss expects a nonempty (B, e) batch, got {anchor.shape}")
    for t, what in ((anchor, "anchor"), (positive, "positive"), (negative, "negative")):
        _check_normalized(t, what)
    dp = anchor - positive
    dn = anchor - negative
    margins = T.tsum(dp * dp, axis=1) - T.tsum(dn * dn, axis=1) + float(rho)
    return T.mean(T.relu(margins))


def lmcl_logits(cosines, labels, s, m, form="paper"):
    """Scaled margin logits. ``form="paper"`` gives ``s*cos - m`` on the target
    class, ``form="cosface"`` gives ``s*(cos - m)``."""
    cosines = T.as_tensor(cosines)
    n, c = cosines.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"got {labels.shape[0] if labels.ndim else 0} labels for {n} features")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    if form not in LMCL_FORMS:
        raise ContractError(f"unknown LMCL form {form!r}")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    margin = m if form == "paper" else s * m
    return T.scale(cosines, s) - T.Tensor(margin * onehot), onehot


def lmcl_from_cosines(cosines, labels, s, m, form="paper"):
    logits, onehot = lmcl_logits(cosines, labels, s, m, form)
    n, c = logits.shape
    # shift by the detached row max for a stable log-sum-exp
    shift = T.Tensor(np.broadcast_to(logits.data.max(axis=1, keepdims=True), (n, c)))
    z = logits - shift
    lse = T.log(T.tsum(T.exp(z), axis=1))
    target = T.tsum(z * T.Tensor(onehot), axis=1)
    return T.mean(lse - target)


def lmcl_loss(features, labels, weights, s=10.0, m=0.5, form="paper"):
    """Large margin cosine loss over l2-normalized features ``(N, e)`` and class weights ``(C, e)``."""
    features, weights = T.as_tensor(features), T.as_tensor(weights)
    if features.ndim != 2 or weights.ndim != 2 or features.shape[1] != weights.shape[1]:
        raise DimensionError(f"features {features.shape} and weights {weights.shape} do not match")
    _check_normalized(features, "features")
    _check_normalized(weights, "class weights")
    return lmcl_from_cosines(features @ weights.T, labels, s, m, form)
