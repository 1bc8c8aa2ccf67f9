"""Episodic meta-train / meta-test training with the cross-domain triplet loss.

One outer iteration visits every ordered pair ``(i, j)`` of training domains
with ``i != j``. Domain ``j`` supplies the meta-train loss ``L_s`` and the
pair covariances; domain ``i`` is scored under the adapted parameters
``params - alpha * grad L_s`` by ``L_t``. The mixed gradient
``lam * grad L_s + (1 - lam) * grad L_t`` is summed over all pairs and applied
once, scaled by ``beta / k``.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import sample_triplets
from .errors import ContractError, NumericalError
from .losses import LossConfig, cdt_loss, lmcl_from_cosines, triplet_loss
from .metrics import estimate_covariance
from .model import ModelConfig, ModelParams, forward_all, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.01
    beta: float = 0.1
    lam: float = 0.7
    batch_size: int = 8
    steps: int = 500
    decay_steps: int = 200
    weight_decay: float = 5e-4
    momentum: float = 0.9
    second_order: bool = False
    use_cls: bool = True
    use_trp: bool = True
    use_cdt: bool = True
    cov_grad: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lam must lie in [0, 1], got {self.lam}")
        if not self.alpha >= 0:
            raise ContractError(f"alpha must be non-negative, got {self.alpha}")
        if not self.beta > 0:
            raise ContractError(f"beta must be positive, got {self.beta}")
        if self.batch_size < 2:
            raise ContractError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.steps < 0 or self.decay_steps < 1:
            raise ContractError("steps must be >= 0 and decay_steps >= 1")

    def beta_at(self, step):
        return self.beta * 2.0 ** (-(step // self.decay_steps))


@dataclass
class EpisodeTrace:
    step: int
    meta_test: int
    meta_train: int
    l_s: float
    l_t: float = None
    terms: dict = field(default_factory=dict)
    grad_norm: float = 0.0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


class ClassIndex:
    """Maps global identity labels onto classifier rows."""

    def __init__(self, labels):
        self.labels = [int(c) for c in sorted(set(int(c) for c in labels))]
        self._row = {c: i for i, c in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def rows(self, labels):
        try:
            return np.fromiter((self._row[int(c)] for c in labels), dtype=np.int64, count=len(labels))
        except KeyError as exc:
            raise ContractError(f"identity {exc.args[0]} has no classifier row") from exc

    @classmethod
    def from_domains(cls, domains):
        return cls(np.concatenate([ds.labels for ds in domains]) if domains else [])


def _zero():
    return T.Tensor(0.0)


def _batch_terms(params, batch, classes, loss_cfg, cfg):
    """Forward a triplet batch once; return ``(maps, terms)`` with the enabled cls/trp terms."""
    x, y = batch.stacked()
    maps, _, emb, cos = forward_all(params, x)
    b = len(batch)
    terms = {}
    if cfg.use_cls:
        terms["cls"] = lmcl_from_cosines(cos, classes.rows(y), loss_cfg.s, loss_cfg.m, loss_cfg.lmcl_form)
    if cfg.use_trp:
        terms["trp"] = triplet_loss(emb[0:b], emb[b:2 * b], emb[2 * b:3 * b], loss_cfg.rho)
    return maps, terms


def _total(terms):
    out = _zero()
    for v in terms.values():
        out = out + v
    return out


def meta_train_loss(params, batch_j, classes, loss_cfg, cfg):
    """``L_s``: classification mean over all 3B images plus the triplet loss."""
    _, terms = _batch_terms(params, batch_j, classes, loss_cfg, cfg)
    return _total(terms), terms


def meta_test_loss(params_prime, batch_i, sigma_pos, sigma_neg, classes, loss_cfg, cfg):
    """``L_t``: the ``L_s`` terms on the meta-test batch plus the cross-domain triplet term."""
    maps, terms = _batch_terms(params_prime, batch_i, classes, loss_cfg, cfg)
    if cfg.use_cdt:
        b = len(batch_i)
        terms["cdt"] = cdt_loss(maps[0:b], maps[b:2 * b], maps[2 * b:3 * b], sigma_pos, sigma_neg, loss_cfg.tau)
    return _total(terms), terms


def pair_covariances(params, batch, track_grad=False):
    """Positive and negative pair covariances of a batch under ``params``."""
    b = len(batch)
    x, _ = batch.stacked()
    if track_grad:
        maps = forward_all(params, x)[0]
    else:
        with T.no_grad():
            maps = forward_all(params, x)[0]
    a, p, n = maps[0:b], maps[b:2 * b], maps[2 * b:3 * b]
    return (
        estimate_covariance(a, p, "positive", track_grad=track_grad),
        estimate_covariance(a, n, "negative", track_grad=track_grad),
    )


def _check_finite(value, step, what):
    if not np.isfinite(value):
        raise NumericalError(step, what)


def meta_gradient(theta, loss_s, loss_t, lam, alpha, second_order=False):
    """Mixed gradient ``lam * dL_s/dtheta + (1 - lam) * dL_t(theta')/dtheta``.

    ``theta`` is a list of leaf tensors, ``loss_s(theta)`` gives ``L_s`` and
    ``loss_t(theta_prime, theta)`` gives ``L_t`` at ``theta' = theta -
    alpha * dL_s/dtheta``; ``theta`` is passed along for terms that depend on
    it directly. The exact mode differentiates through the inner step, the
    first-order mode uses ``dL_t/dtheta'`` in its place. With ``lam == 1``
    the meta-test branch is never built.

    Returns ``(l_s, l_t, grads)`` with ``l_t`` None when skipped and
    ``grads`` a list of arrays.
    """
    exact = second_order and lam < 1.0
    l_s = loss_s(theta)
    g_s = T.grad(l_s, theta, create_graph=exact)
    if lam == 1.0:
        return l_s, None, [g.data for g in g_s]
    if exact:
        prime = [p - T.scale(g, alpha) for p, g in zip(theta, g_s)]
    else:
        prime = [T.Tensor(p.data - alpha * g.data, requires_grad=True) for p, g in zip(theta, g_s)]
    l_t = loss_t(prime, theta)
    if exact:
        mixed = T.scale(l_s, lam) + T.scale(l_t, 1.0 - lam)
        return l_s, l_t, [g.data for g in T.grad(mixed, theta)]
    # dL_t/dtheta' stands in for the chain through the inner step; any direct
    # dependence on theta (tracked covariances) is added on top
    n = len(theta)
    g_t = T.grad(l_t, prime + list(theta))
    return l_s, l_t, [lam * gs.data + (1.0 - lam) * (a.data + b.data)
                      for gs, a, b in zip(g_s, g_t[:n], g_t[n:])]


def run_episode(params, domains, i, step, cfg, rng, classes, loss_cfg=None, out=None):
    """Accumulate the mixed gradient for meta-test domain ``i`` against every other domain.

    Returns ``(contribution, traces)``; ``contribution`` is a list of arrays
    aligned with ``params``. Passing the outer accumulator as ``out`` adds
    each pair's gradient to it directly, one pair at a time.
    """
    loss_cfg = loss_cfg or LossConfig()
    if len(domains) < 2:
        raise ContractError("an episode needs at least two domains")
    names, values = params.names(), params.values()
    contrib = out if out is not None else [np.zeros(p.shape) for p in values]
    traces = []

    def as_params(tensors):
        return ModelParams(params.config, dict(zip(names, tensors)))

    for j in range(len(domains)):
        if j == i:
            continue
        batch_i = sample_triplets(domains[i], cfg.batch_size, rng)
        batch_j = sample_triplets(domains[j], cfg.batch_size, rng)
        terms = {}

        def loss_s(theta):
            l_s, s_terms = meta_train_loss(as_params(theta), batch_j, classes, loss_cfg, cfg)
            _check_finite(l_s.item(), step, "L_s")
            terms.update({f"s.{k}": v.item() for k, v in s_terms.items()})
            return l_s

        def loss_t(prime, theta):
            # covariances come from the meta-train batch under the pre-update parameters
            sig_pos, sig_neg = pair_covariances(as_params(theta), batch_j, track_grad=cfg.cov_grad)
            l_t, t_terms = meta_test_loss(as_params(prime), batch_i, sig_pos, sig_neg,
                                          classes, loss_cfg, cfg)
            _check_finite(l_t.item(), step, "L_t")
            terms.update({f"t.{k}": v.item() for k, v in t_terms.items()})
            return l_t

        l_s, l_t, total = meta_gradient(values, loss_s, loss_t, cfg.lam, cfg.alpha, cfg.second_order)
        for acc, g in zip(contrib, total):
            acc += g
        traces.append(EpisodeTrace(
            step, domains[i].domain_id, domains[j].domain_id, l_s.item(),
            None if l_t is None else l_t.item(), terms,
            float(np.sqrt(sum(np.sum(g * g) for g in total))),
        ))
    return contrib, traces


class OuterOptimizer:
    """SGD with momentum and weight decay on the ``beta/k``-scaled accumulated gradient."""

    def __init__(self, params, cfg, k):
        self.cfg = cfg
        self.k = k
        self.velocity = [np.zeros(p.shape) for p in params.values()]

    def step(self, params, accumulated, step):
        update(params, accumulated, self.k, self.velocity, self.cfg, step)


def update(params, accumulated, k, velocity, cfg, step):
    """In place: ``v <- mu v + (G + wd * theta)``; ``theta <- theta - (beta_t / k) v``."""
    values = params.values()
    if len(accumulated) != len(values) or len(velocity) != len(values):
        raise ContractError("accumulated gradient is not aligned with the parameters")
    lr = cfg.beta_at(step) / k
    for p, g, v in zip(values, accumulated, velocity):
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v *= cfg.momentum
        v += g + cfg.weight_decay * p.data
        p.data = p.data - lr * v


def train(domains, cfg, model_cfg=None, loss_cfg=None, params=None, callback=None):
    """Run ``cfg.steps`` outer iterations over ``domains``.

    Returns ``(params, traces, classes)``. Everything random is drawn from a
    generator seeded with ``cfg.seed``, so identical inputs give identical
    parameter trajectories.
    """
    if len(domains) < 2:
        raise ContractError(f"training needs at least two domains, got {len(domains)}")
    loss_cfg = loss_cfg or LossConfig()
    classes = ClassIndex.from_domains(domains)
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        model_cfg = model_cfg or ModelConfig(input_dim=domains[0].input_dim, num_classes=len(classes))
        params = init_params(model_cfg, rng)
    if params.config.num_classes != len(classes):
        raise ContractError(
            f"model has {params.config.num_classes} classes, training domains have {len(classes)}"
        )
    k = len(domains)
    opt = OuterOptimizer(params, cfg, k)
    traces = []
    for step in range(cfg.steps):
        acc = [np.zeros(p.shape) for p in params.values()]
        for i in range(k):
            _, tr = run_episode(params, domains, i, step, cfg, rng, classes, loss_cfg, out=acc)
            traces.extend(tr)
        opt.step(params, acc, step)
        if callback is not None:
            callback(step, params, tr)
    return params, traces, classes
