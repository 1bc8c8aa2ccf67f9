"""Plain multi-domain trainer used as an oracle.

It never builds an inner step or covariances: each outer iteration sums the
meta-train loss gradient over all ordered domain pairs and applies SGD with
momentum. Batches are drawn in the same order as the episodic trainer, so
with ``lam == 1`` the two must agree bit for bit.
"""

import numpy as np

from cdtlearn import tensor as T
from cdtlearn.data import sample_triplets
from cdtlearn.losses import LossConfig, lmcl_from_cosines, triplet_loss
from cdtlearn.model import ModelConfig, forward_all, init_params
from cdtlearn.trainer import ClassIndex


def reference_train(domains, cfg, loss_cfg=None):
    loss_cfg = loss_cfg or LossConfig()
    classes = ClassIndex.from_domains(domains)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(ModelConfig(input_dim=domains[0].input_dim, num_classes=len(classes)), rng)
    values = params.values()
    velocity = [np.zeros(p.shape) for p in values]
    k = len(domains)
    for step in range(cfg.steps):
        acc = [np.zeros(p.shape) for p in values]
        for i in range(k):
            for j in range(k):
                if j == i:
                    continue
                sample_triplets(domains[i], cfg.batch_size, rng)  # meta-test batch, unused
                batch = sample_triplets(domains[j], cfg.batch_size, rng)
                x, y = batch.stacked()
                _, _, emb, cos = forward_all(params, x)
                b = len(batch)
                loss = T.Tensor(0.0)
                if cfg.use_cls:
                    loss = loss + lmcl_from_cosines(cos, classes.rows(y), loss_cfg.s, loss_cfg.m, loss_cfg.lmcl_form)
                if cfg.use_trp:
                    loss = loss + triplet_loss(emb[0:b], emb[b:2 * b], emb[2 * b:3 * b], loss_cfg.rho)
                for a, g in zip(acc, T.grad(loss, values)):
                    a += g.data
        lr = cfg.beta * 2.0 ** (-(step // cfg.decay_steps)) / k
        for p, g, v in zip(values, acc, velocity):
            v *= cfg.momentum
            v += g + cfg.weight_decay * p.data
            p.data = p.data - lr * v
    return params
