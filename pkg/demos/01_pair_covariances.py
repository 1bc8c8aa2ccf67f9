"""
Pair covariances and the Mahalanobis view of a triplet
======================================================

Each domain gets its own random affine distortion. Here we look at how the
positive and negative pair covariances of an untrained model differ between
domains, and what the cross-domain triplet loss sees when one domain's
covariances score another domain's triplets.
"""

import numpy as np

from cdtlearn import SynthConfig, generate, init_params, ModelConfig, sample_triplets, sym_eig
from cdtlearn.losses import cdt_loss
from cdtlearn.metrics import identity_metric, mahalanobis_sq
from cdtlearn.model import forward_all
from cdtlearn.trainer import ClassIndex, pair_covariances

domains = generate(SynthConfig(seed=0))
classes = ClassIndex.from_domains(domains)
params = init_params(ModelConfig(input_dim=16, num_classes=len(classes)), np.random.default_rng(0))
rng = np.random.default_rng(1)

batches = [sample_triplets(ds, 8, rng) for ds in domains]
covs = [pair_covariances(params, b) for b in batches]

# spectrum of each domain's covariances
for ds, (pos, neg) in zip(domains, covs):
    w_pos, _ = sym_eig(pos.sigma)
    w_neg, _ = sym_eig(neg.sigma)
    print(f"domain {ds.domain_id}: N={pos.sample_count} differences, "
          f"top eig pos {w_pos[0]:.3f} neg {w_neg[0]:.3f}, ratio of traces {np.trace(neg.sigma) / np.trace(pos.sigma):.2f}")

# r'Sr is the squared length of r after whitening by the eigenbasis
pos = covs[0][0]
w, v = sym_eig(pos.sigma)
r = rng.normal(size=pos.dim)
print("\nr'Sr               ", mahalanobis_sq(r, np.zeros_like(r), pos).item())
print("|L^1/2 V'r|^2      ", float(np.sum((np.sqrt(w) * (v.T @ r)) ** 2)))


def maps_of(params, batch):
    x, _ = batch.stacked()
    maps = forward_all(params, x)[0].data
    b = len(batch)
    return maps[:b], maps[b:2 * b], maps[2 * b:]


# domain 1's triplets, scored under every domain's metric
a, p, n = maps_of(params, batches[1])
d = pos.dim
print("\nCDT loss of domain 1 triplets")
print(f"  identity metric      {cdt_loss(a, p, n, identity_metric(d).sigma, identity_metric(d, 'negative').sigma).item():.4f}")
for ds, (sp, sn) in zip(domains, covs):
    print(f"  metric of domain {ds.domain_id}   {cdt_loss(a, p, n, sp.sigma, sn.sigma).item():.4f}")
