"""Verification and identification protocols on held-out domains.

Scores are cosine similarities (higher means more alike). A pair is accepted
at threshold ``t`` when its score is ``>= t``.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParseError
from .model import forward_final

DEFAULT_FARS = (0.001, 0.01, 0.1)
N_SPLITS = 10


def cosine_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


def identity_flip(x):
    """Test-time augmentation hook; images would concatenate a mirrored copy here."""
    return None


def embed_gallery(params, samples, flip=identity_flip):
    """Final features for ``samples``; ``flip`` may return a second view to concatenate."""
    x = np.asarray(samples, dtype=np.float64)
    with T.no_grad():
        z = forward_final(params, x).data
        extra = flip(x)
        if extra is not None:
            z = np.concatenate([z, forward_final(params, extra).data], axis=1)
    return z


# ROC ----------------------------------------------------------------------------

@dataclass
class ROC:
    thresholds: np.ndarray  # descending; +inf first
    far: np.ndarray
    tar: np.ndarray
    auc: float

    def tar_at(self, level):
        """TAR at FAR ``level``.

        Reads the curve at the first vertex (highest threshold) whose FAR
        reaches ``level``; when no vertex sits exactly on ``level`` the two
        neighbouring vertices are linearly interpolated.
        """
        if not 0.0 <= level <= 1.0:
            raise ContractError(f"FAR level must lie in [0, 1], got {level}")
        k = int(np.searchsorted(self.far, level - 1e-12, side="left"))
        k = min(k, len(self.far) - 1)
        if abs(self.far[k] - level) <= 1e-12 or k == 0:
            return float(self.tar[k])
        f0, f1 = self.far[k - 1], self.far[k]
        t0, t1 = self.tar[k - 1], self.tar[k]
        return float(t0 + (t1 - t0) * (level - f0) / (f1 - f0))

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.far.tolist(), self.tar.tolist()))


def _split(scores, same):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    same = np.asarray(same, dtype=bool).ravel()
    if scores.shape != same.shape:
        raise DimensionError(f"{scores.size} scores for {same.size} labels")
    if not np.all(np.isfinite(scores)):
        raise ContractError("scores must be finite")
    return scores, same


def roc(scores, same):
    """Threshold sweep over the distinct scores, from strictest to loosest."""
    scores, same = _split(scores, same)
    n_pos = int(same.sum())
    n_neg = same.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("roc needs at least one positive and one negative pair")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = np.cumsum(same[order])
    neg = np.cumsum(~same[order])
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tar = np.r_[0.0, pos[ends] / n_pos]
    far = np.r_[0.0, neg[ends] / n_neg]
    thresholds = np.r_[np.inf, s[ends]]
    # fsum is correctly rounded, so the area does not depend on summation order
    auc = math.fsum((far[1:] - far[:-1]) * (tar[1:] + tar[:-1]) / 2.0)
    return ROC(thresholds, far, tar, auc)


# verification accuracy -------------------------------------------------------

def _best_threshold(scores, same):
    """Accuracy-maximizing threshold; ties go to the higher threshold."""
    cand = np.r_[np.inf, np.unique(scores)[::-1]]
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = same[order]
    # accepted at threshold t: all scores >= t
    n_acc = np.searchsorted(-s, -cand, side="right")
    tp = np.r_[0, np.cumsum(pos)][n_acc]
    fp = n_acc - tp
    n_neg = same.size - same.sum()
    correct = tp + (n_neg - fp)
    return float(cand[int(np.argmax(correct))])


def accuracy_at(scores, same, threshold):
    return float(np.mean((scores >= threshold) == same))


def verification_accuracy_10split(splits):
    """Mean held-split accuracy, each split thresholded on the other nine.

    ``splits`` is a sequence of ten ``(scores, same)`` pairs. Returns
    ``(mean, std, per_split_accuracies)``.
    """
    splits = [_split(s, y) for s, y in splits]
    if len(splits) != N_SPLITS:
        raise ContractError(f"expected {N_SPLITS} splits, got {len(splits)}")
    for k, (_, y) in enumerate(splits):
        if 2 * int(y.sum()) != y.size:
            raise ContractError(f"split {k} is not balanced between positive and negative pairs")
    accs = []
    for k, (s, y) in enumerate(splits):
        s_rest = np.concatenate([sc for m, (sc, _) in enumerate(splits) if m != k])
        y_rest = np.concatenate([yy for m, (_, yy) in enumerate(splits) if m != k])
        accs.append(accuracy_at(s, y, _best_threshold(s_rest, y_rest)))
    accs = np.asarray(accs)
    return float(accs.mean()), float(accs.std()), accs.tolist()


# identification --------------------------------------------------------------

def identification_accuracy(references, queries, distractors=None):
    """Fraction of (reference, query) pairs with no different-identity image
    strictly closer to the reference than its query.

    Each argument is ``(features, labels)``; ``references[k]`` is paired with
    ``queries[k]``. Competing images are all references, queries and distractors.
    """
    ref_x, ref_y = np.asarray(references[0], dtype=np.float64), np.asarray(references[1])
    q_x, q_y = np.asarray(queries[0], dtype=np.float64), np.asarray(queries[1])
    if ref_x.shape[0] != q_x.shape[0] or np.any(ref_y != q_y):
        raise ContractError("each query must share its reference's identity")
    if ref_x.shape[0] == 0:
        raise ContractError("identification needs at least one pair")
    parts_x, parts_y = [ref_x, q_x], [ref_y, q_y]
    if distractors is not None and len(distractors[1]):
        d_x, d_y = np.asarray(distractors[0], dtype=np.float64), np.asarray(distractors[1])
        if np.any(np.isin(d_y, ref_y)):
            raise ContractError("distractors must not share identities with the references")
        parts_x.append(d_x)
        parts_y.append(d_y)
    pool_x = np.concatenate(parts_x)
    pool_y = np.concatenate(parts_y)
    sim = cosine_matrix(ref_x, pool_x)
    target = np.diag(cosine_matrix(ref_x, q_x))
    other = pool_y[None, :] != ref_y[:, None]
    beaten = np.any(other & (sim > target[:, None]), axis=1)
    return float(np.mean(~beaten))


def rank1(probes, gallery):
    """Fraction of probes whose most similar gallery item (lowest index on ties) shares the identity."""
    p_x, p_y = np.asarray(probes[0], dtype=np.float64), np.asarray(probes[1])
    g_x, g_y = np.asarray(gallery[0], dtype=np.float64), np.asarray(gallery[1])
    missing = set(p_y.tolist()) - set(g_y.tolist())
    if missing:
        raise ContractError(f"probe identities {sorted(missing)} are absent from the gallery")
    best = np.argmax(cosine_matrix(p_x, g_x), axis=1)
    return float(np.mean(g_y[best] == p_y))


# reports -------------------------------------------------------------------------

@dataclass
class EvalReport:
    held_out_domain: int
    tar_at_far: dict
    auc: float
    rank1: float
    verification_accuracy: float
    verification_std: float
    identification_accuracy: float
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["tar_at_far"] = {str(k): v for k, v in self.tar_at_far.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["tar_at_far"] = {float(k): float(v) for k, v in d["tar_at_far"].items()}
        return cls(**d)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self):
        lines = [f"held-out domain {self.held_out_domain}", "FAR        TAR"]
        for far, tar in sorted(self.tar_at_far.items()):
            lines.append(f"{far:<10g} {tar:.4f}")
        lines.append(f"AUC {self.auc:.4f}  rank-1 {self.rank1:.4f}  "
                     f"verif {self.verification_accuracy:.4f}±{self.verification_std:.4f}  "
                     f"ident {self.identification_accuracy:.4f}")
        return "\n".join(lines)


def write_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.dumps())


def read_report(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return EvalReport.from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, offset=exc.colno) from exc


def write_roc_csv(path, curve):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "tar"])
        for t, f, r in curve.rows():
            w.writerow([repr(t), repr(f), repr(r)])


# protocol ---------------------------------------------------------------------------

def all_pairs(features, labels):
    """Cosine scores and same-identity flags for every unordered pair."""
    sim = cosine_matrix(features, features)
    iu = np.triu_indices(len(labels), k=1)
    labels = np.asarray(labels)
    return sim[iu], labels[iu[0]] == labels[iu[1]]


def balanced_splits(scores, same, rng, n_splits=N_SPLITS):
    """Ten disjoint splits with equal positive and negative counts per split."""
    pos = rng.permutation(np.flatnonzero(same))
    neg = rng.permutation(np.flatnonzero(~same))
    per = min(len(pos), len(neg)) // n_splits
    if per < 1:
        raise ContractError("not enough pairs for a balanced 10-split protocol")
    out = []
    for k in range(n_splits):
        idx = np.r_[pos[k * per:(k + 1) * per], neg[k * per:(k + 1) * per]]
        out.append((scores[idx], same[idx]))
    return out


def identification_sets(labels):
    """Reference = first sample of each identity, query = second; the rest are competitors.

    Returns index arrays ``(ref, query, rest)``; identities with a single
    sample only contribute to ``rest``.
    """
    labels = np.asarray(labels)
    ref, query, rest = [], [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) >= 2:
            ref.append(idx[0])
            query.append(idx[1])
            rest.extend(idx[2:])
        else:
            rest.extend(idx)
    return np.asarray(ref, dtype=np.int64), np.asarray(query, dtype=np.int64), np.asarray(rest, dtype=np.int64)


def identification_with_pool(features, labels):
    """Identification accuracy where every other image in the domain competes.

    The reference/query pairs come from :func:`identification_sets`; the
    remaining same-identity images are not competitors, all others are.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    ref, query, _ = identification_sets(labels)
    sim = cosine_matrix(features[ref], features)
    target = sim[np.arange(len(ref)), query]
    other = labels[None, :] != labels[ref][:, None]
    beaten = np.any(other & (sim > target[:, None]), axis=1)
    return float(np.mean(~beaten))


def evaluate_domain(params, ds, far_levels=DEFAULT_FARS, seed=0, flip=identity_flip):
    """Every protocol on one domain's samples; returns ``(EvalReport, ROC)``."""
    rng = np.random.default_rng(seed)
    z = embed_gallery(params, ds.features, flip=flip)
    y = ds.labels
    scores, same = all_pairs(z, y)
    curve = roc(scores, same)
    acc, std, _ = verification_accuracy_10split(balanced_splits(scores, same, rng))
    ref, query, rest = identification_sets(y)
    gallery_idx = ref
    probe_idx = np.setdiff1d(np.arange(len(y)), gallery_idx)
    r1 = rank1((z[probe_idx], y[probe_idx]), (z[gallery_idx], y[gallery_idx]))
    ident = identification_with_pool(z, y)
    report = EvalReport(
        held_out_domain=int(ds.domain_id),
        tar_at_far={float(f): curve.tar_at(f) for f in far_levels},
        auc=curve.auc,
        rank1=r1,
        verification_accuracy=acc,
        verification_std=std,
        identification_accuracy=ident,
    )
    return report, curve


def leave_one_domain_out(domains, held_out_id, train_fn, far_levels=DEFAULT_FARS, seed=0):
    """Train on every domain except ``held_out_id`` and evaluate on it.

    ``train_fn(train_domains)`` must return trained parameters.
    """
    if len(domains) < 3:
        raise ContractError(f"leave-one-domain-out needs at least 3 domains, got {len(domains)}")
    held = [ds for ds in domains if ds.domain_id == held_out_id]
    if not held:
        raise ContractError(f"no domain with id {held_out_id}")
    train_domains = [ds for ds in domains if ds.domain_id != held_out_id]
    params = train_fn(train_domains)
    report, _ = evaluate_domain(params, held[0], far_levels=far_levels, seed=seed)
    return report
