"""Synthetic multi-domain identity data, class-balanced triplet sampling and dataset files.

Text format (one header line, then one sample per line)::

    CDTDATA 1 dim=<input_dim> domains=<id>,<id>,...
    <domain_id>,<identity>,<x_0>,<x_1>,...

Floats are written with 17 significant digits so values round-trip exactly.
The binary variant stores the same records little-endian; see :func:`dumps_binary`.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, ParseError

TEXT_MAGIC = "CDTDATA"
BINARY_MAGIC = b"CDTB"
FORMAT_VERSION = 1


@dataclass
class DomainDataset:
    domain_id: int
    features: np.ndarray  # (n, input_dim)
    labels: np.ndarray  # (n,) identity labels, unique across domains

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DimensionError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )
        self._index = None

    def __len__(self):
        return self.features.shape[0]

    @property
    def input_dim(self):
        return self.features.shape[1]

    @property
    def identities(self):
        return np.unique(self.labels)

    @property
    def index(self):
        """identity label -> sorted sample indices"""
        if self._index is None:
            self._index = {int(c): np.flatnonzero(self.labels == c) for c in self.identities}
        return self._index

    def equals(self, other):
        return (
            self.domain_id == other.domain_id
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class SynthConfig:
    n_domains: int = 3
    identities_per_domain: int = 20
    samples_per_identity: int = 10
    input_dim: int = 16
    prototype_scale: float = 1.0
    identity_noise: float = 0.6
    family_spread: float = 0.5
    domain_scale_range: tuple = (0.4, 2.5)
    domain_shift: float = 0.5
    rotate: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_domains < 1:
            raise ContractError("need at least one domain")
        if self.identities_per_domain < 1 or self.samples_per_identity < 1 or self.input_dim < 1:
            raise ContractError("identities, samples and input_dim must be positive")
        if min(self.prototype_scale, self.identity_noise, self.family_spread, self.domain_shift) < 0:
            raise ContractError("scales and noise levels must be non-negative")
        lo, hi = self.domain_scale_range
        if not 0 < lo <= hi:
            raise ContractError(f"bad domain_scale_range {self.domain_scale_range}")


def random_rotation(dim, rng):
    """Haar-distributed orthogonal matrix."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


@dataclass
class DomainTransform:
    matrix: np.ndarray
    shift: np.ndarray

    def apply(self, x):
        return x @ self.matrix.T + self.shift


def domain_transform(cfg, rng):
    if cfg.rotate:
        rot = random_rotation(cfg.input_dim, rng)
    else:
        rot = np.eye(cfg.input_dim)
    lo, hi = cfg.domain_scale_range
    scales = np.exp(rng.uniform(np.log(lo), np.log(hi), size=cfg.input_dim))
    shift = rng.normal(0.0, cfg.domain_shift, size=cfg.input_dim) if cfg.domain_shift else np.zeros(cfg.input_dim)
    return DomainTransform(rot * scales, shift)


def generate(cfg, return_transforms=False):
    """Build ``cfg.n_domains`` datasets with disjoint identities.

    Identity ``k`` of every domain descends from a shared family prototype
    ``k`` plus its own ``family_spread`` offset, so identities are distinct
    across domains but the domains share their between-identity geometry.
    Samples add within-identity Gaussian noise and then go through the
    domain's own random affine map (rotation, per-axis scaling, shift).
    """
    rng = np.random.default_rng(cfg.seed)
    n_id, n_per, dim = cfg.identities_per_domain, cfg.samples_per_identity, cfg.input_dim
    families = rng.normal(0.0, cfg.prototype_scale, size=(n_id, dim))
    domains, transforms = [], []
    for d in range(cfg.n_domains):
        tf = domain_transform(cfg, rng)
        protos = families + rng.normal(0.0, cfg.family_spread, size=(n_id, dim))
        noise = rng.normal(0.0, 1.0, size=(n_id, n_per, dim)) * cfg.identity_noise
        raw = (protos[:, None, :] + noise).reshape(n_id * n_per, dim)
        labels = np.repeat(np.arange(n_id) + d * n_id, n_per)
        domains.append(DomainDataset(d, tf.apply(raw), labels))
        transforms.append(tf)
    if return_transforms:
        return domains, transforms
    return domains


def check_disjoint(domains):
    seen = {}
    for ds in domains:
        for c in ds.identities:
            c = int(c)
            if c in seen and seen[c] != ds.domain_id:
                raise ContractError(f"identity {c} appears in domains {seen[c]} and {ds.domain_id}")
            seen[c] = ds.domain_id


# sampling -------------------------------------------------------------------

def augment(x, rng, sigma=None, span=None):
    """Feature-space positive: Gaussian jitter plus a zeroed contiguous span.

    ``sigma`` defaults to ``0.05 * |x| / sqrt(dim)``; ``span`` is a
    ``(start, stop)`` pair and defaults to a random span of 1..dim//4 coordinates.
    """
    x = np.asarray(x, dtype=np.float64)
    dim = x.shape[0]
    if sigma is None:
        sigma = 0.05 * np.linalg.norm(x) / np.sqrt(dim)
    if span is None:
        length = int(rng.integers(1, max(dim // 4, 1) + 1))
        start = int(rng.integers(0, dim - length + 1))
        span = (start, start + length)
    out = x + rng.normal(0.0, 1.0, size=dim) * sigma if sigma > 0 else x.copy()
    out[span[0]:span[1]] = 0.0
    return out


@dataclass
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    anchor_labels: np.ndarray
    negative_labels: np.ndarray
    anchor_index: np.ndarray
    positive_index: np.ndarray  # -1 where the positive is an augmented anchor
    negative_index: np.ndarray
    domain_id: int = 0

    def __len__(self):
        return self.anchors.shape[0]

    def stacked(self):
        """All 3B inputs as one matrix (anchors, positives, negatives) and their labels."""
        x = np.concatenate([self.anchors, self.positives, self.negatives])
        y = np.concatenate([self.anchor_labels, self.anchor_labels, self.negative_labels])
        return x, y


def sample_triplets(ds, batch_size, rng, augment_sigma=None):
    """Class-balanced batch: ``batch_size`` distinct anchor identities, one triplet each."""
    ids = ds.identities
    if len(ids) < 2:
        raise ContractError(f"domain {ds.domain_id} has {len(ids)} identities, need at least 2")
    if len(ids) < batch_size:
        raise ContractError(
            f"domain {ds.domain_id} has {len(ids)} identities, batch needs {batch_size} "
            f"({batch_size - len(ids)} short)"
        )
    chosen = rng.choice(ids, size=batch_size, replace=False)
    index = ds.index
    a_idx = np.empty(batch_size, dtype=np.int64)
    p_idx = np.empty(batch_size, dtype=np.int64)
    n_idx = np.empty(batch_size, dtype=np.int64)
    n_lab = np.empty(batch_size, dtype=np.int64)
    positives = np.empty((batch_size, ds.input_dim))
    for b, c in enumerate(chosen):
        members = index[int(c)]
        if len(members) >= 2:
            a, p = rng.choice(members, size=2, replace=False)
            positives[b] = ds.features[p]
        else:
            a, p = members[0], -1
            positives[b] = augment(ds.features[a], rng, sigma=augment_sigma)
        k = int(rng.integers(0, len(ids) - 1))
        neg_id = ids[k] if ids[k] != c else ids[-1]
        neg_members = index[int(neg_id)]
        a_idx[b], p_idx[b] = a, p
        n_idx[b] = neg_members[int(rng.integers(0, len(neg_members)))]
        n_lab[b] = neg_id
    return TripletBatch(
        anchors=ds.features[a_idx],
        positives=positives,
        negatives=ds.features[n_idx],
        anchor_labels=chosen.astype(np.int64),
        negative_labels=n_lab,
        anchor_index=a_idx,
        positive_index=p_idx,
        negative_index=n_idx,
        domain_id=ds.domain_id,
    )


# files ------------------------------------------------------------------------

def _fmt(x):
    return format(float(x), ".17g")


def dumps_text(domains):
    dims = {ds.input_dim for ds in domains}
    if len(dims) > 1:
        raise DimensionError(f"domains disagree on input_dim: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    ids = ",".join(str(ds.domain_id) for ds in domains)
    lines = [f"{TEXT_MAGIC} {FORMAT_VERSION} dim={dim} domains={ids}"]
    for ds in domains:
        for x, y in zip(ds.features, ds.labels):
            lines.append(",".join([str(ds.domain_id), str(int(y))] + [_fmt(v) for v in x]))
    return "\n".join(lines) + "\n"


def loads_text(text):
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file", line=1)
    head = lines[0].split(" ")
    if len(head) != 4 or head[0] != TEXT_MAGIC:
        raise ParseError("missing CDTDATA header", line=1, offset=1)
    if head[1] != str(FORMAT_VERSION):
        raise ParseError(f"unsupported version {head[1]}", line=1)
    if not head[2].startswith("dim=") or not head[3].startswith("domains="):
        raise ParseError("header must read 'CDTDATA 1 dim=<d> domains=<ids>'", line=1)
    try:
        dim = int(head[2][4:])
        ids_field = head[3][len("domains="):]
        domain_ids = [int(t) for t in ids_field.split(",")] if ids_field else []
    except ValueError as exc:
        raise ParseError(str(exc), line=1) from exc

    rows = {d: ([], []) for d in domain_ids}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != dim + 2:
            raise ParseError(f"expected {dim + 2} fields, found {len(parts)}", line=lineno)
        try:
            d, y = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise ParseError(f"bad integer field: {exc}", line=lineno, offset=1) from exc
        if d not in rows:
            raise ParseError(f"domain {d} not declared in header", line=lineno, offset=1)
        try:
            x = [float(v) for v in parts[2:]]
        except ValueError as exc:
            col = next(i for i, v in enumerate(parts[2:]) if not _is_float(v))
            offset = sum(len(p) + 1 for p in parts[: col + 2]) + 1
            raise ParseError(f"bad float {parts[col + 2]!r}", line=lineno, offset=offset) from exc
        rows[d][0].append(x)
        rows[d][1].append(y)
    return [
        DomainDataset(d, np.asarray(xs, dtype=np.float64).reshape(len(xs), dim), np.asarray(ys, dtype=np.int64))
        for d, (xs, ys) in rows.items()
    ]


def _is_float(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


# binary: magic, u32 version, u32 dim, u32 n_domains, i64 domain ids,
# u64 n_records, then records of (i64 domain, i64 identity, f64 * dim)

def dumps_binary(domains):
    dims = {ds.input_dim for ds in domains}
    if len(dims) > 1:
        raise DimensionError(f"domains disagree on input_dim: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    parts = [BINARY_MAGIC, struct.pack("<III", FORMAT_VERSION, dim, len(domains))]
    parts.append(np.asarray([ds.domain_id for ds in domains], dtype="<i8").tobytes())
    total = sum(len(ds) for ds in domains)
    parts.append(struct.pack("<Q", total))
    rec = np.dtype([("domain", "<i8"), ("identity", "<i8"), ("x", "<f8", (dim,))])
    for ds in domains:
        arr = np.empty(len(ds), dtype=rec)
        arr["domain"] = ds.domain_id
        arr["identity"] = ds.labels
        arr["x"] = ds.features
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads_binary(blob):
    if blob[:4] != BINARY_MAGIC:
        raise ParseError("missing CDTB magic", offset=0)
    try:
        version, dim, n_dom = struct.unpack_from("<III", blob, 4)
        pos = 16
        domain_ids = np.frombuffer(blob, dtype="<i8", count=n_dom, offset=pos).tolist()
        pos += 8 * n_dom
        (total,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
    except (struct.error, ValueError) as exc:
        raise ParseError(f"truncated header: {exc}", offset=len(blob)) from exc
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported version {version}", offset=4)
    rec = np.dtype([("domain", "<i8"), ("identity", "<i8"), ("x", "<f8", (dim,))])
    if len(blob) != pos + total * rec.itemsize:
        raise ParseError(
            f"expected {pos + total * rec.itemsize} bytes, found {len(blob)}", offset=min(len(blob), pos)
        )
    arr = np.frombuffer(blob, dtype=rec, count=total, offset=pos)
    out = []
    for d in domain_ids:
        sel = arr[arr["domain"] == d]
        out.append(DomainDataset(int(d), np.array(sel["x"], dtype=np.float64).reshape(len(sel), dim),
                                 np.array(sel["identity"], dtype=np.int64)))
    unknown = set(arr["domain"].tolist()) - set(domain_ids)
    if unknown:
        raise ParseError(f"records reference undeclared domains {sorted(unknown)}")
    return out


def store(path, domains, binary=None):
    """Write datasets; ``binary`` defaults to True for ``.bin`` paths."""
    path = str(path)
    if binary is None:
        binary = path.endswith(".bin")
    if binary:
        with open(path, "wb") as fh:
            fh.write(dumps_binary(domains))
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(dumps_text(domains))


def load(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] == BINARY_MAGIC:
        return loads_binary(blob)
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8 text: {exc}", offset=exc.start) from exc
    return loads_text(text)
