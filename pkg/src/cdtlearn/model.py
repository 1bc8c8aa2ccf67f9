"""Small fully connected stand-ins for the representation, classifier and embedding networks.

Layout::

    x --[r.w1,r.b1]-- relu --[r.w2,r.b2]--> feature map (H, W, D), each
                                             position optionally unit-normalized
    flatten --[c.proj_w,c.proj_b]--> z            (final feature, used at test time)
    z --[e.w,e.b]--> normalize                    (embedding head)
    normalize(z) . normalize(c.weights)^T         (classifier cosines)
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParseError

GROUPS = {"r": "theta_r", "c": "theta_c", "e": "theta_e"}
CHECKPOINT_FORMAT = "cdtlearn-checkpoint"


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 16
    hidden_dim: int = 32
    map_h: int = 2
    map_w: int = 2
    map_d: int = 16
    final_dim: int = 32
    embed_dim: int = 16
    num_classes: int = 60
    normalize_maps: bool = True

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "map_h", "map_w", "map_d",
                     "final_dim", "embed_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.embed_dim > self.repr_dim:
            raise ContractError("embed_dim must not exceed repr_dim")

    @property
    def repr_dim(self):
        return self.map_h * self.map_w * self.map_d

    @property
    def map_shape(self):
        return (self.map_h, self.map_w, self.map_d)

    def param_shapes(self):
        return {
            "r.w1": (self.input_dim, self.hidden_dim),
            "r.b1": (self.hidden_dim,),
            "r.w2": (self.hidden_dim, self.repr_dim),
            "r.b2": (self.repr_dim,),
            "c.proj_w": (self.repr_dim, self.final_dim),
            "c.proj_b": (self.final_dim,),
            "c.weights": (self.num_classes, self.final_dim),
            "e.w": (self.final_dim, self.embed_dim),
            "e.b": (self.embed_dim,),
        }


_FAN_IN = {
    "r.w1": "input_dim", "r.b1": "input_dim",
    "r.w2": "hidden_dim", "r.b2": "hidden_dim",
    "c.proj_w": "repr_dim", "c.proj_b": "repr_dim",
    "c.weights": "final_dim",
    "e.w": "final_dim", "e.b": "final_dim",
}


class ModelParams:
    """Ordered mapping of parameter name to Tensor.

    Names are prefixed with the group they belong to (``r.``, ``c.``, ``e.``);
    iteration order is fixed by :meth:`ModelConfig.param_shapes`.
    """

    def __init__(self, config, tensors):
        self.config = config
        expected = config.param_shapes()
        if list(tensors) != list(expected):
            raise ContractError(f"parameter names {list(tensors)} do not match {list(expected)}")
        for name, t in tensors.items():
            if t.shape != expected[name]:
                raise DimensionError(f"{name}: shape {t.shape}, expected {expected[name]}")
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def values(self):
        return list(self.tensors.values())

    def group(self, key):
        """Tensors of one group: ``"theta_r"``, ``"theta_c"`` or ``"theta_e"``."""
        return {n: t for n, t in self.tensors.items() if GROUPS[n.split(".")[0]] == key}

    def copy(self, requires_grad=True):
        """Independent leaf copy (no graph link to ``self``)."""
        return ModelParams(
            self.config,
            {n: T.Tensor(t.data, requires_grad=requires_grad) for n, t in self.tensors.items()},
        )

    def arrays(self):
        return {n: t.data for n, t in self.tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def equal(self, other):
        return self.names() == other.names() and all(
            np.array_equal(a.data, b.data) for a, b in zip(self.values(), other.values())
        )


def init_params(config, rng):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization drawn from ``rng``."""
    tensors = {}
    for name, shape in config.param_shapes().items():
        fan_in = getattr(config, _FAN_IN[name])
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = T.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    return ModelParams(config, tensors)


def _inputs(params, x):
    x = T.as_tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, x.shape[0])
    if x.ndim != 2 or x.shape[1] != params.config.input_dim:
        raise DimensionError(f"inputs have shape {x.shape}, model expects (N, {params.config.input_dim})")
    return x


_affine = T.affine


def forward_repr(params, x):
    """Feature maps of shape ``(N, H, W, D)``."""
    x = _inputs(params, x)
    h = T.relu(_affine(x, params["r.w1"], params["r.b1"]))
    out = _affine(h, params["r.w2"], params["r.b2"])
    cfg = params.config
    n = x.shape[0]
    if cfg.normalize_maps:
        # unit-length vector at every grid position
        out = T.l2_normalize(out.reshape(n * cfg.map_h * cfg.map_w, cfg.map_d))
    return out.reshape((n,) + cfg.map_shape)


def final_from_maps(params, maps):
    n = maps.shape[0]
    return _affine(maps.reshape(n, params.config.repr_dim), params["c.proj_w"], params["c.proj_b"])


def embed_from_final(params, z):
    return T.l2_normalize(_affine(z, params["e.w"], params["e.b"]))


def cosines_from_final(params, z):
    return T.l2_normalize(z) @ T.l2_normalize(params["c.weights"]).T


def forward_final(params, x):
    """Pre-head feature ``z``: what gets compared at verification time."""
    return final_from_maps(params, forward_repr(params, x))


def forward_embed(params, x):
    return embed_from_final(params, forward_final(params, x))


def forward_classify(params, x):
    return cosines_from_final(params, forward_final(params, x))


def forward_all(params, x):
    """One pass returning ``(maps, z, embeddings, cosines)``."""
    maps = forward_repr(params, x)
    z = final_from_maps(params, maps)
    return maps, z, embed_from_final(params, z), cosines_from_final(params, z)


def inner_update(params, grads, alpha, differentiable=False):
    """``params - alpha * grads``.

    With ``differentiable=True`` the result stays attached to the graph of
    ``params`` (and of ``grads``, if they were built with ``create_graph``);
    otherwise it is a fresh set of leaves.
    """
    grads = list(grads)
    if len(grads) != len(params):
        raise ContractError(f"got {len(grads)} gradients for {len(params)} parameters")
    new = {}
    for (name, p), g in zip(params.tensors.items(), grads):
        g = T.as_tensor(g)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if differentiable:
            new[name] = p - T.scale(g, alpha)
        else:
            new[name] = T.Tensor(p.data - alpha * g.data, requires_grad=True)
    return ModelParams(params.config, new)


# checkpoints ----------------------------------------------------------------

def checkpoint_dict(params, class_labels=(), extra=None):
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": asdict(params.config),
        "class_labels": [int(c) for c in class_labels],
        "params": {
            n: {"shape": list(t.shape), "data": [float(v) for v in t.data.ravel()]}
            for n, t in params.tensors.items()
        },
    }
    if extra:
        obj["extra"] = extra
    return obj


def dumps_checkpoint(params, class_labels=(), extra=None):
    return json.dumps(checkpoint_dict(params, class_labels, extra), indent=1) + "\n"


def write_checkpoint(path, params, class_labels=(), extra=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_checkpoint(params, class_labels, extra))


def loads_checkpoint(text):
    """Parse checkpoint JSON into ``(params, class_labels, extra)``."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, offset=exc.colno) from exc
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"not a checkpoint (format={obj.get('format')!r})")
    try:
        config = ModelConfig(**obj["config"])
    except TypeError as exc:
        raise ParseError(f"bad model config: {exc}") from exc
    tensors = {}
    for name, entry in obj["params"].items():
        data = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if data.size != int(np.prod(shape)):
            raise ParseError(f"{name}: {data.size} values for shape {shape}")
        tensors[name] = T.Tensor(data.reshape(shape), requires_grad=True)
    return ModelParams(config, tensors), list(obj.get("class_labels", [])), obj.get("extra")


def read_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())
