"""Small point segmentation network with segmentation, confidence and projection heads.

Everything is plain NumPy in float64 with a hand-written reverse pass, so
gradients can be checked against finite differences to high precision.

Architecture, per point::

    features(7) -> enc1 -> enc2 -> enc3 -> h              (ReLU MLP)
    [h, mean of h over k nearest neighbours] -> mix -> hidden   (ReLU)
    hidden -> seg                     -> logits (K + 1)
    hidden -> conf1 (ReLU) -> conf2   -> sigmoid confidence
    hidden -> proj1 (ReLU) -> proj2   -> embedding
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from . import kernels


# Fixed gain on the confidence logit. Under Adam every parameter moves at
# roughly the learning rate per step, so without it the confidence head
# reaches its c = 0 optimum (CE > 2 early on) long before the segmentation
# head gets CE below 2, and training stalls there.
CONF_SCALE = 0.1


class NumericError(FloatingPointError):
    pass


class UsageError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetDims:
    in_dim: int = 7
    hidden: int = 64
    conf_hidden: int = 32
    embed: int = 32
    num_classes: int = 15
    k_neighbors: int = 16

    def layer_shapes(self):
        """(name, fan_in, fan_out) in declaration order."""
        H = self.hidden
        return [
            ("enc1", self.in_dim, H),
            ("enc2", H, H),
            ("enc3", H, H),
            ("mix", 2 * H, H),
            ("seg", H, self.num_classes),
            ("conf1", H, self.conf_hidden),
            ("conf2", self.conf_hidden, 1),
            ("proj1", H, H),
            ("proj2", H, self.embed),
        ]


@dataclass(eq=False)
class NetworkParams:
    dims: NetDims
    tensors: dict  # "enc1.W" -> (fan_in, fan_out), "enc1.b" -> (fan_out,)

    def names(self):
        out = []
        for name, _, _ in self.dims.layer_shapes():
            out += [f"{name}.W", f"{name}.b"]
        return out

    def copy(self):
        return NetworkParams(self.dims, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, key):
        return self.tensors[key]

    def num_parameters(self):
        return sum(v.size for v in self.tensors.values())

    def equals(self, other):
        return self.dims == other.dims and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.names()
        )


def init_params(dims: NetDims = NetDims(), seed=0, confidence_bias=4.0) -> NetworkParams:
    """Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)); zero biases.

    The confidence logit starts at ``confidence_bias`` (c ~ 0.98): with
    K + 1 classes the initial cross-entropy is about ln(K + 1) > 2, where the
    confidence-aware loss is minimized at c = 0, which would switch off the
    segmentation gradient before it ever gets going.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, fan_in, fan_out in dims.layer_shapes():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        tensors[f"{name}.b"] = np.zeros(fan_out)
    tensors["conf2.b"][:] = confidence_bias / CONF_SCALE
    return NetworkParams(dims, tensors)


def zeros_like(params: NetworkParams) -> NetworkParams:
    return NetworkParams(params.dims, {k: np.zeros_like(v) for k, v in params.tensors.items()})


@dataclass(eq=False)
class PointGeometry:
    """Per-scan inputs that do not depend on the parameters."""

    features: np.ndarray  # (N, 7)
    neighbors: np.ndarray  # (N, k), self included
    pool: sp.csr_matrix  # (N, N) row-stochastic neighbour mean

    @property
    def num_points(self):
        return self.features.shape[0]


def point_features(positions, normals=None):
    """Centered xyz scaled by the RMS radius, normals, and radial distance."""
    pos = np.asarray(positions, dtype=np.float64)
    centered = pos - pos.mean(axis=0)
    scale = np.sqrt(np.mean(np.sum(centered**2, axis=1)))
    xyz = centered / (scale if scale > 0 else 1.0)
    nrm = np.zeros_like(xyz) if normals is None else np.asarray(normals, dtype=np.float64)
    radial = np.linalg.norm(xyz, axis=1, keepdims=True)
    return np.concatenate([xyz, nrm, radial], axis=1)


def prepare(scan, k_neighbors=16) -> PointGeometry:
    pos = np.asarray(scan.positions, dtype=np.float64)
    n = pos.shape[0]
    k = min(k_neighbors, n)
    nbr, _ = kernels.knn_query(pos, pos, k)
    rows = np.repeat(np.arange(n), k)
    pool = sp.csr_matrix((np.full(n * k, 1.0 / k), (rows, nbr.ravel())), shape=(n, n))
    return PointGeometry(point_features(pos, scan.normals), nbr, pool)


@dataclass(eq=False)
class Prediction:
    logits: np.ndarray  # (N, K + 1)
    confidence: np.ndarray  # (N,)
    hidden: np.ndarray  # (N, H)
    embedding: np.ndarray  # (N, E)
    cache: dict | None = field(default=None, repr=False)

    @property
    def num_points(self):
        return self.logits.shape[0]

    def labels(self):
        """Argmax class per point; ties go to the lower class id."""
        return np.argmax(self.logits, axis=1)


def _relu(x):
    return np.maximum(x, 0.0)


def forward(inputs, params: NetworkParams, keep_cache=True) -> Prediction:
    """Run the network on a scan (or its prepared geometry)."""
    geo = inputs if isinstance(inputs, PointGeometry) else prepare(inputs, params.dims.k_neighbors)
    for k, v in params.tensors.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite entries in parameter {k}")
    t = params.tensors
    x = geo.features
    a1 = x @ t["enc1.W"] + t["enc1.b"]
    h1 = _relu(a1)
    a2 = h1 @ t["enc2.W"] + t["enc2.b"]
    h2 = _relu(a2)
    a3 = h2 @ t["enc3.W"] + t["enc3.b"]
    h3 = _relu(a3)
    pooled = geo.pool @ h3
    cat = np.concatenate([h3, pooled], axis=1)
    am = cat @ t["mix.W"] + t["mix.b"]
    hid = _relu(am)
    logits = hid @ t["seg.W"] + t["seg.b"]
    ac1 = hid @ t["conf1.W"] + t["conf1.b"]
    c1 = _relu(ac1)
    s = CONF_SCALE * (c1 @ t["conf2.W"] + t["conf2.b"])[:, 0]
    conf = np.clip(expit(s), 1e-15, 1.0 - 1e-15)
    ap1 = hid @ t["proj1.W"] + t["proj1.b"]
    p1 = _relu(ap1)
    emb = p1 @ t["proj2.W"] + t["proj2.b"]

    cache = None
    if keep_cache:
        cache = dict(geo=geo, x=x, a1=a1, h1=h1, a2=a2, h2=h2, a3=a3, h3=h3, cat=cat,
                     am=am, hid=hid, ac1=ac1, c1=c1, ap1=ap1, p1=p1)
    return Prediction(logits, conf, hid, emb, cache)


def backward(pred: Prediction, params: NetworkParams, dlogits=None, dconfidence=None,
             dembedding=None, dhidden=None) -> NetworkParams:
    """Parameter gradients of a scalar loss given its gradients w.r.t. the prediction fields."""
    c = pred.cache
    if c is None:
        raise UsageError("backward needs the cache of a forward pass run with keep_cache=True")
    t = params.tensors
    n, H = pred.hidden.shape
    g = {}

    dhid = np.zeros((n, H)) if dhidden is None else np.array(dhidden, dtype=np.float64)

    if dlogits is None:
        dlogits = np.zeros_like(pred.logits)
    g["seg.W"] = c["hid"].T @ dlogits
    g["seg.b"] = dlogits.sum(axis=0)
    dhid += dlogits @ t["seg.W"].T

    if dconfidence is None:
        dconfidence = np.zeros(n)
    conf = pred.confidence
    ds = CONF_SCALE * (np.asarray(dconfidence, dtype=np.float64) * conf * (1.0 - conf))[:, None]
    g["conf2.W"] = c["c1"].T @ ds
    g["conf2.b"] = ds.sum(axis=0)
    dac1 = (ds @ t["conf2.W"].T) * (c["ac1"] > 0)
    g["conf1.W"] = c["hid"].T @ dac1
    g["conf1.b"] = dac1.sum(axis=0)
    dhid += dac1 @ t["conf1.W"].T

    if dembedding is None:
        dembedding = np.zeros_like(pred.embedding)
    g["proj2.W"] = c["p1"].T @ dembedding
    g["proj2.b"] = dembedding.sum(axis=0)
    dap1 = (dembedding @ t["proj2.W"].T) * (c["ap1"] > 0)
    g["proj1.W"] = c["hid"].T @ dap1
    g["proj1.b"] = dap1.sum(axis=0)
    dhid += dap1 @ t["proj1.W"].T

    dam = dhid * (c["am"] > 0)
    g["mix.W"] = c["cat"].T @ dam
    g["mix.b"] = dam.sum(axis=0)
    dcat = dam @ t["mix.W"].T
    dh3 = dcat[:, :H] + c["geo"].pool.T @ dcat[:, H:]

    da3 = dh3 * (c["a3"] > 0)
    g["enc3.W"] = c["h2"].T @ da3
    g["enc3.b"] = da3.sum(axis=0)
    da2 = (da3 @ t["enc3.W"].T) * (c["a2"] > 0)
    g["enc2.W"] = c["h1"].T @ da2
    g["enc2.b"] = da2.sum(axis=0)
    da1 = (da2 @ t["enc2.W"].T) * (c["a1"] > 0)
    g["enc1.W"] = c["x"].T @ da1
    g["enc1.b"] = da1.sum(axis=0)
    return NetworkParams(params.dims, g)


def relu_pattern(pred: Prediction):
    """Sign pattern of every ReLU pre-activation (used to spot kinks in finite differences)."""
    c = pred.cache
    return np.concatenate([(c[k] > 0).ravel() for k in ("a1", "a2", "a3", "am", "ac1", "ap1")])


_CKPT_MAGIC = b"WSNN"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sB6I")


def save_params(params: NetworkParams, path):
    d = params.dims
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, d.in_dim, d.hidden, d.conf_hidden,
                                   d.embed, d.num_classes, d.k_neighbors))
        for name in params.names():
            fh.write(np.ascontiguousarray(params.tensors[name], dtype="<f8").tobytes())


def load_params(path) -> NetworkParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, *dims = _CKPT_HEADER.unpack_from(data, 0)
    if magic != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    nd = NetDims(*dims)
    offset = _CKPT_HEADER.size
    tensors = {}
    for name, fan_in, fan_out in nd.layer_shapes():
        for suffix, shape in ((".W", (fan_in, fan_out)), (".b", (fan_out,))):
            count = int(np.prod(shape))
            if offset + 8 * count > len(data):
                raise CheckpointError(f"{path}: truncated at tensor {name}{suffix}")
            tensors[name + suffix] = np.frombuffer(data, "<f8", count, offset).reshape(shape).copy()
            offset += 8 * count
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return NetworkParams(nd, tensors)


def dims_from_dict(d) -> NetDims:
    known = {f.name for f in fields(NetDims)}
    return NetDims(**{k: int(v) for k, v in d.items() if k in known})
