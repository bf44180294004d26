"""Residual MLP backbone with BatchNorm, a linear multi-label head, checkpoints.

Parameter and buffer paths are hierarchical and stable, e.g.::

    backbone.block0.fc1.weight
    backbone.block0.bn1.gamma
    backbone.block0.bn1.running_mean
    backbone.block0.skip.fc.weight      (projection skips only)
    head.weight
"""
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .core.rng import RngStream
from .core.tensor import Tensor, add, make_result, matmul, relu

UPDATE_STATS = "UpdateStats"
FROZEN_STATS = "FrozenStats"
IDENTITY = "Identity"
PROJECTION = "Projection"


class BatchNormError(ValueError):
    pass


# ---------------------------------------------------------------------------
# functional batch norm


def batch_norm(x, bn):
    """Normalize a [batch, features] tensor with ``bn`` and apply its affine map.

    In UpdateStats mode the batch mean and biased variance normalize the input
    and the running buffers take an EMA step with the unbiased variance;
    gradients flow through the batch statistics.  FrozenStats normalizes with
    the buffers and leaves them untouched.
    """
    xd = x.data
    if xd.ndim != 2 or xd.shape[1] != bn.num_features:
        raise BatchNormError(f"expected [batch, {bn.num_features}], got {list(xd.shape)}")
    if np.any(bn.running_var < 0):
        raise BatchNormError("negative running_var (corrupted buffers)")
    gamma, beta = bn.gamma, bn.beta
    n = xd.shape[0]
    if bn.stats_mode == UPDATE_STATS:
        if n < 2:
            raise BatchNormError("UpdateStats needs a batch of at least 2")
        mu = xd.mean(axis=0)
        centered = xd - mu
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        xhat = centered * inv_std
        m = bn.momentum
        bn.running_mean = (1.0 - m) * bn.running_mean + m * mu
        bn.running_var = (1.0 - m) * bn.running_var + m * var * (n / (n - 1))

        def bw(g, needs):
            dx = None
            if needs[0]:
                dxhat = g * gamma.data
                dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                                      - xhat * (dxhat * xhat).sum(axis=0))
            return (dx,
                    (g * xhat).sum(axis=0) if needs[1] else None,
                    g.sum(axis=0) if needs[2] else None)
    else:
        inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
        xhat = (xd - bn.running_mean) * inv_std

        def bw(g, needs):
            return (g * (gamma.data * inv_std) if needs[0] else None,
                    (g * xhat).sum(axis=0) if needs[1] else None,
                    g.sum(axis=0) if needs[2] else None)

    out = xhat * gamma.data + beta.data
    return make_result(out, (x, gamma, beta), bw, "batch_norm")


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy over every sample x attribute cell."""
    z = logits.data
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != z.shape:
        raise ValueError(f"labels shape {y.shape} != logits shape {z.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    cells = z.size
    loss = (np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).sum() / cells

    def bw(g, needs):
        return (g * (sigmoid(z) - y) / cells,)

    return make_result(np.asarray(loss), (logits,), bw, "bce")


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Base for anything owning named tensors."""

    def children(self):
        return []

    def local_parameters(self):
        return []

    def local_buffers(self):
        return []

    def named_parameters(self, prefix=""):
        for name, t in self.local_parameters():
            yield prefix + name, t
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, owner, attr in self.local_buffers():
            yield prefix + name, owner, attr
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def batchnorms(self, prefix=""):
        for cname, child in self.children():
            path = f"{prefix}{cname}"
            if isinstance(child, BatchNorm):
                yield path, child
            yield from child.batchnorms(path + ".")


class Linear(Layer):
    def __init__(self, in_features, out_features, rng=None):
        self.in_features, self.out_features = in_features, out_features
        if rng is None:
            w = np.zeros((in_features, out_features))
        else:
            w = rng.normal((in_features, out_features), std=np.sqrt(2.0 / in_features))
        self.weight = Tensor(w)
        self.bias = Tensor(np.zeros(out_features))

    def local_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def __call__(self, x):
        return add(matmul(x, self.weight), self.bias)


class BatchNorm(Layer):
    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features))
        self.beta = Tensor(np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.stats_mode = FROZEN_STATS

    @property
    def affine_trainable(self):
        return self.gamma.requires_grad

    @affine_trainable.setter
    def affine_trainable(self, flag):
        self.gamma.requires_grad = self.beta.requires_grad = bool(flag)

    def local_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def local_buffers(self):
        return [("running_mean", self, "running_mean"), ("running_var", self, "running_var")]

    def reset_stats(self):
        self.running_mean = np.zeros(self.num_features)
        self.running_var = np.ones(self.num_features)

    def __call__(self, x):
        return batch_norm(x, self)


@dataclass
class ResidualBlockSpec:
    width: int
    skip_kind: str = IDENTITY

    def __post_init__(self):
        if self.skip_kind not in (IDENTITY, PROJECTION):
            raise ValueError(f"unknown skip kind {self.skip_kind!r}")


class ResidualBlock(Layer):
    """ReLU(bn2(fc2(relu(bn1(fc1(x))))) + skip(x))."""

    def __init__(self, in_width, spec, rng=None, bn_momentum=0.1, bn_eps=1e-5):
        if spec.skip_kind == IDENTITY and in_width != spec.width:
            raise ValueError(f"identity skip needs in_width == width ({in_width} != {spec.width})")
        self.in_width, self.spec = in_width, spec
        self.fc1 = Linear(in_width, spec.width, rng)
        self.bn1 = BatchNorm(spec.width, bn_momentum, bn_eps)
        self.fc2 = Linear(spec.width, spec.width, rng)
        self.bn2 = BatchNorm(spec.width, bn_momentum, bn_eps)
        self.skip = ProjectionSkip(in_width, spec.width, rng, bn_momentum, bn_eps) \
            if spec.skip_kind == PROJECTION else None

    def children(self):
        out = [("fc1", self.fc1), ("bn1", self.bn1), ("fc2", self.fc2), ("bn2", self.bn2)]
        if self.skip is not None:
            out.append(("skip", self.skip))
        return out

    def __call__(self, x):
        if x.shape[1] != self.in_width:
            raise ValueError(f"block expects width {self.in_width}, got {x.shape[1]}")
        h = relu(self.bn1(self.fc1(x)))
        h = self.bn2(self.fc2(h))
        s = x if self.skip is None else self.skip(x)
        return relu(add(h, s))


class ProjectionSkip(Layer):
    def __init__(self, in_width, width, rng=None, bn_momentum=0.1, bn_eps=1e-5):
        self.fc = Linear(in_width, width, rng)
        self.bn = BatchNorm(width, bn_momentum, bn_eps)

    def children(self):
        return [("fc", self.fc), ("bn", self.bn)]

    def __call__(self, x):
        return self.bn(self.fc(x))


@dataclass
class BackboneSpec:
    input_dim: int = 64
    width: int = 128
    blocks: list = field(default_factory=lambda: [
        ResidualBlockSpec(128, PROJECTION), ResidualBlockSpec(128, IDENTITY),
        ResidualBlockSpec(128, PROJECTION), ResidualBlockSpec(128, IDENTITY)])
    embedding_dim: int = 128
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.blocks = [b if isinstance(b, ResidualBlockSpec) else ResidualBlockSpec(**b)
                       for b in self.blocks]
        if not self.blocks:
            raise ValueError("backbone needs at least one block")
        if self.blocks[-1].width != self.embedding_dim:
            raise ValueError("last block width must equal embedding_dim")
        if not self.has_projection:
            raise ValueError("backbone needs at least one Projection block")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @property
    def has_projection(self):
        return any(b.skip_kind == PROJECTION for b in self.blocks)


class Backbone(Layer):
    def __init__(self, spec, rng=None):
        self.spec = spec
        self.blocks = []
        width = spec.input_dim
        for bspec in spec.blocks:
            self.blocks.append(ResidualBlock(width, bspec, rng, spec.bn_momentum, spec.bn_eps))
            width = bspec.width

    def children(self):
        return [(f"block{i}", b) for i, b in enumerate(self.blocks)]

    def __call__(self, x):
        h = x
        for block in self.blocks:
            h = block(h)
        return h


class Model(Layer):
    """Backbone plus an optional linear head (``num_outputs`` logits)."""

    def __init__(self, backbone_spec, num_outputs=None, seed=0):
        rng = RngStream(seed)
        self.backbone = Backbone(backbone_spec, rng.substream(1))
        self.head = None
        if num_outputs is not None:
            self.attach_head(num_outputs, rng.substream(2))

    def attach_head(self, num_outputs, rng):
        self.head = Linear(self.backbone.spec.embedding_dim, num_outputs, rng)

    def children(self):
        out = [("backbone", self.backbone)]
        if self.head is not None:
            out.append(("head", self.head))
        return out

    def embed(self, x):
        return self.backbone(x)

    def __call__(self, x):
        return self.head(self.backbone(x))

    # -- state helpers ----------------------------------------------------

    def parameters_dict(self):
        return dict(self.named_parameters())

    def buffers_dict(self):
        return {path: getattr(owner, attr) for path, owner, attr in self.named_buffers()}

    def state_arrays(self):
        """Ordered (path, kind, array) triples covering every tensor."""
        out = [(p, "param", t.data) for p, t in self.named_parameters()]
        out += [(p, "buffer", getattr(o, a)) for p, o, a in self.named_buffers()]
        return out

    def set_stats_mode(self, mode, paths=None):
        for path, bn in self.batchnorms():
            if paths is None or path in paths:
                bn.stats_mode = mode

    def freeze_all(self):
        for _, t in self.named_parameters():
            t.requires_grad = False
            t.grad = None

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None

    def predict_scores(self, x, batch_size=1024):
        """Sigmoid scores with every BN in FrozenStats; modes are restored after."""
        saved = [(bn, bn.stats_mode) for _, bn in self.batchnorms()]
        self.set_stats_mode(FROZEN_STATS)
        try:
            out = []
            for i in range(0, x.shape[0], batch_size):
                out.append(sigmoid(self(Tensor(x[i:i + batch_size])).data))
        finally:
            for bn, mode in saved:
                bn.stats_mode = mode
        return np.concatenate(out, axis=0)


def head_forward_bce(embeddings, head, labels):
    """Scores in (0, 1) and mean BCE loss for a linear head."""
    logits = head(embeddings)
    return sigmoid(logits.data), bce_with_logits(logits, labels)


# ---------------------------------------------------------------------------
# checkpoint file
#
#   bytes 0-7   magic b"BNFCKPT\0"
#   bytes 8-11  uint32 LE format version (1)
#   bytes 12-15 uint32 LE reserved (0)
#   bytes 16-23 uint64 LE header length H
#   next H      UTF-8 JSON header (sorted keys)
#   remainder   float64 LE payload, tensors in header order, row-major

CKPT_MAGIC = b"BNFCKPT\0"
CKPT_VERSION = 1


def checkpoint_bytes(model, extra=None):
    entries, chunks = [], []
    for path, kind, arr in model.state_arrays():
        entries.append({"path": path, "kind": kind, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = {
        "backbone": model.backbone.spec.to_dict(),
        "num_outputs": None if model.head is None else model.head.out_features,
        "tensors": entries,
        "bn": {path: {"stats_mode": bn.stats_mode, "affine_trainable": bn.affine_trainable,
                      "momentum": bn.momentum, "eps": bn.eps}
               for path, bn in model.batchnorms()},
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return (CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, 0) + struct.pack("<Q", len(hbytes))
            + hbytes + b"".join(chunks))


def save_checkpoint(model, path, extra=None):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, extra))


def model_from_bytes(blob):
    if blob[:8] != CKPT_MAGIC:
        raise ValueError("not a bnfair checkpoint (bad magic)")
    version, _ = struct.unpack("<II", blob[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", blob[16:24])
    header = json.loads(blob[24:24 + hlen].decode())
    model = Model(BackboneSpec.from_dict(header["backbone"]), header["num_outputs"])
    params = model.parameters_dict()
    buffers = {p: (o, a) for p, o, a in model.named_buffers()}
    offset = 24 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
        arr = arr.reshape(shape)
        offset += 8 * count
        if entry["kind"] == "param":
            params[entry["path"]].data = arr
        else:
            owner, attr = buffers[entry["path"]]
            setattr(owner, attr, arr)
    if offset != len(blob):
        raise ValueError("checkpoint payload length does not match header")
    bns = dict(model.batchnorms())
    for path, flags in header["bn"].items():
        bn = bns[path]
        bn.stats_mode = flags["stats_mode"]
        bn.affine_trainable = flags["affine_trainable"]
        bn.momentum, bn.eps = flags["momentum"], flags["eps"]
    return model, header["extra"]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def clone_model(model):
    return model_from_bytes(checkpoint_bytes(model))[0]
