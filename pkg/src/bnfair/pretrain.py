"""SimCLR-style contrastive pretraining on feature vectors.

Two stochastic views of every sample go through the backbone and a small
projection head in a single batch (view pairs interleaved: rows 2i and 2i+1),
and the NT-Xent loss pulls each pair together.  Labels are never read.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .core.optim import LrSchedule, OptimizerState, lr_at, sgd_step
from .core.rng import RngStream
from .core.tensor import NonFiniteError, Tape, Tensor, make_result, relu
from .nn import FROZEN_STATS, UPDATE_STATS, BatchNorm, Layer, Linear

log = logging.getLogger(__name__)


class PretrainDivergence(RuntimeError):
    pass


@dataclass
class AugmentConfig:
    noise_std: float = 0.5
    mask_prob: float = 0.2
    scale_low: float = 0.8
    scale_high: float = 1.25

    def __post_init__(self):
        if self.noise_std < 0 or not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("need noise_std >= 0 and mask_prob in [0, 1]")
        if not 0.0 < self.scale_low <= 1.0 <= self.scale_high:
            raise ValueError("scale jitter needs 0 < low <= 1 <= high")


def augment(x, cfg, rng):
    """``(x * keep_mask) * scale + noise`` for one vector or a [n, d] batch.

    Draw order: mask uniforms (n*d), per-row scale uniforms (n), noise
    normals (n*d).  The same number of draws is consumed for every config.
    """
    x = np.asarray(x, dtype=np.float64)
    batch = x if x.ndim == 2 else x[None, :]
    n, d = batch.shape
    keep = rng.uniform((n, d)) >= cfg.mask_prob
    scale = rng.uniform(n, cfg.scale_low, cfg.scale_high)
    noise = rng.normal((n, d))
    out = batch * keep * scale[:, None] + cfg.noise_std * noise
    return out if x.ndim == 2 else out[0]


NORM_EPS = 1e-12


def nt_xent(z, tau=0.5):
    """NT-Xent over 2N paired embeddings; rows 2i and 2i+1 are positives."""
    zd = z.data
    m = zd.shape[0]
    if m < 2 or m % 2:
        raise ValueError("nt_xent needs an even number (>= 2) of embeddings")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    # norms are clamped at NORM_EPS, so a dead (all-zero) projection row just
    # has zero similarity to everything instead of an undefined cosine
    raw = np.linalg.norm(zd, axis=1)
    clamped = raw < NORM_EPS
    norms = np.where(clamped, NORM_EPS, raw)
    u = zd / norms[:, None]
    sim = (u @ u.T) / tau
    np.fill_diagonal(sim, -np.inf)
    pos = np.arange(m) ^ 1
    row_max = sim.max(axis=1, keepdims=True)
    ex = np.exp(sim - row_max)
    denom = ex.sum(axis=1)
    per_anchor = -(sim[np.arange(m), pos] - row_max[:, 0] - np.log(denom))
    loss = per_anchor.mean()

    def bw(g, needs):
        dsim = ex / denom[:, None]
        dsim[np.arange(m), pos] -= 1.0
        dsim *= float(g) / m
        du = (dsim + dsim.T) @ u / tau
        radial = np.where(clamped[:, None], 0.0, u * (u * du).sum(axis=1, keepdims=True))
        dz = (du - radial) / norms[:, None]
        return (dz,)

    return make_result(np.asarray(loss), (z,), bw, "nt_xent")


def nt_xent_per_anchor(z, tau=0.5):
    """Per-anchor losses as a plain array (no tape)."""
    zd = np.asarray(z, dtype=np.float64)
    u = zd / np.maximum(np.linalg.norm(zd, axis=1, keepdims=True), NORM_EPS)
    sim = (u @ u.T) / tau
    np.fill_diagonal(sim, -np.inf)
    pos = np.arange(zd.shape[0]) ^ 1
    lse = np.log(np.exp(sim - sim.max(axis=1, keepdims=True)).sum(axis=1)) + sim.max(axis=1)
    return lse - sim[np.arange(zd.shape[0]), pos]


class ProjectionHead(Layer):
    """Linear -> BN -> ReLU -> Linear; used only while pretraining."""

    def __init__(self, embedding_dim, proj_dim, rng, bn_momentum=0.1, bn_eps=1e-5):
        self.fc1 = Linear(embedding_dim, embedding_dim, rng)
        self.bn = BatchNorm(embedding_dim, bn_momentum, bn_eps)
        self.fc2 = Linear(embedding_dim, proj_dim, rng)

    def children(self):
        return [("fc1", self.fc1), ("bn", self.bn), ("fc2", self.fc2)]

    def __call__(self, h):
        return self.fc2(relu(self.bn(self.fc1(h))))


@dataclass
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 256
    tau: float = 0.5
    proj_dim: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-5
    warmup_fraction: float = 0.1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)

    def to_dict(self):
        return asdict(self)


def pretrain(features, model, cfg, rng):
    """Train ``model.backbone`` in place with NT-Xent; returns the training log.

    Only the feature matrix is accepted, so labels cannot leak in.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    steps_per_epoch = n // cfg.batch_size
    if cfg.epochs and steps_per_epoch == 0:
        raise ValueError("fewer samples than one batch")
    backbone = model.backbone
    head_rng, order_rng, aug_rng = rng.substream(1), rng.substream(2), rng.substream(3)
    proj = ProjectionHead(backbone.spec.embedding_dim, cfg.proj_dim, head_rng,
                          backbone.spec.bn_momentum, backbone.spec.bn_eps)
    for layer in (backbone, proj):
        for _, bn in layer.batchnorms():
            bn.stats_mode = UPDATE_STATS
        for _, t in layer.named_parameters():
            t.requires_grad = True
    params = {f"backbone.{p}": t for p, t in backbone.named_parameters()}
    params.update({f"proj.{p}": t for p, t in proj.named_parameters()})

    total = max(cfg.epochs * steps_per_epoch, 1)
    schedule = LrSchedule(cfg.lr, total, int(cfg.warmup_fraction * total), "warmup-cosine")
    opt = OptimizerState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    epoch_losses, step = [], 0
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xb = features[idx]
            views = np.empty((2 * len(idx), xb.shape[1]))
            views[0::2] = augment(xb, cfg.augment, aug_rng)
            views[1::2] = augment(xb, cfg.augment, aug_rng)
            for t in params.values():
                t.grad = None
            try:
                with Tape() as tape:
                    loss = nt_xent(proj(backbone(Tensor(views))), cfg.tau)
                    tape.backward(loss)
            except NonFiniteError as exc:
                raise PretrainDivergence(
                    f"non-finite value at epoch {epoch} step {step}: {exc}") from exc
            sgd_step(params, opt, lr_at(schedule, step))
            losses.append(loss.item())
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.4f", epoch, epoch_losses[-1])
    for _, t in backbone.named_parameters():
        t.requires_grad = False
        t.grad = None
    for _, bn in backbone.batchnorms():
        bn.stats_mode = FROZEN_STATS
    return {"epoch_losses": epoch_losses, "steps": step, "config": cfg.to_dict()}
