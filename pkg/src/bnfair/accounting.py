"""Closed-form parameter/buffer accounting per tuning regime.

Fractions use trainable parameters over all parameters of backbone plus the
attached head; BN running statistics are counted separately as buffers.
"""
import json
from dataclasses import asdict, dataclass, field

from .finetune import TuningPolicy, policy_updates_stats, trainable_under

KINDS = ("conv2d", "linear", "batchnorm")


class CatalogError(ValueError):
    pass


@dataclass
class LayerDescriptor:
    kind: str
    path: str
    in_features: int
    out_features: int
    kernel: int = 1
    skip: bool = False
    head: bool = False

    def param_count(self):
        if self.kind == "conv2d":
            return self.kernel * self.kernel * self.in_features * self.out_features
        if self.kind == "linear":
            return self.in_features * self.out_features + self.out_features
        if self.kind == "batchnorm":
            return 2 * self.out_features
        raise CatalogError(f"unknown layer kind {self.kind!r} at {self.path}")

    def buffer_count(self):
        return 2 * self.out_features if self.kind == "batchnorm" else 0


@dataclass
class ArchCatalog:
    name: str
    layers: list = field(default_factory=list)

    def to_json(self):
        return json.dumps({"name": self.name, "layers": [asdict(l) for l in self.layers]},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["name"], [LayerDescriptor(**l) for l in d["layers"]])


@dataclass
class CountTotals:
    parameters: int
    buffers: int


def count_parameters(catalog):
    return CountTotals(sum(l.param_count() for l in catalog.layers),
                       sum(l.buffer_count() for l in catalog.layers))


def resnet50_catalog(head_out=40):
    """ResNet50 (bottleneck 3-4-6-3, no classifier) plus a 2048 -> head_out linear head."""
    if head_out < 1:
        raise CatalogError("head_out must be >= 1")
    layers = [LayerDescriptor("conv2d", "conv1", 3, 64, 7),
              LayerDescriptor("batchnorm", "bn1", 64, 64)]
    in_ch = 64
    for stage, (planes, blocks) in enumerate([(64, 3), (128, 4), (256, 6), (512, 3)], start=1):
        out_ch = planes * 4
        for b in range(blocks):
            pre = f"layer{stage}.{b}"
            layers += [
                LayerDescriptor("conv2d", f"{pre}.conv1", in_ch, planes, 1),
                LayerDescriptor("batchnorm", f"{pre}.bn1", planes, planes),
                LayerDescriptor("conv2d", f"{pre}.conv2", planes, planes, 3),
                LayerDescriptor("batchnorm", f"{pre}.bn2", planes, planes),
                LayerDescriptor("conv2d", f"{pre}.conv3", planes, out_ch, 1),
                LayerDescriptor("batchnorm", f"{pre}.bn3", out_ch, out_ch),
            ]
            if b == 0:
                layers += [
                    LayerDescriptor("conv2d", f"{pre}.downsample.0", in_ch, out_ch, 1, skip=True),
                    LayerDescriptor("batchnorm", f"{pre}.downsample.1", out_ch, out_ch, skip=True),
                ]
            in_ch = out_ch
    layers.append(LayerDescriptor("linear", "fc", 2048, head_out, head=True))
    return ArchCatalog(f"resnet50+head{head_out}", layers)


def desk_catalog(spec, head_out):
    """Catalog of the residual-MLP backbone described by a BackboneSpec."""
    layers, width = [], spec.input_dim
    for i, block in enumerate(spec.blocks):
        pre = f"backbone.block{i}"
        layers += [LayerDescriptor("linear", f"{pre}.fc1", width, block.width),
                   LayerDescriptor("batchnorm", f"{pre}.bn1", block.width, block.width),
                   LayerDescriptor("linear", f"{pre}.fc2", block.width, block.width),
                   LayerDescriptor("batchnorm", f"{pre}.bn2", block.width, block.width)]
        if block.skip_kind == "Projection":
            layers += [LayerDescriptor("linear", f"{pre}.skip.fc", width, block.width, skip=True),
                       LayerDescriptor("batchnorm", f"{pre}.skip.bn", block.width, block.width,
                                       skip=True)]
        width = block.width
    layers.append(LayerDescriptor("linear", "head", spec.embedding_dim, head_out, head=True))
    return ArchCatalog("desk-backbone", layers)


@dataclass
class AccountingResult:
    policy: str
    trainable: int
    buffers: int
    total: int
    total_buffers: int
    breakdown: dict

    @property
    def fraction(self):
        return self.trainable / self.total if self.total else 0.0

    def to_dict(self):
        d = asdict(self)
        d["fraction"] = self.fraction
        return d


def updated_fraction(catalog, policy):
    """Trainable parameters and updated buffers of ``catalog`` under ``policy``."""
    policy = TuningPolicy.parse(policy) if isinstance(policy, str) else policy
    if policy == TuningPolicy.BN_STATS_SKIP and not any(l.skip for l in catalog.layers):
        raise CatalogError("BNStatsSkip needs skip-branch layers in the catalog")
    trainable, breakdown = 0, {}
    for layer in catalog.layers:
        n = layer.param_count()
        if trainable_under(policy, head=layer.head, bn_affine=layer.kind == "batchnorm",
                           skip=layer.skip):
            trainable += n
            breakdown[layer.path] = n
    totals = count_parameters(catalog)
    buffers = totals.buffers if policy_updates_stats(policy) else 0
    return AccountingResult(policy.value, trainable, buffers, totals.parameters, totals.buffers,
                            breakdown)


def accounting_table(catalog, policies=tuple(TuningPolicy)):
    return [updated_fraction(catalog, p) for p in policies]


def format_table(rows):
    lines = [f"{'policy':<18} {'trainable':>12} {'total':>12} {'fraction':>9} {'buffers':>9}"]
    for r in rows:
        lines.append(f"{r.policy:<18} {r.trainable:>12,d} {r.total:>12,d} "
                     f"{100 * r.fraction:>8.3f}% {r.buffers:>9,d}")
    return "\n".join(lines)
