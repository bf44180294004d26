"""Selective fine-tuning regimes, instrumented training and random search."""
import enum
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core.optim import LrSchedule, OptimizerState, lr_at, sgd_step
from .core.rng import RngStream
from .core.tensor import NonFiniteError, Tape, Tensor
from .metrics import PredictionLog, evaluate_fairness
from .nn import (FROZEN_STATS, UPDATE_STATS, BackboneSpec, Model, ResidualBlockSpec,
                 bce_with_logits, clone_model)

log = logging.getLogger(__name__)


class TuningPolicy(str, enum.Enum):
    FROZEN = "Frozen"
    BN_STATS = "BNStats"
    BN_STATS_AFFINE = "BNStatsAffine"
    BN_STATS_SKIP = "BNStatsSkip"
    FULL_FT = "FullFT"
    SUPERVISED_SCRATCH = "SupervisedScratch"

    @classmethod
    def parse(cls, name):
        for p in cls:
            if name in (p.value, p.name):
                return p
        raise ValueError(f"unknown policy {name!r}; choose from {[p.value for p in cls]}")


ALL_POLICIES = tuple(TuningPolicy)


class PartitionError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def is_bn_affine(path):
    return path.rsplit(".", 1)[-1] in ("gamma", "beta")


def is_skip(path):
    return ".skip." in path


def trainable_under(policy, head=False, bn_affine=False, skip=False):
    """The regime rule, stated on tensor roles rather than paths."""
    if head or policy in (TuningPolicy.FULL_FT, TuningPolicy.SUPERVISED_SCRATCH):
        return True
    if policy == TuningPolicy.BN_STATS_AFFINE:
        return bn_affine
    if policy == TuningPolicy.BN_STATS_SKIP:
        return skip
    return False


def policy_trainable(path, policy):
    """Does ``path`` (a parameter path) receive gradients under ``policy``?"""
    return trainable_under(policy, head=path.startswith("head."),
                           bn_affine=is_bn_affine(path), skip=is_skip(path))


def policy_updates_stats(policy):
    return policy != TuningPolicy.FROZEN


@dataclass(frozen=True)
class ParameterPartition:
    trainable: frozenset
    stats_updating: frozenset
    frozen: frozenset

    def covers(self, param_paths, buffer_paths):
        """Every tensor is claimed by exactly one of the three sets."""
        claimed = []
        for p in param_paths:
            claimed.append((p in self.trainable) + (p in self.frozen))
        for b in buffer_paths:
            layer = b.rsplit(".", 1)[0]
            claimed.append((layer in self.stats_updating) + (b in self.frozen))
        return all(n == 1 for n in claimed)


def partition_parameters(model, policy):
    policy = TuningPolicy.parse(policy) if isinstance(policy, str) else policy
    if policy == TuningPolicy.BN_STATS_SKIP and not model.backbone.spec.has_projection:
        raise PartitionError("BNStatsSkip needs at least one projection skip in the backbone")
    params = [p for p, _ in model.named_parameters()]
    trainable = frozenset(p for p in params if policy_trainable(p, policy))
    bn_layers = [p for p, _ in model.batchnorms()]
    stats = frozenset(bn_layers) if policy_updates_stats(policy) else frozenset()
    frozen = {p for p in params if p not in trainable}
    frozen |= {p for p, _, _ in model.named_buffers() if p.rsplit(".", 1)[0] not in stats}
    return ParameterPartition(trainable, stats, frozenset(frozen))


def apply_partition(model, partition):
    for path, t in model.named_parameters():
        t.requires_grad = path in partition.trainable
        t.grad = None
    for path, bn in model.batchnorms():
        bn.stats_mode = UPDATE_STATS if path in partition.stats_updating else FROZEN_STATS


@dataclass
class Hyperparameters:
    optimizer: str = "sgd-momentum"
    lr: float = 0.05
    schedule: str = "warmup-cosine"
    weight_decay: float = 0.0
    epochs: int = 10
    warmup_fraction: float = 0.05
    batch_size: int = 256
    momentum: float = 0.9

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainRun:
    policy: TuningPolicy
    hyperparameters: Hyperparameters
    seed: int
    model: Model
    partition: ParameterPartition
    counters: dict = field(default_factory=dict)
    epoch_losses: list = field(default_factory=list)
    wall_clock: float = 0.0

    def summary(self):
        """JSON-ready record; wall-clock time is left out to keep files reproducible."""
        return {
            "policy": self.policy.value,
            "hyperparameters": self.hyperparameters.to_dict(),
            "seed": self.seed,
            "counters": dict(self.counters),
            "epoch_losses": list(self.epoch_losses),
            "trainable_tensors": sorted(self.partition.trainable),
            "stats_updating_layers": sorted(self.partition.stats_updating),
        }


def _snapshot(model, paths):
    state = {p: a for p, _, a in model.state_arrays()}
    return {p: state[p].tobytes() for p in paths}


def finetune(pretrained, dataset, policy, hp=None, seed=0):
    """Fine-tune a copy of ``pretrained`` on a labeled dataset under ``policy``.

    Returns a TrainRun whose counters record, summed over all steps:
      backward_nodes       tape nodes visited by backward
      grad_kernels         per-input gradient computations
      backbone_backward_nodes / backbone_grad_kernels   the part not in the head
      backbone_grad_materializations   backbone parameters that received a grad
      parameter_updates    scalar parameter updates applied
      bn_buffer_mutations  BN layers whose buffers changed over the run
    """
    policy = TuningPolicy.parse(policy) if isinstance(policy, str) else policy
    hp = hp or Hyperparameters()
    rng = RngStream(seed)
    if policy == TuningPolicy.SUPERVISED_SCRATCH:
        model = Model(pretrained.backbone.spec, seed=rng.substream(10).seed)
    else:
        model = clone_model(pretrained)
    k = dataset.labels.shape[1]
    model.attach_head(k, rng.substream(11))
    partition = partition_parameters(model, policy)
    apply_partition(model, partition)
    trainable = {p: t for p, t in model.named_parameters() if p in partition.trainable}
    before = _snapshot(model, partition.frozen)
    buffers_before = {p: b.copy() for p, b in model.buffers_dict().items()}

    n = len(dataset)
    steps_per_epoch = max(n // hp.batch_size, 1)
    total = max(hp.epochs * steps_per_epoch, 1)
    schedule = LrSchedule(hp.lr, total, int(hp.warmup_fraction * total), hp.schedule)
    opt = OptimizerState(lr=hp.lr, momentum=hp.momentum, weight_decay=hp.weight_decay,
                         arm=hp.optimizer)
    order = rng.substream(12)
    counters = dict(backward_nodes=0, grad_kernels=0, backward_flops=0, backbone_backward_nodes=0,
                    backbone_grad_kernels=0, backbone_grad_materializations=0,
                    parameter_updates=0)
    backbone_params = [t for p, t in model.named_parameters() if p.startswith("backbone.")]
    n_trainable = sum(t.data.size for t in trainable.values())
    losses, step = [], 0
    start = time.perf_counter()
    for epoch in range(hp.epochs):
        perm = order.permutation(n)
        epoch_loss = []
        for b in range(steps_per_epoch):
            idx = perm[b * hp.batch_size:(b + 1) * hp.batch_size]
            model.zero_grad()
            try:
                with Tape() as tape:
                    emb = model.backbone(Tensor(dataset.features[idx]))
                    head_start = len(tape.nodes)
                    loss = bce_with_logits(model.head(emb), dataset.labels[idx])
                    tape.backward(loss)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"{policy.value}: non-finite value at step {step}: {exc}") \
                    from exc
            counters["backward_nodes"] += tape.backward_nodes
            counters["grad_kernels"] += tape.grad_kernels
            counters["backward_flops"] += tape.backward_flops
            for node in tape.nodes[:head_start]:
                if node.output.grad is not None:
                    counters["backbone_backward_nodes"] += 1
                    counters["backbone_grad_kernels"] += sum(p.requires_grad for p in node.parents)
            counters["backbone_grad_materializations"] += sum(t.grad is not None
                                                              for t in backbone_params)
            sgd_step(trainable, opt, lr_at(schedule, step))
            counters["parameter_updates"] += n_trainable
            epoch_loss.append(loss.item())
            step += 1
        losses.append(float(np.mean(epoch_loss)))
    wall = time.perf_counter() - start

    after = _snapshot(model, partition.frozen)
    broken = [p for p in partition.frozen if before[p] != after[p]]
    assert not broken, f"partition violated: frozen tensors changed: {sorted(broken)[:5]}"
    buffers_after = model.buffers_dict()
    changed_layers = {p.rsplit(".", 1)[0] for p, b in buffers_after.items()
                      if not np.array_equal(b, buffers_before[p])}
    assert changed_layers <= partition.stats_updating, "buffers mutated outside stats_updating"
    counters["bn_buffer_mutations"] = len(changed_layers)
    counters["steps"] = step
    model.freeze_all()
    model.set_stats_mode(FROZEN_STATS)
    return TrainRun(policy, hp, seed, model, partition, counters, losses, wall)


# ---------------------------------------------------------------------------
# evaluation helpers


def prediction_log(model, dataset):
    return PredictionLog(model.predict_scores(dataset.features), dataset.labels, dataset.names)


def split_validation(dataset, seed, fraction=0.1):
    """Shuffle with ``seed`` and hold out the last ``fraction`` as validation."""
    perm = RngStream(seed).substream(99).permutation(len(dataset))
    n_val = max(int(round(fraction * len(dataset))), 1)
    return dataset.subset(perm[:-n_val], "train"), dataset.subset(perm[-n_val:], "validation")


def validation_score(run, fit, val):
    """Median F1-worst on ``val`` with thresholds calibrated on ``fit``."""
    report, _ = evaluate_fairness(prediction_log(run.model, fit), prediction_log(run.model, val))
    return report.median_worst


# ---------------------------------------------------------------------------
# random search


@dataclass
class SearchSpace:
    optimizers: tuple = ("sgd-momentum", "adaptive")
    lr_range: tuple = (1e-4, 1.0)
    schedules: tuple = ("constant", "warmup-cosine", "one-cycle")
    weight_decays: tuple = (0.0, 1e-5, 1e-4)
    epochs_range: tuple = (5, 30)
    warmup_range: tuple = (0.0, 0.1)
    trials: int = 20

    def sample(self, rng, base=None):
        """One hyperparameter tuple; consumes exactly six uniforms."""
        u = rng.uniform(6)
        lo, hi = self.lr_range
        e_lo, e_hi = self.epochs_range
        w_lo, w_hi = self.warmup_range
        base = base or Hyperparameters()
        return replace(
            base,
            optimizer=self.optimizers[int(u[0] * len(self.optimizers))],
            lr=float(math.exp(math.log(lo) + u[1] * (math.log(hi) - math.log(lo)))),
            schedule=self.schedules[int(u[2] * len(self.schedules))],
            weight_decay=self.weight_decays[int(u[3] * len(self.weight_decays))],
            epochs=int(e_lo + int(u[4] * (e_hi - e_lo + 1))),
            warmup_fraction=float(w_lo + u[5] * (w_hi - w_lo)),
        )

    def to_dict(self):
        return asdict(self)


def sample_trials(space, seed, defaults=None):
    """The search's hyperparameter list; ``defaults`` (if given) is trial 0."""
    rng = RngStream(seed).substream(7)
    trials = [space.sample(rng) for _ in range(space.trials)]
    if defaults is not None:
        trials[0] = defaults
    return trials


@dataclass
class SearchResult:
    best_index: int
    best_run: TrainRun
    best_score: float
    trials: list

    def summary(self):
        return {"best_index": self.best_index, "best_score": self.best_score,
                "trials": self.trials}


def random_search(space, policy, pretrained, dataset, seed=0, defaults=None):
    """Train every sampled trial on 90% of ``dataset``; pick by validation median F1-worst.

    All trials share the training seed, so a trial equal to the defaults
    reproduces the default run exactly.  Ties go to the lower trial index.
    """
    fit, val = split_validation(dataset, seed)
    records, best = [], None
    for i, hp in enumerate(sample_trials(space, seed, defaults)):
        try:
            run = finetune(pretrained, fit, policy, hp, seed)
            score = validation_score(run, fit, val)
        except TrainingDiverged as exc:
            log.warning("trial %d diverged: %s", i, exc)
            records.append({"trial": i, "hyperparameters": hp.to_dict(), "diverged": True,
                            "score": None})
            continue
        if math.isnan(score):
            score = -math.inf
        records.append({"trial": i, "hyperparameters": hp.to_dict(), "diverged": False,
                        "score": score})
        if best is None or score > best[2]:
            best = (i, run, score)
    if best is None:
        raise TrainingDiverged("all search trials diverged")
    return SearchResult(best[0], best[1], best[2], records)


# ---------------------------------------------------------------------------
# covariate-shift recalibration scenario


def recalibrate_stats(model, features, batch_size=128, passes=3):
    """Reset every BN buffer, then re-estimate it by EMA over ``features``.

    Batches are taken in row order, so identical inputs give identical buffers.
    """
    for _, bn in model.batchnorms():
        bn.reset_stats()
    model.set_stats_mode(UPDATE_STATS)
    n = features.shape[0]
    for _ in range(passes):
        for i in range(0, n - batch_size + 1, batch_size):
            model.backbone(Tensor(features[i:i + batch_size]))
    model.set_stats_mode(FROZEN_STATS)


def accuracy(model, features, labels):
    return float(((model.predict_scores(features) >= 0.5) == (labels == 1)).mean())


def recalibration_scenario(seed=0, shift=(2.0, 1.0), flip_labels=False):
    """Train on distribution A, then evaluate under the shift x -> scale * x + offset.

    Distribution A is intensity-like: features min-max scaled into [0, 1] with
    the train split's range (test clipped), so the shift acts like a strong
    contrast/brightness change.  The A model's BN buffers are finalized by
    `recalibrate_stats` on A.  Frozen
    evaluates that model on shifted data as is; BNStats first re-estimates
    the buffers on the shifted training features (weights untouched).
    ``flip_labels`` shifts the labels only.
    """
    from .data import DatasetSpec, generate_dataset

    spec = DatasetSpec(n_train=4096, n_test=2048, feature_dim=16, latent_dim=8,
                       marginals=[0.5] * 4, names=[f"a{i}" for i in range(4)], seed=seed)
    train, test = generate_dataset(spec)
    lo, hi = train.features.min(axis=0), train.features.max(axis=0)
    train.features = (train.features - lo) / (hi - lo)
    test.features = np.clip((test.features - lo) / (hi - lo), 0.0, 1.0)
    backbone = BackboneSpec(input_dim=16, width=32, embedding_dim=32,
                            blocks=[ResidualBlockSpec(32, "Projection"), ResidualBlockSpec(32)])
    base = Model(backbone, seed=seed)
    hp = Hyperparameters(epochs=10, batch_size=128, lr=0.05)
    model = finetune(base, train, TuningPolicy.FULL_FT, hp, seed).model
    recalibrate_stats(model, train.features)
    acc_a = accuracy(model, test.features, test.labels)

    scale, offset = shift
    shifted_train = scale * train.features + offset
    shifted_test = scale * test.features + offset
    test_labels = 1 - test.labels if flip_labels else test.labels
    frozen_acc = accuracy(model, shifted_test, test_labels)
    recal = clone_model(model)
    recalibrate_stats(recal, shifted_train)
    bnstats_acc = accuracy(recal, shifted_test, test_labels)
    drift = max(float(np.max(np.abs(recal.buffers_dict()[p] - b)))
                for p, b in model.buffers_dict().items())
    return {
        "seed": seed,
        "shift": [scale, offset],
        "flip_labels": flip_labels,
        "in_distribution_accuracy": acc_a,
        "frozen_accuracy": frozen_acc,
        "bnstats_accuracy": bnstats_acc,
        "frozen_ratio": frozen_acc / acc_a,
        "bnstats_ratio": bnstats_acc / acc_a,
        "max_buffer_drift": drift,
    }
