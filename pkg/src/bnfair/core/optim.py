"""SGD-family optimizers and learning-rate schedules."""
import math
from dataclasses import dataclass, field

import numpy as np

SCHEDULE_SHAPES = ("constant", "warmup-cosine", "one-cycle")
OPTIMIZER_ARMS = ("sgd-momentum", "adaptive")


@dataclass
class OptimizerState:
    """Per-parameter buffers plus hyperparameters.

    ``arm="sgd-momentum"`` uses classic L2 folded into the momentum update::

        v <- m * v + g + wd * theta
        theta <- theta - lr * v

    ``arm="adaptive"`` is momentum-free with a running second moment::

        g' = g + wd * theta
        s <- beta2 * s + (1 - beta2) * g'^2
        theta <- theta - lr * g' / (sqrt(s) + eps)
    """

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    arm: str = "sgd-momentum"
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arm not in OPTIMIZER_ARMS:
            raise ValueError(f"unknown optimizer arm {self.arm!r}")


def sgd_step(params, state, lr=None):
    """Apply one update to ``params``, a mapping path -> Tensor.

    Every tensor in ``params`` must carry a populated ``.grad``; tensors not
    passed here are never touched.
    """
    lr = state.lr if lr is None else lr
    for path, p in params.items():
        g = p.grad
        if g is None:
            raise ValueError(f"no gradient for trainable tensor {path}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {path}")
        buf = state.buffers.get(path)
        if buf is None:
            buf = np.zeros_like(p.data)
            state.buffers[path] = buf
        elif buf.shape != p.data.shape:
            raise ValueError(f"optimizer buffer shape mismatch for {path}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if state.arm == "sgd-momentum":
            buf *= state.momentum
            buf += g
            p.data = p.data - lr * buf
        else:
            buf *= state.beta2
            buf += (1.0 - state.beta2) * g * g
            p.data = p.data - lr * g / (np.sqrt(buf) + state.eps)
    state.step += 1


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    shape: str = "warmup-cosine"

    def __post_init__(self):
        if self.shape not in SCHEDULE_SHAPES:
            raise ValueError(f"unknown schedule shape {self.shape!r}")
        if self.total_steps < 1 or self.base_lr <= 0:
            raise ValueError("schedule needs total_steps >= 1 and base_lr > 0")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")


def lr_at(schedule, step):
    """Learning rate for ``step`` in [0, total_steps).

    All shapes share the linear warmup ``base * (step + 1) / warmup``.
    warmup-cosine then follows ``base * (1 + cos(pi * t)) / 2`` with t the
    fraction of the post-warmup phase elapsed.  one-cycle ramps from base/25
    up to base over max(warmup, 30% of steps) and anneals linearly down to
    base/1e4 at the final step.
    """
    s = schedule
    if not 0 <= step < s.total_steps:
        raise IndexError(f"step {step} outside [0, {s.total_steps})")
    base = s.base_lr
    if s.shape == "one-cycle":
        peak = max(s.warmup_steps, int(0.3 * s.total_steps), 1)
        start, end = base / 25.0, base / 1e4
        if step < peak:
            return start + (base - start) * (step + 1) / peak
        tail = s.total_steps - peak
        frac = (step - peak) / tail if tail > 1 else 1.0
        return base + (end - base) * frac
    if step < s.warmup_steps:
        return base * (step + 1) / s.warmup_steps
    if s.shape == "constant":
        return base
    span = s.total_steps - s.warmup_steps
    t = (step - s.warmup_steps) / span
    return base * 0.5 * (1.0 + math.cos(math.pi * t))
