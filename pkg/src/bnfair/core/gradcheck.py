"""Central finite-difference checks for the autodiff engine."""
import numpy as np

from .tensor import Tape, Tensor

# Below this norm both gradients are treated as vanishing: central differences
# with h = 1e-5 carry ~1e-11 roundoff, which would make a relative error against
# an exactly-zero gradient (a bias feeding batch-statistics BN) meaningless.
ZERO_GRAD_TOL = 1e-8


def relative_error(analytic, numeric):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)`` (1e-12 floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def numeric_gradient(fn, inputs, index, h=1e-5):
    """d fn / d inputs[index] by central differences; fn maps arrays -> float."""
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    target = arrays[index]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(*arrays)
        flat[i] = orig - h
        fm = fn(*arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(build, inputs, h=1e-5):
    """Compare tape gradients of ``build(*tensors) -> scalar Tensor`` with FD.

    Returns the worst relative error over all inputs; an input whose analytic
    and numeric gradients are both below ``ZERO_GRAD_TOL`` counts as agreeing.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]

    def value(*arrs):
        with Tape():
            return build(*[Tensor(a) for a in arrs]).item()

    with Tape() as tape:
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        loss = build(*ts)
        tape.backward(loss)
    worst = 0.0
    for i, t in enumerate(ts):
        num = numeric_gradient(value, arrays, i, h)
        ana = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        if max(np.linalg.norm(ana), np.linalg.norm(num)) < ZERO_GRAD_TOL:
            continue
        worst = max(worst, relative_error(ana, num))
    return worst
