"""Synthetic multi-attribute datasets and external feature ingestion.

Generative process (per split, disjoint RNG substreams)::

    z ~ N(0, I_L)
    label_k = [w_k . z > b_k],   b_k = probit(1 - p_k) * |w_k|
    x = A z + sum_k c * label_k * u_k + noise_std * eps

so attribute k has marginal p_k, attributes correlate through the shared
latent z, and each one is linearly recoverable from x.  Features are rounded
to float32 so that what lands in a feature file is exactly what was trained on.
"""
import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .core.rng import RngStream

# Celeb-A attribute subset, sorted by under-representation rho.
TABLE1_ATTRIBUTES = ("bald", "double_chin", "chubby", "wearing_necktie", "wearing_necklace",
                     "no_beard", "straight_hair", "big_lips", "wavy_hair", "male",
                     "wearing_lipstick")
TABLE1_RHO = (0.02, 0.05, 0.06, 0.07, 0.12, 0.17, 0.21, 0.24, 0.32, 0.42, 0.47)


class DataFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# inverse normal CDF

_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)


def normal_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def quantile_inverse(p):
    """Standard normal inverse CDF: Acklam's rational fit plus one Halley step."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    lo = 0.02425
    if p < lo:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    elif p <= 1 - lo:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log(1 - p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    e = normal_cdf(x) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


# ---------------------------------------------------------------------------
# generation


@dataclass
class DatasetSpec:
    n_train: int = 20000
    n_test: int = 4000
    feature_dim: int = 64
    latent_dim: int = 16
    marginals: list = field(default_factory=lambda: list(TABLE1_RHO))
    names: list = field(default_factory=lambda: list(TABLE1_ATTRIBUTES))
    coupling: float = 1.5
    noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("split sizes must be positive")
        if len(self.names) != len(self.marginals):
            raise ValueError("need one name per marginal")
        for p in self.marginals:
            if not 0.0 < p < 1.0:
                raise ValueError(f"invalid marginal {p}: must lie in (0, 1)")

    @property
    def num_attributes(self):
        return len(self.marginals)

    def to_dict(self):
        return asdict(self)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    names: list
    split: str = "train"

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise DataFormatError("features and labels must be 2-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataFormatError(f"{self.features.shape[0]} feature rows vs "
                                  f"{self.labels.shape[0]} label rows")
        if self.labels.shape[1] != len(self.names):
            raise DataFormatError("label columns do not match attribute names")

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx, split=None):
        return Dataset(self.features[idx], self.labels[idx], list(self.names),
                       split or self.split)


def _structure(spec, rng):
    d, l, k = spec.feature_dim, spec.latent_dim, spec.num_attributes
    mixing = rng.normal((d, l)) / math.sqrt(l)
    weights = rng.normal((k, l))
    directions = rng.normal((k, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    offsets = np.array([quantile_inverse(1.0 - p) * np.linalg.norm(w)
                        for p, w in zip(spec.marginals, weights)])
    return mixing, weights, directions, offsets


def _draw_split(spec, structure, n, rng, split):
    mixing, weights, directions, offsets = structure
    z = rng.normal((n, spec.latent_dim))
    labels = (z @ weights.T > offsets).astype(np.int8)
    noise = rng.normal((n, spec.feature_dim))
    x = z @ mixing.T + spec.coupling * (labels @ directions) + spec.noise_std * noise
    x = x.astype(np.float32).astype(np.float64)
    return Dataset(x, labels, list(spec.names), split)


def generate_dataset(spec):
    """(train, test) datasets; a pure function of ``spec``."""
    root = RngStream(spec.seed)
    structure = _structure(spec, root.substream(0))
    train = _draw_split(spec, structure, spec.n_train, root.substream(1), "train")
    test = _draw_split(spec, structure, spec.n_test, root.substream(2), "test")
    return train, test


# ---------------------------------------------------------------------------
# files
#
# Feature file:
#   bytes 0-7    magic b"BNFFEAT\0"
#   bytes 8-11   uint32 LE version (1)
#   bytes 12-15  uint32 LE reserved (0)
#   then one JSON line  {"cols": C, "rows": R}\n
#   then R*C float32 LE, row-major
#
# Attribute file: CSV, header of attribute names, body of 0/1, one row per sample.

FEAT_MAGIC = b"BNFFEAT\0"
FEAT_VERSION = 1


def feature_bytes(features):
    arr = np.asarray(features)
    rows, cols = arr.shape
    sidecar = json.dumps({"cols": cols, "rows": rows}, sort_keys=True) + "\n"
    return (FEAT_MAGIC + struct.pack("<II", FEAT_VERSION, 0) + sidecar.encode()
            + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def write_features(path, features):
    with open(path, "wb") as fh:
        fh.write(feature_bytes(features))


def read_features(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != FEAT_MAGIC:
        raise DataFormatError(f"{path}: bad magic")
    version, _ = struct.unpack("<II", blob[8:16])
    if version != FEAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    nl = blob.find(b"\n", 16)
    if nl < 0:
        raise DataFormatError(f"{path}: missing JSON sidecar line")
    try:
        meta = json.loads(blob[16:nl])
        rows, cols = int(meta["rows"]), int(meta["cols"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: malformed sidecar: {exc}") from exc
    payload = blob[nl + 1:]
    if len(payload) != 4 * rows * cols:
        raise DataFormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * rows * cols}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)


def attributes_text(labels, names):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for row in np.asarray(labels):
        writer.writerow([int(v) for v in row])
    return buf.getvalue()


def write_attributes(path, labels, names):
    with open(path, "w", newline="") as fh:
        fh.write(attributes_text(labels, names))


def read_attributes(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or any(not n.strip() for n in rows[0]):
        raise DataFormatError(f"{path}: malformed header")
    names = [n.strip() for n in rows[0]]
    if len(set(names)) != len(names):
        raise DataFormatError(f"{path}: duplicate attribute names")
    labels = np.zeros((len(rows) - 1, len(names)), dtype=np.int8)
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(names):
            raise DataFormatError(f"{path}: row {r} has {len(row)} columns, expected {len(names)}")
        for c, val in enumerate(row):
            if val.strip() not in ("0", "1"):
                raise DataFormatError(
                    f"{path}: non-binary value {val!r} at row {r}, column {c} ({names[c]})")
            labels[r - 1, c] = int(val)
    return labels, names


def load_external(features_path, attributes_path, split="train"):
    features = read_features(features_path)
    labels, names = read_attributes(attributes_path)
    if features.shape[0] != labels.shape[0]:
        raise DataFormatError(f"feature file has {features.shape[0]} rows but attribute file "
                              f"has {labels.shape[0]}")
    return Dataset(features, labels, names, split)


def save_dataset(ds, features_path, attributes_path):
    write_features(features_path, ds.features)
    write_attributes(attributes_path, ds.labels, ds.names)
