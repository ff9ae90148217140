"""Small fully connected network trained with weighted binary cross-entropy.

Input -> 14 ReLU -> 7 ReLU -> 1 logit, plain mini-batch gradient descent.
The forward pass accumulates one input column at a time, so every row's
output is computed by the same float operations whatever the batch size.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import Standardization
from .features import LabelEncoding

MAGIC = b"LMNN"
VERSION = 1


class NonFiniteLoss(FloatingPointError):
    pass


class DimensionMismatch(ValueError):
    pass


class DegenerateData(ValueError):
    pass


class CorruptModel(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


@dataclass
class MlpConfig:
    input_dim: int = 8
    hidden: tuple = (14, 7)
    minority_weight: float = 1000.0
    learning_rate: float = 1e-2
    batch_size: int = 1024
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.input_dim < 1 or not self.hidden or min(self.hidden) < 1:
            raise ValueError("layer sizes must be positive")
        if not self.minority_weight > 0:
            raise ValueError("minority_weight must be > 0")
        if not self.learning_rate > 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate > 0, batch_size >= 1 and epochs >= 0 are required")


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _expit(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def wbce_loss(y_true, logits, minority_weight: float = 1000.0) -> float:
    """Mean weighted BCE, written with softplus so no log of a sigmoid is taken.

    -log(sigmoid(z)) = softplus(-z) and -log(1 - sigmoid(z)) = softplus(z).
    """
    y = np.asarray(y_true, dtype=np.float64)
    z = np.asarray(logits, dtype=np.float64)
    if y.shape != z.shape:
        raise DimensionMismatch("labels and logits differ in shape")
    per = minority_weight * y * softplus(-z) + (1.0 - y) * softplus(z)
    return float(per.mean())


def wbce_grad(y, z, minority_weight: float) -> np.ndarray:
    """d wbce_loss / d logits."""
    p = _expit(z)
    return (minority_weight * y * (p - 1.0) + (1.0 - y) * p) / len(z)


@dataclass
class MlpModel:
    weights: list   # W[l] has shape (fan_in, fan_out)
    biases: list
    standardization: Optional[Standardization] = None
    encoding: Optional[LabelEncoding] = None
    config: dict = field(default_factory=dict)
    loss_trace: list = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def logits(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DimensionMismatch(f"expected rows of length {self.input_dim}, got shape {X.shape}")
        return _forward(self.weights, self.biases, X)[-1][:, 0]

    def predict_proba(self, X) -> np.ndarray:
        """Probability for standardized rows."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            return self.predict_proba(X[None, :])[0]
        p = _expit(self.logits(X))
        return np.clip(p, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))

    def score_raw(self, X) -> np.ndarray:
        """Probability for raw feature rows, standardized with the stored parameters."""
        X = np.asarray(X, dtype=np.float64)
        if self.standardization is not None:
            X = self.standardization.apply(X)
        return self.predict_proba(X)


def _affine(A: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.broadcast_to(b, (len(A), len(b))).copy()
    for k in range(W.shape[0]):
        out += A[:, k:k + 1] * W[k]
    return out


def _forward(weights, biases, X) -> list:
    """Activations per layer: [X, a1, ..., logits]."""
    acts = [X]
    a = X
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = _affine(a, W, b)
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    return acts


def init_params(config: MlpConfig, rng: np.random.Generator):
    sizes = (config.input_dim, *config.hidden, 1)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def gradients(weights, biases, X, y, minority_weight):
    """Loss and its gradients with respect to every weight and bias."""
    acts = _forward(weights, biases, X)
    z = acts[-1][:, 0]
    loss = wbce_loss(y, z, minority_weight)
    delta = wbce_grad(y, z, minority_weight)[:, None]
    gW = [None] * len(weights)
    gb = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gW[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ weights[i].T) * (acts[i] > 0)
    return loss, gW, gb


def train(X, y, config: Optional[MlpConfig] = None,
          standardization: Optional[Standardization] = None,
          encoding: Optional[LabelEncoding] = None) -> MlpModel:
    """Mini-batch gradient descent on standardized rows ``X``."""
    config = config or MlpConfig()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != config.input_dim:
        raise DimensionMismatch(f"expected {config.input_dim} columns, got shape {X.shape}")
    yb = np.asarray(y).astype(bool)
    if yb.all() or not yb.any():
        raise DegenerateData("training data must contain both classes")
    yf = yb.astype(np.float64)
    rng = np.random.default_rng(config.seed)
    weights, biases = init_params(config, rng)
    lr, bs, w = config.learning_rate, config.batch_size, config.minority_weight
    trace = []
    n = len(X)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, gW, gb = gradients(weights, biases, X[idx], yf[idx], w)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} in epoch {epoch + 1} at row {start}")
            total += loss * len(idx)
            for i in range(len(weights)):
                weights[i] -= lr * gW[i]
                biases[i] -= lr * gb[i]
        trace.append(total / n)
    for p in weights + biases:
        if not np.all(np.isfinite(p)):
            raise NonFiniteLoss("parameters became non-finite")
    return MlpModel(weights, biases, standardization, encoding, _config_dict(config), trace)


def _config_dict(config: MlpConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(config.hidden)
    return d


def predict_proba(model: MlpModel, X) -> np.ndarray:
    return model.predict_proba(X)


# ---- serialization ------------------------------------------------------

def save(model: MlpModel) -> bytes:
    meta = json.dumps({
        "config": model.config,
        "standardization": None if model.standardization is None else model.standardization.to_dict(),
        "encoding": None if model.encoding is None else model.encoding.table,
        "loss_trace": model.loss_trace,
    }, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BI", VERSION, len(model.weights)))
    for W in model.weights:
        buf.write(struct.pack("<II", *W.shape))
    for W, b in zip(model.weights, model.biases):
        buf.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    return buf.getvalue()


def load(data: bytes) -> MlpModel:
    if len(data) < 5 or data[:4] != MAGIC:
        raise CorruptModel("not an MLP model (bad magic)")
    if data[4] != VERSION:
        raise VersionMismatch(f"model version {data[4]}, expected {VERSION}")
    try:
        (n_layers,) = struct.unpack_from("<I", data, 5)
        off = 9
        shapes = []
        for _ in range(n_layers):
            shapes.append(struct.unpack_from("<II", data, off))
            off += 8
        for (_, o), (i2, _) in zip(shapes[:-1], shapes[1:]):
            if o != i2:
                raise CorruptModel("inconsistent layer shapes")
        weights, biases = [], []
        for fi, fo in shapes:
            need = 8 * (fi * fo + fo)
            if off + need > len(data):
                raise CorruptModel("truncated parameters")
            weights.append(np.frombuffer(data, "<f8", fi * fo, off).astype(np.float64).reshape(fi, fo))
            off += 8 * fi * fo
            biases.append(np.frombuffer(data, "<f8", fo, off).astype(np.float64))
            off += 8 * fo
        (mlen,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + mlen != len(data):
            raise CorruptModel("unexpected trailing or missing bytes")
        meta = json.loads(data[off:].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CorruptModel):
            raise
        raise CorruptModel(f"cannot decode model: {exc}") from None
    if not n_layers or any(not np.all(np.isfinite(p)) for p in weights + biases):
        raise CorruptModel("missing or non-finite parameters")
    std = meta.get("standardization")
    enc = meta.get("encoding")
    return MlpModel(weights, biases,
                    None if std is None else Standardization.from_dict(std),
                    None if enc is None else LabelEncoding(enc),
                    meta.get("config", {}), meta.get("loss_trace", []))


def save_file(model: MlpModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save(model))


def load_file(path) -> MlpModel:
    with open(path, "rb") as fh:
        return load(fh.read())


def write_loss_trace(model: MlpModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,wbce\n")
        for e, v in enumerate(model.loss_trace, 1):
            fh.write(f"{e},{v!r}\n")


def flat_params(model_or_weights: Sequence) -> np.ndarray:
    """All parameters as one vector (weights then bias per layer)."""
    if isinstance(model_or_weights, MlpModel):
        ws, bs = model_or_weights.weights, model_or_weights.biases
    else:
        ws, bs = model_or_weights
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(ws, bs)])
