"""Reference anomaly models behind a flat-parameter interface.

Every model is described by a :class:`ModelSpec` and a flat float64 parameter
vector; training code never sees layer structure. Two kinds are provided:

``logistic_counts``
    logistic regression on template count vectors (PAD excluded);
    parameters are ``[w_1..w_V, b]`` with ``w_0`` unused.
``seq_mlp``
    one tanh hidden layer over the one-hot flattened window, two output logits;
    parameters are ``W1 (w*V x h) | b1 (h) | W2 (h x 2) | b2 (2)``, row-major.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .logs import PAD, Dataset, LogSequence

LOGISTIC_COUNTS = "logistic_counts"
SEQ_MLP = "seq_mlp"
MODEL_KINDS = (LOGISTIC_COUNTS, SEQ_MLP)
_KIND_CODE = {LOGISTIC_COUNTS: 0, SEQ_MLP: 1}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}

MAGIC = b"FLAD"
FORMAT_VERSION = 1
MSG_PARAMS = 0
MSG_CONTROL_DELTA = 1
_WIRE_HEADER = struct.Struct("<4sIIIQ")
_CKPT_HEADER = struct.Struct("<4sIIIIIQ")
WIRE_HEADER_SIZE = _WIRE_HEADER.size

INIT_SCALE = 0.05


class NumericOverflowError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    vocab_size: int
    window_size: int
    hidden_dim: int = 0

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.vocab_size < 2 or self.window_size < 1:
            raise ValueError("vocab_size must be >= 2 and window_size >= 1")
        if self.kind == SEQ_MLP and self.hidden_dim < 1:
            raise ValueError("seq_mlp needs hidden_dim >= 1")

    @property
    def param_length(self) -> int:
        if self.kind == LOGISTIC_COUNTS:
            return self.vocab_size + 1
        d, h = self.window_size * self.vocab_size, self.hidden_dim
        return d * h + h + h * 2 + 2

    def _mlp_slices(self) -> tuple[slice, slice, slice, slice]:
        d, h = self.window_size * self.vocab_size, self.hidden_dim
        a = d * h
        return slice(0, a), slice(a, a + h), slice(a + h, a + 3 * h), slice(a + 3 * h, a + 3 * h + 2)


@dataclass
class Batch:
    inputs: np.ndarray  # (n, window) template ids
    labels: np.ndarray  # (n,) in {0, 1}

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.inputs.ndim != 2 or len(self.inputs) == 0:
            raise ValueError("batch must be a nonempty (n, window) array")
        if len(self.labels) != len(self.inputs):
            raise ValueError("labels length must equal inputs length")

    @classmethod
    def from_sequences(cls, seqs: Sequence[LogSequence]) -> "Batch":
        return cls(np.array([s.events for s in seqs]), np.array([s.label or 0 for s in seqs]))

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "Batch":
        return cls(dataset.event_matrix(), dataset.label_vector())


@dataclass(frozen=True)
class Evaluation:
    loss: float
    precision: float
    recall: float
    f1: float
    accuracy: float


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.param_length)
    if spec.kind == LOGISTIC_COUNTS:
        params[1:spec.vocab_size] = rng.uniform(-INIT_SCALE, INIT_SCALE, spec.vocab_size - 1)
    else:
        w1, _, w2, _ = spec._mlp_slices()
        params[w1] = rng.uniform(-INIT_SCALE, INIT_SCALE, w1.stop - w1.start)
        params[w2] = rng.uniform(-INIT_SCALE, INIT_SCALE, w2.stop - w2.start)
    return params


def count_matrix(inputs: np.ndarray, vocab_size: int) -> np.ndarray:
    n = len(inputs)
    if inputs.size and inputs.max() >= vocab_size:
        raise ValueError(f"template id out of range for vocab_size={vocab_size}")
    flat = (inputs + vocab_size * np.arange(n)[:, None]).ravel()
    counts = np.bincount(flat, minlength=n * vocab_size).reshape(n, vocab_size).astype(np.float64)
    counts[:, PAD] = 0.0
    return counts


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_params(spec: ModelSpec, params: np.ndarray) -> None:
    if params.shape != (spec.param_length,):
        raise ValueError(f"expected {spec.param_length} parameters, got {params.shape}")


def _mlp_forward(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray):
    w, v, h = spec.window_size, spec.vocab_size, spec.hidden_dim
    if inputs.shape[1] != w:
        raise ValueError(f"window length {inputs.shape[1]} does not match model window ({w})")
    if inputs.size and inputs.max() >= v:
        raise ValueError(f"template id out of range for vocab_size={v}")
    s_w1, s_b1, s_w2, s_b2 = spec._mlp_slices()
    W1 = params[s_w1].reshape(w, v, h)
    W2 = params[s_w2].reshape(h, 2)
    mask = inputs != PAD
    gathered = W1[np.arange(w)[None, :], inputs] * mask[:, :, None]
    hidden = np.tanh(params[s_b1] + gathered.sum(axis=1))
    logits = hidden @ W2 + params[s_b2]
    return logits[:, 1] - logits[:, 0], (mask, hidden, W2)


def log_odds(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Anomaly log-odds for a (n, window) id matrix."""
    params = np.asarray(params, dtype=np.float64)
    _check_params(spec, params)
    inputs = np.asarray(inputs, dtype=np.int64)
    if spec.kind == LOGISTIC_COUNTS:
        return count_matrix(inputs, spec.vocab_size) @ params[:-1] + params[-1]
    return _mlp_forward(spec, params, inputs)[0]


def _bce(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def loss_and_grad(spec: ModelSpec, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its exact gradient."""
    params = np.asarray(params, dtype=np.float64)
    _check_params(spec, params)
    y = batch.labels
    n = len(y)
    if spec.kind == LOGISTIC_COUNTS:
        X = count_matrix(batch.inputs, spec.vocab_size)
        z = X @ params[:-1] + params[-1]
        dz = (_sigmoid(z) - y) / n
        grad = np.empty_like(params)
        grad[:-1] = X.T @ dz
        grad[-1] = dz.sum()
    else:
        w, v, h = spec.window_size, spec.vocab_size, spec.hidden_dim
        z, (mask, hidden, W2) = _mlp_forward(spec, params, batch.inputs)
        dz = (_sigmoid(z) - y) / n
        dlogits = np.stack([-dz, dz], axis=1)
        s_w1, s_b1, s_w2, s_b2 = spec._mlp_slices()
        grad = np.zeros_like(params)
        grad[s_w2] = (hidden.T @ dlogits).ravel()
        grad[s_b2] = dlogits.sum(axis=0)
        dpre = (dlogits @ W2.T) * (1.0 - hidden * hidden)
        grad[s_b1] = dpre.sum(axis=0)
        gW1 = np.zeros((w, v, h))
        pos = np.broadcast_to(np.arange(w)[None, :], batch.inputs.shape)
        np.add.at(gW1, (pos[mask], batch.inputs[mask]),
                  np.broadcast_to(dpre[:, None, :], (n, w, h))[mask])
        grad[s_w1] = gW1.ravel()
    loss = _bce(z, y)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericOverflowError("numeric overflow")
    return loss, grad


def predict(spec: ModelSpec, params: np.ndarray, seq: LogSequence | Sequence[int]) -> float:
    events = seq.events if isinstance(seq, LogSequence) else seq
    return float(_sigmoid(log_odds(spec, params, np.array([events])))[0])


def classification_scores(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float, float, float, float]:
    """Precision, recall, F1 for the anomaly class, and accuracy.

    Zero denominators give 0 rather than NaN.
    """
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    tp = int(np.sum(y_true & y_pred))
    fp = int(np.sum(~y_true & y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    accuracy = float(np.mean(y_true == y_pred)) if len(y_true) else 0.0
    return precision, recall, f1, accuracy


def evaluate(spec: ModelSpec, params: np.ndarray, dataset: Dataset) -> Evaluation:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    y = dataset.label_vector().astype(np.float64)
    z = log_odds(spec, params, dataset.event_matrix())
    precision, recall, f1, accuracy = classification_scores(y, z > 0)
    return Evaluation(_bce(z, y), precision, recall, f1, accuracy)


# -- serialization -----------------------------------------------------------

def encode_message(values: np.ndarray, kind: str, msg_type: int = MSG_PARAMS) -> bytes:
    """Wire form of a parameter vector: 24-byte header then little-endian f64."""
    values = np.ascontiguousarray(values, dtype="<f8")
    return _WIRE_HEADER.pack(MAGIC, FORMAT_VERSION, _KIND_CODE[kind], msg_type, len(values)) + values.tobytes()


def decode_message(blob: bytes) -> tuple[np.ndarray, str, int]:
    magic, version, kind, msg_type, length = _WIRE_HEADER.unpack_from(blob)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise ValueError("not a parameter message")
    values = np.frombuffer(blob, dtype="<f8", count=length, offset=_WIRE_HEADER.size)
    return values.astype(np.float64), _CODE_KIND[kind], msg_type


def message_size(param_length: int) -> int:
    return WIRE_HEADER_SIZE + 8 * param_length


def save_checkpoint(path: str | Path, spec: ModelSpec, params: np.ndarray) -> Path:
    """Binary checkpoint plus a JSON twin with the same stem."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = np.ascontiguousarray(params, dtype="<f8")
    header = _CKPT_HEADER.pack(MAGIC, FORMAT_VERSION, _KIND_CODE[spec.kind], spec.vocab_size,
                               spec.hidden_dim, spec.window_size, len(params))
    path.write_bytes(header + params.tobytes())
    twin = {"magic": "FLAD", "version": FORMAT_VERSION, "kind": spec.kind,
            "vocab_size": spec.vocab_size, "hidden_dim": spec.hidden_dim,
            "window_size": spec.window_size, "length": len(params), "values": params.tolist()}
    path.with_suffix(".json").write_text(json.dumps(twin) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelSpec, np.ndarray]:
    blob = Path(path).read_bytes()
    magic, version, kind, vocab, hidden, window, length = _CKPT_HEADER.unpack_from(blob)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise ValueError(f"{path}: not a checkpoint")
    spec = ModelSpec(_CODE_KIND[kind], vocab, window, hidden)
    values = np.frombuffer(blob, dtype="<f8", count=length, offset=_CKPT_HEADER.size)
    return spec, values.astype(np.float64)
