"""Compact 1D CNN over 24-value MFCC summaries, written against numpy.

Tensors are channels-last, ``(batch, length, channels)``, float64.  Every
layer implements ``forward(x, train, rng)`` and ``backward(dout)``; parameter
gradients are left in ``layer.grads`` after ``backward``.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import NP, P
from .errors import EmptyInput, InputError, NonFiniteInput, ParseError, SingleClassData

log = logging.getLogger(__name__)

INPUT_LENGTH = 24

# (kind, options) pairs; softmax is folded into the loss / predict step
REFERENCE_ARCHITECTURE = (
    ("conv", {"filters": 256, "kernel": 8}),
    ("relu", {}),
    ("dropout", {"rate": 0.1}),
    ("maxpool", {"size": 2}),
    ("conv", {"filters": 128, "kernel": 8}),
    ("relu", {}),
    ("dropout", {"rate": 0.1}),
    ("maxpool", {"size": 2}),
    ("conv", {"filters": 64, "kernel": 8}),
    ("relu", {}),
    ("conv", {"filters": 32, "kernel": 8}),
    ("relu", {}),
    ("flatten", {}),
    ("dense", {"units": 64}),
    ("relu", {}),
    ("dense", {"units": 2}),
)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def options(self) -> dict:
        return {}

    def output_shape(self, shape):
        return shape


class Conv1D(Layer):
    """Stride-1 convolution with 'same' padding (3 left / 4 right for k=8)."""

    kind = "conv"

    def __init__(self, filters, kernel, in_channels):
        super().__init__()
        self.filters, self.kernel, self.in_channels = filters, kernel, in_channels
        self.pad = ((kernel - 1) // 2, kernel - 1 - (kernel - 1) // 2)
        self.params = {"W": np.zeros((kernel, in_channels, filters)),
                       "b": np.zeros(filters)}

    def options(self):
        return {"filters": self.filters, "kernel": self.kernel}

    def fans(self):
        return self.kernel * self.in_channels, self.kernel * self.filters

    def output_shape(self, shape):
        return (shape[0], self.filters)

    def forward(self, x, train=False, rng=None):
        B, L, C = x.shape
        xp = np.pad(x, ((0, 0), self.pad, (0, 0)))
        # windows: (B, L, C, k) -> (B, L, k, C) to line up with W's layout
        cols = sliding_window_view(xp, self.kernel, axis=1).transpose(0, 1, 3, 2)
        cols = cols.reshape(B * L, self.kernel * C)
        self._cache = (cols, x.shape)
        W = self.params["W"].reshape(-1, self.filters)
        return (cols @ W + self.params["b"]).reshape(B, L, self.filters)

    def backward(self, dout):
        cols, (B, L, C) = self._cache
        d2 = dout.reshape(B * L, self.filters)
        W = self.params["W"].reshape(-1, self.filters)
        self.grads["W"] = (cols.T @ d2).reshape(self.params["W"].shape)
        self.grads["b"] = d2.sum(axis=0)
        dcols = (d2 @ W.T).reshape(B, L, self.kernel, C)
        dxp = np.zeros((B, L + self.kernel - 1, C))
        for j in range(self.kernel):
            dxp[:, j:j + L] += dcols[:, :, j]
        return dxp[:, self.pad[0]:self.pad[0] + L]


class Dense(Layer):
    kind = "dense"

    def __init__(self, units, in_features):
        super().__init__()
        self.units, self.in_features = units, in_features
        self.params = {"W": np.zeros((in_features, units)), "b": np.zeros(units)}

    def options(self):
        return {"units": self.units}

    def fans(self):
        return self.in_features, self.units

    def output_shape(self, shape):
        return (self.units,)

    def forward(self, x, train=False, rng=None):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self.grads["W"] = self._x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["W"].T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class Dropout(Layer):
    """Inverted dropout: identity at inference."""

    kind = "dropout"

    def __init__(self, rate):
        super().__init__()
        self.rate = rate

    def options(self):
        return {"rate": self.rate}

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class MaxPool1D(Layer):
    kind = "maxpool"

    def __init__(self, size):
        super().__init__()
        self.size = size

    def options(self):
        return {"size": self.size}

    def output_shape(self, shape):
        return (shape[0] // self.size, shape[1])

    def forward(self, x, train=False, rng=None):
        B, L, C = x.shape
        n = L // self.size
        win = x[:, :n * self.size].reshape(B, n, self.size, C)
        arg = win.argmax(axis=2)
        self._cache = (x.shape, arg)
        return np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0]

    def backward(self, dout):
        (B, L, C), arg = self._cache
        n = L // self.size
        dwin = np.zeros((B, n, self.size, C))
        # first maximum only, so pooled gradient mass is conserved on ties
        np.put_along_axis(dwin, arg[:, :, None, :], dout[:, :, None, :], axis=2)
        dx = np.zeros((B, L, C))
        dx[:, :n * self.size] = dwin.reshape(B, n * self.size, C)
        return dx


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, y):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def _check_architecture(arch):
    convs = [o for k, o in arch if k == "conv"]
    if len(convs) != 4 or convs[0]["filters"] != 256:
        raise InputError("architecture needs exactly 4 conv layers, the first with 256 filters")
    if any(o["kernel"] != 8 for o in convs):
        raise InputError("every conv kernel must have size 8")
    if any(o["rate"] != 0.1 for k, o in arch if k == "dropout"):
        raise InputError("dropout rate must be 0.1")
    if any(o["size"] != 2 for k, o in arch if k == "maxpool"):
        raise InputError("pool size must be 2")
    if arch[-1][0] != "dense" or arch[-1][1]["units"] != 2:
        raise InputError("architecture must end in a 2-unit dense layer")


def _build(arch, input_length):
    layers, shape = [], (input_length, 1)
    for kind, opt in arch:
        if kind == "conv":
            layer = Conv1D(opt["filters"], opt["kernel"], shape[1])
        elif kind == "dense":
            layer = Dense(opt["units"], shape[0])
        elif kind == "relu":
            layer = ReLU()
        elif kind == "dropout":
            layer = Dropout(opt["rate"])
        elif kind == "maxpool":
            layer = MaxPool1D(opt["size"])
        elif kind == "flatten":
            layer = Flatten()
        else:
            raise InputError(f"unknown layer kind {kind!r}")
        if kind == "dense" and len(shape) != 1:
            raise InputError("dense layer needs a flattened input")
        shape = layer.output_shape(shape)
        if min(shape) <= 0:
            raise InputError(f"layer {kind} collapses the signal to shape {shape}")
        layers.append(layer)
    return layers


@dataclass(eq=False)
class CnnModel:
    architecture: tuple
    layers: list
    rng_seed: int
    input_length: int = INPUT_LENGTH
    # per-coefficient affine standardisation fitted on training data
    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(INPUT_LENGTH))
    input_scale: np.ndarray = field(default_factory=lambda: np.ones(INPUT_LENGTH))

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield f"{i}.{layer.kind}.{name}", layer, name

    def get_weights(self) -> list[np.ndarray]:
        return [layer.params[name].copy() for _, layer, name in self.named_params()]

    def set_weights(self, weights) -> None:
        for (key, layer, name), w in zip(self.named_params(), weights, strict=True):
            if w.shape != layer.params[name].shape:
                raise InputError(f"{key}: shape {w.shape} != {layer.params[name].shape}")
            layer.params[name] = np.array(w, dtype=np.float64)

    def logits(self, x, train=False, rng=None):
        h = x
        for layer in self.layers:
            h = layer.forward(h, train, rng)
        return h

    def backward(self, dlogits):
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def _prepare(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[-1] != self.input_length:
            raise InputError(f"expected {self.input_length} coefficients, got {X.shape[-1]}")
        if not np.all(np.isfinite(X)):
            raise NonFiniteInput("input contains NaN or Inf")
        return ((X - self.input_mean) / self.input_scale)[:, :, None]

    def predict_proba(self, X, batch: int = 512) -> np.ndarray:
        """``(n, 2)`` array of ``(p_NP, p_P)`` in inference mode."""
        Z = self._prepare(X)
        out = np.empty((len(Z), 2))
        for i in range(0, len(Z), batch):
            out[i:i + batch] = softmax(self.logits(Z[i:i + batch]))
        return out


def init_model(arch=REFERENCE_ARCHITECTURE, seed: int = 0,
               input_length: int = INPUT_LENGTH) -> CnnModel:
    """Glorot-uniform weights, zero biases, reproducible from ``seed``."""
    arch = tuple((k, dict(o)) for k, o in arch)
    _check_architecture(arch)
    layers = _build(arch, input_length)
    rng = np.random.default_rng(seed)
    for layer in layers:
        if "W" in layer.params:
            fan_in, fan_out = layer.fans()
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            layer.params["W"] = rng.uniform(-limit, limit, layer.params["W"].shape)
    return CnnModel(arch, layers, seed, input_length,
                    np.zeros(input_length), np.ones(input_length))


def forward(model: CnnModel, x, train_mode: bool = False, rng=None) -> tuple[float, float]:
    """Class probabilities ``(p_NP, p_P)`` for one summary vector."""
    if train_mode and rng is None:
        rng = np.random.default_rng(model.rng_seed)
    p = softmax(model.logits(model._prepare(x), train_mode, rng))[0]
    return float(p[NP]), float(p[P])


# ----------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    lr_decay: float = 1e-6
    rho: float = 0.9
    epsilon: float = 1e-8
    epochs: int = 200
    batch_size: int = 16
    val_fraction: float = 0.3
    balance: bool = True
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise InputError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if min(self.learning_rate, self.epochs, self.batch_size, self.epsilon) <= 0:
            raise InputError("learning rate, epochs, batch size and epsilon must be positive")
        if self.lr_decay < 0 or not 0.0 < self.rho < 1.0:
            raise InputError("lr_decay must be >= 0 and rho in (0, 1)")


@dataclass
class TrainingCurve:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = 0

    def to_tsv(self) -> str:
        rows = ["epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc"]
        for i, vals in enumerate(zip(self.train_loss, self.train_acc,
                                     self.val_loss, self.val_acc), start=1):
            rows.append("\t".join([str(i)] + [f"{v:.6f}" for v in vals]))
        return "\n".join(rows) + "\n"


class RMSProp:
    """Running mean of squared gradients; ``lr_t = lr / (1 + decay * t)``."""

    def __init__(self, lr, decay=0.0, rho=0.9, eps=1e-8):
        self.lr, self.decay, self.rho, self.eps = lr, decay, rho, eps
        self.iterations = 0
        self._acc: dict[int, np.ndarray] = {}

    def step(self, params_and_grads):
        lr = self.lr / (1.0 + self.decay * self.iterations)
        for key, (param, grad) in enumerate(params_and_grads):
            acc = self._acc.get(key)
            if acc is None:
                acc = self._acc[key] = np.zeros_like(param)
            acc *= self.rho
            acc += (1.0 - self.rho) * grad * grad
            param -= lr * grad / (np.sqrt(acc) + self.eps)
        self.iterations += 1


def stratified_split(y, val_fraction, rng) -> tuple[np.ndarray, np.ndarray]:
    train_idx, val_idx = [], []
    for cls in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == cls))
        n_val = int(round(val_fraction * len(idx)))
        if len(idx) >= 2:
            n_val = min(max(n_val, 1), len(idx) - 1)
        else:
            n_val = 0
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))


def downsample_majority(idx, y, rng) -> np.ndarray:
    counts = {c: np.flatnonzero(y[idx] == c) for c in (NP, P)}
    n = min(len(v) for v in counts.values())
    keep = [rng.choice(v, n, replace=False) if len(v) > n else v for v in counts.values()]
    return np.sort(idx[np.concatenate(keep)])


def _loss_acc(model, Z, y, batch=512):
    if len(y) == 0:
        return float("nan"), float("nan")
    total, correct = 0.0, 0
    for i in range(0, len(y), batch):
        logits = model.logits(Z[i:i + batch])
        loss, _ = softmax_cross_entropy(logits, y[i:i + batch])
        total += loss * len(logits)
        correct += int((logits.argmax(axis=1) == y[i:i + batch]).sum())
    return total / len(y), correct / len(y)


def train(X, y, cfg: TrainConfig = TrainConfig(), arch=REFERENCE_ARCHITECTURE,
          model: CnnModel | None = None, progress=None) -> tuple[CnnModel, TrainingCurve]:
    """Fit a model; returns the weights of the best-validation-loss epoch.

    ``model`` may be supplied to start from custom weights (its
    standardisation is refitted when ``cfg.standardize`` is set).
    ``progress(epoch, curve)`` is called after every epoch; a truthy return
    value stops training early.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise EmptyInput("no training data")
    if len(X) != len(y):
        raise InputError(f"{len(X)} feature rows but {len(y)} labels")
    if set(np.unique(y)) != {NP, P}:
        raise SingleClassData("training data must contain both NP and P examples")
    if not np.all(np.isfinite(X)):
        raise NonFiniteInput("training features contain NaN or Inf")

    rng = np.random.default_rng(cfg.seed)
    tr, va = stratified_split(y, cfg.val_fraction, rng)
    if cfg.balance:
        tr = downsample_majority(tr, y, rng)

    if model is None:
        model = init_model(arch, cfg.seed, X.shape[1])
    if cfg.standardize:
        mean = X[tr].mean(axis=0)
        scale = X[tr].std(axis=0)
        model.input_mean = mean
        model.input_scale = np.where(scale > 1e-12, scale, 1.0)
    Z = model._prepare(X)

    opt = RMSProp(cfg.learning_rate, cfg.lr_decay, cfg.rho, cfg.epsilon)
    curve = TrainingCurve()
    best_loss, best_weights = math.inf, model.get_weights()
    for epoch in range(cfg.epochs):
        order = rng.permutation(tr)
        seen, loss_sum, correct = 0, 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            b = order[i:i + cfg.batch_size]
            logits = model.logits(Z[b], train=True, rng=rng)
            loss, dlogits = softmax_cross_entropy(logits, y[b])
            model.backward(dlogits)
            opt.step([(layer.params[n], layer.grads[n]) for _, layer, n in model.named_params()])
            seen += len(b)
            loss_sum += loss * len(b)
            correct += int((logits.argmax(axis=1) == y[b]).sum())
        curve.train_loss.append(loss_sum / seen)
        curve.train_acc.append(correct / seen)
        vl, vacc = _loss_acc(model, Z[va], y[va])
        curve.val_loss.append(vl)
        curve.val_acc.append(vacc)
        if not math.isfinite(curve.train_loss[-1]):
            log.warning("non-finite training loss at epoch %d", epoch + 1)
        if vl < best_loss:
            best_loss, best_weights = vl, model.get_weights()
            curve.best_epoch = epoch + 1
        if progress is not None and progress(epoch + 1, curve):
            break
    model.set_weights(best_weights)
    return model, curve


# ----------------------------------------------------------------------
# probability sequences

@dataclass(eq=False)
class ProbSequence:
    subject_id: str
    starts: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.starts = np.asarray(self.starts, dtype=np.float64).reshape(-1)
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if self.starts.shape != self.probs.shape:
            raise InputError("starts and probabilities differ in length")
        if np.any(np.diff(self.starts) <= 0):
            raise InputError(f"{self.subject_id}: segment starts must strictly increase")
        if np.any((self.probs < 0) | (self.probs > 1)) or not np.all(np.isfinite(self.probs)):
            raise InputError(f"{self.subject_id}: probabilities must lie in [0, 1]")

    def __len__(self):
        return len(self.probs)


def predict_sequence(model: CnnModel, X, starts, subject_id: str = "") -> ProbSequence:
    X = np.asarray(X, dtype=np.float64).reshape(-1, model.input_length)
    if len(X) == 0:
        return ProbSequence(subject_id, [], [])
    return ProbSequence(subject_id, starts, model.predict_proba(X)[:, P])


def write_prob_sequences(path, seqs) -> None:
    lines = ["# subject_id\tstart\tp"]
    for s in seqs:
        for t, p in zip(s.starts, s.probs):
            lines.append(f"{s.subject_id}\t{float(t)!r}\t{float(p)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_prob_sequences(path) -> list[ProbSequence]:
    """Parse ``subject<TAB>start<TAB>p`` rows (third-party classifiers welcome)."""
    groups: dict[str, tuple[list, list]] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise ParseError("expected subject_id, start, p", lineno)
        try:
            t, p = float(parts[1]), float(parts[2])
        except ValueError:
            raise ParseError("bad number", lineno) from None
        if not 0.0 <= p <= 1.0:
            raise ParseError(f"probability {p} outside [0, 1]", lineno)
        st, pr = groups.setdefault(parts[0], ([], []))
        st.append(t)
        pr.append(p)
    out = []
    for sid, (st, pr) in groups.items():
        order = np.argsort(st, kind="stable")
        out.append(ProbSequence(sid, np.asarray(st)[order], np.asarray(pr)[order]))
    return out


# ----------------------------------------------------------------------
# model file: b"BSCN" | u32 version | u32 header length | JSON header | f64 LE arrays

MAGIC = b"BSCN"
FORMAT_VERSION = 1


def save_model(path, model: CnnModel) -> None:
    arrays = [model.input_mean, model.input_scale] + model.get_weights()
    names = ["input.mean", "input.scale"] + [k for k, _, _ in model.named_params()]
    header = {
        "architecture": [[k, o] for k, o in model.architecture],
        "seed": int(model.rng_seed),
        "input_length": int(model.input_length),
        "layers": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(blob)) + blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> CnnModel:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ParseError(f"{path}: not a model file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported model version {version}")
    header = json.loads(data[12:12 + hlen])
    arch = tuple((k, o) for k, o in header["architecture"])
    model = init_model(arch, header["seed"], header["input_length"])
    offset = 12 + hlen
    arrays = []
    for entry in header["layers"]:
        n = int(np.prod(entry["shape"]))
        if offset + 8 * n > len(data):
            raise ParseError(f"{path}: truncated weight data")
        arrays.append(np.frombuffer(data, "<f8", n, offset).reshape(entry["shape"]).astype(np.float64))
        offset += 8 * n
    model.input_mean, model.input_scale = arrays[0], arrays[1]
    model.set_weights(arrays[2:])
    return model

