"""Small differentiable classifiers used to generate attacks.

Two architectures over flattened ``[0, 1]`` pixels:

* ``linear``: softmax regression, ``logits = x W + b``.
* ``mlp``: one tanh hidden layer of width ``hidden``.

Loss is cross-entropy with a max-shifted log-softmax. Training is seeded
minibatch SGD, so a fixed seed reproduces the weights bit for bit.
"""

import json
import struct

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_images, check_labels

__all__ = [
    "TrainingDivergenceError",
    "CheckpointError",
    "TinyClassifier",
    "log_softmax",
    "save_model",
    "load_model",
]

MAGIC = b"TCLF"
CHECKPOINT_VERSION = 1
_ARCH_CODES = {"linear": 0, "mlp": 1}
_HEADER = struct.Struct("<4sIIIIIII")  # magic, version, arch, M, N, K, C, H


class TrainingDivergenceError(ArithmeticError):
    """Training loss became non-finite."""


class CheckpointError(ValueError):
    """A model checkpoint is malformed or from an unsupported version."""


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


class TinyClassifier(ClassifierMixin, BaseEstimator):
    """Softmax-linear or one-hidden-layer tanh classifier.

    Parameters
    ----------
    arch : {"linear", "mlp"}
    hidden : int
        Hidden width for ``mlp``; ignored for ``linear``.
    epochs : int
        Passes over the training split. ``0`` leaves the initial weights.
    learning_rate : float
    batch_size : int
    validation_fraction : float
        Trailing share of the training data held out for the recorded
        validation accuracy. ``0`` disables the split.
    n_classes : int, optional
        Inferred as ``max(y) + 1`` when omitted.
    seed : int
    """

    def __init__(self, arch="linear", hidden=128, epochs=5, learning_rate=0.5, batch_size=64,
                 validation_fraction=0.1, n_classes=None, seed=0):
        self.arch = arch
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.n_classes = n_classes
        self.seed = seed

    # parameters -------------------------------------------------------

    def _init_weights(self, D, C, rng):
        if self.arch == "linear":
            return [np.zeros((D, C)), np.zeros(C)]
        if self.arch == "mlp":
            H = int(self.hidden)
            if H < 1:
                raise ValueError("hidden width must be positive")
            return [rng.normal(0, 1 / np.sqrt(D), (D, H)), np.zeros(H),
                    rng.normal(0, 1 / np.sqrt(H), (H, C)), np.zeros(C)]
        raise ValueError(f"unknown architecture {self.arch!r}")

    def _config(self):
        return {k: v for k, v in self.get_params().items()}

    # forward / backward ------------------------------------------------

    def _forward(self, F):
        W = self.weights_
        if self.arch == "linear":
            return F @ W[0] + W[1], None
        h = np.tanh(F @ W[0] + W[1])
        return h @ W[2] + W[3], h

    def _backward(self, F, h, dz):
        # dz: dL/dlogits per sample; returns (param grads, input grads)
        W = self.weights_
        if self.arch == "linear":
            return [F.T @ dz, dz.sum(0)], dz @ W[0].T
        dpre = (dz @ W[2].T) * (1 - h ** 2)
        return [F.T @ dpre, dpre.sum(0), h.T @ dz, dz.sum(0)], dpre @ W[0].T

    def _flat(self, X):
        check_is_fitted(self, "weights_")
        X = check_images(X, self.input_shape_, check_range=False)
        return X.reshape(X.shape[0], -1), X.shape

    # training ----------------------------------------------------------

    def fit(self, X, y):
        X = check_images(X)
        n = X.shape[0]
        C = int(self.n_classes) if self.n_classes is not None else int(np.max(y)) + 1
        y = check_labels(y, n, C)
        self.input_shape_ = X.shape[1:]
        self.classes_ = np.arange(C)
        F = X.reshape(n, -1)
        n_val = int(round(self.validation_fraction * n)) if n > 1 else 0
        Ft, yt, Fv, yv = F[: n - n_val], y[: n - n_val], F[n - n_val:], y[n - n_val:]

        rng = np.random.default_rng(self.seed)
        self.weights_ = self._init_weights(F.shape[1], C, rng)
        onehot = np.eye(C)
        bs = int(self.batch_size)
        losses = []
        for epoch in range(int(self.epochs)):
            perm = rng.permutation(len(Ft))
            total = 0.0
            for start in range(0, len(Ft), bs):
                idx = perm[start:start + bs]
                z, h = self._forward(Ft[idx])
                lp = log_softmax(z)
                total -= float(np.sum(lp[np.arange(len(idx)), yt[idx]]))
                dz = (np.exp(lp) - onehot[yt[idx]]) / len(idx)
                grads, _ = self._backward(Ft[idx], h, dz)
                for w, g in zip(self.weights_, grads):
                    w -= self.learning_rate * g
            loss = total / max(len(Ft), 1)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(w)) for w in self.weights_):
                raise TrainingDivergenceError(
                    f"training loss diverged at epoch {epoch + 1} with config {self._config()}"
                )
            losses.append(loss)

        self.metadata_ = {
            "seed": self.seed,
            "epochs": int(self.epochs),
            "learning_rate": float(self.learning_rate),
            "train_accuracy": self._accuracy(Ft, yt),
            "validation_accuracy": self._accuracy(Fv, yv) if n_val else None,
            "train_loss": losses,
        }
        return self

    def _accuracy(self, F, y):
        if len(y) == 0:
            return None
        return float(np.mean(np.argmax(self._forward(F)[0], axis=1) == y))

    # inference ---------------------------------------------------------

    def decision_function(self, X):
        F, _ = self._flat(X)
        return self._forward(F)[0]

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def loss(self, X, y):
        """Per-sample cross-entropy."""
        F, _ = self._flat(X)
        y = check_labels(y, F.shape[0], len(self.classes_))
        lp = log_softmax(self._forward(F)[0])
        return -lp[np.arange(len(y)), y]

    def input_gradient(self, X, y):
        """Gradient of each sample's cross-entropy with respect to its pixels.

        Returns an array with the same shape as the validated ``X``.
        """
        F, shape = self._flat(X)
        y = check_labels(y, F.shape[0], len(self.classes_))
        z, h = self._forward(F)
        dz = np.exp(log_softmax(z))
        dz[np.arange(len(y)), y] -= 1.0
        _, dx = self._backward(F, h, dz)
        return dx.reshape(shape)

    # persistence helpers ------------------------------------------------

    @property
    def n_params(self):
        check_is_fitted(self, "weights_")
        return sum(w.size for w in self.weights_)


def save_model(model, path):
    """Write a ``TCLF`` checkpoint: header, float64 weights, JSON metadata."""
    check_is_fitted(model, "weights_")
    M, N, K = model.input_shape_
    C = len(model.classes_)
    H = int(model.hidden) if model.arch == "mlp" else 0
    meta = json.dumps({"params": model.get_params(), "metadata": model.metadata_},
                      sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, CHECKPOINT_VERSION, _ARCH_CODES[model.arch], M, N, K, C, H))
        for w in model.weights_:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise CheckpointError("checkpoint truncated in header")
    magic, version, arch_code, M, N, K, C, H = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    archs = {v: k for k, v in _ARCH_CODES.items()}
    if arch_code not in archs:
        raise CheckpointError(f"unknown architecture code {arch_code}")
    arch = archs[arch_code]
    D = M * N * K
    shapes = [(D, C), (C,)] if arch == "linear" else [(D, H), (H,), (H, C), (C,)]
    off = _HEADER.size
    weights = []
    for shape in shapes:
        size = int(np.prod(shape)) * 8
        if off + size > len(data):
            raise CheckpointError("checkpoint truncated in weights")
        weights.append(np.frombuffer(data, "<f8", size // 8, off).reshape(shape).astype(np.float64))
        off += size
    if off + 4 > len(data):
        raise CheckpointError("checkpoint truncated before metadata")
    (mlen,) = struct.unpack_from("<I", data, off)
    try:
        meta = json.loads(data[off + 4: off + 4 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("checkpoint metadata is not valid JSON") from None
    model = TinyClassifier(**meta["params"])
    model.arch, model.hidden = arch, H if arch == "mlp" else model.hidden
    model.weights_ = weights
    model.input_shape_ = (M, N, K)
    model.classes_ = np.arange(C)
    model.metadata_ = meta["metadata"]
    return model
