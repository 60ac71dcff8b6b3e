"""Per-asset MLP return predictor with hand-written reverse mode.

One network (lookback -> hidden -> 1, tanh) is shared by all assets: each
asset's lookback window is mapped to its own next-day prediction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeMismatch, TapeMismatch

N_INPUT = 30
N_HIDDEN = 32
ACTIVATION = "tanh"
CHECKPOINT_MAGIC = b"DFLMVO-MLP-v1\n"


@dataclass(eq=False)
class MlpModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    activation: str = ACTIVATION

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.w2 = np.asarray(self.w2, dtype=float).reshape(1, -1)
        self.b2 = float(self.b2)
        h, d = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (1, h):
            raise ShapeMismatch(
                f"inconsistent shapes w1 {self.w1.shape}, b1 {self.b1.shape}, w2 {self.w2.shape}"
            )
        if self.activation != ACTIVATION:
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not all(np.all(np.isfinite(p)) for p in (self.w1, self.b1, self.w2, self.b2)):
            raise ValueError("model parameters must be finite")

    @property
    def n_input(self) -> int:
        return self.w1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def n_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + 1

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), [self.b2]])

    @classmethod
    def from_vector(cls, theta, n_input: int = N_INPUT, n_hidden: int = N_HIDDEN) -> "MlpModel":
        theta = np.asarray(theta, dtype=float)
        k1 = n_hidden * n_input
        expected = k1 + 2 * n_hidden + 1
        if theta.shape != (expected,):
            raise ShapeMismatch(f"expected {expected} parameters, got {theta.shape}")
        return cls(
            w1=theta[:k1].reshape(n_hidden, n_input).copy(),
            b1=theta[k1:k1 + n_hidden].copy(),
            w2=theta[k1 + n_hidden:k1 + 2 * n_hidden].copy(),
            b2=theta[-1],
        )

    def equals(self, other: "MlpModel") -> bool:
        return self.w1.shape == other.w1.shape and np.array_equal(
            self.to_vector(), other.to_vector()
        )


@dataclass(eq=False)
class ParamGradient:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), [self.b2]])


@dataclass(eq=False)
class Tape:
    model: MlpModel
    inputs: np.ndarray
    hidden: np.ndarray  # tanh(pre-activation)
    pre: np.ndarray


def init(seed, n_input: int = N_INPUT, n_hidden: int = N_HIDDEN) -> MlpModel:
    """Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    a1 = np.sqrt(6.0 / (n_input + n_hidden))
    a2 = np.sqrt(6.0 / (n_hidden + 1))
    return MlpModel(
        w1=rng.uniform(-a1, a1, size=(n_hidden, n_input)),
        b1=np.zeros(n_hidden),
        w2=rng.uniform(-a2, a2, size=(1, n_hidden)),
        b2=0.0,
    )


def forward(model: MlpModel, features):
    """Predict one return per asset row.

    ``features`` has shape ``(..., N, lookback)``; the result has shape
    ``(..., N)``. Also returns the tape needed by :func:`backward`.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim < 2 or x.shape[-1] != model.n_input:
        raise ShapeMismatch(f"features must end in (N, {model.n_input}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite features")
    pre = x @ model.w1.T + model.b1
    hidden = np.tanh(pre)
    mu_hat = hidden @ model.w2[0] + model.b2
    return mu_hat, Tape(model, x, hidden, pre)


def backward(model: MlpModel, tape: Tape, upstream) -> ParamGradient:
    """Parameter gradient of ``sum(upstream * mu_hat)`` over every asset and batch row."""
    if tape.model is not model:
        raise TapeMismatch("tape was recorded with a different model")
    g = np.asarray(upstream, dtype=float)
    if g.shape != tape.hidden.shape[:-1]:
        raise TapeMismatch(f"upstream shape {g.shape} vs forward output {tape.hidden.shape[:-1]}")
    h = tape.hidden.reshape(-1, model.n_hidden)
    x = tape.inputs.reshape(-1, model.n_input)
    g = g.reshape(-1)
    dpre = (g[:, None] * model.w2[0]) * (1.0 - h * h)
    return ParamGradient(
        w1=dpre.T @ x,
        b1=dpre.sum(axis=0),
        w2=(g @ h).reshape(1, -1),
        b2=float(g.sum()),
    )


def save_checkpoint(model: MlpModel, path) -> None:
    """Magic line, (n_hidden, n_input) as little-endian uint32, then float64 params."""
    theta = model.to_vector().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", model.n_hidden, model.n_input))
        fh.write(theta.tobytes())


def load_checkpoint(path) -> MlpModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    n_hidden, n_input = struct.unpack_from("<II", blob, off)
    theta = np.frombuffer(blob, dtype="<f8", offset=off + 8)
    return MlpModel.from_vector(theta.astype(float), n_input=n_input, n_hidden=n_hidden)
