"""Frame-level phoneme classifier (the keyword-spotting DNN).

38 -> 128 (sigmoid) -> 64 (sigmoid) -> 10 (softmax).  The pre-sigmoid output of
the 64-unit layer is the bottleneck feature and the softmax output is the
phonetic posterior used as attention context.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn

log = logging.getLogger(__name__)

PHONEMES = ("hh", "ey", "k", "ao", "r", "t", "aa", "n", "er", "garbage")
N_CLASSES = len(PHONEMES)
GARBAGE = N_CLASSES - 1
INPUT_DIM = 38
HIDDEN = (128, 64)
MAGIC = b"E2EP"
PARAM_NAMES = ("l1.W", "l1.b", "l2.W", "l2.b", "out.W", "out.b")


@dataclass
class PhoneticModel:
    params: nn.ParamStore
    initial_loss: float | None = None
    final_loss: float | None = None

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x.frames if hasattr(x, "frames") else x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != INPUT_DIM:
            raise nn.ShapeError(f"phonetic net expects T x {INPUT_DIM} input, got {x.shape}")
        return x

    def forward(self, x) -> tuple[nn.Tensor, nn.Tensor]:
        """(logits, layer-2 pre-activation) for a T x 38 batch."""
        p = self.params
        a1 = nn.sigmoid(nn.linear(nn.as_tensor(x), p["l1.W"], p["l1.b"]))
        z2 = nn.linear(a1, p["l2.W"], p["l2.b"])
        logits = nn.linear(nn.sigmoid(z2), p["out.W"], p["out.b"])
        return logits, z2

    def posteriors(self, x) -> np.ndarray:
        logits, _ = self.forward(self._check(x))
        return nn.softmax(logits, axis=-1).data

    def bottleneck(self, x) -> np.ndarray:
        _, z2 = self.forward(self._check(x))
        return z2.data

    def features(self, x) -> tuple[np.ndarray, np.ndarray]:
        """(posteriors, bottleneck) from one forward pass."""
        logits, z2 = self.forward(self._check(x))
        return nn.softmax(logits, axis=-1).data, z2.data

    def freeze(self) -> "PhoneticModel":
        for _, t in self.params.items():
            t.requires_grad = False
        return self


def init_phonetic(seed: int = 0) -> PhoneticModel:
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    dims = (INPUT_DIM, *HIDDEN, N_CLASSES)
    for name, fan_in, fan_out in zip(("l1", "l2", "out"), dims[:-1], dims[1:]):
        store.add(f"{name}.W", nn.glorot_uniform(rng, (fan_out, fan_in), fan_in, fan_out))
        store.add(f"{name}.b", np.zeros(fan_out))
    return PhoneticModel(store)


def posteriors(model: PhoneticModel, x) -> np.ndarray:
    return model.posteriors(x)


def bottleneck(model: PhoneticModel, x) -> np.ndarray:
    return model.bottleneck(x)


def _loss(model: PhoneticModel, x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = model.forward(x)
    return nn.cross_entropy(logits, y).item()


def train_phonetic(frames: Sequence[np.ndarray] | np.ndarray, labels: Sequence[np.ndarray] | np.ndarray,
                   epochs: int = 10, lr: float = 0.1, batch_size: int = 256, seed: int = 0,
                   model: PhoneticModel | None = None) -> PhoneticModel:
    """Minibatch SGD on frame cross-entropy.

    ``frames``/``labels`` are either stacked arrays or per-utterance lists.
    """
    X = np.vstack(frames) if not isinstance(frames, np.ndarray) else frames
    y = np.concatenate(labels) if not isinstance(labels, np.ndarray) else labels
    y = np.asarray(y).astype(np.int64)
    if X.shape[0] == 0:
        raise ValueError("empty training corpus")
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} frames but {y.shape[0]} labels")
    if y.min() < 0 or y.max() >= N_CLASSES:
        raise ValueError(f"frame label outside 0..{N_CLASSES - 1}")
    if X.shape[1] != INPUT_DIM:
        raise nn.ShapeError(f"phonetic net expects {INPUT_DIM}-dim frames, got {X.shape[1]}")
    model = model or init_phonetic(seed)
    rng = np.random.default_rng(seed)
    model.initial_loss = _loss(model, X, y)
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        for s in range(0, len(y), batch_size):
            idx = order[s:s + batch_size]
            model.params.zero_grad()
            with nn.Tape() as tape:
                logits, _ = model.forward(X[idx])
                loss = nn.cross_entropy(logits, y[idx])
                tape.backward(loss)
            model.params.sgd_step(lr)
        log.debug("phonetic epoch %d loss %.5f", epoch, _loss(model, X, y))
    model.final_loss = _loss(model, X, y)
    log.info("phonetic net: loss %.4f -> %.4f", model.initial_loss, model.final_loss)
    return model


def to_bytes(model: PhoneticModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    nn.write_u32(buf, 1)
    nn.write_named(buf, [(k, model.params[k].data) for k in PARAM_NAMES])
    return buf.getvalue()


def from_stream(fh) -> PhoneticModel:
    nn.expect_magic(fh, MAGIC)
    tensors = nn.read_named(fh)
    missing = set(PARAM_NAMES) - set(tensors)
    if missing:
        raise ValueError(f"phonetic model file lacks tensors {sorted(missing)}")
    store = nn.ParamStore()
    for k in PARAM_NAMES:
        store.add(k, tensors[k], trainable=False)
    return PhoneticModel(store)


def save(model: PhoneticModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path) -> PhoneticModel:
    with open(path, "rb") as fh:
        return from_stream(fh)
