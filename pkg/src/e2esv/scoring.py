"""Enrollment, cosine scoring, logistic acceptance and the end-to-end loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .pooling import Supervector

LOG_CLAMP = 1e-12


class DegenerateSupervector(ValueError):
    pass


@dataclass
class SpeakerModel:
    speaker_id: str
    vector: Supervector
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("enrollment count must be positive")
        if not np.linalg.norm(self.vector.values) > 0:
            raise DegenerateSupervector(f"speaker {self.speaker_id}: degenerate supervector")


@dataclass
class LogisticHead:
    w: nn.Tensor
    b: nn.Tensor

    @classmethod
    def create(cls, w: float = 10.0, b: float = -5.0) -> "LogisticHead":
        return cls(nn.Tensor(np.array([w]), requires_grad=True, name="head.w"),
                   nn.Tensor(np.array([b]), requires_grad=True, name="head.b"))

    @property
    def threshold(self) -> float:
        """Score at which acceptance probability is exactly one half."""
        return -self.b.item() / self.w.item()


@dataclass
class Trial:
    test_id: str
    speaker_id: str
    label: int | None = None
    score: float | None = None


def enroll(supervectors: Sequence[Supervector], speaker_id: str) -> SpeakerModel:
    if not supervectors:
        raise ValueError(f"speaker {speaker_id}: no enrollment supervectors")
    kinds = {s.kind for s in supervectors}
    dims = {s.dim for s in supervectors}
    if len(dims) > 1 or len(kinds) > 1:
        raise ValueError(f"speaker {speaker_id}: mixed supervector dimensions/kinds {dims} {kinds}")
    mean = np.mean([s.values for s in supervectors], axis=0)
    if not np.linalg.norm(mean) > 0:
        raise DegenerateSupervector(f"speaker {speaker_id}: zero-norm enrollment mean")
    return SpeakerModel(speaker_id, Supervector(mean, supervectors[0].kind), len(supervectors))


def cosine_similarity(f: np.ndarray, g: np.ndarray) -> float:
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if f.shape != g.shape:
        raise ValueError(f"dimension mismatch {f.shape} vs {g.shape}")
    nf, ng = np.linalg.norm(f), np.linalg.norm(g)
    if not (nf > 0 and ng > 0):
        raise DegenerateSupervector("degenerate supervector")
    return float(np.clip(f @ g / (nf * ng), -1.0, 1.0))


def cosine_score(test: Supervector | np.ndarray, model: SpeakerModel | Supervector | np.ndarray) -> float:
    f = test.values if isinstance(test, Supervector) else test
    g = model.vector.values if isinstance(model, SpeakerModel) else (
        model.values if isinstance(model, Supervector) else model)
    return cosine_similarity(f, g)


def cosine(f: nn.Tensor, g: nn.Tensor) -> nn.Tensor:
    """Differentiable cosine similarity of two vectors, clamped to [-1, 1]."""
    dot = (f * g).sum()
    denom = nn.sqrt((f * f).sum() * (g * g).sum())
    return nn.clip(dot / denom, -1.0, 1.0)


def accept_probability(head: LogisticHead, score: float) -> float:
    z = head.w.item() * score + head.b.item()
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def reject_probability(head: LogisticHead, score: float) -> float:
    return 1.0 - accept_probability(head, score)


def e2e_loss(head: LogisticHead, scores: nn.Tensor, labels, total: int | None = None) -> nn.Tensor:
    """Mean binary cross-entropy of sigmoid(w*x + b) against labels.

    ``total`` overrides the divisor, which lets a minibatch loss be
    accumulated over several partial calls.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    scores = nn.as_tensor(scores)
    if y.size == 0:
        raise ValueError("empty trial list")
    if scores.size != y.size:
        raise ValueError(f"{scores.size} scores for {y.size} labels")
    p = nn.sigmoid(scores.reshape(-1) * head.w + head.b)
    ll = y * nn.log(nn.clip(p, LOG_CLAMP, None)) + (1.0 - y) * nn.log(nn.clip(1.0 - p, LOG_CLAMP, None))
    return ll.sum() * (-1.0 / (total or y.size))


def e2e_loss_trials(head: LogisticHead, trials: Sequence[Trial]) -> tuple[float, dict[str, np.ndarray]]:
    """Loss over scored trials with gradients for w, b and every score."""
    if not trials:
        raise ValueError("empty trial list")
    if any(t.label is None or t.score is None for t in trials):
        raise ValueError("every trial needs a label and a score")
    x = nn.Tensor([t.score for t in trials], requires_grad=True)
    head.w.grad = head.b.grad = None
    with nn.Tape() as tape:
        loss = e2e_loss(head, x, [t.label for t in trials])
        tape.backward(loss)
    grads = {"w": head.w.grad.copy(), "b": head.b.grad.copy(), "x": x.grad.copy()}
    head.w.grad = head.b.grad = None
    return loss.item(), grads


# ---------------------------------------------------------------------------
# trial list files


def parse_label(tok: str) -> int | None:
    if tok == "?":
        return None
    if tok in ("0", "1"):
        return int(tok)
    raise ValueError(f"bad trial label {tok!r} (expected 0, 1 or ?)")


def read_trials(path) -> list[Trial]:
    trials = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
        score = float(parts[3]) if len(parts) > 3 and parts[3].strip() else None
        trials.append(Trial(parts[0], parts[1], parse_label(parts[2]), score))
    return trials


def format_trial(t: Trial) -> str:
    label = "?" if t.label is None else str(t.label)
    line = f"{t.test_id}\t{t.speaker_id}\t{label}"
    if t.score is not None:
        line += f"\t{t.score!r}"
    return line


def write_trials(path, trials: Iterable[Trial]) -> None:
    Path(path).write_text("".join(format_trial(t) + "\n" for t in trials), encoding="utf-8")
