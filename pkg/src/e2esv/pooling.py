"""Frame-to-utterance pooling: mean (d-vector), posterior-scaled Kronecker and
learned-weight attention.

All pooling functions accept arrays or :class:`~e2esv.nn.Tensor` and return
tensors, so they are differentiable when used under a tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

POOLING_KINDS = ("mean", "posterior", "attention")


@dataclass
class Supervector:
    values: np.ndarray
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.kind not in POOLING_KINDS:
            raise ValueError(f"unknown pooling kind {self.kind!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite supervector")

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass
class AttentionParams:
    Wh: nn.Tensor
    Wb: nn.Tensor

    @classmethod
    def zeros(cls, h_dim: int = 64, b_dim: int = 64) -> "AttentionParams":
        return cls(nn.Tensor(np.zeros((1, h_dim)), requires_grad=True, name="att.Wh"),
                   nn.Tensor(np.zeros((1, b_dim)), requires_grad=True, name="att.Wb"))


def _frames(h) -> nn.Tensor:
    h = nn.as_tensor(h)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError(f"pooling needs a non-empty T x d frame matrix, got shape {h.shape}")
    return h


def _match(h: nn.Tensor, other: nn.Tensor, what: str) -> None:
    if other.ndim != 2 or other.shape[0] != h.shape[0]:
        raise ValueError(f"frame count mismatch: h has {h.shape[0]} frames, {what} has shape {other.shape}")


def mean_pool(h) -> nn.Tensor:
    return _frames(h).mean(axis=0)


def posterior_pool(h, gamma) -> nn.Tensor:
    """Sum over frames of h_t (x) gamma_t; block p holds sum_t gamma_t[p] h_t."""
    h, gamma = _frames(h), nn.as_tensor(gamma)
    _match(h, gamma, "gamma")
    return nn.matmul(gamma.T, h).reshape(-1)


def attention_weights(h, b, params: AttentionParams) -> nn.Tensor:
    h, b = _frames(h), nn.as_tensor(b)
    _match(h, b, "b")
    e = nn.tanh(nn.matmul(h, params.Wh.T) + nn.matmul(b, params.Wb.T))
    return nn.softmax(e.reshape(-1), axis=0)


def attention_pool(h, gamma, b, params: AttentionParams) -> tuple[nn.Tensor, nn.Tensor]:
    """Attention-weighted Kronecker pooling; returns (supervector, alpha)."""
    h, gamma = _frames(h), nn.as_tensor(gamma)
    _match(h, gamma, "gamma")
    alpha = attention_weights(h, b, params)
    weighted = gamma * alpha.reshape(-1, 1)
    return nn.matmul(weighted.T, h).reshape(-1), alpha


def pool(kind: str, h, gamma=None, b=None, params: AttentionParams | None = None) -> nn.Tensor:
    if kind == "mean":
        return mean_pool(h)
    if kind == "posterior":
        return posterior_pool(h, gamma)
    if kind == "attention":
        return attention_pool(h, gamma, b, params)[0]
    raise ValueError(f"unknown pooling kind {kind!r}")
