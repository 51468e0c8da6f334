"""Speaker vector pool and the k-nearest-impostor table used for hard negatives."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn

log = logging.getLogger(__name__)

POOL_MAGIC = b"E2EV"
# similarities equal to this many decimals count as ties (broken by speaker id)
TIE_DECIMALS = 12


@dataclass
class SpeakerVectorPool:
    vectors: dict[str, np.ndarray]
    generation: int = 0

    def __post_init__(self):
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) > 1:
            raise ValueError(f"pool vectors differ in dimension: {dims}")
        for spk, v in self.vectors.items():
            if not np.linalg.norm(v) > 0:
                raise ValueError(f"pool vector for {spk} has zero norm")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def speakers(self) -> list[str]:
        return sorted(self.vectors)


@dataclass
class ImpostorTable:
    neighbors: dict[str, list[tuple[str, float]]]
    k: int

    def __getitem__(self, spk: str) -> list[tuple[str, float]]:
        return self.neighbors[spk]

    def __contains__(self, spk: str) -> bool:
        return spk in self.neighbors

    def impostors(self, spk: str) -> list[str]:
        return [s for s, _ in self.neighbors[spk]]


def build_impostor_table(pool: SpeakerVectorPool, k: int) -> ImpostorTable:
    """Exhaustive cosine nearest-neighbour scan.

    Each speaker gets the ``min(k, n-1)`` most similar other speakers, most
    similar first, ties resolved by lexicographic speaker id.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if len(pool) < 2:
        raise ValueError("impostor table needs at least two speakers")
    ids = pool.speakers
    V = np.stack([pool.vectors[s] for s in ids])
    U = V / np.linalg.norm(V, axis=1, keepdims=True)
    sims = np.clip(U @ U.T, -1.0, 1.0)
    keys = np.round(sims, TIE_DECIMALS)
    kk = min(k, len(ids) - 1)
    table = {}
    for i, spk in enumerate(ids):
        neg = -keys[i]
        neg[i] = np.inf  # self sorts last
        # ids are sorted, so a stable sort breaks ties lexicographically
        order = np.argsort(neg, kind="stable")[:kk]
        table[spk] = [(ids[j], float(sims[i, j])) for j in order]
    return ImpostorTable(table, k)


def refresh_pool(embed: Callable[[Sequence[str]], np.ndarray], utts_by_speaker: Mapping[str, Sequence[str]],
                 n_enroll: int, rng: np.random.Generator,
                 previous: SpeakerVectorPool | None = None) -> SpeakerVectorPool:
    """Recompute every speaker's pool vector as the mean of ``n_enroll`` sampled utterances.

    ``embed`` maps a list of utterance ids to a matrix of supervectors.  The
    generation counter is one past ``previous`` (zero for a fresh pool).
    """
    if previous is not None and set(previous.vectors) != set(utts_by_speaker):
        raise ValueError("pool refresh must keep the speaker set unchanged")
    chosen: dict[str, list[str]] = {}
    for spk in sorted(utts_by_speaker):
        utts = list(utts_by_speaker[spk])
        if not utts:
            raise ValueError(f"speaker {spk} has no utterances")
        n = min(n_enroll, len(utts))
        chosen[spk] = [utts[i] for i in rng.choice(len(utts), size=n, replace=False)]
    flat = [u for spk in sorted(chosen) for u in chosen[spk]]
    vecs = np.asarray(embed(flat))
    out, pos = {}, 0
    for spk in sorted(chosen):
        n = len(chosen[spk])
        out[spk] = vecs[pos:pos + n].mean(axis=0)
        pos += n
    gen = 0 if previous is None else previous.generation + 1
    return SpeakerVectorPool(out, gen)


def sample_impostor_utterances(impostors: Sequence[str], utts_by_speaker: Mapping[str, Sequence[str]],
                               count: int, rng: np.random.Generator) -> tuple[list[str], bool]:
    """Draw ``count`` utterances uniformly from the union of the impostors' utterances.

    Draws are without replacement when the union is large enough; otherwise
    with replacement, and the returned flag is set.
    """
    union = [u for spk in impostors for u in utts_by_speaker[spk]]
    if not union:
        raise ValueError("impostor speakers have no utterances")
    fallback = len(union) < count
    idx = rng.choice(len(union), size=count, replace=fallback)
    return [union[i] for i in idx], fallback


def sample_from_table(table: ImpostorTable, spk: str, utts_by_speaker, count: int,
                      rng: np.random.Generator) -> tuple[list[str], bool]:
    if spk not in table:
        raise KeyError(f"speaker {spk} is not in the impostor table")
    return sample_impostor_utterances(table.impostors(spk), utts_by_speaker, count, rng)


# ---------------------------------------------------------------------------
# pool dump


def save_pool(pool: SpeakerVectorPool, path) -> None:
    buf = io.BytesIO()
    buf.write(POOL_MAGIC)
    nn.write_u32(buf, 1)
    nn.write_u32(buf, pool.generation)
    nn.write_u32(buf, len(pool))
    for spk in pool.speakers:
        nn.write_str(buf, spk)
        nn.write_tensor(buf, pool.vectors[spk])
    Path(path).write_bytes(buf.getvalue())


def load_pool(path) -> SpeakerVectorPool:
    with open(path, "rb") as fh:
        version = nn.expect_magic(fh, POOL_MAGIC)
        if version != 1:
            raise ValueError(f"unsupported pool version {version}")
        gen = nn.read_u32(fh)
        n = nn.read_u32(fh)
        vectors = {}
        for _ in range(n):
            spk = nn.read_str(fh)
            vectors[spk] = nn.read_tensor(fh)
    return SpeakerVectorPool(vectors, gen)
