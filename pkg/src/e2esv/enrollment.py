"""Enrollment store: speaker models persisted next to a trained system.

Layout: ``E2ES``, u32 version, pooling kind string, u32 speaker count, then
per speaker its id string, u32 enrollment count and the vector as a tensor
record.  Speakers are written in sorted order so the bytes only depend on the
content.
"""

from __future__ import annotations

import io
from pathlib import Path
from typing import Mapping, Sequence

from . import nn
from .pooling import Supervector
from .scoring import SpeakerModel, enroll

STORE_MAGIC = b"E2ES"
STORE_VERSION = 1


def enroll_speakers(model, corpus, speakers: Sequence[str]) -> dict[str, SpeakerModel]:
    """Enroll each speaker from its ``enroll`` split utterances."""
    by_spk = corpus.by_speaker("enroll")
    missing = [s for s in speakers if s not in by_spk]
    if missing:
        raise KeyError(f"no enrollment utterances for: {', '.join(missing)}")
    out = {}
    for spk in sorted(set(speakers)):
        ids = by_spk[spk]
        V = model.embed([corpus[u] for u in ids])
        out[spk] = enroll([Supervector(v, model.pooling) for v in V], spk)
    return out


def to_bytes(models: Mapping[str, SpeakerModel]) -> bytes:
    kinds = {m.vector.kind for m in models.values()}
    if len(kinds) > 1:
        raise ValueError(f"mixed pooling kinds in one store: {sorted(kinds)}")
    buf = io.BytesIO()
    buf.write(STORE_MAGIC)
    nn.write_u32(buf, STORE_VERSION)
    nn.write_str(buf, kinds.pop() if kinds else "")
    nn.write_u32(buf, len(models))
    for spk in sorted(models):
        m = models[spk]
        nn.write_str(buf, spk)
        nn.write_u32(buf, m.count)
        nn.write_tensor(buf, m.vector.values)
    return buf.getvalue()


def save_store(models: Mapping[str, SpeakerModel], path) -> None:
    Path(path).write_bytes(to_bytes(models))


def load_store(path) -> dict[str, SpeakerModel]:
    with open(path, "rb") as fh:
        version = nn.expect_magic(fh, STORE_MAGIC)
        if version != STORE_VERSION:
            raise ValueError(f"unsupported enrollment store version {version}")
        kind = nn.read_str(fh)
        n = nn.read_u32(fh)
        out = {}
        for _ in range(n):
            spk = nn.read_str(fh)
            count = nn.read_u32(fh)
            out[spk] = SpeakerModel(spk, Supervector(nn.read_tensor(fh), kind), count)
    return out
