"""Synthetic keyword corpus, manifests and corpus loading.

The generator works directly in the 38-dim feature space: every frame is its
phoneme class mean plus the speaker offset ``A @ s`` plus white noise, and a
fraction of frames is replaced by garbage frames that carry no speaker
offset.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .features import FEATURE_DIM, FrameSequence, read_features, write_features
from .phonetic import GARBAGE, N_CLASSES

log = logging.getLogger(__name__)

SPLITS = ("train", "enroll", "test")
N_KEYWORD_PHONES = N_CLASSES - 1


class CorpusError(ValueError):
    pass


@dataclass
class SynthSpec:
    train_speakers: int = 50
    eval_speakers: int = 20
    utts_per_speaker: tuple[int, int] = (10, 50)
    enroll_utts: int = 6
    test_utts: int = 4
    frames: tuple[int, int] = (65, 110)
    speaker_dim: int = 8
    spread: float = 0.5
    class_mean_scale: float = 2.0
    noise_scale: float = 1.0
    noise_frame_prob: float = 0.3
    # Dirichlet concentration of the per-phoneme duration shares; larger
    # values make phoneme durations more uniform across utterances
    duration_concentration: float = 4.0
    seed: int = 0

    def __post_init__(self):
        self.utts_per_speaker = tuple(self.utts_per_speaker)
        self.frames = tuple(self.frames)
        for name in ("utts_per_speaker", "frames"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} range must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if self.frames[0] < N_KEYWORD_PHONES:
            raise ValueError(f"utterances need at least {N_KEYWORD_PHONES} frames")
        if self.spread <= 0:
            raise ValueError("spread must be positive")
        if not 0 <= self.noise_frame_prob <= 1:
            raise ValueError("noise_frame_prob must be a probability")
        if self.duration_concentration <= 0:
            raise ValueError("duration_concentration must be positive")

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")


def reference_spec_path() -> Path:
    return Path(__file__).with_name("data") / "reference_spec.json"


@dataclass
class Record:
    utt_id: str
    speaker: str
    feature_path: str
    label_path: str | None
    split: str


@dataclass
class Latent:
    class_means: np.ndarray
    projection: np.ndarray
    speakers: dict[str, np.ndarray]

    def offset(self, spk: str) -> np.ndarray:
        return self.projection @ self.speakers[spk]


def _utterance(rng, spec: SynthSpec, latent: Latent, spk: str):
    T = int(rng.integers(spec.frames[0], spec.frames[1] + 1))
    share = rng.dirichlet(np.full(N_KEYWORD_PHONES, spec.duration_concentration))
    dur = 1 + rng.multinomial(T - N_KEYWORD_PHONES, share)
    labels = np.repeat(np.arange(N_KEYWORD_PHONES), dur)
    noise = spec.noise_scale * rng.standard_normal((T, FEATURE_DIM))
    frames = latent.class_means[labels] + latent.offset(spk) + noise
    garbage = rng.random(T) < spec.noise_frame_prob
    frames[garbage] = latent.class_means[GARBAGE] + noise[garbage]
    labels[garbage] = GARBAGE
    return frames, labels


def generate_corpus(spec: SynthSpec, out_dir) -> Path:
    """Write features, frame labels, manifest.tsv, trials.tsv and latent.json.

    Returns the manifest path.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    class_means = spec.class_mean_scale * rng.standard_normal((N_CLASSES, FEATURE_DIM))
    projection = rng.standard_normal((FEATURE_DIM, spec.speaker_dim)) * (spec.spread / np.sqrt(spec.speaker_dim))
    train_ids = [f"train{i:04d}" for i in range(spec.train_speakers)]
    eval_ids = [f"eval{i:04d}" for i in range(spec.eval_speakers)]
    latent = Latent(class_means, projection,
                    {s: rng.standard_normal(spec.speaker_dim) for s in train_ids + eval_ids})

    plan: list[tuple[str, str, int]] = []
    for spk in train_ids:
        n = int(rng.integers(spec.utts_per_speaker[0], spec.utts_per_speaker[1] + 1))
        plan += [(spk, "train", i) for i in range(n)]
    for spk in eval_ids:
        plan += [(spk, "enroll", i) for i in range(spec.enroll_utts)]
        plan += [(spk, "test", spec.enroll_utts + i) for i in range(spec.test_utts)]

    records = []
    for spk, split, i in plan:
        utt = f"{spk}_u{i:03d}"
        frames, labels = _utterance(rng, spec, latent, spk)
        fpath, lpath = f"features/{utt}.e2ef", f"labels/{utt}.lab"
        write_features(out / fpath, FrameSequence(utt, frames))
        (out / lpath).write_text("".join(f"{v}\n" for v in labels), encoding="utf-8")
        records.append(Record(utt, spk, fpath, lpath, split))

    manifest = out / "manifest.tsv"
    write_manifest(manifest, records)
    tests = [r for r in records if r.split == "test"]
    lines = [f"{r.utt_id}\t{spk}\t{int(r.speaker == spk)}\n" for spk in eval_ids for r in tests]
    (out / "trials.tsv").write_text("".join(lines), encoding="utf-8")
    (out / "latent.json").write_text(json.dumps({
        "class_means": class_means.tolist(),
        "projection": projection.tolist(),
        "speakers": {k: v.tolist() for k, v in latent.speakers.items()},
    }) + "\n", encoding="utf-8")
    spec.dump(out / "synth_spec.json")
    return manifest


def load_latent(corpus_dir) -> Latent:
    raw = json.loads((Path(corpus_dir) / "latent.json").read_text(encoding="utf-8"))
    return Latent(np.array(raw["class_means"]), np.array(raw["projection"]),
                  {k: np.array(v) for k, v in raw["speakers"].items()})


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, records: Iterable[Record]) -> None:
    lines = ["# utt_id\tspk_id\tfeature_path\tlabel_path\tsplit\n"]
    for r in records:
        lines.append(f"{r.utt_id}\t{r.speaker}\t{r.feature_path}\t{r.label_path or '-'}\t{r.split}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path) -> list[Record]:
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4, 5):
            raise CorpusError(f"{path}:{lineno}: expected 3-5 tab-separated fields")
        utt, spk, fpath = parts[:3]
        lpath = parts[3] if len(parts) > 3 and parts[3] not in ("", "-") else None
        split = parts[4] if len(parts) > 4 else "train"
        if split not in SPLITS:
            raise CorpusError(f"{path}:{lineno}: unknown split {split!r}")
        records.append(Record(utt, spk, fpath, lpath, split))
    return records


@dataclass
class Utterance:
    utt_id: str
    speaker: str
    split: str
    features: np.ndarray
    labels: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    utterances: dict[str, Utterance]
    manifest: Path | None = None
    excluded: list[str] = field(default_factory=list)

    def __getitem__(self, utt_id: str) -> Utterance:
        return self.utterances[utt_id]

    def __len__(self) -> int:
        return len(self.utterances)

    def by_speaker(self, *splits: str) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for u in self.utterances.values():
            if not splits or u.split in splits:
                out.setdefault(u.speaker, []).append(u.utt_id)
        return {k: out[k] for k in sorted(out)}

    def speaker_of(self, utt_id: str) -> str:
        return self.utterances[utt_id].speaker


def load_corpus(manifest, min_train_utts: int | None = None) -> Corpus:
    """Load and validate a manifest.

    With ``min_train_utts``, training speakers with fewer utterances are
    dropped with a warning.
    """
    manifest = Path(manifest)
    records = read_manifest(manifest)
    if not records:
        raise CorpusError("no utterances")
    seen: set[str] = set()
    for r in records:
        if r.utt_id in seen:
            raise CorpusError(f"duplicate utterance id {r.utt_id}")
        seen.add(r.utt_id)
    train_spk = {r.speaker for r in records if r.split == "train"}
    eval_spk = {r.speaker for r in records if r.split != "train"}
    overlap = sorted(train_spk & eval_spk)
    if overlap:
        raise CorpusError(f"speakers in both train and enroll/test splits: {', '.join(overlap)}")
    base = manifest.parent
    utts = {}
    for r in records:
        fpath = base / r.feature_path
        if not fpath.is_file():
            raise CorpusError(f"{r.utt_id}: missing feature file {fpath}")
        seq = read_features(fpath)
        labels = None
        if r.label_path is not None:
            lpath = base / r.label_path
            if not lpath.is_file():
                raise CorpusError(f"{r.utt_id}: missing label file {lpath}")
            labels = np.array(lpath.read_text(encoding="utf-8").split(), dtype=np.int64)
            if labels.shape[0] != seq.num_frames:
                raise CorpusError(f"{r.utt_id}: {labels.shape[0]} labels for {seq.num_frames} frames")
        utts[r.utt_id] = Utterance(r.utt_id, r.speaker, r.split, seq.frames, labels)
    corpus = Corpus(utts, manifest)
    if min_train_utts is not None:
        for spk, ids in corpus.by_speaker("train").items():
            if len(ids) < min_train_utts:
                log.warning("excluding speaker %s: %d utterances < %d", spk, len(ids), min_train_utts)
                corpus.excluded.append(spk)
                for u in ids:
                    del corpus.utterances[u]
    return corpus
