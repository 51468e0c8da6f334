"""End-to-end training with hard-impostor mining.

Every minibatch holds a set of target speakers.  For each target, N
enrollment and T1 positive utterances come from the speaker itself and T2
negatives from its nearest impostors in the speaker vector pool.  Supervectors
for both sides of every trial are computed with the current networks, the
trial scores go through the logistic head, and the gradient of the mean
cross-entropy is accumulated target by target before a single SGD update.
The pool and its impostor table are rebuilt after every full sweep.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import miner, nn, phonetic, speaker_net
from .corpus import Corpus, Utterance
from .features import make_context_windows
from .phonetic import PhoneticModel
from .pooling import POOLING_KINDS, AttentionParams, Supervector, attention_pool, pool
from .scoring import LogisticHead, cosine, e2e_loss
from .speaker_net import CNN_CHANNELS, SpeakerNet

log = logging.getLogger(__name__)

MODEL_MAGIC = b"E2EE"
HISTORY_HEADER = "sweep,batch,loss,pos_trials,neg_trials"
# frames per inference forward pass
EMBED_CHUNK = 2048
CALIBRATION_UTTS = 64


@dataclass
class TrainConfig:
    speakers_per_batch: int = 64
    n_enroll: int = 6
    t1: int = 1
    t2: int = 5
    k: int = 3
    lr: float = 0.05
    sweeps: int = 3
    seed: int = 0
    pooling: str = "attention"
    speaker_net: str = "cnn"
    miner: str = "knn"
    cnn_channels: tuple[int, int, int, int] = CNN_CHANNELS
    head_w: float = 10.0
    head_b: float = -5.0

    def __post_init__(self):
        self.cnn_channels = tuple(int(c) for c in self.cnn_channels)
        for name in ("speakers_per_batch", "n_enroll", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.t1 < 0 or self.t2 < 0 or self.t1 + self.t2 < 1:
            raise ValueError("t1 and t2 must be non-negative with t1 + t2 >= 1")
        if self.sweeps < 0:
            raise ValueError("sweeps must be non-negative")
        if self.pooling not in POOLING_KINDS:
            raise ValueError(f"pooling must be one of {POOLING_KINDS}")
        if self.speaker_net not in ("cnn", "dnn"):
            raise ValueError("speaker_net must be 'cnn' or 'dnn'")
        if self.miner not in ("knn", "random"):
            raise ValueError("miner must be 'knn' or 'random'")

    @property
    def min_utts(self) -> int:
        return self.n_enroll + self.t1

    def to_json(self) -> str:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return json.dumps(d, separators=(",", ":"))


# ---------------------------------------------------------------------------
# model


@dataclass
class E2EModel:
    speaker_net: SpeakerNet
    phonetic: PhoneticModel
    attention: AttentionParams
    head: LogisticHead
    pooling: str
    config: TrainConfig = field(default_factory=TrainConfig)
    _phn: dict = field(default_factory=dict, repr=False)

    def trainable(self) -> nn.ParamStore:
        store = nn.ParamStore()
        for k, t in self.speaker_net.params.items():
            store.add(f"spk.{k}", t)
        if self.pooling == "attention":
            store.add("att.Wh", self.attention.Wh)
            store.add("att.Wb", self.attention.Wb)
        store.add("head.w", self.head.w)
        store.add("head.b", self.head.b)
        return store

    def phonetic_features(self, utt: Utterance) -> tuple[np.ndarray, np.ndarray]:
        """Cached (posteriors, bottleneck); the phonetic net is frozen."""
        hit = self._phn.get(utt.utt_id)
        if hit is None or hit[0].shape[0] != utt.num_frames:
            hit = self.phonetic.features(utt.features)
            self._phn[utt.utt_id] = hit
        return hit

    def pool_frames(self, h, gamma, b) -> nn.Tensor:
        return pool(self.pooling, h, gamma, b, self.attention)

    def frames_forward(self, utts: Sequence[Utterance], mode: str) -> nn.Tensor:
        windows = np.concatenate([make_context_windows(u.features) for u in utts])
        return self.speaker_net.forward(windows, mode)

    def supervectors(self, utts: Sequence[Utterance], mode: str = "train") -> list[nn.Tensor]:
        """Differentiable supervectors for utterances sharing one speaker-net call."""
        h = self.frames_forward(utts, mode)
        out, pos = [], 0
        for u in utts:
            gamma, b = self.phonetic_features(u)
            out.append(self.pool_frames(h[pos:pos + u.num_frames], gamma, b))
            pos += u.num_frames
        return out

    def frame_features(self, utts: Sequence[Utterance]) -> list[np.ndarray]:
        """Inference-mode h matrices, batched over utterances."""
        out: list[np.ndarray] = []
        group: list[Utterance] = []
        frames = 0

        def flush():
            if group:
                h = self.speaker_net.infer(np.concatenate([make_context_windows(u.features) for u in group]))
                pos = 0
                for u in group:
                    out.append(h[pos:pos + u.num_frames])
                    pos += u.num_frames
                group.clear()

        for u in utts:
            if frames + u.num_frames > EMBED_CHUNK:
                flush()
                frames = 0
            group.append(u)
            frames += u.num_frames
        flush()
        return out

    def embed(self, utts: Sequence[Utterance]) -> np.ndarray:
        """Inference-mode supervectors, one row per utterance."""
        rows = []
        for u, h in zip(utts, self.frame_features(utts)):
            gamma, b = self.phonetic_features(u)
            rows.append(self.pool_frames(h, gamma, b).data)
        return np.stack(rows)

    def supervector(self, utt: Utterance) -> Supervector:
        return Supervector(self.embed([utt])[0], self.pooling)

    def attention_weights(self, utts: Sequence[Utterance]) -> list[np.ndarray]:
        out = []
        for u, h in zip(utts, self.frame_features(utts)):
            gamma, b = self.phonetic_features(u)
            out.append(attention_pool(h, gamma, b, self.attention)[1].data)
        return out


def init_model(config: TrainConfig, phonetic_model: PhoneticModel) -> E2EModel:
    if config.speaker_net == "cnn":
        net = speaker_net.init_speaker_cnn(config.seed, config.cnn_channels)
    else:
        net = speaker_net.init_speaker_dnn(config.seed)
    phonetic_model.freeze()
    return E2EModel(net, phonetic_model, AttentionParams.zeros(net.output_dim),
                    LogisticHead.create(config.head_w, config.head_b), config.pooling, config)


# ---------------------------------------------------------------------------
# batches


@dataclass
class TargetPlan:
    speaker: str
    enroll: list[str]
    positives: list[str]
    negatives: list[str]
    negative_speakers: list[str]
    fallback: bool = False

    @property
    def tests(self) -> list[str]:
        return self.positives + self.negatives

    @property
    def labels(self) -> list[int]:
        return [1] * len(self.positives) + [0] * len(self.negatives)


@dataclass
class BatchPlan:
    targets: list[TargetPlan]

    @property
    def num_trials(self) -> int:
        return sum(len(t.tests) for t in self.targets)

    @property
    def num_positive(self) -> int:
        return sum(len(t.positives) for t in self.targets)

    @property
    def num_negative(self) -> int:
        return sum(len(t.negatives) for t in self.targets)


def sweep_batches(speakers: Sequence[str], config: TrainConfig, rng: np.random.Generator) -> list[list[str]]:
    """Shuffle once and cut into batches; a remainder of one speaker is dropped."""
    order = [speakers[i] for i in rng.permutation(len(speakers))]
    n = config.speakers_per_batch
    batches = [order[i:i + n] for i in range(0, len(order), n)]
    return [b for b in batches if len(b) >= 2 or len(batches) == 1]


def build_batch(config: TrainConfig, utts_by_speaker: Mapping[str, Sequence[str]],
                table: miner.ImpostorTable | None, rng: np.random.Generator,
                speakers: Sequence[str] | None = None) -> BatchPlan:
    """Compose the trials for one minibatch.

    Without ``table`` negatives come from uniformly random other speakers.
    """
    all_spk = sorted(utts_by_speaker)
    if speakers is None:
        n = min(config.speakers_per_batch, len(all_spk))
        speakers = [all_spk[i] for i in rng.choice(len(all_spk), size=n, replace=False)]
    targets = []
    for spk in speakers:
        own = list(utts_by_speaker[spk])
        need = config.n_enroll + config.t1
        if len(own) < need:
            raise ValueError(f"speaker {spk} has {len(own)} utterances, needs {need}")
        pick = [own[i] for i in rng.choice(len(own), size=need, replace=False)]
        if table is None:
            impostors = [s for s in all_spk if s != spk]
        else:
            impostors = table.impostors(spk)
        negs, fallback = miner.sample_impostor_utterances(impostors, utts_by_speaker, config.t2, rng)
        if fallback:
            log.warning("speaker %s: impostor pool too small, sampled negatives with replacement", spk)
        neg_spk = [_owner(u, impostors, utts_by_speaker) for u in negs]
        targets.append(TargetPlan(spk, pick[:config.n_enroll], pick[config.n_enroll:], negs, neg_spk, fallback))
    return BatchPlan(targets)


def _owner(utt: str, speakers: Sequence[str], utts_by_speaker) -> str:
    for s in speakers:
        if utt in utts_by_speaker[s]:
            return s
    raise KeyError(utt)


# ---------------------------------------------------------------------------
# training


def target_loss(model: E2EModel, target: TargetPlan, corpus: Corpus, total: int) -> tuple[nn.Tensor, np.ndarray]:
    """Loss contribution (already divided by ``total``) and the raw trial scores."""
    utts = [corpus[u] for u in target.enroll + target.tests]
    sv = model.supervectors(utts, "train")
    n = len(target.enroll)
    enrolled = nn.stack(sv[:n]).mean(axis=0)
    scores = nn.stack([cosine(f, enrolled) for f in sv[n:]])
    return e2e_loss(model.head, scores, target.labels, total), scores.data


def batch_loss(model: E2EModel, plan: BatchPlan, corpus: Corpus) -> nn.Tensor:
    """Whole-minibatch loss as one expression (used for gradient checks)."""
    total = plan.num_trials
    parts = [target_loss(model, t, corpus, total)[0] for t in plan.targets]
    return parts[0] if len(parts) == 1 else nn.stack(parts).sum()


def train_step(plan: BatchPlan, model: E2EModel, config: TrainConfig, corpus: Corpus) -> float:
    """Accumulate gradients target by target, apply one SGD update, return the pre-update loss."""
    params = model.trainable()
    params.zero_grad()
    total = plan.num_trials
    loss_value = 0.0
    for target in plan.targets:
        with nn.Tape() as tape:
            loss, scores = target_loss(model, target, corpus, total)
            if not np.isfinite(loss.item()):
                raise nn.NumericError(
                    f"non-finite loss for target {target.speaker}: tests={target.tests} "
                    f"scores={scores.tolist()} w={model.head.w.item()} b={model.head.b.item()}")
            tape.backward(loss)
        loss_value += loss.item()
    if config.lr != 0:
        params.sgd_step(config.lr)
    params.zero_grad()
    return loss_value


@dataclass
class TrainResult:
    model: E2EModel
    history: list[dict] = field(default_factory=list)
    pool: miner.SpeakerVectorPool | None = None
    table: miner.ImpostorTable | None = None


def calibrate(model: E2EModel, corpus: Corpus, utt_ids: Sequence[str]) -> None:
    """Give batch-norm running statistics a starting value from one train-mode pass."""
    utts = [corpus[u] for u in utt_ids]
    model.frames_forward(utts, "train")


def make_pool(model: E2EModel, corpus: Corpus, utts_by_speaker, config: TrainConfig,
              rng: np.random.Generator, previous=None) -> miner.SpeakerVectorPool:
    return miner.refresh_pool(lambda ids: model.embed([corpus[u] for u in ids]),
                              utts_by_speaker, config.n_enroll, rng, previous)


def train(config: TrainConfig, corpus: Corpus, phonetic_model: PhoneticModel,
          on_batch: Callable[[dict], None] | None = None,
          on_sweep: Callable[[int, TrainResult], None] | None = None) -> TrainResult:
    """Run ``config.sweeps`` passes over the training speakers.

    ``on_batch`` receives every history row; ``on_sweep`` is called with the
    sweep index and the partial result after each pool refresh.
    """
    rng = np.random.default_rng(config.seed)
    model = init_model(config, phonetic_model)
    utts_by_speaker = {s: u for s, u in corpus.by_speaker("train").items() if len(u) >= config.min_utts}
    if len(utts_by_speaker) < 2:
        raise ValueError("training needs at least two speakers with enough utterances")
    speakers = sorted(utts_by_speaker)
    all_utts = [u for s in speakers for u in utts_by_speaker[s]]
    calib = [all_utts[i] for i in rng.choice(len(all_utts), size=min(CALIBRATION_UTTS, len(all_utts)),
                                             replace=False)]
    calibrate(model, corpus, calib)

    result = TrainResult(model)
    if config.miner == "knn":
        result.pool = make_pool(model, corpus, utts_by_speaker, config, rng)
        result.table = miner.build_impostor_table(result.pool, config.k)
    for sweep in range(config.sweeps):
        for bi, spk_batch in enumerate(sweep_batches(speakers, config, rng)):
            plan = build_batch(config, utts_by_speaker, result.table, rng, speakers=spk_batch)
            loss = train_step(plan, model, config, corpus)
            row = {"sweep": sweep, "batch": bi, "loss": loss,
                   "pos_trials": plan.num_positive, "neg_trials": plan.num_negative}
            result.history.append(row)
            log.info("sweep %d batch %d loss %.5f", sweep, bi, loss)
            if on_batch is not None:
                on_batch(row)
        if config.miner == "knn":
            result.pool = make_pool(model, corpus, utts_by_speaker, config, rng, result.pool)
            result.table = miner.build_impostor_table(result.pool, config.k)
        if on_sweep is not None:
            on_sweep(sweep, result)
    return result


def write_history(path, history: Sequence[dict]) -> None:
    lines = [HISTORY_HEADER] + [
        f"{r['sweep']},{r['batch']},{r['loss']!r},{r['pos_trials']},{r['neg_trials']}" for r in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# model file


def _blob(fh, raw: bytes) -> None:
    nn.write_u32(fh, len(raw))
    fh.write(raw)


def _read_blob(fh) -> io.BytesIO:
    n = nn.read_u32(fh)
    raw = fh.read(n)
    if len(raw) != n:
        raise EOFError("truncated model section")
    return io.BytesIO(raw)


def save_model(model: E2EModel, path) -> None:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    nn.write_u32(buf, 1)
    nn.write_str(buf, json.dumps({"pooling": model.pooling, "config": json.loads(model.config.to_json())},
                                 separators=(",", ":")))
    _blob(buf, speaker_net.to_bytes(model.speaker_net))
    _blob(buf, phonetic.to_bytes(model.phonetic))
    nn.write_named(buf, [("att.Wh", model.attention.Wh.data), ("att.Wb", model.attention.Wb.data),
                         ("head.w", model.head.w.data), ("head.b", model.head.b.data)])
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> E2EModel:
    with open(path, "rb") as fh:
        nn.expect_magic(fh, MODEL_MAGIC)
        meta = json.loads(nn.read_str(fh))
        net = speaker_net.from_stream(_read_blob(fh))
        phn = phonetic.from_stream(_read_blob(fh))
        t = nn.read_named(fh)
    att = AttentionParams(nn.Tensor(t["att.Wh"], True, "att.Wh"), nn.Tensor(t["att.Wb"], True, "att.Wb"))
    head = LogisticHead(nn.Tensor(t["head.w"], True, "head.w"), nn.Tensor(t["head.b"], True, "head.b"))
    return E2EModel(net, phn, att, head, meta["pooling"], TrainConfig(**meta["config"]))
