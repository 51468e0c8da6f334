"""Equal error rate, DET points and trial scoring."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .pooling import Supervector
from .scoring import SpeakerModel, Trial, cosine_score, write_trials


@dataclass
class ScoreSet:
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    impostors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        self.impostors = np.asarray(self.impostors, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(self.targets)) and np.all(np.isfinite(self.impostors))):
            raise ValueError("non-finite score")


def _rates(s: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if s.targets.size == 0 or s.impostors.size == 0:
        raise ValueError("EER needs non-empty target and impostor score lists")
    thr = np.unique(np.concatenate([s.targets, s.impostors]))
    tgt = np.sort(s.targets)
    imp = np.sort(s.impostors)
    # accept iff score >= threshold
    far = (imp.size - np.searchsorted(imp, thr, side="left")) / imp.size
    frr = np.searchsorted(tgt, thr, side="left") / tgt.size
    return thr, far, frr


def det_points(s: ScoreSet) -> list[tuple[float, float, float]]:
    """(threshold, FAR, FRR) at every distinct score, ascending threshold."""
    thr, far, frr = _rates(s)
    return list(zip(thr.tolist(), far.tolist(), frr.tolist()))


def compute_eer(s: ScoreSet) -> tuple[float, float]:
    """EER and its threshold, interpolated linearly where FAR - FRR changes sign.

    Past the largest score everything is rejected (FAR 0, FRR 1), which closes
    the curve when impostors outrank every target.
    """
    thr, far, frr = _rates(s)
    thr = np.append(thr, np.nextafter(thr[-1], np.inf))
    far = np.append(far, 0.0)
    frr = np.append(frr, 1.0)
    diff = far - frr
    j = int(np.argmax(diff <= 0))
    if diff[j] == 0 or j == 0:
        return float(far[j]), float(thr[j])
    lam = diff[j - 1] / (diff[j - 1] - diff[j])
    eer = far[j - 1] + lam * (far[j] - far[j - 1])
    return float(eer), float(thr[j - 1] + lam * (thr[j] - thr[j - 1]))


def score_trials(trials: Sequence[Trial], models: Mapping[str, SpeakerModel],
                 embed: Callable[[str], Supervector] | Mapping[str, Supervector]) -> tuple[ScoreSet, list[Trial]]:
    """Cosine-score every trial; labelled trials are split into targets/impostors."""
    missing = sorted({t.speaker_id for t in trials} - set(models))
    if missing:
        raise KeyError(f"unknown claimed speakers: {', '.join(missing)}")
    lookup = embed.__getitem__ if isinstance(embed, Mapping) else embed
    cache: dict[str, Supervector] = {}
    scored = []
    tg, im = [], []
    for t in trials:
        if t.test_id not in cache:
            cache[t.test_id] = lookup(t.test_id)
        x = cosine_score(cache[t.test_id], models[t.speaker_id])
        scored.append(Trial(t.test_id, t.speaker_id, t.label, x))
        if t.label == 1:
            tg.append(x)
        elif t.label == 0:
            im.append(x)
    return ScoreSet(tg, im), scored


def write_eer_report(path, eer: float, threshold: float) -> None:
    Path(path).write_text(f"EER={eer!r}\tthreshold={threshold!r}\n", encoding="utf-8")


def write_det_csv(path, points) -> None:
    lines = ["threshold,far,frr"] + [f"{t!r},{a!r},{r!r}" for t, a, r in points]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_scored(path, trials: Sequence[Trial]) -> None:
    write_trials(path, trials)
