"""Tour of the synthetic corpus and the ceiling an oracle reaches on it.

Run:  python3 demos/01_corpus_and_oracle.py [--out DIR]

The generator draws a latent vector per speaker, projects it into feature
space and adds it to every phoneme frame of that speaker.  Noise frames get
no offset.  Because the latent parameters are saved next to the corpus we
can score trials with the true speaker offsets and see how separable the
task is before any learning happens.
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from e2esv import corpus, features, metrics, scoring
from e2esv.phonetic import GARBAGE


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path(tempfile.mkdtemp()) / "reference")
    args = ap.parse_args()

    spec = corpus.SynthSpec.load(corpus.reference_spec_path())
    print("reference spec:", spec)
    manifest = corpus.generate_corpus(spec, args.out)
    c = corpus.load_corpus(manifest)
    for split in ("train", "enroll", "test"):
        groups = c.by_speaker(split)
        n = sum(len(v) for v in groups.values())
        print(f"{split:6s}: {len(groups)} speakers, {n} utterances")

    frames = np.concatenate([u.labels for u in c.utterances.values()])
    print(f"noise-frame share: {np.mean(frames == GARBAGE):.3f}")

    # oracle: strip the class means, average what remains per utterance
    lat = corpus.load_latent(args.out)

    def offset(uid):
        u = c[uid]
        keep = u.labels != GARBAGE
        return (u.features[keep] - lat.class_means[u.labels[keep]]).mean(axis=0)

    enrolled = {s: np.mean([offset(u) for u in ids], axis=0) for s, ids in c.by_speaker("enroll").items()}
    tg, im = [], []
    for t in scoring.read_trials(args.out / "trials.tsv"):
        x = scoring.cosine_similarity(offset(t.test_id), enrolled[t.speaker_id])
        (tg if t.label == 1 else im).append(x)
    eer, thr = metrics.compute_eer(metrics.ScoreSet(tg, im))
    print(f"latent-offset oracle: EER {eer:.4f} at cosine {thr:.3f} over {len(tg) + len(im)} trials")

    # the audio frontend is not needed for the synthetic corpus, but it is
    # what a real recording would pass through first
    t = np.arange(16000) / 16000
    wave = np.sin(2 * np.pi * 220 * t) + 0.1 * np.random.default_rng(0).standard_normal(t.size)
    seq = features.frontend(wave)
    print(f"frontend on 1 s of audio: {seq.frames.shape[0]} frames x {seq.frames.shape[1]} dims; "
          f"context windows {features.make_context_windows(seq).shape}")


if __name__ == "__main__":
    main()
