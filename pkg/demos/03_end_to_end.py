"""Train the attention model end to end, evaluate it, and look at where it attends.

Run:  python3 demos/03_end_to_end.py [--corpus DIR] [--sweeps N] [--pooling KIND]

Uses the same desk-scale settings as the acceptance suite (two speakers per
minibatch, lr 0.3, a narrow CNN).  Three sweeps take about four minutes on
one core.  EER is reported on the evaluation speakers after every sweep.
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from e2esv import corpus, enrollment, metrics, phonetic, scoring, trainer
from e2esv.phonetic import GARBAGE


def evaluate(model, c, trials):
    models = enrollment.enroll_speakers(model, c, sorted(c.by_speaker("enroll")))
    test_ids = sorted({t.test_id for t in trials})
    emb = dict(zip(test_ids, model.embed([c[u] for u in test_ids])))
    scores, _ = metrics.score_trials(trials, models, emb)
    return metrics.compute_eer(scores)[0]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--corpus", type=Path)
    ap.add_argument("--sweeps", type=int, default=3)
    ap.add_argument("--pooling", default="attention", choices=("attention", "posterior", "mean"))
    ap.add_argument("--miner", default="knn", choices=("knn", "random"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    root = args.corpus
    if root is None:
        root = Path(tempfile.mkdtemp()) / "reference"
        corpus.generate_corpus(corpus.SynthSpec.load(corpus.reference_spec_path()), root)
    c = corpus.load_corpus(root / "manifest.tsv")
    trials = scoring.read_trials(root / "trials.tsv")

    train = [c[u] for ids in c.by_speaker("train").values() for u in ids]
    pm = phonetic.train_phonetic([u.features for u in train], [u.labels for u in train])

    cfg = trainer.TrainConfig(pooling=args.pooling, miner=args.miner, speakers_per_batch=2, lr=0.3,
                              cnn_channels=(8, 8, 16, 16), sweeps=args.sweeps, seed=args.seed)

    def on_sweep(i, result):
        losses = [h["loss"] for h in result.history if h["sweep"] == i]
        print(f"sweep {i}: mean batch loss {np.mean(losses):.4f}, eval EER {evaluate(result.model, c, trials):.4f}")

    result = trainer.train(cfg, c, pm, on_sweep=on_sweep)
    if result.table is not None:
        s = result.pool.speakers[0]
        near = ", ".join(f"{n} ({x:.3f})" for n, x in result.table[s])
        print(f"nearest impostors of {s} after the last pool refresh: {near}")

    if args.pooling == "attention":
        held = [c[u] for ids in c.by_speaker("enroll", "test").values() for u in ids]
        alpha = np.concatenate(result.model.attention_weights(held))
        noise = np.concatenate([u.labels == GARBAGE for u in held])
        print(f"mean attention weight: noise frames {alpha[noise].mean():.5f}, "
              f"phoneme frames {alpha[~noise].mean():.5f}")


if __name__ == "__main__":
    main()
