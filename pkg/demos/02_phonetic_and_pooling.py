"""Phonetic posteriors and the three ways to pool frames into a supervector.

Run:  python3 demos/02_phonetic_and_pooling.py [--corpus DIR]

DIR defaults to a fresh copy of the reference corpus.  The script trains the
frame classifier, reports its accuracy, then pools one utterance with mean,
posterior-weighted and attention pooling.
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from e2esv import corpus, phonetic, pooling, trainer
from e2esv.phonetic import GARBAGE


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--corpus", type=Path)
    ap.add_argument("--epochs", type=int, default=5)
    args = ap.parse_args()
    root = args.corpus
    if root is None:
        root = Path(tempfile.mkdtemp()) / "reference"
        corpus.generate_corpus(corpus.SynthSpec.load(corpus.reference_spec_path()), root)
    c = corpus.load_corpus(root / "manifest.tsv")

    train = [c[u] for ids in c.by_speaker("train").values() for u in ids]
    pm = phonetic.train_phonetic([u.features for u in train], [u.labels for u in train], epochs=args.epochs)
    print(f"phonetic net cross-entropy {pm.initial_loss:.3f} -> {pm.final_loss:.3f}")

    held = [c[u] for ids in c.by_speaker("test").values() for u in ids]
    X = np.vstack([u.features for u in held])
    y = np.concatenate([u.labels for u in held])
    post = pm.posteriors(X)
    print(f"held-out frame accuracy {np.mean(post.argmax(1) == y):.3f}; "
          f"mean noise-class posterior on noise frames {post[y == GARBAGE, GARBAGE].mean():.3f}")

    # an untrained speaker CNN is enough to show the shapes involved
    cfg = trainer.TrainConfig(cnn_channels=(8, 8, 16, 16))
    model = trainer.init_model(cfg, pm)
    trainer.calibrate(model, c, [u.utt_id for u in train[:32]])
    utt = held[0]
    h = model.frame_features([utt])[0]
    gamma, b = model.phonetic_features(utt)
    print(f"utterance {utt.utt_id}: {utt.num_frames} frames, h {h.shape}, gamma {gamma.shape}, b {b.shape}")

    f_mean = pooling.mean_pool(h).data
    f_post = pooling.posterior_pool(h, gamma).data
    f_att, alpha = pooling.attention_pool(h, gamma, b, model.attention)
    print(f"mean pool {f_mean.shape}, posterior pool {f_post.shape}, attention pool {f_att.data.shape}")

    # at zero attention weights every frame gets 1/T, so attention pooling is
    # posterior pooling divided by the frame count
    zero = pooling.AttentionParams(np.zeros_like(model.attention.Wh.data), np.zeros_like(model.attention.Wb.data))
    f_uniform, _ = pooling.attention_pool(h, gamma, b, zero)
    print("uniform attention == posterior / T:",
          np.allclose(f_uniform.data, f_post / utt.num_frames, rtol=1e-12, atol=1e-14))
    print(f"attention weights sum {alpha.data.sum():.12f}, range [{alpha.data.min():.4f}, {alpha.data.max():.4f}]")


if __name__ == "__main__":
    main()
