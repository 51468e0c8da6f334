"""Command-line interface.

Subcommands: gen-corpus, train-phonetic, train-e2e, enroll, verify, evaluate.
Exit codes are 0 on success, 1 for usage errors, 2 for data errors and 3 for
numeric failures.  Log verbosity comes from ``E2E_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import corpus as corpus_io
from . import enrollment, metrics, miner, nn, phonetic, scoring, trainer
from .pooling import POOLING_KINDS, Supervector
from .scoring import DegenerateSupervector

log = logging.getLogger("e2esv")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _channels(text: str) -> tuple[int, ...]:
    try:
        out = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected four comma-separated integers, got {text!r}")
    if len(out) != 4 or min(out) < 1:
        raise argparse.ArgumentTypeError(f"expected four positive channel counts, got {text!r}")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="e2esv", description="Attention-based end-to-end text-dependent speaker verification.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    d = trainer.TrainConfig()

    def add(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--seed", type=int, default=None, help="seed for every random draw (default 0)")
        return sp

    sp = add("gen-corpus", "write a synthetic keyword corpus")
    sp.add_argument("--spec", type=Path, default=None, help="SynthSpec JSON (default: shipped reference spec)")
    sp.add_argument("--out", type=Path, required=True)

    sp = add("train-phonetic", "train the frame-level phonetic classifier")
    sp.add_argument("--corpus", type=Path, required=True, help="manifest with frame labels")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--batch-size", type=int, default=256)

    sp = add("train-e2e", "train the speaker net, attention and logistic head end to end")
    sp.add_argument("--corpus", type=Path, required=True)
    sp.add_argument("--phonetic", type=Path, required=True)
    sp.add_argument("--pooling", choices=POOLING_KINDS, default=d.pooling)
    sp.add_argument("--speaker-net", choices=("cnn", "dnn"), default=d.speaker_net)
    sp.add_argument("--miner", choices=("knn", "random"), default=d.miner)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--sweeps", type=int, default=d.sweeps)
    sp.add_argument("--lr", type=float, default=d.lr)
    sp.add_argument("--k", type=int, default=d.k, help="impostors per speaker in the table")
    sp.add_argument("--speakers-per-batch", type=int, default=d.speakers_per_batch)
    sp.add_argument("--n-enroll", type=int, default=d.n_enroll)
    sp.add_argument("--t1", type=int, default=d.t1, help="positive trials per target")
    sp.add_argument("--t2", type=int, default=d.t2, help="negative trials per target")
    sp.add_argument("--cnn-channels", type=_channels, default=d.cnn_channels, metavar="C1,C2,C3,C4")
    sp.add_argument("--history", type=Path, default=None, help="write per-batch losses as CSV")
    sp.add_argument("--pool-out", type=Path, default=None, help="dump the final speaker vector pool")

    sp = add("enroll", "build speaker models from enrollment utterances")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--corpus", type=Path, required=True)
    sp.add_argument("--speakers", default="all", help="comma-separated ids, or 'all' enroll-split speakers")
    sp.add_argument("--out", type=Path, required=True)

    sp = add("verify", "score one utterance against one enrolled speaker")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--store", type=Path, required=True)
    sp.add_argument("--corpus", type=Path, required=True, help="manifest holding the test utterance")
    sp.add_argument("--utterance", required=True)
    sp.add_argument("--speaker", required=True)

    sp = add("evaluate", "score a trial list and report EER and DET points")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--store", type=Path, required=True)
    sp.add_argument("--corpus", type=Path, required=True, help="manifest holding the test utterances")
    sp.add_argument("--trials", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    return p


def _need_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(args) -> int:
    if args.spec is not None:
        _need_file(args.spec, "spec file")
    spec = corpus_io.SynthSpec.load(args.spec or corpus_io.reference_spec_path())
    if args.seed is not None:
        spec.seed = args.seed
    manifest = corpus_io.generate_corpus(spec, args.out)
    print(manifest)
    return EXIT_OK


def cmd_train_phonetic(args) -> int:
    c = corpus_io.load_corpus(args.corpus)
    utts = [c[u] for ids in c.by_speaker("train").values() for u in ids if c[u].labels is not None]
    if not utts:
        raise corpus_io.CorpusError("no labelled training utterances in the manifest")
    model = phonetic.train_phonetic([u.features for u in utts], [u.labels for u in utts], epochs=args.epochs,
                                    lr=args.lr, batch_size=args.batch_size, seed=args.seed or 0)
    phonetic.save(model, args.out)
    log.info("phonetic loss %.4f -> %.4f", model.initial_loss, model.final_loss)
    return EXIT_OK


def cmd_train_e2e(args) -> int:
    _need_file(args.phonetic, "phonetic model")
    config = trainer.TrainConfig(
        speakers_per_batch=args.speakers_per_batch, n_enroll=args.n_enroll, t1=args.t1, t2=args.t2, k=args.k,
        lr=args.lr, sweeps=args.sweeps, seed=args.seed or 0, pooling=args.pooling,
        speaker_net=args.speaker_net, miner=args.miner, cnn_channels=args.cnn_channels)
    c = corpus_io.load_corpus(args.corpus, min_train_utts=config.min_utts)
    result = trainer.train(config, c, phonetic.load(args.phonetic))
    trainer.save_model(result.model, args.out)
    if args.history is not None:
        trainer.write_history(args.history, result.history)
    if args.pool_out is not None:
        if result.pool is None:
            raise ValueError("--pool-out needs --miner knn")
        miner.save_pool(result.pool, args.pool_out)
    return EXIT_OK


def cmd_enroll(args) -> int:
    _need_file(args.model, "model")
    model = trainer.load_model(args.model)
    c = corpus_io.load_corpus(args.corpus)
    if args.speakers == "all":
        speakers = list(c.by_speaker("enroll"))
    else:
        speakers = [s for s in args.speakers.split(",") if s]
    if not speakers:
        raise ValueError("no speakers to enroll")
    enrollment.save_store(enrollment.enroll_speakers(model, c, speakers), args.out)
    return EXIT_OK


def _load_scoring(args):
    _need_file(args.model, "model")
    _need_file(args.store, "enrollment store")
    model = trainer.load_model(args.model)
    store = enrollment.load_store(args.store)
    kinds = {m.vector.kind for m in store.values()}
    if kinds and kinds != {model.pooling}:
        raise ValueError(f"store holds {sorted(kinds)} supervectors but the model pools with {model.pooling}")
    return model, store, corpus_io.load_corpus(args.corpus)


def cmd_verify(args) -> int:
    model, store, c = _load_scoring(args)
    if args.speaker not in store:
        raise KeyError(f"speaker {args.speaker} is not enrolled")
    if args.utterance not in c.utterances:
        raise KeyError(f"utterance {args.utterance} is not in the corpus")
    score = scoring.cosine_score(model.supervector(c[args.utterance]), store[args.speaker])
    decision = "accept" if score >= model.head.threshold else "reject"
    print(f"{score!r}\t{decision}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, store, c = _load_scoring(args)
    _need_file(args.trials, "trials file")
    trials = scoring.read_trials(args.trials)
    test_ids = sorted({t.test_id for t in trials})
    missing = [u for u in test_ids if u not in c.utterances]
    if missing:
        raise KeyError(f"trial utterances missing from the corpus: {', '.join(missing[:5])}")
    vecs = dict(zip(test_ids, model.embed([c[u] for u in test_ids])))
    scores, scored = metrics.score_trials(trials, store, lambda u: Supervector(vecs[u], model.pooling))
    args.out.mkdir(parents=True, exist_ok=True)
    metrics.write_scored(args.out / "scored_trials.tsv", scored)
    if scores.targets.size and scores.impostors.size:
        eer, thr = metrics.compute_eer(scores)
        metrics.write_eer_report(args.out / "eer.txt", eer, thr)
        metrics.write_det_csv(args.out / "det.csv", metrics.det_points(scores))
        print(f"EER {eer:.4f}")
    else:
        log.warning("trials lack target or impostor labels; EER and DET skipped")
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-phonetic": cmd_train_phonetic,
    "train-e2e": cmd_train_e2e,
    "enroll": cmd_enroll,
    "verify": cmd_verify,
    "evaluate": cmd_evaluate,
}


def _setup_logging() -> None:
    level = os.environ.get("E2E_LOG_LEVEL", "warn").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"E2E_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def cli(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand and return its exit code."""
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    except (nn.NumericError, FloatingPointError, DegenerateSupervector) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, EOFError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
