import logging
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e2esv import corpus
from e2esv.corpus import CorpusError, Record, SynthSpec
from e2esv.phonetic import GARBAGE


def small(**kw):
    base = dict(train_speakers=2, eval_speakers=0, utts_per_speaker=(3, 3), frames=(20, 30), seed=0)
    base.update(kw)
    return SynthSpec(**base)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestGenerate:
    def test_two_speakers_three_utts(self, tmp_path):
        c = corpus.load_corpus(corpus.generate_corpus(small(), tmp_path))
        assert len(c) == 6
        assert sorted(c.by_speaker()) == ["train0000", "train0001"]

    def test_same_seed_bit_identical(self, tmp_path):
        spec = small(eval_speakers=2, enroll_utts=2, test_utts=1)
        corpus.generate_corpus(spec, tmp_path / "a")
        corpus.generate_corpus(spec, tmp_path / "b")
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a == b and len(a) > 10

    def test_offset_recomputed_from_latent(self, tmp_path):
        spec = small(noise_scale=0.0, noise_frame_prob=0.0)
        corpus.generate_corpus(spec, tmp_path)
        c = corpus.load_corpus(tmp_path / "manifest.tsv")
        lat = corpus.load_latent(tmp_path)
        for utt in c.utterances.values():
            want = lat.projection @ lat.speakers[utt.speaker]
            got = utt.features - lat.class_means[utt.labels]
            np.testing.assert_allclose(got, np.tile(want, (utt.num_frames, 1)), atol=1e-12)

    def test_garbage_frames_carry_no_offset(self, tmp_path):
        corpus.generate_corpus(small(noise_scale=0.0, noise_frame_prob=0.5), tmp_path)
        c = corpus.load_corpus(tmp_path / "manifest.tsv")
        lat = corpus.load_latent(tmp_path)
        n_garbage = 0
        for utt in c.utterances.values():
            g = utt.labels == GARBAGE
            n_garbage += int(g.sum())
            np.testing.assert_array_equal(utt.features[g], np.tile(lat.class_means[GARBAGE], (g.sum(), 1)))
        assert n_garbage > 0

    def test_phoneme_order(self, tmp_path):
        corpus.generate_corpus(small(noise_frame_prob=0.0), tmp_path)
        c = corpus.load_corpus(tmp_path / "manifest.tsv")
        for utt in c.utterances.values():
            runs = [int(v) for i, v in enumerate(utt.labels) if i == 0 or v != utt.labels[i - 1]]
            assert runs == list(range(9))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(9, 15), st.integers(0, 6), st.integers(0, 2**16))
    def test_ranges_respected(self, lo_u, span_u, lo_f, span_f, seed):
        spec = small(utts_per_speaker=(lo_u, lo_u + span_u), frames=(lo_f, lo_f + span_f), seed=seed)
        with tempfile.TemporaryDirectory() as d:
            c = corpus.load_corpus(corpus.generate_corpus(spec, Path(d)))
            for ids in c.by_speaker().values():
                assert lo_u <= len(ids) <= lo_u + span_u
            for utt in c.utterances.values():
                assert lo_f <= utt.num_frames <= lo_f + span_f
                assert utt.features.shape[1] == 38

    def test_splits_and_trials(self, tmp_path):
        spec = small(eval_speakers=3, enroll_utts=2, test_utts=2)
        corpus.generate_corpus(spec, tmp_path)
        c = corpus.load_corpus(tmp_path / "manifest.tsv")
        assert len(c.by_speaker("enroll")) == 3
        assert all(len(v) == 2 for v in c.by_speaker("test").values())
        lines = (tmp_path / "trials.tsv").read_text(encoding="utf-8").splitlines()
        assert len(lines) == 3 * 6
        assert sum(line.endswith("\t1") for line in lines) == 6


class TestSpec:
    @pytest.mark.parametrize("kw", [dict(spread=0.0), dict(frames=(30, 20)), dict(utts_per_speaker=(0, 3)),
                                    dict(frames=(5, 10)), dict(noise_frame_prob=1.5),
                                    dict(duration_concentration=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small(**kw)

    def test_reference_spec(self):
        spec = SynthSpec.load(corpus.reference_spec_path())
        assert (spec.train_speakers, spec.eval_speakers) == (50, 20)
        assert spec.utts_per_speaker == (15, 15)
        assert (spec.enroll_utts, spec.test_utts) == (6, 4)
        assert spec.noise_frame_prob == 0.3
        assert spec.frames == (65, 110)

    def test_dump_load(self, tmp_path):
        spec = small(spread=0.75)
        spec.dump(tmp_path / "s.json")
        assert SynthSpec.load(tmp_path / "s.json") == spec


class TestLoad:
    def _write(self, tmp_path, records):
        corpus.generate_corpus(small(), tmp_path)
        corpus.write_manifest(tmp_path / "m.tsv", records)
        return tmp_path / "m.tsv"

    def _records(self, tmp_path):
        corpus.generate_corpus(small(), tmp_path)
        return corpus.read_manifest(tmp_path / "manifest.tsv")

    def test_empty(self, tmp_path):
        (tmp_path / "m.tsv").write_text("# nothing\n", encoding="utf-8")
        with pytest.raises(CorpusError, match="no utterances"):
            corpus.load_corpus(tmp_path / "m.tsv")

    def test_duplicate_id(self, tmp_path):
        recs = self._records(tmp_path)
        m = self._write(tmp_path, recs + [recs[0]])
        with pytest.raises(CorpusError, match=recs[0].utt_id):
            corpus.load_corpus(m)

    def test_split_overlap(self, tmp_path):
        recs = self._records(tmp_path)
        r = recs[0]
        bad = recs + [Record("extra", r.speaker, r.feature_path, r.label_path, "test")]
        with pytest.raises(CorpusError, match=r.speaker):
            corpus.load_corpus(self._write(tmp_path, bad))

    def test_missing_file(self, tmp_path):
        recs = self._records(tmp_path)
        bad = recs + [Record("ghost", "train0000", "features/ghost.e2ef", None, "train")]
        with pytest.raises(CorpusError, match="ghost"):
            corpus.load_corpus(self._write(tmp_path, bad))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CorpusError, match="not found"):
            corpus.load_corpus(tmp_path / "nope.tsv")

    def test_exclusion_warning(self, tmp_path, caplog):
        corpus.generate_corpus(small(utts_per_speaker=(3, 3)), tmp_path)
        with caplog.at_level(logging.WARNING):
            c = corpus.load_corpus(tmp_path / "manifest.tsv", min_train_utts=7)
        assert c.excluded == ["train0000", "train0001"]
        assert len(c) == 0
        assert "excluding speaker train0000" in caplog.text

    def test_three_column_manifest_defaults_to_train(self, tmp_path):
        recs = self._records(tmp_path)
        lines = "".join(f"{r.utt_id}\t{r.speaker}\t{r.feature_path}\n" for r in recs)
        (tmp_path / "m3.tsv").write_text(lines, encoding="utf-8")
        c = corpus.load_corpus(tmp_path / "m3.tsv")
        assert all(u.split == "train" and u.labels is None for u in c.utterances.values())

    def test_manifest_round_trip(self, tmp_path):
        recs = self._records(tmp_path)
        corpus.write_manifest(tmp_path / "copy.tsv", recs)
        assert corpus.read_manifest(tmp_path / "copy.tsv") == recs
