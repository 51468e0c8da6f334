import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.fft import dct

from e2esv import features as F


def naive_triangle_weight(freq, n_mels=13, fmax=8000.0):
    """Filter responses at ``freq`` from the textbook mel-spaced triangles."""
    mel = lambda f: 2595 * math.log10(1 + f / 700)
    inv = lambda m: 700 * (10 ** (m / 2595) - 1)
    top = mel(fmax)
    edges = [inv(top * i / (n_mels + 1)) for i in range(n_mels + 2)]
    w = []
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        if lo <= freq <= mid:
            w.append((freq - lo) / (mid - lo))
        elif mid < freq <= hi:
            w.append((hi - freq) / (hi - mid))
        else:
            w.append(0.0)
    return w


class TestMfcc:
    def test_silence_frames_identical_and_equal_dct_of_floor(self):
        seq = F.compute_mfcc(np.zeros(16000))
        assert np.all(seq.frames == seq.frames[0])
        want = dct(np.full(13, math.log(1e-10)), type=2, norm="ortho")
        np.testing.assert_allclose(seq.frames[0], want, rtol=1e-12)

    def test_sine_peaks_in_band_holding_1khz(self):
        t = np.arange(16000) / 16000
        e = F.mel_energies(np.sin(2 * np.pi * 1000 * t))
        band = int(np.argmax(naive_triangle_weight(1000.0)))
        interior = e[2:-2]
        assert np.all(np.argmax(interior, axis=1) == band)

    def test_frame_count_one_second(self):
        assert F.compute_mfcc(np.random.default_rng(0).standard_normal(16000)).num_frames == 98

    def test_too_short(self):
        with pytest.raises(F.UtteranceTooShort, match="utterance too short"):
            F.compute_mfcc(np.zeros(399))

    def test_exactly_one_window(self):
        assert F.compute_mfcc(np.ones(400)).num_frames == 1

    def test_rejects_other_rates(self):
        with pytest.raises(ValueError):
            F.compute_mfcc(np.zeros(8000), sample_rate=8000)

    def test_filterbank_matches_naive(self):
        fb = F.mel_filterbank()
        for k in (0, 7, 32, 64, 100, 200, 256):
            np.testing.assert_allclose(fb[:, k], naive_triangle_weight(k * 16000 / 512), atol=1e-12)


class TestDeltas:
    def test_constant_input(self):
        out = F.append_deltas(F.FrameSequence("u", np.full((20, 13), 3.0))).frames
        assert out.shape == (20, 38)
        assert np.all(out[:, 12:] == 0.0)

    def test_single_frame(self):
        out = F.append_deltas(F.FrameSequence("u", np.arange(13.0)[None])).frames
        np.testing.assert_array_equal(out[0, :12], np.arange(1.0, 13.0))
        assert np.all(out[0, 12:] == 0.0)

    def test_ramp_interior_delta_is_one(self):
        c = np.zeros((15, 13))
        c[:, 4] = np.arange(15)
        out = F.append_deltas(F.FrameSequence("u", c)).frames
        np.testing.assert_allclose(out[2:-2, 12 + 4], 1.0, rtol=1e-15)

    def test_layout_drops_c0_from_static_only(self):
        rng = np.random.default_rng(0)
        c = rng.standard_normal((30, 13))
        out = F.append_deltas(F.FrameSequence("u", c)).frames
        np.testing.assert_array_equal(out[:, :12], c[:, 1:])
        np.testing.assert_allclose(out[:, 12:25], F.deltas(c))
        np.testing.assert_allclose(out[:, 25:], F.deltas(F.deltas(c)))

    def test_delta_loop_oracle(self):
        c = np.random.default_rng(1).standard_normal((9, 3))
        T = c.shape[0]
        want = np.zeros_like(c)
        for t in range(T):
            for n in (1, 2):
                want[t] += n * (c[min(t + n, T - 1)] - c[max(t - n, 0)])
        np.testing.assert_allclose(F.deltas(c), want / 10.0, rtol=1e-14)


class TestRollingCmn:
    def test_constant(self):
        out = F.rolling_cmn(F.FrameSequence("u", np.full((60, 38), 2.0))).frames
        assert np.all(np.abs(out) < 1e-12)

    def test_short_utterance_global_mean(self):
        x = np.random.default_rng(0).standard_normal((5, 38))
        np.testing.assert_allclose(F.rolling_cmn(F.FrameSequence("u", x)).frames, x - x.mean(0), rtol=1e-14)

    def test_ramp_interior_zero(self):
        x = np.repeat(np.arange(100.0)[:, None], 38, axis=1)
        out = F.rolling_cmn(F.FrameSequence("u", x)).frames
        np.testing.assert_allclose(out[20:80], 0.0, atol=1e-10)

    def test_edge_clipping_loop_oracle(self):
        x = np.random.default_rng(2).standard_normal((50, 4))
        out = F.rolling_cmn(F.FrameSequence("u", x)).frames
        for t in range(50):
            lo, hi = max(0, t - 20), min(50, t + 21)
            np.testing.assert_allclose(out[t], x[t] - x[lo:hi].mean(0), atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(41, 90), st.just(3)),
                  elements=st.floats(-1e3, 1e3)))
    def test_centre_window_mean_zero(self, x):
        out = F.rolling_cmn(F.FrameSequence("u", x)).frames
        t = x.shape[0] // 2
        if t - 20 >= 0 and t + 21 <= x.shape[0]:
            window = x[t - 20:t + 21]
            assert np.allclose(out[t], x[t] - window.mean(0), atol=1e-8)
        assert np.all(np.isfinite(out))


class TestContextWindows:
    def test_first_frame_history_zero(self):
        x = np.random.default_rng(0).standard_normal((40, 38))
        w = F.make_context_windows(x)
        assert np.all(w[0, :, :25] == 0.0)

    def test_count(self):
        assert F.make_context_windows(np.zeros((100, 38))).shape == (100, 3, 31, 12)

    def test_centre_row_is_static(self):
        x = np.random.default_rng(1).standard_normal((40, 38))
        w = F.make_context_windows(x)
        for t in (0, 13, 39):
            np.testing.assert_array_equal(w[t, 0, 25], x[t, :12])
            np.testing.assert_array_equal(w[t, 1, 25], x[t, 13:25])
            np.testing.assert_array_equal(w[t, 2, 25], x[t, 26:38])

    def test_loop_oracle(self):
        x = np.random.default_rng(2).standard_normal((12, 38))
        w = F.make_context_windows(x)
        for t in range(12):
            for r in range(31):
                s = t - 25 + r
                row = x[s] if 0 <= s < 12 else np.zeros(38)
                np.testing.assert_array_equal(w[t, 0, r], row[0:12])
                np.testing.assert_array_equal(w[t, 1, r], row[13:25])
                np.testing.assert_array_equal(w[t, 2, r], row[26:38])

    def test_shift_equivariance(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((60, 38))
        k = 7
        shifted = np.vstack([np.zeros((k, 38)), x])
        a, b = F.make_context_windows(x), F.make_context_windows(shifted)
        for t in range(25, 55):
            np.testing.assert_array_equal(a[t], b[t + k])

    def test_wrong_dim(self):
        with pytest.raises(ValueError):
            F.make_context_windows(np.zeros((5, 13)))


def test_frontend_shape_and_finite():
    x = np.random.default_rng(0).standard_normal(8000)
    seq = F.frontend(x, utt_id="abc")
    assert seq.frames.shape == (48, 38)
    assert np.all(np.isfinite(seq.frames))


def test_frame_sequence_invariants():
    with pytest.raises(ValueError):
        F.FrameSequence("u", np.zeros((0, 38)))
    with pytest.raises(ValueError):
        F.FrameSequence("u", np.array([[np.nan]]))


def test_feature_file_round_trip(tmp_path):
    seq = F.FrameSequence("spk1_u001", np.random.default_rng(0).standard_normal((7, 38)))
    F.write_features(tmp_path / "a.e2ef", seq)
    raw = (tmp_path / "a.e2ef").read_bytes()
    assert raw[:4] == b"E2EF"
    assert int.from_bytes(raw[8:12], "little") == 7
    assert int.from_bytes(raw[12:16], "little") == 38
    back = F.read_features(tmp_path / "a.e2ef")
    assert back.utt_id == "spk1_u001"
    assert back.frames.tobytes() == seq.frames.tobytes()


def test_read_wav(tmp_path):
    import wave
    samples = (np.sin(np.arange(1600) / 10) * 20000).astype("<i2")
    with wave.open(str(tmp_path / "a.wav"), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(16000)
        w.writeframes(samples.tobytes())
    x, sr = F.read_wav(tmp_path / "a.wav")
    assert sr == 16000
    np.testing.assert_array_equal(x, samples / 32768.0)
