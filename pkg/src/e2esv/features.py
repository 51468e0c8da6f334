"""MFCC front end, deltas, rolling CMN and CNN context windows."""

from __future__ import annotations

import io
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .nn import expect_magic, read_str, read_u32, write_str, write_u32

SAMPLE_RATE = 16000
WIN_LEN = 400  # 25 ms
HOP = 160  # 10 ms
NFFT = 512
N_MELS = 13
N_CEPS = 13
PREEMPH = 0.97
LOG_FLOOR = 1e-10

DELTA_WIDTH = 2
CMN_WINDOW = 41
HISTORY = 25
FUTURE = 5
CONTEXT = HISTORY + 1 + FUTURE  # 31
N_STATIC = 12
FEATURE_DIM = 38

# column ranges of the 38-dim stream used by the three CNN channels;
# the delta channels skip the C0-derived coefficient
STATIC_COLS = slice(0, 12)
DELTA_COLS = slice(13, 25)
DDELTA_COLS = slice(26, 38)

FEATURE_MAGIC = b"E2EF"


class UtteranceTooShort(ValueError):
    pass


@dataclass
class FrameSequence:
    utt_id: str
    frames: np.ndarray
    frame_period_ms: float = 10.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"{self.utt_id}: frames must be a non-empty T x d matrix")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"{self.utt_id}: non-finite feature values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, nfft: int = NFFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the FFT bin frequencies, shape (n_mels, nfft//2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(nfft // 2 + 1) * sample_rate / nfft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def frame_signal(x: np.ndarray, win: int = WIN_LEN, hop: int = HOP) -> np.ndarray:
    if len(x) < win:
        raise UtteranceTooShort("utterance too short")
    n = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def mel_energies(waveform, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Per-frame mel filterbank energies (before the log), shape (T, 13)."""
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"sample rate must be {SAMPLE_RATE} Hz, got {sample_rate}")
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if len(x) < WIN_LEN:
        raise UtteranceTooShort("utterance too short")
    x = np.concatenate([x[:1], x[1:] - PREEMPH * x[:-1]])
    frames = frame_signal(x) * np.hamming(WIN_LEN)
    power = np.abs(np.fft.rfft(frames, NFFT)) ** 2 / NFFT
    return power @ mel_filterbank().T


def compute_mfcc(waveform, sample_rate: int = SAMPLE_RATE, utt_id: str = "") -> FrameSequence:
    """C0..C12 per 10 ms frame."""
    energies = np.maximum(mel_energies(waveform, sample_rate), LOG_FLOOR)
    ceps = dct(np.log(energies), type=2, axis=1, norm="ortho")[:, :N_CEPS]
    return FrameSequence(utt_id, ceps)


def read_wav(path) -> tuple[np.ndarray, int]:
    """16-bit PCM mono WAV -> (samples scaled to [-1, 1), sample rate)."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ValueError(f"{path}: only 16-bit PCM mono is supported")
        raw = w.readframes(w.getnframes())
        return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, w.getframerate()


def deltas(c: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression deltas over +-width frames with edge replication."""
    T = c.shape[0]
    padded = np.concatenate([np.repeat(c[:1], width, axis=0), c, np.repeat(c[-1:], width, axis=0)])
    num = np.zeros_like(c)
    for n in range(1, width + 1):
        num += n * (padded[width + n:width + n + T] - padded[width - n:width - n + T])
    return num / (2 * sum(n * n for n in range(1, width + 1)))


def append_deltas(x: FrameSequence) -> FrameSequence:
    """[C1..C12 | d(C0..C12) | dd(C0..C12)] from a T x 13 cepstral stream."""
    c = x.frames
    if c.shape[1] != N_CEPS:
        raise ValueError(f"append_deltas expects {N_CEPS} cepstra, got {c.shape[1]}")
    d = deltas(c)
    dd = deltas(d)
    return FrameSequence(x.utt_id, np.hstack([c[:, 1:], d, dd]), x.frame_period_ms)


def rolling_cmn(x: FrameSequence, window: int = CMN_WINDOW) -> FrameSequence:
    """Subtract the mean of a centred window (clipped at the edges)."""
    f = x.frames
    T = f.shape[0]
    if T < window:
        return FrameSequence(x.utt_id, f - f.mean(axis=0), x.frame_period_ms)
    half = window // 2
    csum = np.vstack([np.zeros((1, f.shape[1])), np.cumsum(f, axis=0)])
    t = np.arange(T)
    lo = np.maximum(t - half, 0)
    hi = np.minimum(t + half + 1, T)
    means = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    return FrameSequence(x.utt_id, f - means, x.frame_period_ms)


def make_context_windows(x) -> np.ndarray:
    """Stack frames t-25 .. t+5 into a (T, 3, 31, 12) array.

    Channel order is (static, delta, delta-delta); row 25 of each stack is
    frame t.  Frames outside the utterance are zero.
    """
    f = x.frames if isinstance(x, FrameSequence) else np.asarray(x, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != FEATURE_DIM:
        raise ValueError(f"context windows need T x {FEATURE_DIM} features, got {f.shape}")
    T = f.shape[0]
    padded = np.zeros((T + CONTEXT - 1, FEATURE_DIM))
    padded[HISTORY:HISTORY + T] = f
    win = np.lib.stride_tricks.sliding_window_view(padded, CONTEXT, axis=0)  # (T, 38, 31)
    out = np.empty((T, 3, CONTEXT, N_STATIC))
    for ch, cols in enumerate((STATIC_COLS, DELTA_COLS, DDELTA_COLS)):
        out[:, ch] = win[:, cols, :].transpose(0, 2, 1)
    return out


def frontend(waveform, sample_rate: int = SAMPLE_RATE, utt_id: str = "") -> FrameSequence:
    """Waveform -> CMN-normalised 38-dim stream."""
    return rolling_cmn(append_deltas(compute_mfcc(waveform, sample_rate, utt_id)))


# ---------------------------------------------------------------------------
# feature files


def write_features(path, seq: FrameSequence) -> None:
    buf = io.BytesIO()
    buf.write(FEATURE_MAGIC)
    write_u32(buf, 1)
    T, d = seq.frames.shape
    write_u32(buf, T)
    write_u32(buf, d)
    buf.write(np.ascontiguousarray(seq.frames).astype("<f8").tobytes())
    write_str(buf, seq.utt_id)
    Path(path).write_bytes(buf.getvalue())


def read_features(path) -> FrameSequence:
    with open(path, "rb") as fh:
        expect_magic(fh, FEATURE_MAGIC)
        T = read_u32(fh)
        d = read_u32(fh)
        raw = fh.read(8 * T * d)
        if len(raw) != 8 * T * d:
            raise EOFError(f"{path}: truncated feature payload")
        frames = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(T, d)
        utt = read_str(fh)
    return FrameSequence(utt, frames)
