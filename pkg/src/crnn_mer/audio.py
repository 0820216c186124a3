"""Log mel-band energies per 500 ms segment from PCM audio.

Each segment is framed on its own (60 ms Hann windows, 10 ms hop), so frames
never straddle a segment boundary and trailing audio shorter than one segment
is ignored. Per band, the mel-weighted power is averaged over the segment's
frames and then logged with a 1e-10 floor.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import FeatureSequence
from .numerics import DTYPE, Tensor

LOG_EPS = 1e-10
N_MELS = 64
WIN_MS = 60
HOP_MS = 10
SEGMENT_MS = 500


class AudioError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=DTYPE)
        if self.samples.ndim != 1:
            raise AudioError(f"expected mono samples, got shape {self.samples.shape}")
        if int(self.sample_rate) <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration_ms(self) -> float:
        return 1000.0 * len(self.samples) / self.sample_rate


def hz_to_mel(f):
    """HTK mel scale: 2595 * log10(1 + f / 700)."""
    f = np.asarray(f, dtype=DTYPE)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    m = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(m) if m.ndim == 0 else m


def mel_to_hz(m):
    m = np.asarray(m, dtype=DTYPE)
    f = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(f) if f.ndim == 0 else f


def frame_params(sample_rate: int, win_ms: float = WIN_MS, hop_ms: float = HOP_MS):
    win = int(round(sample_rate * win_ms / 1000.0))
    hop = int(round(sample_rate * hop_ms / 1000.0))
    nfft = 1 << max(win - 1, 0).bit_length()
    return win, hop, nfft


@dataclass
class MelFilterbank:
    n_mels: int
    f_min: float
    f_max: float
    sample_rate: int
    nfft: int
    weights: Tensor  # (n_mels, nfft // 2 + 1)

    @property
    def centers_hz(self):
        return mel_to_hz(np.linspace(hz_to_mel(self.f_min), hz_to_mel(self.f_max), self.n_mels + 2))[1:-1]


def mel_filterbank(sample_rate: int, nfft: int, n_mels: int = N_MELS,
                   f_min: float = 0.0, f_max: float | None = None) -> MelFilterbank:
    """Triangular filters with unit peak, equally spaced on the mel scale."""
    f_max = sample_rate / 2.0 if f_max is None else f_max
    if not 0 <= f_min < f_max <= sample_rate / 2.0:
        raise ValueError(f"need 0 <= f_min < f_max <= nyquist, got {f_min}, {f_max}")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.arange(nfft // 2 + 1) * sample_rate / nfft
    lower = (bins[None, :] - edges[:-2, None]) / (edges[1:-1] - edges[:-2])[:, None]
    upper = (edges[2:, None] - bins[None, :]) / (edges[2:] - edges[1:-1])[:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    return MelFilterbank(n_mels, f_min, f_max, sample_rate, nfft, weights)


def power_spectrogram(clip: AudioClip, win_ms: float = WIN_MS, hop_ms: float = HOP_MS) -> Tensor:
    """|DFT|^2 of Hann-windowed frames, shape (frames, nfft // 2 + 1)."""
    win, hop, nfft = frame_params(clip.sample_rate, win_ms, hop_ms)
    return _power_frames(clip.samples, win, hop, nfft)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _power_frames(x, win, hop, nfft):
    if len(x) < win or win < 1:
        raise AudioError(f"need at least {win} samples for one frame, got {len(x)}")
    n_frames = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * hann(win)
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel_segments(clip: AudioClip, fb: MelFilterbank | None = None, segment_ms: int = SEGMENT_MS,
                     song_id: str = "") -> FeatureSequence:
    """One log mel-band energy vector per non-overlapping segment."""
    if len(clip.samples) == 0:
        raise AudioError("empty clip")
    win, hop, nfft = frame_params(clip.sample_rate)
    if fb is None:
        fb = mel_filterbank(clip.sample_rate, nfft)
    if fb.nfft != nfft or fb.sample_rate != clip.sample_rate:
        raise AudioError(f"filterbank built for sr={fb.sample_rate}, nfft={fb.nfft}; clip needs sr={clip.sample_rate}, nfft={nfft}")
    seg = clip.sample_rate * segment_ms // 1000
    n_seg = len(clip.samples) // seg
    if n_seg == 0:
        raise AudioError(f"clip of {clip.duration_ms:.0f} ms is shorter than one {segment_ms} ms segment")
    feats = np.empty((n_seg, fb.n_mels), dtype=DTYPE)
    for s in range(n_seg):
        power = _power_frames(clip.samples[s * seg:(s + 1) * seg], win, hop, nfft)
        feats[s] = np.log((power @ fb.weights.T).mean(axis=0) + LOG_EPS)
    return FeatureSequence(song_id, np.arange(n_seg) * segment_ms, feats)


def read_wav(path) -> AudioClip:
    """16-bit PCM WAV; multi-channel audio is averaged to mono, scaled to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2:
                raise AudioError(f"{path}: only 16-bit PCM is supported (sample width {w.getsampwidth()})")
            n_ch, sr = w.getnchannels(), w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise AudioError(f"{path}: {e}") from e
    data = np.frombuffer(raw, dtype="<i2").astype(DTYPE) / 32768.0
    if n_ch > 1:
        data = data[: len(data) // n_ch * n_ch].reshape(-1, n_ch).mean(axis=1)
    return AudioClip(data, sr)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


def extract_file(path, n_mels: int = N_MELS) -> FeatureSequence:
    clip = read_wav(path)
    _, _, nfft = frame_params(clip.sample_rate)
    fb = mel_filterbank(clip.sample_rate, nfft, n_mels)
    return log_mel_segments(clip, fb, song_id=Path(path).stem)
