"""Waveform I/O, augmentation and MFCC front-end."""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

PRE_EMPHASIS = 0.97
LOG_FLOOR = 1e-10
SUPPORTED_RATE = 16000


class AudioError(ValueError):
    """Raised for unreadable or unsupported audio."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class FeatureSequence:
    """T x D frame matrix tagged with where it came from.

    ``source`` is one of ``"mfcc"``, ``"encoder_layer(i)"`` or ``"layer_average"``
    (plus ``"pca"`` once projected).
    """

    frames: np.ndarray
    frame_rate: float
    source: str = "mfcc"

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[1] == 0:
            raise ValueError(f"frames must be T x D with D > 0, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature sequence contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class MfccConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 23
    n_ceps: int = 13
    delta_window: int = 2

    def __post_init__(self):
        if self.n_ceps > self.n_mels:
            raise ValueError("n_ceps must not exceed n_mels")
        if self.window_ms < self.hop_ms:
            raise ValueError("window_ms must be >= hop_ms")
        if self.delta_window < 1:
            raise ValueError("delta_window must be >= 1")

    @property
    def output_dim(self) -> int:
        return 3 * self.n_ceps

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_ms * sample_rate / 1000))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000))


# --------------------------------------------------------------------------
# WAV I/O


def load_wav(path) -> Waveform:
    """Read a mono 16-bit PCM RIFF/WAVE file, scaled by 1/32768."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise AudioError(f"{path}: cannot read file ({e.strerror})") from e
    if len(raw) < 12 or raw[:4] != b"RIFF":
        raise AudioError(f"{path}: missing RIFF header")
    if raw[8:12] != b"WAVE":
        raise AudioError(f"{path}: corrupt header, not a WAVE container")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise AudioError(f"{path}: corrupt header, short fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            if len(body) < size:
                raise AudioError(
                    f"{path}: truncated data (declared {size} bytes, found {len(body)})"
                )
            data = body
            break
        pos += 8 + size + (size & 1)

    if fmt is None:
        raise AudioError(f"{path}: corrupt header, no fmt chunk")
    tag, channels, rate, _, _, bits = fmt
    if tag != 1:
        raise AudioError(f"{path}: unsupported encoding (format tag {tag}); only PCM is read")
    if channels != 1:
        raise AudioError(f"{path}: unsupported channel count {channels}")
    if bits != 16:
        raise AudioError(f"{path}: unsupported bit depth {bits}; only 16-bit PCM is read")
    if data is None:
        raise AudioError(f"{path}: corrupt header, no data chunk")
    if len(data) % 2:
        raise AudioError(f"{path}: truncated data (odd byte count)")
    pcm = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(pcm, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# augmentation


def _interp_at(samples: np.ndarray, positions: np.ndarray) -> np.ndarray:
    grid = np.arange(samples.shape[0], dtype=np.float64)
    return np.interp(positions, grid, samples)


def speed_perturb(w: Waveform, factor: float) -> Waveform:
    """Resample by ``factor`` without pitch correction (sox ``speed``)."""
    if not 0.5 <= factor <= 2.0:
        raise ValueError(f"speed factor {factor} outside [0.5, 2.0]")
    if factor == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = int(math.floor(len(w) / factor + 0.5))
    out = _interp_at(w.samples, np.arange(n_out) * factor)
    return Waveform(out, w.sample_rate)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Linear-interpolation resampling; only used behind an explicit opt-in."""
    if target_rate == w.sample_rate:
        return w
    step = w.sample_rate / target_rate
    n_out = int(math.floor(len(w) / step + 0.5))
    return Waveform(_interp_at(w.samples, np.arange(n_out) * step), target_rate)


def _power(x: np.ndarray) -> float:
    return float(np.mean(x * x))


def noise_gain(signal_power: float, noise_power: float, snr_db: float) -> float:
    return math.sqrt(signal_power / (noise_power * 10.0 ** (snr_db / 10.0)))


def add_noise(w: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Mix ``noise`` into ``w`` at the requested SNR, then clip to [-1, 1]."""
    if w.sample_rate != noise.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: signal {w.sample_rate} Hz, noise {noise.sample_rate} Hz"
        )
    if len(noise) == 0 or _power(noise.samples) == 0.0:
        raise ValueError("noise has zero power")
    if len(w) == 0 or _power(w.samples) == 0.0:
        raise ValueError("signal has zero power; SNR is undefined")
    reps = -(-len(w) // len(noise))
    n = np.tile(noise.samples, reps)[: len(w)]
    g = noise_gain(_power(w.samples), _power(n), snr_db)
    return Waveform(np.clip(w.samples + g * n, -1.0, 1.0), w.sample_rate)


def add_noise_random(w: Waveform, noise: Waveform, rng: np.random.Generator,
                     snr_range=(5.0, 20.0)) -> Waveform:
    return add_noise(w, noise, float(rng.uniform(*snr_range)))


# --------------------------------------------------------------------------
# MFCC


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-style filters, shape (n_mels, n_fft // 2 + 1)."""
    n_bins = n_fft // 2 + 1
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.linspace(0.0, sample_rate / 2, n_bins)
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def num_frames(num_samples: int, window: int, hop: int) -> int:
    if num_samples < window:
        raise ValueError(f"utterance of {num_samples} samples is shorter than one window ({window})")
    return (num_samples - window) // hop + 1


def mfcc(w: Waveform, cfg: MfccConfig = MfccConfig()) -> FeatureSequence:
    """Static cepstra (C0 included), one row per frame; no deltas."""
    if w.sample_rate != SUPPORTED_RATE:
        raise AudioError(
            f"mfcc expects {SUPPORTED_RATE} Hz audio, got {w.sample_rate} Hz (resample first)"
        )
    win = cfg.window_samples(w.sample_rate)
    hop = cfg.hop_samples(w.sample_rate)
    n_frames = num_frames(len(w), win, hop)

    x = w.samples
    emph = np.empty_like(x)
    emph[0] = x[0]
    emph[1:] = x[1:] - PRE_EMPHASIS * x[:-1]

    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    n = np.arange(win)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win)
    frames = emph[idx] * hann

    n_fft = 1 << (win - 1).bit_length()
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    mel = mag @ mel_filterbank(cfg.n_mels, n_fft, w.sample_rate).T
    logmel = np.log(np.maximum(mel, LOG_FLOOR))
    ceps = dct(logmel, type=2, axis=1, norm="ortho")[:, : cfg.n_ceps]
    return FeatureSequence(ceps, frame_rate=w.sample_rate / hop, source="mfcc")


def _delta(x: np.ndarray, window: int) -> np.ndarray:
    T = x.shape[0]
    padded = np.concatenate([np.repeat(x[:1], window, 0), x, np.repeat(x[-1:], window, 0)])
    denom = 2.0 * sum(k * k for k in range(1, window + 1))
    out = np.zeros_like(x, dtype=np.float64)
    for k in range(1, window + 1):
        out += k * (padded[window + k:window + k + T] - padded[window - k:window - k + T])
    return out / denom


def deltas(f: FeatureSequence, window: int = 2) -> FeatureSequence:
    """Append first- and second-order regression deltas (edge-replicated)."""
    if f.num_frames < 1:
        raise ValueError("deltas need at least one frame")
    if window < 1:
        raise ValueError("delta window must be >= 1")
    d1 = _delta(f.frames, window)
    d2 = _delta(d1, window)
    return FeatureSequence(np.hstack([f.frames, d1, d2]), f.frame_rate, f.source)


def mfcc_features(w: Waveform, cfg: MfccConfig = MfccConfig()) -> FeatureSequence:
    """The 39-dim (at defaults) statics + deltas + delta-deltas."""
    return deltas(mfcc(w, cfg), cfg.delta_window)
