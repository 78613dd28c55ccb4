"""Log-mel spectrogram front end (1024-point STFT, hop 512, 128 HTK mel bands)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .errors import AudioError
from .mixer import Waveform

N_FFT = 1024
HOP = 512
N_MELS = 128
F_MIN = 0.0
F_MAX = 8000.0
TOP_DB = 80.0
AMIN = 1e-10


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray   # (n_mels, n_frames), dB
    frame_rate: float
    floor_db: float

    @property
    def shape(self):
        return self.values.shape


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int = 16000, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = F_MIN, fmax: float = F_MAX) -> np.ndarray:
    """Triangular HTK-scale filters, each normalized to unit area in Hz."""
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (center - lower)
    falling = (upper - fft_freqs) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= 2.0 / (upper - lower)
    weights.setflags(write=False)
    return weights


def mel_centers(sample_rate: int = 16000, n_mels: int = N_MELS,
                fmin: float = F_MIN, fmax: float = F_MAX) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def power_spectrogram(x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """|STFT|^2 with a periodic Hann window and reflect center padding."""
    padded = np.pad(x, n_fft // 2, mode="reflect")
    n_frames = 1 + (padded.size - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    spec = np.fft.rfft(frames * get_window("hann", n_fft), axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def power_to_db(s: np.ndarray, top_db: float = TOP_DB) -> tuple[np.ndarray, float]:
    db = 10.0 * np.log10(np.maximum(s, AMIN))
    floor = max(float(db.max()) - top_db, 10.0 * np.log10(AMIN))
    return np.maximum(db, floor), floor


def mel_spectrogram(w: Waveform) -> MelSpectrogram:
    if w.sample_rate != 16000:
        raise AudioError(f"mel front end expects 16 kHz input, got {w.sample_rate}")
    if len(w) < N_FFT:
        raise AudioError(f"too short for STFT: {len(w)} < {N_FFT} samples")
    power = power_spectrogram(w.samples)
    mel = mel_filterbank(w.sample_rate) @ power
    values, floor = power_to_db(mel)
    return MelSpectrogram(values, w.sample_rate / HOP, floor)


def dump_mel_csv(path: str | Path, m: MelSpectrogram) -> None:
    """One row per mel band, one column per frame."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["band"] + [f"frame{i}" for i in range(m.values.shape[1])])
        for i, row in enumerate(m.values):
            writer.writerow([i] + [f"{v:.6g}" for v in row])
