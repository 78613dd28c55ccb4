"""Foreground/background mixing at a fixed loudness margin.

The background is scaled so that its integrated loudness (ITU-R BS.1770 /
EBU R128) sits ``gamma_db`` below the foreground, optionally weighted by a
correlation-strength knob ``alpha``, and the sum is peak normalized::

    x_mix = fg + alpha * 10 ** ((L_fg - L_bg - gamma) / 20) * bg
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import AudioError

DEFAULT_RATE = 16000
DEFAULT_DURATION_S = 5.0
DEFAULT_GAMMA_DB = 8.0

ABSOLUTE_GATE_LUFS = -70.0
RELATIVE_GATE_LU = -10.0
BLOCK_S = 0.4
BLOCK_OVERLAP = 0.75


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise AudioError("waveform must be mono (1-D)")
        if not np.all(np.isfinite(x)):
            raise AudioError("waveform contains non-finite samples")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise AudioError("sample_rate must be a positive integer")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if self.samples.size else 0.0


@dataclass(frozen=True)
class MixParams:
    alpha: float = 1.0
    gamma_db: float = DEFAULT_GAMMA_DB
    target_rate: int = DEFAULT_RATE
    duration_s: float = DEFAULT_DURATION_S

    def __post_init__(self):
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise AudioError("alpha must be finite and >= 0")
        if not math.isfinite(self.gamma_db):
            raise AudioError("gamma_db must be finite")
        if not self.duration_s > 0:
            raise AudioError("duration_s must be > 0")
        if self.target_rate <= 0:
            raise AudioError("target_rate must be > 0")


@dataclass(frozen=True)
class LoudnessMeasure:
    lufs: float
    gated: bool = True
    error: str | None = None

    @property
    def silent(self) -> bool:
        return self.lufs == -math.inf


def _require_nonempty(w: Waveform) -> None:
    if len(w) == 0:
        raise AudioError("empty waveform")


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited (Kaiser-windowed sinc, polyphase) sample-rate conversion."""
    _require_nonempty(w)
    if target_rate <= 0:
        raise AudioError("target_rate must be > 0")
    if target_rate == w.sample_rate:
        return w
    g = gcd(int(target_rate), w.sample_rate)
    up, down = int(target_rate) // g, w.sample_rate // g
    y = signal.resample_poly(w.samples, up, down)
    return Waveform(y, int(target_rate))


def fit_duration(w: Waveform, duration_s: float, rng: np.random.Generator | None = None) -> Waveform:
    """Truncate or tile ``w`` to exactly ``round(duration_s * rate)`` samples.

    Longer clips keep their start unless ``rng`` is given, in which case the
    crop offset is drawn uniformly from it.
    """
    _require_nonempty(w)
    n = int(round(duration_s * w.sample_rate))
    x = w.samples
    if x.size >= n:
        start = 0
        if rng is not None and x.size > n:
            start = int(rng.integers(0, x.size - n + 1))
        return Waveform(x[start:start + n], w.sample_rate)
    reps = -(-n // x.size)
    return Waveform(np.tile(x, reps)[:n], w.sample_rate)


def peak_normalize(w: Waveform, target: float = 1.0) -> Waveform:
    peak = w.peak
    if peak == 0:
        return w
    return Waveform(w.samples * (target / peak), w.sample_rate)


def k_weighting(sample_rate: int) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """BS.1770 K-weighting biquads (shelf, high-pass) designed for ``sample_rate``.

    The analog prototypes are mapped with a pre-warped bilinear transform; at
    48 kHz this reproduces the coefficients tabulated in the standard.
    """
    fs = float(sample_rate)
    # high-frequency shelving stage
    f0, gain_db, q = 1681.974450955533, 3.999843853973347, 0.7071752369554196
    k = math.tan(math.pi * f0 / fs)
    vh = 10.0 ** (gain_db / 20.0)
    vb = vh ** 0.4996667741545416
    a0 = 1.0 + k / q + k * k
    shelf_b = np.array([(vh + vb * k / q + k * k) / a0,
                        2.0 * (k * k - vh) / a0,
                        (vh - vb * k / q + k * k) / a0])
    shelf_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])
    # RLB high-pass stage
    f0, q = 38.13547087602444, 0.5003270373238773
    k = math.tan(math.pi * f0 / fs)
    a0 = 1.0 + k / q + k * k
    hp_b = np.array([1.0, -2.0, 1.0])
    hp_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])
    return (shelf_b, shelf_a), (hp_b, hp_a)


def block_energies(w: Waveform) -> np.ndarray:
    """Mean-square K-weighted energy of each 400 ms gating block (75% overlap)."""
    (sb, sa), (hb, ha) = k_weighting(w.sample_rate)
    y = signal.lfilter(hb, ha, signal.lfilter(sb, sa, w.samples))
    block = int(round(BLOCK_S * w.sample_rate))
    step = int(round(BLOCK_S * (1.0 - BLOCK_OVERLAP) * w.sample_rate))
    if y.size < block:
        return np.empty(0)
    n_blocks = 1 + (y.size - block) // step
    csum = np.concatenate(([0.0], np.cumsum(y * y)))
    starts = np.arange(n_blocks) * step
    return (csum[starts + block] - csum[starts]) / block


def _lufs(z):
    return -0.691 + 10.0 * np.log10(z)


def integrated_loudness(w: Waveform) -> LoudnessMeasure:
    """Gated integrated loudness in LUFS (mono, channel weight 1)."""
    _require_nonempty(w)
    z = block_energies(w)
    if z.size == 0:
        return LoudnessMeasure(-math.inf, True, "shorter than one gating block")
    with np.errstate(divide="ignore"):
        block_lufs = _lufs(z)
    z = z[block_lufs > ABSOLUTE_GATE_LUFS]
    if z.size == 0:
        return LoudnessMeasure(-math.inf, True, "silent or below absolute gate")
    relative_gate = _lufs(z.mean()) + RELATIVE_GATE_LU
    z = z[_lufs(z) > relative_gate]
    return LoudnessMeasure(float(_lufs(z.mean())), True)


def prepare(w: Waveform, p: MixParams, rng: np.random.Generator | None = None) -> Waveform:
    """Resample to ``p.target_rate`` and fit to ``p.duration_s``."""
    return fit_duration(resample(w, p.target_rate), p.duration_s, rng)


def background_gain(l_fg: float, l_bg: float, p: MixParams) -> float:
    return p.alpha * 10.0 ** ((l_fg - l_bg - p.gamma_db) / 20.0)


def mix_components(fg: Waveform, bg: Waveform, p: MixParams,
                   rng: np.random.Generator | None = None) -> tuple[Waveform, Waveform]:
    """Prepared foreground and gain-scaled background, before summation."""
    fg = prepare(fg, p, rng)
    bg = prepare(bg, p, rng)
    l_fg = integrated_loudness(fg)
    if l_fg.silent:
        raise AudioError(f"foreground below gate; cannot set margin ({l_fg.error})")
    if p.alpha == 0:
        return fg, Waveform(np.zeros_like(bg.samples), bg.sample_rate)
    l_bg = integrated_loudness(bg)
    if l_bg.silent:
        raise AudioError(f"background below gate; cannot set margin ({l_bg.error})")
    gain = background_gain(l_fg.lufs, l_bg.lufs, p)
    return fg, Waveform(gain * bg.samples, bg.sample_rate)


def mix_pair(fg: Waveform, bg: Waveform, p: MixParams = MixParams(),
             rng: np.random.Generator | None = None) -> Waveform:
    fg, scaled_bg = mix_components(fg, bg, p, rng)
    return peak_normalize(Waveform(fg.samples + scaled_bg.samples, fg.sample_rate))


def read_wav(path: str | Path) -> Waveform:
    """Read a mono RIFF WAV (16-bit PCM or 32-bit float) as floats in [-1, 1]."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise AudioError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(x, rate)


def write_wav(path: str | Path, w: Waveform, fmt: str = "float32") -> None:
    """Write ``w`` as mono WAV; ``fmt`` is ``"float32"`` or ``"pcm16"``."""
    if fmt == "float32":
        data = w.samples.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype(np.int16)
    else:
        raise AudioError(f"unknown WAV format {fmt!r}")
    wavfile.write(path, w.sample_rate, data)
