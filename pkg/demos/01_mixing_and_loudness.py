"""
Mixing a foreground over a background at a fixed loudness margin
=================================================================

Two synthetic clips are mixed so that the background sits 8 LU under the
foreground, then the mixture is turned into a log-mel spectrogram.
"""

import numpy as np

from spurbench.frontend import mel_spectrogram
from spurbench.mixer import MixParams, Waveform, integrated_loudness, mix_components, mix_pair

rate = 16000
t = np.arange(5 * rate) / rate
rng = np.random.default_rng(0)

# a chirp-like foreground and a noisy hum as the background
fg = Waveform(0.4 * np.sin(2 * np.pi * (300 + 200 * t) * t), rate)
bg = Waveform(0.2 * np.sin(2 * np.pi * 60 * t) + 0.1 * rng.standard_normal(t.size), rate)

# loudness of each source on its own
print(f"foreground  {integrated_loudness(fg).lufs:7.2f} LUFS")
print(f"background  {integrated_loudness(bg).lufs:7.2f} LUFS")

# the gain puts the background exactly gamma_db under the foreground
params = MixParams(alpha=1.0, gamma_db=8.0)
fg_prepared, bg_scaled = mix_components(fg, bg, params)
margin = integrated_loudness(fg_prepared).lufs - integrated_loudness(bg_scaled).lufs
print(f"margin after scaling {margin:.3f} LU")

# the mixture is peak normalized; alpha = 0 would return the foreground alone
mix = mix_pair(fg, bg, params)
print(f"mixture peak {np.max(np.abs(mix.samples)):.3f}")

# 128 mel bands, 1024-point frames with hop 512
mel = mel_spectrogram(mix)
print(f"log-mel shape {mel.values.shape}, range {mel.values.min():.1f} .. {mel.values.max():.1f} dB")
