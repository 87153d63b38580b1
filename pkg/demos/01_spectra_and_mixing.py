# %% [markdown]
# # Spectra, mixing and the round trip
#
# A short tour of the front end: build a noisy mixture at a chosen SNR,
# look at its magnitude spectrogram, and check that analysis followed by
# synthesis gives the waveform back.

# %%
import numpy as np

from darcn.data import NOISE_KINDS
from darcn.dsp import PAPER_STFT, istft, magnitude, mix_at_snr, power, stft

rng = np.random.default_rng(0)
sr = 16000

# %% [markdown]
# A one-second harmonic "vowel" stands in for speech; pink noise is the interferer.

# %%
t = np.arange(sr) / sr
speech = sum(np.sin(2 * np.pi * 140 * k * t) / k for k in range(1, 12)) * (0.6 + 0.4 * np.sin(2 * np.pi * 3 * t))
noise = NOISE_KINDS["pink"](rng, sr + 4000)

noisy, alpha = mix_at_snr(speech, noise, 0.0)
achieved = 10 * np.log10(power(speech) / power(noisy - speech))
print(f"noise gain {alpha:.4f}, achieved SNR {achieved:+.12f} dB")

# %%
spec = stft(noisy)
mag = magnitude(spec)
print("frames x bins:", mag.shape)
# bins are 50 Hz apart, so the 140 Hz fundamental lands nearest bin 3
clean_mag = magnitude(stft(speech))
print("loudest clean bin per frame (first 5):", np.argmax(clean_mag, axis=1)[:5])
print("band energy of the mixture below / above 2 kHz:", mag[:, :40].sum().round(1), mag[:, 40:].sum().round(1))

# %% [markdown]
# Resynthesis with the signal's own phase. The first and last window are
# excluded because only the interior has full overlap.

# %%
back = istft(spec, length=len(noisy))
inner = slice(PAPER_STFT.win_length, PAPER_STFT.covered_length(len(spec)) - PAPER_STFT.win_length)
err = noisy[inner] - back[inner]
print(f"round-trip SNR {10 * np.log10(power(noisy[inner]) / power(err)):.1f} dB")

# %% [markdown]
# Enhancement only changes magnitudes; the noisy phase is reused. Feeding
# the clean magnitude back in this way is the best any magnitude-domain
# model could do on this mixture.

# %%
from darcn.metrics import si_sdr  # noqa: E402

oracle = istft(magnitude(stft(speech)), phase_source=spec, length=len(noisy))
n = PAPER_STFT.covered_length(len(spec))
print(f"noisy SI-SDR {si_sdr(noisy[:n], speech[:n]):.2f} dB, clean-magnitude + noisy-phase {si_sdr(oracle[:n], speech[:n]):.2f} dB")
