"""Deterministic synthetic corpora.

``make_toy_features`` writes per-speaker mel-cepstral sequences that share a
smooth low-dimensional "content" trajectory distribution but map it into the
feature space through a speaker-specific affine embedding. ``make_toy_audio``
writes harmonic pseudo-speech WAVs with speaker-specific formants and pitch
for exercising the audio path end to end.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import io as vio


def _smooth_latent(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """Sum of a few random low-frequency sinusoids per latent dimension, ``[dim, n]``."""
    t = np.arange(n)
    z = np.zeros((dim, n))
    for d in range(dim):
        for _ in range(3):
            period = rng.uniform(12, 60)
            z[d] += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
    return z / np.sqrt(1.5)


def make_toy_features(root, n_speakers: int = 4, n_utterances: int = 12, order: int = 13,
                      latent_dim: int = 3, seed: int = 0, min_frames: int = 96,
                      max_frames: int = 256) -> list[str]:
    """Write ``<root>/<speaker>/<utt>.mcc.fea1`` and ``.f0.fea1`` files; returns speaker ids."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    q = order - 1
    speakers = [f"spk{k}" for k in range(n_speakers)]
    means = rng.normal(0.0, 1.0, (n_speakers, q))
    embeds = rng.normal(0.0, 0.6, (n_speakers, q, latent_dim))
    f0_means = np.log(np.linspace(110, 240, n_speakers))
    for k, spk in enumerate(speakers):
        for u in range(n_utterances):
            n = int(rng.integers(min_frames, max_frames + 1))
            z = _smooth_latent(rng, n, latent_dim)
            body = means[k][:, None] + embeds[k] @ z + rng.normal(0, 0.02, (q, n))
            energy = -2.0 + 0.5 * _smooth_latent(rng, n, 1)
            mcc = np.vstack([energy, body])
            voiced = _smooth_latent(rng, n, 1)[0] > -0.4
            f0 = np.where(voiced, np.exp(f0_means[k] + 0.12 * _smooth_latent(rng, n, 1)[0]), 0.0)
            vio.write_fea1(root / spk / f"utt{u:03d}.mcc.fea1", mcc, vio.KIND_MCC)
            vio.write_fea1(root / spk / f"utt{u:03d}.f0.fea1", f0, vio.KIND_F0)
    return speakers


def synth_voice(rng: np.random.Generator, seconds: float, sample_rate: int, f0_mean: float,
                formants: list[tuple[float, float]]) -> np.ndarray:
    """Harmonic source with a slow pitch glide and voiced/unvoiced segments, through formant resonators."""
    n = int(seconds * sample_rate)
    t = np.arange(n) / sample_rate
    vib = 1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 6.28))
    f0 = f0_mean * vib
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    src = np.zeros(n)
    for h in range(1, int(4000 / f0_mean)):
        src += np.sin(h * phase) / h
    # syllable-like amplitude envelope with pauses
    syl = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2.5, 4.0) * t + rng.uniform(0, 6.28))
    gate = (syl > 0.15).astype(float)
    src = src * syl * gate + 0.003 * rng.standard_normal(n)
    spec = np.fft.rfft(src)
    freqs = np.fft.rfftfreq(n, 1 / sample_rate)
    resp = np.zeros_like(freqs)
    for fc, bw in formants:
        resp += 1.0 / (1.0 + ((freqs - fc) / bw) ** 2)
    out = np.fft.irfft(spec * resp, n=n)
    return 0.5 * out / (np.abs(out).max() + 1e-12)


def make_toy_audio(root, n_speakers: int = 4, n_utterances: int = 6, seconds: float = 2.0,
                   sample_rate: int = 22050, seed: int = 0) -> list[str]:
    """Write ``<root>/<speaker>/<utt>.wav`` pseudo-speech; returns speaker ids."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    speakers = [f"spk{k}" for k in range(n_speakers)]
    for k, spk in enumerate(speakers):
        f0_mean = 100.0 + 45.0 * k
        formants = [(500 + 90 * k, 80), (1500 - 120 * k, 120), (2500 + 150 * k, 200)]
        for u in range(n_utterances):
            x = synth_voice(rng, seconds, sample_rate, f0_mean, formants)
            (root / spk).mkdir(parents=True, exist_ok=True)
            vio.write_wav(root / spk / f"utt{u:03d}.wav", x, sample_rate)
    return speakers
