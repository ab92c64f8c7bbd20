"""Speech analysis and resynthesis.

A lightweight stand-in for a full vocoder front end: Hann STFT, cepstrally
liftered spectral envelopes, all-pass warped mel-cepstra, normalized
cross-correlation pitch tracking, log-F0 statistics matching, and
phase-preserving spectral-gain resynthesis.
"""
from __future__ import annotations

import functools
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ConfigurationError(ValueError):
    pass


class InsufficientVoicingError(ValueError):
    pass


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 22050
    fft_size: int = 1024
    hop: int = 110  # ~5 ms at 22050 Hz
    order: int = 36  # mel-cepstral coefficients c_0 .. c_35
    alpha: float = 0.455
    lifter_order: int = 24
    f0_floor: float = 71.0
    f0_ceil: float = 800.0
    voicing_threshold: float = 0.5
    ap_bands: int = 5
    gain_floor: float = 1e-3
    gain_ceil: float = 1e3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DspConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# STFT


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def check_overlap(window: np.ndarray, hop: int) -> None:
    """Raise if overlap-add of the squared window vanishes anywhere.

    In steady state the summed squared window must stay away from zero for the
    weighted overlap-add inverse to exist.
    """
    n = len(window)
    if hop < 1 or hop > n:
        raise ConfigurationError(f"hop {hop} incompatible with window length {n}")
    period = np.zeros(hop)
    w2 = window ** 2
    for start in range(0, n, hop):
        seg = w2[start : start + hop]
        period[: len(seg)] += seg
    if period.min() <= 1e-10 * period.max():
        raise ConfigurationError(f"window does not overlap-add at hop {hop}")


def n_frames_for(length: int, hop: int) -> int:
    return 1 + length // hop


def stft(wave: np.ndarray, fft_size: int = 1024, hop: int = 110,
         window: np.ndarray | None = None) -> np.ndarray:
    """Centered STFT, shape ``[frames, fft_size // 2 + 1]``; frame i is centered on sample i*hop."""
    window = hann(fft_size) if window is None else np.asarray(window, dtype=np.float64)
    check_overlap(window, hop)
    x = np.asarray(wave, dtype=np.float64)
    pad = fft_size // 2
    frames = n_frames_for(len(x), hop)
    padded = np.zeros((frames - 1) * hop + fft_size)
    padded[pad : pad + len(x)] = x[: len(padded) - pad]
    segs = sliding_window_view(padded, fft_size)[::hop][:frames]
    return np.fft.rfft(segs * window, axis=1)


def istft(spec: np.ndarray, hop: int = 110, window: np.ndarray | None = None,
          length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    spec = np.asarray(spec)
    fft_size = 2 * (spec.shape[1] - 1)
    window = hann(fft_size) if window is None else np.asarray(window, dtype=np.float64)
    check_overlap(window, hop)
    frames = spec.shape[0]
    segs = np.fft.irfft(spec, n=fft_size, axis=1) * window
    total = (frames - 1) * hop + fft_size
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = window ** 2
    for i in range(frames):
        out[i * hop : i * hop + fft_size] += segs[i]
        norm[i * hop : i * hop + fft_size] += w2
    nz = norm > 1e-8 * norm.max()
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    pad = fft_size // 2
    if length is None:
        length = (frames - 1) * hop
    res = out[pad : pad + length]
    if len(res) < length:
        res = np.concatenate([res, np.zeros(length - len(res))])
    return res


# --------------------------------------------------------------------------
# spectral envelope and mel-cepstrum

ABS_FLOOR = 1e-10
REL_FLOOR = 1e-10


def _floor_for(mag: np.ndarray) -> np.ndarray:
    peak = mag.max(axis=-1, keepdims=True)
    return np.where(peak > 0, REL_FLOOR * peak, ABS_FLOOR)


def spectral_envelope(mag_frame: np.ndarray, lifter_order: int = 24) -> np.ndarray:
    """Cepstrally liftered envelope of one or more magnitude frames (last axis = bins).

    Quefrencies at or above ``lifter_order`` are discarded. The result is
    floored at 1e-10 of each frame's peak.
    """
    mag = np.asarray(mag_frame, dtype=np.float64)
    if (mag < 0).any():
        raise ValueError("magnitudes must be non-negative")
    floor = _floor_for(mag)
    logmag = np.log(np.maximum(mag, floor))
    n = 2 * (mag.shape[-1] - 1)
    ceps = np.fft.irfft(logmag, n=n, axis=-1)
    ceps[..., lifter_order : n - lifter_order + 1] = 0.0
    env = np.exp(np.fft.rfft(ceps, n=n, axis=-1).real)
    return np.maximum(env, floor)


def warp_frequency(omega: np.ndarray, alpha: float) -> np.ndarray:
    """Phase response of the first-order all-pass: the mel-like warped axis."""
    return omega + 2 * np.arctan(alpha * np.sin(omega) / (1 - alpha * np.cos(omega)))


@functools.lru_cache(maxsize=16)
def _mcep_basis(fft_size: int, order: int, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Return (basis [bins, order], projector [order, bins]).

    Bases are ``1, 2cos(m w~)`` sampled on the linear grid. The projector is
    the weighted least-squares inverse with trapezoid weights times the warp
    Jacobian dw~/dw, i.e. a quadrature of the cosine transform on the warped
    axis. Being a least-squares inverse, re-projecting its own reconstruction
    returns the same coefficients.
    """
    bins = fft_size // 2 + 1
    omega = np.linspace(0.0, np.pi, bins)
    warped = warp_frequency(omega, alpha)
    m = np.arange(order)
    basis = np.cos(np.outer(warped, m))
    basis[:, 1:] *= 2.0
    trap = np.full(bins, np.pi / (bins - 1))
    trap[[0, -1]] *= 0.5
    jac = (1 - alpha ** 2) / (1 - 2 * alpha * np.cos(omega) + alpha ** 2)
    w = trap * jac
    gram = basis.T @ (basis * w[:, None])
    projector = np.linalg.solve(gram, (basis * w[:, None]).T)
    basis.setflags(write=False)
    projector.setflags(write=False)
    return basis, projector


def _check_mcep_args(fft_size: int, order: int, alpha: float) -> None:
    if not 0 <= alpha < 1:
        raise ValueError("alpha must be in [0, 1)")
    if order < 1 or order >= fft_size // 2:
        raise ValueError("order must be in [1, fft_size/2)")


def mcep_from_envelope(envelope: np.ndarray, order: int = 36, alpha: float = 0.455) -> np.ndarray:
    """Mel-cepstral coefficients ``c_0 .. c_{order-1}`` of one or more envelopes (last axis = bins)."""
    env = np.asarray(envelope, dtype=np.float64)
    if (env <= 0).any() or not np.isfinite(env).all():
        raise ArithmeticError("envelope must be strictly positive and finite")
    fft_size = 2 * (env.shape[-1] - 1)
    _check_mcep_args(fft_size, order, alpha)
    _, projector = _mcep_basis(fft_size, order, float(alpha))
    return np.log(env) @ projector.T


def envelope_from_mcep(mcc: np.ndarray, fft_size: int = 1024, alpha: float = 0.455) -> np.ndarray:
    """Inverse map: ``exp(c_0 + 2 sum c_m cos(m w~))`` on the linear frequency grid."""
    c = np.asarray(mcc, dtype=np.float64)
    order = c.shape[-1]
    _check_mcep_args(fft_size, order, alpha)
    basis, _ = _mcep_basis(fft_size, order, float(alpha))
    return np.exp(c @ basis.T)


# --------------------------------------------------------------------------
# F0


def f0_estimate(wave: np.ndarray, sample_rate: int = 22050, hop: int = 110, f0_floor: float = 71.0,
                f0_ceil: float = 800.0, frame_length: int = 1024, threshold: float = 0.5) -> np.ndarray:
    """Per-frame pitch in Hz from the normalized cross-correlation; 0 marks unvoiced.

    Frames are aligned with :func:`stft`. Among local correlation maxima in the
    allowed lag range, the shortest lag within 85% of the best peak wins,
    which suppresses subharmonic (period-doubling) picks.
    """
    if not f0_floor < f0_ceil < sample_rate / 2:
        raise ValueError("need f0_floor < f0_ceil < sample_rate / 2")
    x = np.asarray(wave, dtype=np.float64)
    frames = n_frames_for(len(x), hop)
    pad = frame_length // 2
    padded = np.zeros((frames - 1) * hop + frame_length)
    padded[pad : pad + len(x)] = x[: len(padded) - pad]
    segs = sliding_window_view(padded, frame_length)[::hop][:frames]
    segs = segs - segs.mean(axis=1, keepdims=True)

    lag_min = max(2, int(np.floor(sample_rate / f0_ceil)))
    lag_max = min(frame_length // 2, int(np.ceil(sample_rate / f0_floor)))
    f0 = np.zeros(frames)
    for start in range(0, frames, 2048):
        f0[start : start + 2048] = _track_chunk(segs[start : start + 2048], sample_rate, lag_min,
                                                 lag_max, threshold)
    return f0


def _track_chunk(segs, sample_rate, lag_min, lag_max, threshold) -> np.ndarray:
    frames, frame_length = segs.shape
    spec = np.fft.rfft(segs, n=2 * frame_length, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, axis=1)[:, : lag_max + 2]
    # energies of the overlapping head/tail parts for each lag
    csum = np.concatenate([np.zeros((frames, 1)), np.cumsum(segs ** 2, axis=1)], axis=1)
    lags = np.arange(lag_max + 2)
    head = csum[:, frame_length - lags]
    tail = csum[:, -1:] - csum[:, lags]
    denom = np.sqrt(np.maximum(head * tail, 0.0))
    silent = csum[:, -1] <= 1e-10 * frame_length
    nccf = np.where(denom > 0, acf / np.where(denom > 0, denom, 1.0), 0.0)

    f0 = np.zeros(frames)
    cand = np.arange(lag_min, lag_max + 1)
    for i in np.flatnonzero(~silent):
        r = nccf[i]
        peaks = cand[(r[cand] > r[cand - 1]) & (r[cand] >= r[cand + 1])]
        if peaks.size == 0:
            continue
        best = r[peaks].max()
        if best < threshold:
            continue
        lag = peaks[np.argmax(r[peaks] >= 0.85 * best)]
        a, b, c = r[lag - 1], r[lag], r[lag + 1]
        curv = a - 2 * b + c
        offset = 0.5 * (a - c) / curv if curv < 0 else 0.0
        f0[i] = sample_rate / (lag + offset)
    return f0


@dataclass(frozen=True)
class F0Stats:
    mean_logf0: float
    std_logf0: float
    voiced_frame_count: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "F0Stats":
        return cls(float(d["mean_logf0"]), float(d["std_logf0"]), int(d["voiced_frame_count"]))


def logf0_stats(contours) -> F0Stats:
    """Mean and population std of ln F0 over voiced frames of all contours."""
    if isinstance(contours, np.ndarray) and contours.ndim == 1:
        contours = [contours]
    voiced = np.concatenate([np.asarray(c, dtype=np.float64).ravel() for c in contours])
    voiced = voiced[voiced > 0]
    if voiced.size < 2:
        raise InsufficientVoicingError(f"need at least 2 voiced frames, got {voiced.size}")
    lf = np.log(voiced)
    std = float(lf.std())
    if std <= 0:
        raise InsufficientVoicingError("log-F0 has zero variance")
    return F0Stats(float(lf.mean()), std, int(voiced.size))


def convert_f0(contour: np.ndarray, src: F0Stats, tgt: F0Stats) -> np.ndarray:
    """Map voiced frames by ``ln f' = (ln f - mu_src) * sd_tgt / sd_src + mu_tgt``; zeros stay zero."""
    if src.std_logf0 <= 0:
        raise ValueError("source log-F0 std must be positive")
    f0 = np.asarray(contour, dtype=np.float64)
    out = np.zeros_like(f0)
    v = f0 > 0
    out[v] = np.exp((np.log(f0[v]) - src.mean_logf0) * (tgt.std_logf0 / src.std_logf0) + tgt.mean_logf0)
    return out


# --------------------------------------------------------------------------
# gain filtering


def spectral_gain(converted_env: np.ndarray, reference_env: np.ndarray, gain_floor: float = 1e-3,
                  gain_ceil: float = 1e3) -> np.ndarray:
    """Per-bin ``converted / reference`` clamped to ``[gain_floor, gain_ceil]``."""
    conv = np.asarray(converted_env, dtype=np.float64)
    ref = np.asarray(reference_env, dtype=np.float64)
    if conv.shape != ref.shape:
        raise ValueError(f"envelope shapes differ: {conv.shape} vs {ref.shape}")
    if (conv <= 0).any() or (ref <= 0).any():
        raise ValueError("envelopes must be positive")
    return np.clip(conv / ref, gain_floor, gain_ceil)


@dataclass
class UtteranceAnalysis:
    sample_rate: int
    hop: int
    num_samples: int
    stft: np.ndarray  # [frames, bins] complex
    envelope: np.ndarray  # [frames, bins]
    f0: np.ndarray  # [frames]
    aperiodicity_proxy: np.ndarray  # [frames, bands]

    @property
    def frames(self) -> int:
        return self.stft.shape[0]

    @property
    def fft_size(self) -> int:
        return 2 * (self.stft.shape[1] - 1)


def aperiodicity_proxy(mag: np.ndarray, bands: int) -> np.ndarray:
    """Per-band spectral flatness (geometric / arithmetic mean of power)."""
    power = np.maximum(mag.astype(np.float64) ** 2, 1e-20)
    out = np.empty((mag.shape[0], bands))
    for b, idx in enumerate(np.array_split(np.arange(mag.shape[1]), bands)):
        p = power[:, idx]
        out[:, b] = np.exp(np.log(p).mean(axis=1)) / p.mean(axis=1)
    return out


def analyze(wave: np.ndarray, config: DspConfig = DspConfig(), sample_rate: int | None = None
            ) -> UtteranceAnalysis:
    if sample_rate is not None and sample_rate != config.sample_rate:
        raise ConfigurationError(f"sample rate {sample_rate} != configured {config.sample_rate}")
    x = np.asarray(wave, dtype=np.float64)
    spec = stft(x, config.fft_size, config.hop)
    mag = np.abs(spec)
    env = spectral_envelope(mag, config.lifter_order)
    f0 = f0_estimate(x, config.sample_rate, config.hop, config.f0_floor, config.f0_ceil,
                     config.fft_size, config.voicing_threshold)
    return UtteranceAnalysis(config.sample_rate, config.hop, len(x), spec, env, f0,
                             aperiodicity_proxy(mag, config.ap_bands))


def mcc_sequence(analysis: UtteranceAnalysis, config: DspConfig = DspConfig()) -> np.ndarray:
    """``[order, frames]`` mel-cepstral feature matrix of an analysis."""
    return mcep_from_envelope(analysis.envelope, config.order, config.alpha).T


def apply_gain_resynthesize(analysis: UtteranceAnalysis, gains: np.ndarray) -> np.ndarray:
    """Scale each STFT frame's magnitude by its gain, keep the phase, overlap-add."""
    gains = np.asarray(gains, dtype=np.float64)
    if gains.shape != analysis.stft.shape:
        raise ValueError(f"gains shape {gains.shape} != stft shape {analysis.stft.shape}")
    return istft(analysis.stft * gains, analysis.hop, length=analysis.num_samples)
