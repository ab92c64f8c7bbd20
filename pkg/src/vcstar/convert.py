"""Utterance conversion with the trained generator and objective evaluation metrics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dsp
from . import io as vio
from .models import one_hot
from .ndgrad import Tensor, no_grad
from .pipeline import ModelBundle, UtteranceFeatures

logger = logging.getLogger(__name__)

MODES = ("direct", "gain_reference")
_MCD_SCALE = 10.0 / math.log(10.0)

# (normalized features [Q, N], attribute index) -> converted normalized features [Q, N]
GeneratorFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class ConversionRequest:
    """Either ``wave`` (with its sample rate) or pre-extracted ``features`` ``[order, N]``."""

    target: str
    wave: np.ndarray | None = None
    sample_rate: int | None = None
    features: np.ndarray | None = None
    f0: np.ndarray | None = None
    source: str | None = None
    mode: str = "direct"

    def __post_init__(self):
        self.mode = self.mode.replace("-", "_")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "gain_reference" and self.source is None:
            raise ValueError("gain_reference mode needs the source attribute")
        if (self.wave is None) == (self.features is None):
            raise ValueError("give exactly one of wave or features")


@dataclass
class ConversionResult:
    wave: np.ndarray | None
    mcc: np.ndarray  # [order, N]
    f0: np.ndarray
    gains: np.ndarray | None = None


def bundle_generator(bundle: ModelBundle) -> GeneratorFn:
    """Inference closure over the bundle's generator (eval-mode batch norm, no graph)."""
    gen = bundle.nets.generator
    k = len(bundle.speakers)

    def run(feats: np.ndarray, index: int) -> np.ndarray:
        gen.eval()
        with no_grad():
            out = gen(Tensor(np.asarray(feats, dtype=np.float32)[None, None]), one_hot([index], k))
        return out.data[0, 0]

    return run


def _check_length(bundle: ModelBundle, n: int) -> None:
    if n < bundle.arch.min_length:
        raise ValueError(f"utterance has {n} frames; the generator needs at least {bundle.arch.min_length}")


def _convert_f0(bundle: ModelBundle, f0: np.ndarray, source: str | None, target: str) -> np.ndarray:
    if target not in bundle.f0_stats:
        logger.warning("no F0 statistics for %s; F0 left unconverted", target)
        return np.asarray(f0, dtype=np.float64).copy()
    tgt = bundle.f0_stats[target]
    if source is not None:
        src = bundle.f0_stats[source]
    else:
        try:
            src = dsp.logf0_stats([f0])
        except dsp.InsufficientVoicingError as e:
            logger.warning("F0 left unconverted: %s", e)
            return np.asarray(f0, dtype=np.float64).copy()
    return dsp.convert_f0(f0, src, tgt)


def convert_utterance(req: ConversionRequest, bundle: ModelBundle,
                      generator: GeneratorFn | None = None) -> ConversionResult:
    """Convert one utterance to ``req.target``.

    Waveform input is analyzed, its MCC body normalized and passed through the
    generator, and the result denormalized with the input c_0 re-attached. The
    output wave applies the per-frame envelope ratio between the converted
    features and a reference (the input features in direct mode, the
    generator's reconstruction with the source label in gain_reference mode) to
    the input STFT. ``generator`` replaces the bundle's network (used by tests).
    """
    tgt_index = bundle.speaker_index(req.target)
    if req.source is not None:
        src_index = bundle.speaker_index(req.source)
    gen = generator or bundle_generator(bundle)
    cfg = bundle.dsp_config

    analysis = None
    if req.wave is not None:
        analysis = dsp.analyze(req.wave, cfg, req.sample_rate)
        mcc = dsp.mcc_sequence(analysis, cfg).astype(np.float32)
        f0 = analysis.f0
    else:
        mcc = np.asarray(req.features, dtype=np.float32)
        f0 = np.zeros(mcc.shape[1]) if req.f0 is None else np.asarray(req.f0, dtype=np.float64)
    if mcc.shape[0] - 1 != bundle.arch.feature_dim:
        raise ValueError(f"features have order {mcc.shape[0]}; bundle expects {bundle.arch.feature_dim + 1}")
    _check_length(bundle, mcc.shape[1])

    x = bundle.norm.normalize(mcc)
    c0 = mcc[0]
    converted = bundle.norm.denormalize(gen(x, tgt_index), c0)
    if req.mode == "gain_reference":
        reference = bundle.norm.denormalize(gen(x, src_index), c0)
    else:
        reference = bundle.norm.denormalize(x, c0)
    f0_out = _convert_f0(bundle, f0, req.source, req.target)

    if analysis is None:
        return ConversionResult(None, converted, f0_out)
    env_conv = dsp.envelope_from_mcep(converted.T.astype(np.float64), analysis.fft_size, cfg.alpha)
    env_ref = dsp.envelope_from_mcep(reference.T.astype(np.float64), analysis.fft_size, cfg.alpha)
    gains = dsp.spectral_gain(env_conv, env_ref, cfg.gain_floor, cfg.gain_ceil)
    wave = dsp.apply_gain_resynthesize(analysis, gains)
    return ConversionResult(wave, converted, f0_out, gains)


def mcd(x: np.ndarray, y: np.ndarray, dims: Sequence[int] | range | None = None) -> float:
    """Mel-cepstral distortion in dB between time-aligned ``[Q, N]`` sequences.

    ``dims`` defaults to every coefficient except c_0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"sequence shapes differ: {x.shape} vs {y.shape}")
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("expected a non-empty [Q, N] sequence")
    idx = list(range(1, x.shape[0]) if dims is None else dims)
    diff = x[idx] - y[idx]
    return float(np.mean(_MCD_SCALE * np.sqrt(2.0 * np.sum(diff * diff, axis=0))))


def _scores(bundle: ModelBundle, feats: np.ndarray, index: int) -> tuple[int, float]:
    """Classifier decision and mean per-patch discriminator probability for one sequence."""
    nets = bundle.nets
    k = len(bundle.speakers)
    nets.eval()
    with no_grad():
        x = Tensor(np.asarray(feats, dtype=np.float32)[None, None])
        pred = int(np.argmax(nets.classifier(x).data[0]))
        probs, _ = nets.discriminator(x, one_hot([index], k))
    return pred, float(probs.data.mean())


def eval_conversion(bundle: ModelBundle, items: Sequence[UtteranceFeatures],
                    generator: GeneratorFn | None = None) -> dict:
    """Objective report over every ordered (source, target) pair of distinct speakers.

    Per pair: classifier accuracy on converted features at the target label,
    mean discriminator patch probability, cycle-reconstruction MCD and
    identity-mapping MCD (both in dB over c_1..). A baseline row scores the
    real eval features.
    """
    gen = generator or bundle_generator(bundle)
    speakers = bundle.speakers
    usable = [u for u in items if u.frames >= bundle.arch.min_length]
    skipped = len(items) - len(usable)
    if skipped:
        logger.warning("skipping %d utterances shorter than %d frames", skipped, bundle.arch.min_length)
    acc = {}
    real_correct, real_d = [], []
    for u in usable:
        s = bundle.speaker_index(u.speaker)
        x = bundle.norm.normalize(u.mcc)
        c0 = u.mcc[0]
        pred, d = _scores(bundle, x, s)
        real_correct.append(pred == s)
        real_d.append(d)
        reference = bundle.norm.denormalize(x, c0)
        id_mcd = mcd(bundle.norm.denormalize(gen(x, s), c0), reference)
        for t, target in enumerate(speakers):
            if t == s:
                continue
            y = gen(x, t)
            pred, d = _scores(bundle, y, t)
            cyc_mcd = mcd(bundle.norm.denormalize(gen(y, s), c0), reference)
            acc.setdefault((u.speaker, target), []).append((pred == t, d, cyc_mcd, id_mcd))
    pairs = []
    for source in speakers:
        for target in speakers:
            if source == target:
                continue
            rows = acc.get((source, target), [])
            if rows:
                arr = np.array(rows, dtype=np.float64)
                stats = arr.mean(axis=0)
                entry = {"classifier_accuracy": float(stats[0]), "mean_d_score": float(stats[1]),
                         "cycle_mcd": float(stats[2]), "identity_mcd": float(stats[3])}
            else:
                entry = {"classifier_accuracy": None, "mean_d_score": None,
                         "cycle_mcd": None, "identity_mcd": None}
            pairs.append({"source": source, "target": target, "n_utterances": len(rows), **entry})
    baseline = {
        "classifier_accuracy": float(np.mean(real_correct)) if real_correct else None,
        "mean_d_score": float(np.mean(real_d)) if real_d else None,
        "n_utterances": len(real_correct),
    }
    return {"speakers": list(speakers), "pairs": pairs, "real_baseline": baseline}


def overall_accuracy(report: dict) -> float | None:
    """Utterance-weighted classifier accuracy over all pairs of a report."""
    num = den = 0.0
    for p in report["pairs"]:
        if p["n_utterances"]:
            num += p["classifier_accuracy"] * p["n_utterances"]
            den += p["n_utterances"]
    return num / den if den else None


def write_outputs(result: ConversionResult, out_prefix, sample_rate: int) -> list[Path]:
    """``<prefix>.wav`` (when a wave exists), ``<prefix>.mcc.fea1`` and ``<prefix>.f0.fea1``."""
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    if result.wave is not None:
        path = prefix.with_name(prefix.name + ".wav")
        vio.write_wav(path, result.wave, sample_rate)
        written.append(path)
    for suffix, values, kind in ((".mcc.fea1", result.mcc, vio.KIND_MCC), (".f0.fea1", result.f0, vio.KIND_F0)):
        path = prefix.with_name(prefix.name + suffix)
        vio.write_fea1(path, values, kind)
        written.append(path)
    return written


def write_report(report: dict, path) -> None:
    vio.atomic_write(path, (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())
