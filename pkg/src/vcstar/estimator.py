"""scikit-learn style facade over training and conversion of MCC sequences.

Samples are whole utterances: ``X`` is a list of ``[order, N]`` mel-cepstral
matrices (row 0 is the energy coefficient, passed through untouched) and ``y``
holds one attribute label per utterance.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import losses
from .convert import ConversionRequest, convert_utterance
from .models import renormalize
from .ndgrad import Tensor, no_grad
from .pipeline import FeatureStore, Trainer, TrainConfig, UtteranceFeatures


def check_sequence(x, order: int | None = None, min_frames: int = 1) -> np.ndarray:
    """Validate one ``[order, N]`` feature matrix and return it as float32."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d [order, frames] matrix, got shape {arr.shape}")
    if order is not None and arr.shape[0] != order:
        raise ValueError(f"expected {order} coefficients per frame, got {arr.shape[0]}")
    if arr.shape[1] < min_frames:
        raise ValueError(f"sequence has {arr.shape[1]} frames; at least {min_frames} required")
    if not np.isfinite(arr).all():
        raise ValueError("sequence contains NaN or infinity")
    return arr


def check_sequences(X, order: int | None = None, min_frames: int = 1) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    seqs = [check_sequence(x, order, min_frames) for x in X]
    if not seqs:
        raise ValueError("no sequences given")
    if order is None and len({s.shape[0] for s in seqs}) > 1:
        raise ValueError("sequences disagree on the number of coefficients")
    return seqs


class StarGANVC(BaseEstimator):
    """Many-to-many conversion between the labels seen in ``fit``.

    ``transform`` converts to the ``target`` parameter; ``convert`` takes the
    target explicitly. ``predict`` labels sequences with the auxiliary
    classifier.
    """

    def __init__(self, architecture="tiny", iterations=2000, batch_size=8, crop_frames=64, seed=0,
                 lambda_cls=1.0, lambda_cyc=10.0, lambda_id=5.0, id_decay_iters=10000,
                 lr_g=2e-4, lr_d=1e-4, lr_c=1e-4, target=None):
        self.architecture = architecture
        self.iterations = iterations
        self.batch_size = batch_size
        self.crop_frames = crop_frames
        self.seed = seed
        self.lambda_cls = lambda_cls
        self.lambda_cyc = lambda_cyc
        self.lambda_id = lambda_id
        self.id_decay_iters = id_decay_iters
        self.lr_g = lr_g
        self.lr_d = lr_d
        self.lr_c = lr_c
        self.target = target

    def _config(self) -> TrainConfig:
        weights = losses.LossWeights(self.lambda_cls, self.lambda_cyc, self.lambda_id,
                                     id_decay_iters=self.id_decay_iters)
        return TrainConfig(seed=self.seed, batch_size=self.batch_size, crop_frames=self.crop_frames,
                           iterations=self.iterations, lr_g=self.lr_g, lr_d=self.lr_d, lr_c=self.lr_c,
                           weights=weights, architecture=self.architecture)

    def fit(self, X, y, f0=None):
        """Train on utterances ``X`` with labels ``y``; ``f0`` optionally gives matching F0 contours."""
        seqs = check_sequences(X, min_frames=2)
        y = np.asarray(y)
        if y.shape != (len(seqs),):
            raise ValueError(f"y must hold one label per sequence ({len(seqs)}), got shape {y.shape}")
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("need at least two distinct labels")
        names = [str(c) for c in self.classes_]
        index = {c: i for i, c in enumerate(self.classes_)}
        contours = [np.zeros(s.shape[1]) for s in seqs] if f0 is None else [np.asarray(c, float) for c in f0]
        items = [UtteranceFeatures(names[index[lab]], index[lab], f"u{i}", "train", s, c)
                 for i, (s, lab, c) in enumerate(zip(seqs, y, contours))]
        store = FeatureStore(names, items)
        if f0 is not None:
            store.compute_f0_stats()
        trainer = Trainer(self._config(), store)
        self.history_ = []
        while trainer.step < self.iterations:
            self.history_.append(trainer.train_step(trainer.next_batch()))
        self.bundle_ = trainer.bundle
        self.n_features_in_ = seqs[0].shape[0]
        return self

    def _name(self, label) -> str:
        matches = np.flatnonzero(self.classes_ == label)
        if matches.size == 0:
            raise KeyError(f"unknown label {label!r}; known: {list(self.classes_)}")
        return self.bundle_.speakers[int(matches[0])]

    def convert(self, X, target, f0=None):
        """Converted ``[order, N]`` sequences (and F0 contours when ``f0`` is given and stats exist)."""
        check_is_fitted(self, "bundle_")
        seqs = check_sequences(X, self.n_features_in_, self.bundle_.arch.min_length)
        name = self._name(target)
        out, f0_out = [], []
        for i, s in enumerate(seqs):
            contour = None if f0 is None else f0[i]
            req = ConversionRequest(target=name, features=s, f0=contour)
            if contour is not None and not self.bundle_.f0_stats:
                raise ValueError("estimator was fitted without F0 contours")
            res = convert_utterance(req, self.bundle_)
            out.append(res.mcc)
            f0_out.append(res.f0)
        return (out, f0_out) if f0 is not None else out

    def transform(self, X):
        if self.target is None:
            raise ValueError("set the target parameter before calling transform")
        return self.convert(X, self.target)

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "bundle_")
        seqs = check_sequences(X, self.n_features_in_, self.bundle_.arch.min_length)
        clf = self.bundle_.nets.classifier
        clf.eval()
        rows = []
        with no_grad():
            for s in seqs:
                x = self.bundle_.norm.normalize(s)[None, None]
                rows.append(renormalize(clf(Tensor(x)).data[0]))
        return np.vstack(rows)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "bundle_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))

