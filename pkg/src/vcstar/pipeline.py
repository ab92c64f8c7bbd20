"""Dataset ingestion, feature normalization, minibatch sampling, training and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import dsp, losses
from . import io as vio
from . import ndgrad as nd
from .models import Architecture, Networks, one_hot
from .ndgrad import NumericError, Tensor

logger = logging.getLogger(__name__)

METRIC_KEYS = ("adv_d", "adv_g", "cls_c", "cls_g", "cyc", "id", "total_g")


class DatasetError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    path: str
    kind: str  # "wav" or "fea1"
    split: str  # "train" or "eval"


@dataclass(frozen=True)
class SpeakerEntry:
    speaker_id: str
    index: int
    utterances: tuple[Utterance, ...]


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    speakers: tuple[SpeakerEntry, ...]

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    @property
    def speaker_ids(self) -> list[str]:
        return [s.speaker_id for s in self.speakers]

    def utterances(self, split: str | None = None) -> Iterable[tuple[SpeakerEntry, Utterance]]:
        for spk in self.speakers:
            for utt in spk.utterances:
                if split is None or utt.split == split:
                    yield spk, utt


def _utterance_files(directory: Path) -> list[tuple[str, Path, str]]:
    found = {}
    for p in sorted(directory.iterdir()):
        if p.name.endswith(".mcc.fea1"):
            found[p.name[: -len(".mcc.fea1")]] = (p, "fea1")
        elif p.suffix.lower() == ".wav":
            found.setdefault(p.stem, (p, "wav"))
    return [(utt, path, kind) for utt, (path, kind) in sorted(found.items())]


def scan_dataset(root, eval_fraction: float = 0.3, seed: int = 0) -> DatasetManifest:
    """One subdirectory per speaker holding ``*.wav`` or ``*.mcc.fea1`` utterances.

    The split comes from ``<root>/eval.txt`` (one ``speaker/utt`` per line) when
    present; otherwise each speaker's sorted utterances are shuffled with a
    seeded generator and ``floor(n * eval_fraction)`` of them (never all) go
    to eval.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    listed = None
    if (root / "eval.txt").exists():
        listed = {ln.strip() for ln in (root / "eval.txt").read_text().splitlines() if ln.strip()}
    entries = []
    seen = set()
    for index, d in enumerate(sorted(p for p in root.iterdir() if p.is_dir())):
        if d.name in seen:
            raise DatasetError(f"duplicate speaker id {d.name}")
        seen.add(d.name)
        files = _utterance_files(d)
        if not files:
            raise DatasetError(f"speaker directory {d} contains no utterances")
        if listed is not None:
            eval_ids = {u for u, _, _ in files if f"{d.name}/{u}" in listed}
        else:
            rng = np.random.default_rng([seed, index])
            order = rng.permutation(len(files))
            n_eval = min(int(len(files) * eval_fraction), len(files) - 1)
            eval_ids = {files[i][0] for i in order[:n_eval]}
        utts = tuple(Utterance(u, str(p), kind, "eval" if u in eval_ids else "train")
                     for u, p, kind in files)
        if not any(u.split == "train" for u in utts):
            raise DatasetError(f"speaker {d.name} has no training utterance")
        entries.append(SpeakerEntry(d.name, index, utts))
    if not entries:
        raise DatasetError("no speakers found")
    return DatasetManifest(str(root), tuple(entries))


# --------------------------------------------------------------------------
# features


@dataclass
class UtteranceFeatures:
    speaker: str
    label: int
    utt_id: str
    split: str
    mcc: np.ndarray  # [order, N]
    f0: np.ndarray  # [N]

    @property
    def frames(self) -> int:
        return self.mcc.shape[1]


@dataclass
class FeatureStore:
    speakers: list[str]
    items: list[UtteranceFeatures]
    f0_stats: dict[str, dsp.F0Stats] = field(default_factory=dict)

    def split(self, name: str) -> list[UtteranceFeatures]:
        return [u for u in self.items if u.split == name]

    @property
    def order(self) -> int:
        return self.items[0].mcc.shape[0]

    def compute_f0_stats(self) -> None:
        """Per-speaker log-F0 statistics from training utterances only."""
        self.f0_stats = {}
        for spk in self.speakers:
            contours = [u.f0 for u in self.items if u.speaker == spk and u.split == "train"]
            self.f0_stats[spk] = dsp.logf0_stats(contours)


def _hash_bytes(*parts: bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.hexdigest()


def _config_key(config: dsp.DspConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True).encode()


def analyze_file(path, config: dsp.DspConfig) -> tuple[np.ndarray, np.ndarray]:
    """MCC matrix ``[order, N]`` and F0 contour of a WAV file."""
    try:
        wave, rate = vio.read_wav(path)
    except vio.FormatError as e:
        raise DatasetError(f"corrupt audio {path}: {e}") from None
    if rate != config.sample_rate:
        raise DatasetError(f"{path}: sample rate {rate} != configured {config.sample_rate}")
    analysis = dsp.analyze(wave, config)
    return dsp.mcc_sequence(analysis, config).astype(np.float32), analysis.f0


def extract_and_cache(manifest: DatasetManifest, config: dsp.DspConfig = dsp.DspConfig(),
                      cache_dir=None) -> tuple[FeatureStore, int]:
    """Analyze every utterance (or read its FEA1 override) and compute training F0 stats.

    With ``cache_dir`` set, features are written to
    ``<cache>/<speaker>/<utt>.mcc.fea1`` / ``.f0.fea1`` and reused while the
    source bytes and DSP configuration hash stay the same. Returns the store and
    the number of utterances actually analyzed.
    """
    cache = Path(cache_dir) if cache_dir is not None else None
    index_path = cache / "index.json" if cache else None
    index = json.loads(index_path.read_text()) if index_path and index_path.exists() else {}
    cfg_key = _config_key(config)
    items = []
    extracted = 0
    for spk, utt in manifest.utterances():
        src = Path(utt.path)
        if utt.kind == "fea1":
            mcc, kind = vio.read_fea1(src)
            if kind != vio.KIND_MCC:
                raise DatasetError(f"{src}: expected MCC features, found kind {kind}")
            f0_path = src.with_name(src.name.replace(".mcc.fea1", ".f0.fea1"))
            if f0_path.exists():
                f0 = vio.read_fea1(f0_path)[0].reshape(-1).astype(np.float64)
            else:
                f0 = np.zeros(mcc.shape[1])
            if f0.size != mcc.shape[1]:
                raise DatasetError(f"{f0_path}: {f0.size} F0 frames for {mcc.shape[1]} MCC frames")
        else:
            key = f"{spk.speaker_id}/{utt.utt_id}"
            digest = _hash_bytes(src.read_bytes(), cfg_key)
            mcc_path = cache / spk.speaker_id / f"{utt.utt_id}.mcc.fea1" if cache else None
            f0_path = cache / spk.speaker_id / f"{utt.utt_id}.f0.fea1" if cache else None
            if cache and index.get(key) == digest and mcc_path.exists() and f0_path.exists():
                mcc = vio.read_fea1(mcc_path)[0]
                f0 = vio.read_fea1(f0_path)[0].reshape(-1).astype(np.float64)
            else:
                mcc, f0 = analyze_file(src, config)
                extracted += 1
                if cache:
                    vio.write_fea1(mcc_path, mcc, vio.KIND_MCC)
                    vio.write_fea1(f0_path, f0, vio.KIND_F0)
                    index[key] = digest
                    # f0 is stored as f32; keep the in-memory copy identical to a cache read
                    f0 = f0.astype(np.float32).astype(np.float64)
        items.append(UtteranceFeatures(spk.speaker_id, spk.index, utt.utt_id, utt.split,
                                       np.asarray(mcc, dtype=np.float32), f0))
    if cache:
        vio.atomic_write(index_path, json.dumps(index, sort_keys=True, indent=1).encode())
    store = FeatureStore(manifest.speaker_ids, items)
    store.compute_f0_stats()
    return store, extracted


@dataclass
class NormStats:
    """Per-dimension z-scoring of MCC dims 1.. (c_0 is excluded from the networks)."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, sequences: Iterable[np.ndarray]) -> "NormStats":
        feats = np.concatenate([np.asarray(s, dtype=np.float64)[1:] for s in sequences], axis=1)
        return cls(feats.mean(axis=1).astype(np.float32),
                   np.maximum(feats.std(axis=1), 1e-6).astype(np.float32))

    def normalize(self, mcc: np.ndarray) -> np.ndarray:
        """``[order, N]`` MCCs -> ``[order-1, N]`` network features."""
        return ((np.asarray(mcc, dtype=np.float32)[1:] - self.mean[:, None]) / self.std[:, None]
                ).astype(np.float32)

    def denormalize(self, feats: np.ndarray, c0: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`normalize`, re-attaching the pass-through c_0 row."""
        body = np.asarray(feats, dtype=np.float32) * self.std[:, None] + self.mean[:, None]
        return np.vstack([np.asarray(c0, dtype=np.float32).reshape(1, -1), body])


# --------------------------------------------------------------------------
# minibatches


@dataclass
class Batch:
    x: np.ndarray  # [B, 1, Q, crop]
    src: np.ndarray  # [B] int
    tgt: np.ndarray  # [B] int


def crop_or_pad(seq: np.ndarray, crop: int, start: int) -> np.ndarray:
    """Crop ``[Q, N]`` to ``crop`` frames from ``start``; shorter sequences are reflection-padded."""
    n = seq.shape[1]
    if n >= crop:
        return seq[:, start : start + crop]
    if n == 1:
        return np.repeat(seq, crop, axis=1)
    out = seq
    while out.shape[1] < crop:
        extra = min(crop - out.shape[1], n - 1)
        out = np.pad(out, ((0, 0), (0, extra)), mode="reflect")
    return out[:, :crop]


def sample_minibatch(features: list[np.ndarray], labels: np.ndarray, n_classes: int,
                     batch_size: int, crop_frames: int, rng: np.random.Generator) -> Batch:
    """Uniform utterance, uniform crop start, uniform target class."""
    if not features:
        raise DatasetError("empty feature store")
    xs = np.empty((batch_size, 1, features[0].shape[0], crop_frames), dtype=np.float32)
    src = np.empty(batch_size, dtype=np.int64)
    for i in range(batch_size):
        j = int(rng.integers(len(features)))
        seq = features[j]
        start = int(rng.integers(seq.shape[1] - crop_frames + 1)) if seq.shape[1] >= crop_frames else 0
        xs[i, 0] = crop_or_pad(seq, crop_frames, start)
        src[i] = labels[j]
    tgt = rng.integers(n_classes, size=batch_size)
    return Batch(xs, src, tgt)


# --------------------------------------------------------------------------
# configuration and bundle


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    crop_frames: int = 128
    iterations: int = 20000
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    lr_c: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    architecture: str | dict = "default"
    dsp: dsp.DspConfig = field(default_factory=dsp.DspConfig)
    checkpoint_every: int = 1000

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = losses.LossWeights(**self.weights)
        if isinstance(self.dsp, dict):
            self.dsp = dsp.DspConfig.from_dict(self.dsp)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def build_architecture(self, feature_dim: int, n_classes: int) -> Architecture:
        if isinstance(self.architecture, dict):
            arch = Architecture.from_dict(
                {**self.architecture, "feature_dim": feature_dim, "n_classes": n_classes})
        elif self.architecture == "default":
            arch = Architecture(feature_dim=feature_dim, n_classes=n_classes)
        elif self.architecture == "tiny":
            arch = Architecture.tiny(feature_dim, n_classes)
        else:
            raise ValueError(f"unknown architecture preset {self.architecture!r}")
        if self.crop_frames < arch.min_length:
            raise ValueError(f"crop_frames {self.crop_frames} below generator minimum {arch.min_length}")
        return arch

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ModelBundle:
    """Everything conversion needs: networks, normalization, per-speaker F0 stats, label schema."""

    nets: Networks
    norm: NormStats
    speakers: list[str]
    f0_stats: dict[str, dsp.F0Stats]
    dsp_config: dsp.DspConfig

    @property
    def arch(self) -> Architecture:
        return self.nets.arch

    def speaker_index(self, name: str) -> int:
        try:
            return self.speakers.index(name)
        except ValueError:
            raise KeyError(f"unknown attribute {name!r}; known: {self.speakers}") from None


# --------------------------------------------------------------------------
# training


def _guard(stage: str, fn):
    try:
        return fn()
    except NumericError as e:
        raise TrainingError(f"non-finite value while computing {stage}: {e}") from e


class Trainer:
    """Owns the bundle, the three optimizers, the sampling RNG and the step counter."""

    def __init__(self, config: TrainConfig, store: FeatureStore):
        self.config = config
        train_items = store.split("train")
        if not train_items:
            raise DatasetError("no training utterances")
        norm = NormStats.fit(u.mcc for u in train_items)
        arch = config.build_architecture(store.order - 1, len(store.speakers))
        nets = Networks.create(arch, config.seed)
        self.bundle = ModelBundle(nets, norm, list(store.speakers), dict(store.f0_stats), config.dsp)
        self.features = [norm.normalize(u.mcc) for u in train_items]
        self.labels = np.array([u.label for u in train_items])
        c = config
        self.opt_g = nd.Adam(nets.generator.parameters(), c.lr_g, c.beta1, c.beta2)
        self.opt_d = nd.Adam(nets.discriminator.parameters(), c.lr_d, c.beta1, c.beta2)
        self.opt_c = nd.Adam(nets.classifier.parameters(), c.lr_c, c.beta1, c.beta2)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0

    @property
    def nets(self) -> Networks:
        return self.bundle.nets

    def next_batch(self) -> Batch:
        return sample_minibatch(self.features, self.labels, len(self.bundle.speakers),
                                self.config.batch_size, self.config.crop_frames, self.rng)

    def train_step(self, batch: Batch) -> dict[str, float]:
        """One D update, one C update, one G update on ``batch``."""
        G, D, C = self.nets.generator, self.nets.discriminator, self.nets.classifier
        k = len(self.bundle.speakers)
        w = self.config.weights
        self.nets.train()
        x = Tensor(batch.x)
        src = one_hot(batch.src, k)
        tgt = one_hot(batch.tgt, k)

        # G is not updated until the end of the step, so this forward serves all three updates
        h, sizes = _guard("generator encoder", lambda: G.encode(x))
        fake = _guard("converted features", lambda: G.decode(h, sizes, tgt))

        D.zero_grad()
        adv_d = _guard("adv_d", lambda: losses.adv_loss_d(D(x, src)[1], D(fake.detach(), tgt)[1]))
        adv_d.backward()
        self.opt_d.step()

        C.zero_grad()
        cls_c = _guard("cls_c", lambda: losses.cls_loss(losses.select_class(C(x), src)))
        cls_c.backward()
        self.opt_c.step()

        G.zero_grad()
        lambda_id = w.identity_weight(self.step)
        adv_g = _guard("adv_g", lambda: losses.adv_loss_g(D(fake, tgt)[1]))
        cls_g = _guard("cls_g", lambda: losses.cls_loss(losses.select_class(C(fake), tgt)))
        cyc = _guard("cyc", lambda: losses.cyc_loss(x, G(fake, src), w.rho))
        ident = _guard("id", lambda: losses.id_loss(x, G.decode(h, sizes, src), w.rho))
        total = _guard("total_g", lambda: losses.total_g(adv_g, cls_g, cyc, ident, w, lambda_id))
        total.backward()
        self.opt_g.step()
        self.step += 1
        return {"adv_d": adv_d.item(), "adv_g": adv_g.item(), "cls_c": cls_c.item(),
                "cls_g": cls_g.item(), "cyc": cyc.item(), "id": ident.item(),
                "total_g": total.item()}

    # -- checkpoints

    def _optimizers(self) -> dict[str, tuple[nd.Adam, dict]]:
        return {"G": (self.opt_g, self.nets.generator.params),
                "D": (self.opt_d, self.nets.discriminator.params),
                "C": (self.opt_c, self.nets.classifier.params)}

    def checkpoint_bytes(self) -> bytes:
        header = bundle_header(self.bundle)
        header["train_config"] = self.config.to_dict()
        header["step"] = self.step
        header["rng_state"] = self.rng.bit_generator.state
        header["optimizer_steps"] = {}
        tensors = bundle_tensors(self.bundle)
        for tag, (opt, params) in self._optimizers().items():
            header["optimizer_steps"][tag] = opt.state.step_count
            if opt.state.first_moment:
                for name, m, v in zip(params, opt.state.first_moment, opt.state.second_moment):
                    tensors[f"opt.{tag}.m.{name}"] = m
                    tensors[f"opt.{tag}.v.{name}"] = v
        return vio.encode_checkpoint(header, tensors)

    def save(self, path) -> Path:
        vio.atomic_write(path, self.checkpoint_bytes())
        return Path(path)

    def restore(self, path) -> None:
        header, tensors = vio.decode_checkpoint(Path(path).read_bytes())
        bundle = bundle_from_checkpoint(header, tensors)
        if bundle.arch != self.bundle.arch:
            raise ValueError("checkpoint architecture differs from configuration")
        for mine, theirs in ((self.nets.generator, bundle.nets.generator),
                             (self.nets.discriminator, bundle.nets.discriminator),
                             (self.nets.classifier, bundle.nets.classifier)):
            mine.load_state_dict(theirs.state_dict())
        self.bundle.norm = bundle.norm
        self.bundle.f0_stats = bundle.f0_stats
        self.step = int(header["step"])
        self.rng.bit_generator.state = header["rng_state"]
        for tag, (opt, params) in self._optimizers().items():
            opt.state.step_count = int(header["optimizer_steps"][tag])
            if f"opt.{tag}.m.{next(iter(params))}" in tensors:
                opt.state.first_moment = [tensors[f"opt.{tag}.m.{n}"].copy() for n in params]
                opt.state.second_moment = [tensors[f"opt.{tag}.v.{n}"].copy() for n in params]
            else:
                opt.state.first_moment, opt.state.second_moment = [], []


def bundle_header(bundle: ModelBundle) -> dict:
    return {
        "format": "vcstar-checkpoint",
        "architecture": bundle.arch.to_dict(),
        "dsp": bundle.dsp_config.to_dict(),
        "label_schema": [{"category": "speaker", "classes": list(bundle.speakers)}],
        "f0_stats": {k: v.to_dict() for k, v in sorted(bundle.f0_stats.items())},
    }


def bundle_tensors(bundle: ModelBundle) -> dict[str, np.ndarray]:
    tensors = {}
    for tag, net in (("G", bundle.nets.generator), ("D", bundle.nets.discriminator),
                     ("C", bundle.nets.classifier)):
        for name, arr in net.state_dict().items():
            tensors[f"{tag}.{name}"] = arr
    tensors["norm.mean"] = bundle.norm.mean
    tensors["norm.std"] = bundle.norm.std
    return tensors


def bundle_from_checkpoint(header: dict, tensors: dict[str, np.ndarray]) -> ModelBundle:
    if header.get("format") != "vcstar-checkpoint":
        raise vio.FormatError("not a model checkpoint")
    arch = Architecture.from_dict(header["architecture"])
    nets = Networks.create(arch, 0)
    for tag, net in (("G", nets.generator), ("D", nets.discriminator), ("C", nets.classifier)):
        prefix = f"{tag}."
        net.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    speakers = list(header["label_schema"][0]["classes"])
    f0_stats = {k: dsp.F0Stats.from_dict(v) for k, v in header["f0_stats"].items()}
    norm = NormStats(tensors["norm.mean"].copy(), tensors["norm.std"].copy())
    return ModelBundle(nets, norm, speakers, f0_stats, dsp.DspConfig.from_dict(header["dsp"]))


def load_bundle(path) -> ModelBundle:
    header, tensors = vio.decode_checkpoint(Path(path).read_bytes())
    return bundle_from_checkpoint(header, tensors)


def save_bundle(bundle: ModelBundle, path) -> None:
    vio.atomic_write(path, vio.encode_checkpoint(bundle_header(bundle), bundle_tensors(bundle)))


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step:07d}.vcsk"


def train(config: TrainConfig, store: FeatureStore, out_dir, resume_from=None,
          iterations: int | None = None, callback=None) -> list[Path]:
    """Run training to ``iterations`` (default ``config.iterations``) total steps.

    Checkpoints are written before the first step (fresh runs), every
    ``checkpoint_every`` steps and at the end. Metrics are appended to
    ``<out_dir>/metrics.csv``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(config, store)
    total = config.iterations if iterations is None else iterations
    written = []
    if resume_from is not None:
        trainer.restore(resume_from)
    else:
        written.append(trainer.save(checkpoint_path(out_dir, 0)))
    metrics_path = out_dir / "metrics.csv"
    new_file = not metrics_path.exists()
    with metrics_path.open("a", newline="") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(("step",) + METRIC_KEYS)
        while trainer.step < total:
            metrics = trainer.train_step(trainer.next_batch())
            writer.writerow([trainer.step] + [repr(metrics[k]) for k in METRIC_KEYS])
            if callback is not None:
                callback(trainer, metrics)
            if trainer.step % config.checkpoint_every == 0 or trainer.step == total:
                f.flush()
                written.append(trainer.save(checkpoint_path(out_dir, trainer.step)))
    return written


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})
