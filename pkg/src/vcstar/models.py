"""Generator, real/fake discriminator and domain classifier.

All three are fully convolutional gated CNNs operating on feature sequences
shaped as 1-channel images ``[B, 1, Q, N]``. Every gated layer runs its linear
and gate branches as one fused convolution with ``2*C`` output channels,
normalizes them, and combines the halves with a GLU.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import ndgrad as nd
from .ndgrad import DimensionError, Tensor

class ArchitectureError(ValueError):
    pass


# --------------------------------------------------------------------------
# labels


@dataclass(frozen=True)
class AttributeLabel:
    """Concatenated one-hot vectors, one per attribute category.

    ``categories`` holds ``(class_count, active_index)`` pairs.
    """

    categories: tuple[tuple[int, int], ...]

    def __post_init__(self):
        for count, index in self.categories:
            if count < 1 or not 0 <= index < count:
                raise ValueError(f"invalid category ({count}, {index})")

    @classmethod
    def single(cls, index: int, n_classes: int) -> "AttributeLabel":
        return cls(((n_classes, index),))

    @property
    def dim(self) -> int:
        return sum(count for count, _ in self.categories)

    def vector(self) -> np.ndarray:
        parts = []
        for count, index in self.categories:
            v = np.zeros(count, dtype=nd.DTYPE)
            v[index] = 1
            parts.append(v)
        return np.concatenate(parts)


def one_hot(indices: Sequence[int], n_classes: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros((indices.size, n_classes), dtype=nd.DTYPE)
    out[np.arange(indices.size), indices] = 1
    return out


def tile_label(c, q: int, n: int) -> np.ndarray:
    """Tile a label vector into a ``[|c|, q, n]`` stack of constant planes."""
    if q < 1 or n < 1:
        raise ValueError("tile sizes must be >= 1")
    vec = c.vector() if isinstance(c, AttributeLabel) else np.asarray(c, dtype=nd.DTYPE)
    return np.broadcast_to(vec.reshape(-1, 1, 1), (vec.size, q, n)).astype(nd.DTYPE)


def _with_label(h: Tensor, labels: np.ndarray) -> Tensor:
    b, _, q, n = h.shape
    planes = np.broadcast_to(labels.reshape(b, -1, 1, 1), (b, labels.shape[1], q, n))
    return nd.concat([h, Tensor(np.ascontiguousarray(planes))], axis=1)


# --------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class LayerSpec:
    channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)

    @property
    def padding(self) -> tuple[int, int]:
        # odd kernels: floor(k/2); even kernels: (k - s)/2, which halves exactly
        return tuple((k - 1) // 2 if k % 2 else (k - s) // 2
                     for k, s in zip(self.kernel, self.stride))

    def validate(self) -> None:
        if self.channels < 1:
            raise ArchitectureError("channels must be >= 1")
        for k, s in zip(self.kernel, self.stride):
            if k < 1 or s < 1 or k < s:
                raise ArchitectureError(f"bad kernel/stride {self.kernel}/{self.stride}")
            if k % 2 == 0 and (k - s) % 2:
                raise ArchitectureError(
                    f"kernel {self.kernel} with stride {self.stride} needs asymmetric padding")


def _layers(raw) -> tuple[LayerSpec, ...]:
    return tuple(l if isinstance(l, LayerSpec) else
                 LayerSpec(int(l["channels"]), tuple(l["kernel"]), tuple(l.get("stride", (1, 1))))
                 for l in raw)


@dataclass(frozen=True)
class Architecture:
    """Layer layout for all three networks.

    ``feature_dim`` is the height Q the networks see; ``n_classes`` the total
    label dimension.
    """

    feature_dim: int = 35
    n_classes: int = 4
    gen_encoder: tuple[LayerSpec, ...] = (
        LayerSpec(32, (3, 9), (1, 1)),
        LayerSpec(64, (4, 8), (2, 2)),
        LayerSpec(128, (4, 8), (2, 2)),
    )
    gen_decoder: tuple[LayerSpec, ...] = (
        LayerSpec(64, (4, 8), (2, 2)),
        LayerSpec(32, (4, 8), (2, 2)),
    )
    gen_output_kernel: tuple[int, int] = (3, 9)
    disc_layers: tuple[LayerSpec, ...] = (
        LayerSpec(32, (3, 3), (2, 2)),
        LayerSpec(32, (3, 3), (2, 2)),
        LayerSpec(32, (3, 3), (2, 2)),
        LayerSpec(32, (3, 3), (2, 2)),
    )
    cls_layers: tuple[LayerSpec, ...] = (
        LayerSpec(32, (3, 3), (2, 2)),
        LayerSpec(32, (3, 3), (2, 2)),
        LayerSpec(32, (3, 3), (2, 2)),
        LayerSpec(32, (3, 3), (2, 2)),
    )
    batch_norm: bool = True

    def __post_init__(self):
        for name in ("gen_encoder", "gen_decoder", "disc_layers", "cls_layers"):
            object.__setattr__(self, name, _layers(getattr(self, name)))
        object.__setattr__(self, "gen_output_kernel", tuple(self.gen_output_kernel))
        self.validate()

    def validate(self) -> None:
        if self.feature_dim < 1 or self.n_classes < 1:
            raise ArchitectureError("feature_dim and n_classes must be >= 1")
        if not self.gen_encoder or not self.disc_layers or not self.cls_layers:
            raise ArchitectureError("every network needs at least one gated layer")
        for spec in self.gen_encoder + self.gen_decoder + self.disc_layers + self.cls_layers:
            spec.validate()
        LayerSpec(1, self.gen_output_kernel).validate()
        if len(self.gen_decoder) >= len(self.gen_encoder) + 1:
            raise ArchitectureError("decoder cannot be deeper than the encoder")
        enc = np.prod([s.stride for s in self.gen_encoder], axis=0)
        dec = np.prod([s.stride for s in self.gen_decoder], axis=0) if self.gen_decoder else (1, 1)
        if tuple(enc) != tuple(dec):
            raise ArchitectureError("decoder strides must undo encoder strides")
        unmatched = self.gen_encoder[: len(self.gen_encoder) - len(self.gen_decoder)]
        if any(s.stride != (1, 1) for s in unmatched):
            raise ArchitectureError("encoder layers without a decoder mirror must have stride 1")

    @property
    def min_length(self) -> int:
        """Smallest admissible N: the product of encoder time strides."""
        return int(np.prod([s.stride[1] for s in self.gen_encoder]))

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("gen_encoder", "gen_decoder", "disc_layers", "cls_layers"):
            d[name] = [{"channels": l["channels"], "kernel": list(l["kernel"]),
                        "stride": list(l["stride"])} for l in d[name]]
        d["gen_output_kernel"] = list(self.gen_output_kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)

    @classmethod
    def tiny(cls, feature_dim: int, n_classes: int) -> "Architecture":
        """Small stack used for fast CPU experiments and the convergence checks."""
        return cls(
            feature_dim=feature_dim,
            n_classes=n_classes,
            gen_encoder=(LayerSpec(16, (3, 5)), LayerSpec(32, (4, 4), (2, 2)),
                         LayerSpec(32, (4, 4), (2, 2))),
            gen_decoder=(LayerSpec(32, (4, 4), (2, 2)), LayerSpec(16, (4, 4), (2, 2))),
            gen_output_kernel=(3, 5),
            disc_layers=(LayerSpec(16, (3, 3), (2, 2)), LayerSpec(16, (3, 3), (2, 2))),
            cls_layers=(LayerSpec(16, (3, 3), (2, 2)), LayerSpec(16, (3, 3), (2, 2))),
        )


# --------------------------------------------------------------------------
# networks


class Network:
    """Parameter/buffer bookkeeping shared by the three networks."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def train(self, mode: bool = True) -> "Network":
        self.training = mode
        return self

    def eval(self) -> "Network":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param.{k}": v.data for k, v in self.params.items()}
        state.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for key, arr in state.items():
            kind, name = key.split(".", 1)
            target = self.params[name].data if kind == "param" else self.buffers[name]
            if target.shape != arr.shape:
                raise DimensionError(f"{key}: shape {arr.shape} != {target.shape}")
            target[...] = arr

    # -- construction helpers

    def _add_gated(self, name: str, cin: int, spec: LayerSpec, rng: np.random.Generator,
                   transposed: bool, batch_norm: bool) -> None:
        kh, kw = spec.kernel
        c = spec.channels
        if transposed:
            fan_in = cin * kh * kw / (spec.stride[0] * spec.stride[1])
            shape = (cin, c, kh, kw)
        else:
            fan_in = cin * kh * kw
            shape = (c, cin, kh, kw)
        bound = math.sqrt(3.0 / fan_in)
        self.params[f"{name}.W"] = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)
        self.params[f"{name}.V"] = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)
        if batch_norm:
            # batch norm's shift makes conv biases redundant
            self.params[f"{name}.bn_gamma"] = Tensor(np.ones(2 * c), requires_grad=True)
            self.params[f"{name}.bn_beta"] = Tensor(np.zeros(2 * c), requires_grad=True)
            self.buffers[f"{name}.bn_mean"] = np.zeros(2 * c, dtype=nd.DTYPE)
            self.buffers[f"{name}.bn_var"] = np.ones(2 * c, dtype=nd.DTYPE)
        else:
            self.params[f"{name}.b"] = Tensor(np.zeros(c), requires_grad=True)
            self.params[f"{name}.d"] = Tensor(np.zeros(c), requires_grad=True)

    def _add_linear(self, name: str, cin: int, cout: int, kernel, rng) -> None:
        kh, kw = kernel
        bound = math.sqrt(3.0 / (cin * kh * kw))
        self.params[f"{name}.W"] = Tensor(rng.uniform(-bound, bound, (cout, cin, kh, kw)),
                                          requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)

    def _gated(self, name: str, h: Tensor, spec: LayerSpec, transposed: bool = False,
               output_padding=(0, 0)) -> Tensor:
        p = self.params
        c = spec.channels
        if transposed:
            weight = nd.concat([p[f"{name}.W"], p[f"{name}.V"]], axis=1)
        else:
            weight = nd.concat([p[f"{name}.W"], p[f"{name}.V"]], axis=0)
        bias = nd.concat([p[f"{name}.b"], p[f"{name}.d"]], axis=0) if f"{name}.b" in p else None
        if transposed:
            z = nd.conv2d_transposed(h, weight, bias, spec.stride, spec.padding, output_padding)
        else:
            z = nd.conv2d(h, weight, bias, spec.stride, spec.padding)
        if f"{name}.bn_gamma" in p:
            z = nd.batch_norm(z, p[f"{name}.bn_gamma"], p[f"{name}.bn_beta"],
                              self.buffers[f"{name}.bn_mean"], self.buffers[f"{name}.bn_var"],
                              self.training)
        return nd.glu(nd.narrow(z, 1, 0, c), nd.narrow(z, 1, c, c))

    def _linear(self, name: str, h: Tensor, kernel) -> Tensor:
        pad = tuple((k - 1) // 2 for k in kernel)
        return nd.conv2d(h, self.params[f"{name}.W"], self.params[f"{name}.b"], 1, pad)


def _check_input(x: Tensor, arch: Architecture) -> None:
    if x.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"expected [B, 1, Q, N] input, got {x.shape}")
    if x.shape[2] != arch.feature_dim:
        raise DimensionError(f"feature height {x.shape[2]} != configured {arch.feature_dim}")
    if x.shape[3] < arch.min_length:
        raise DimensionError(f"sequence length {x.shape[3]} below minimum {arch.min_length}")


def _check_labels(labels: np.ndarray, batch: int, arch: Architecture) -> np.ndarray:
    labels = np.asarray(labels, dtype=nd.DTYPE)
    if labels.ndim == 1:
        labels = np.broadcast_to(labels, (batch, labels.size))
    if labels.shape != (batch, arch.n_classes):
        raise DimensionError(f"label shape {labels.shape} != ({batch}, {arch.n_classes})")
    return labels


class Generator(Network):
    """Encoder-decoder gated CNN; the label enters every decoder layer input."""

    def __init__(self, arch: Architecture, seed: int = 0):
        super().__init__()
        self.arch = arch
        rng = np.random.default_rng([seed, 0])
        cin = 1
        for i, spec in enumerate(arch.gen_encoder):
            self._add_gated(f"enc{i}", cin, spec, rng, False, arch.batch_norm)
            cin = spec.channels
        for i, spec in enumerate(arch.gen_decoder):
            self._add_gated(f"dec{i}", cin + arch.n_classes, spec, rng, True, arch.batch_norm)
            cin = spec.channels
        self._add_linear("out", cin + arch.n_classes, 1, arch.gen_output_kernel, rng)

    def encode(self, x: Tensor) -> tuple[Tensor, list[tuple[int, int]]]:
        sizes = [x.shape[2:]]
        h = x
        for i, spec in enumerate(self.arch.gen_encoder):
            h = self._gated(f"enc{i}", h, spec)
            sizes.append(h.shape[2:])
        return h, sizes

    def decode(self, h: Tensor, sizes, labels: np.ndarray) -> Tensor:
        depth = len(self.arch.gen_encoder)
        for j, spec in enumerate(self.arch.gen_decoder):
            target = sizes[depth - 1 - j]
            h = _with_label(h, labels)
            base = [(n - 1) * s - 2 * p + k for n, s, p, k in
                    zip(h.shape[2:], spec.stride, spec.padding, spec.kernel)]
            op = tuple(t - b for t, b in zip(target, base))
            if any(not 0 <= o < s for o, s in zip(op, spec.stride)):
                raise DimensionError(f"decoder cannot reach size {target} from {h.shape[2:]}")
            h = self._gated(f"dec{j}", h, spec, transposed=True, output_padding=op)
        h = _with_label(h, labels)
        return self._linear("out", h, self.arch.gen_output_kernel)

    def __call__(self, x: Tensor, labels) -> Tensor:
        _check_input(x, self.arch)
        labels = _check_labels(labels, x.shape[0], self.arch)
        h, sizes = self.encode(x)
        return self.decode(h, sizes, labels)


class Discriminator(Network):
    """PatchGAN-style real/fake discriminator conditioned on the label at every layer.

    Calling it returns ``(patch_probs, log_d)`` where ``log_d`` is the per-sample
    sum of per-patch log-probabilities, i.e. the log of their product.
    """

    def __init__(self, arch: Architecture, seed: int = 0):
        super().__init__()
        self.arch = arch
        rng = np.random.default_rng([seed, 1])
        cin = 1
        for i, spec in enumerate(arch.disc_layers):
            self._add_gated(f"layer{i}", cin + arch.n_classes, spec, rng, False, arch.batch_norm)
            cin = spec.channels
        self._add_linear("out", cin + arch.n_classes, 1, (1, 1), rng)

    def logits(self, y: Tensor, labels) -> Tensor:
        _check_input(y, self.arch)
        labels = _check_labels(labels, y.shape[0], self.arch)
        h = y
        for i, spec in enumerate(self.arch.disc_layers):
            h = self._gated(f"layer{i}", _with_label(h, labels), spec)
        return self._linear("out", _with_label(h, labels), (1, 1))

    def __call__(self, y: Tensor, labels) -> tuple[Tensor, Tensor]:
        z = self.logits(y, labels)
        return nd.sigmoid(z), nd.sum_(nd.log_sigmoid(z), axis=(1, 2, 3))


class Classifier(Network):
    """Domain classifier: per-segment softmax, combined by product pooling."""

    def __init__(self, arch: Architecture, seed: int = 0):
        super().__init__()
        self.arch = arch
        rng = np.random.default_rng([seed, 2])
        cin = 1
        for i, spec in enumerate(arch.cls_layers):
            self._add_gated(f"layer{i}", cin, spec, rng, False, arch.batch_norm)
            cin = spec.channels
        self._add_linear("out", cin, arch.n_classes, (1, 1), rng)

    def segment_log_probs(self, y: Tensor) -> Tensor:
        """Per-segment log class probabilities, ``[B, K, H', W']``."""
        _check_input(y, self.arch)
        h = y
        for i, spec in enumerate(self.arch.cls_layers):
            h = self._gated(f"layer{i}", h, spec)
        return nd.log_softmax_channels(self._linear("out", h, (1, 1)))

    def __call__(self, y: Tensor) -> Tensor:
        """Aggregate log-probability per class, ``[B, K]`` (sum over segments)."""
        return nd.sum_(self.segment_log_probs(y), axis=(2, 3))


def pool_log_probs(segment_log_probs: Tensor) -> Tensor:
    return nd.sum_(segment_log_probs, axis=(2, 3))


def renormalize(aggregate: np.ndarray) -> np.ndarray:
    """Normalized class distribution from product-pooled log-probabilities."""
    a = np.asarray(aggregate, dtype=np.float64)
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Networks:
    arch: Architecture
    generator: Generator
    discriminator: Discriminator
    classifier: Classifier

    @classmethod
    def create(cls, arch: Architecture, seed: int = 0) -> "Networks":
        return cls(arch, Generator(arch, seed), Discriminator(arch, seed), Classifier(arch, seed))

    def train(self, mode: bool = True) -> None:
        for net in (self.generator, self.discriminator, self.classifier):
            net.train(mode)

    def eval(self) -> None:
        self.train(False)


def init_params(arch: Architecture, seed: int = 0) -> Networks:
    """Fan-in scaled uniform initialization of all three networks."""
    return Networks.create(arch, seed)
