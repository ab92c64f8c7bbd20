"""Finite-difference gradient suite and exact loss identities, runnable without data."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from . import ndgrad as nd
from .models import Architecture, Network, Networks, one_hot
from .ndgrad import Tensor

GRAD_TOL = 1e-3
IDENTITY_TOL = 1e-6


@dataclass
class CheckResult:
    suite: str
    name: str
    seed: int | None
    value: float
    passed: bool

    def line(self) -> str:
        seed = "" if self.seed is None else f" seed={self.seed}"
        return f"{'PASS' if self.passed else 'FAIL'} {self.suite}:{self.name}{seed} value={self.value:.3g}"


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    def r(*shape, lo=-1.0, hi=1.0):
        return rng.uniform(lo, hi, shape)

    c = 3
    return {
        "add": (lambda a, b: nd.add(a, b), [r(2, 3), r(1, 3)]),
        "sub": (lambda a, b: nd.sub(a, b), [r(2, 3), r(2, 1)]),
        "mul": (lambda a, b: nd.mul(a, b), [r(2, 3), r(2, 3)]),
        "scale": (lambda a: nd.scale(a, -2.5), [r(4)]),
        "exp": (nd.exp, [r(5)]),
        "log": (nd.log, [r(5, lo=0.5, hi=2.0)]),
        "sigmoid": (nd.sigmoid, [r(6, lo=-4, hi=4)]),
        "log_sigmoid": (nd.log_sigmoid, [r(6, lo=-4, hi=4)]),
        "log1mexp": (nd.log1mexp, [r(6, lo=-3.0, hi=-0.1)]),
        "power_abs": (lambda a: nd.power_abs(a, 1.5), [r(6, lo=0.2, hi=1.0) * np.sign(r(6))]),
        "glu": (nd.glu, [r(2, 3, 4), r(2, 3, 4)]),
        "sum_axis": (lambda a: nd.sum_(a, axis=(1, 2)), [r(2, 3, 4)]),
        "mean": (nd.mean, [r(3, 4)]),
        "concat": (lambda a, b: nd.concat([a, b], axis=1), [r(2, 2, 3), r(2, 1, 3)]),
        "narrow": (lambda a: nd.narrow(a, 1, 1, 2), [r(2, 4, 3)]),
        "softmax_channels": (nd.softmax_channels, [r(2, c, 2, 3)]),
        "log_softmax_channels": (nd.log_softmax_channels, [r(2, c, 2, 3)]),
        "lp_loss_rho2": (lambda a, b: nd.lp_loss(a, b, 2.0), [r(2, 5), r(2, 5)]),
        "conv2d": (lambda x, w, b: nd.conv2d(x, w, b, stride=(2, 1), padding=(1, 2)),
                   [r(2, 2, 5, 7), r(3, 2, 3, 5), r(3)]),
        "conv2d_transposed": (lambda x, w, b: nd.conv2d_transposed(x, w, b, stride=2, padding=1,
                                                                   output_padding=1),
                              [r(2, 3, 3, 4), r(3, 2, 4, 4), r(2)]),
        "batch_norm": (lambda x, g, b: nd.batch_norm(x, g, b, np.zeros(c, np.float32),
                                                     np.ones(c, np.float32), True),
                       [r(3, c, 2, 4), r(c, lo=0.5, hi=1.5), r(c)]),
    }


def _network_fn(net: Network, forward: Callable[[Tensor], Tensor]):
    names = list(net.params)

    def fn(x, *params):
        saved = dict(net.params)
        try:
            net.params.update(zip(names, params))
            return forward(x)
        finally:
            net.params.clear()
            net.params.update(saved)

    return fn, [net.params[n].data.copy() for n in names]


def _network_cases(seed: int) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    arch = Architecture.tiny(feature_dim=8, n_classes=3)
    nets = Networks.create(arch, seed)
    rng = np.random.default_rng([seed, 1])
    x = rng.standard_normal((2, 1, 8, 16))
    src = one_hot([0, 2], 3)
    tgt = one_hot([1, 0], 3)
    cases = {}
    fn, params = _network_fn(nets.generator, lambda t: nets.generator(t, tgt))
    cases["generator"] = (fn, [x] + params)
    fn, params = _network_fn(nets.discriminator, lambda t: nets.discriminator(t, src)[1])
    cases["discriminator"] = (fn, [x] + params)
    fn, params = _network_fn(nets.classifier, lambda t: nets.classifier(t))
    cases["classifier"] = (fn, [x] + params)
    return cases


def gradient_suite(seeds=range(5), include_networks: bool = True, tol: float = GRAD_TOL
                   ) -> list[CheckResult]:
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = _op_cases(rng)
        if include_networks:
            cases.update(_network_cases(seed))
        for name, (fn, inputs) in cases.items():
            err = nd.check_gradients(fn, inputs, seed=seed, max_entries=24)
            results.append(CheckResult("gradient", name, seed, err, err < tol))
    return results


def loss_identity_suite(tol: float = IDENTITY_TOL) -> list[CheckResult]:
    out = []

    def record(name, value, expected):
        out.append(CheckResult("loss", name, None, abs(value - expected), abs(value - expected) <= tol))

    half = Tensor(np.full(4, math.log(0.5)))
    record("adv_d_at_half", losses.adv_loss_d(half, half).item(), 2 * math.log(2))
    record("adv_g_at_half", losses.adv_loss_g(half).item(), math.log(2))
    uniform = Tensor(np.full((3, 4, 1, 1), 0.0))
    log_p = nd.log_softmax_channels(uniform)
    per_sample = nd.sum_(log_p, axis=(2, 3))
    record("cls_uniform_4", losses.cls_loss(losses.select_class(per_sample, one_hot([0, 1, 3], 4))).item(),
           math.log(4))
    x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 5, 8)))
    record("cyc_identity", losses.cyc_loss(x, x).item(), 0.0)
    record("id_identity", losses.id_loss(x, x).item(), 0.0)
    w = losses.LossWeights(lambda_cls=1, lambda_cyc=10, lambda_id=5)
    record("total_g_affine", losses.total_g(1.0, 2.0, 3.0, 4.0, w), 53.0)
    comps = [Tensor(np.float32(v)) for v in (1.0, 2.0, 3.0, 4.0)]
    record("total_g_tensor", losses.total_g(*comps, w).item(), 53.0)
    ref = losses.cyclegan_losses(np.full(4, 0.5), np.full(4, 0.5), np.full(4, 0.5), np.full(4, 0.5),
                                 x.data, x.data, x.data, x.data, x.data, x.data)
    record("cyclegan_total_d_at_half", ref.total_d, 4 * math.log(2))
    return out


def run_all(seeds=range(5)) -> dict[str, list[CheckResult]]:
    return {"gradient": gradient_suite(seeds), "loss": loss_identity_suite()}
