"""Training objectives for the generator, discriminator and classifier, plus the
two-generator cycle-consistent objectives kept as reference calculators.

Adversarial and classification terms consume log-probabilities (product pooling
is done in the log domain by the networks). Probabilities entering a log are
clamped into ``[EPS, 1 - EPS]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

EPS = 1e-7
_LOG_1M_EPS = math.log1p(-EPS)


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    rho: float = 1.0
    id_decay_iters: int | None = 10000

    def __post_init__(self):
        if min(self.lambda_cls, self.lambda_cyc, self.lambda_id) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.rho < 1:
            raise ValueError("rho must be >= 1")

    def identity_weight(self, step: int) -> float:
        """Identity weight at ``step``; switched off after ``id_decay_iters`` (None: never)."""
        if self.id_decay_iters is not None and step >= self.id_decay_iters:
            return 0.0
        return self.lambda_id


def _check_log_prob(t: Tensor, name: str) -> None:
    if (t.data > 1e-6).any():
        raise ValueError(f"{name} must contain log-probabilities (<= 0)")


def _batch_mean(t: Tensor) -> Tensor:
    return nd.mean(t) if t.ndim else t


def adv_loss_d(log_d_real: Tensor, log_d_fake: Tensor, log1m_d_fake: Tensor | None = None) -> Tensor:
    """-E[log D(y, c)] - E[log(1 - D(G(x, c), c))].

    ``log1m_d_fake`` may be passed when it was computed alongside ``log_d_fake``;
    otherwise it is derived from it.
    """
    _check_log_prob(log_d_real, "log_d_real")
    _check_log_prob(log_d_fake, "log_d_fake")
    if log1m_d_fake is None:
        log1m_d_fake = log_one_minus(log_d_fake)
    _check_log_prob(log1m_d_fake, "log1m_d_fake")
    return nd.neg(nd.add(_batch_mean(log_d_real), _batch_mean(log1m_d_fake)))


def adv_loss_g(log_d_fake: Tensor) -> Tensor:
    """Non-saturating generator loss -E[log D(G(x, c), c)]."""
    _check_log_prob(log_d_fake, "log_d_fake")
    return nd.neg(_batch_mean(log_d_fake))


def log_one_minus(log_p: Tensor) -> Tensor:
    """log(1 - p) given log p, with p capped at 1 - EPS."""
    return nd.log1mexp(nd.minimum(log_p, _LOG_1M_EPS))


def cls_loss(log_p_target: Tensor) -> Tensor:
    """Negative mean log-probability of the labelled class."""
    _check_log_prob(log_p_target, "log_p_target")
    return nd.neg(_batch_mean(log_p_target))


cls_loss_c = cls_loss
cls_loss_g = cls_loss


def select_class(log_probs: Tensor, labels) -> Tensor:
    """Pick ``log p(c|y)`` per sample from ``[B, K]`` log-probs and ``[B, K]`` one-hot labels."""
    labels = np.asarray(labels, dtype=nd.DTYPE)
    return nd.sum_(nd.mul(log_probs, Tensor(labels)), axis=1)


def cyc_loss(x: Tensor, x_cycled: Tensor, rho: float = 1.0) -> Tensor:
    return nd.lp_loss(x_cycled, x, rho)


def id_loss(x: Tensor, x_id: Tensor, rho: float = 1.0) -> Tensor:
    return nd.lp_loss(x_id, x, rho)


def total_g(adv_g, cls_g, cyc, ident, weights: LossWeights, lambda_id: float | None = None):
    """adv_g + lambda_cls*cls_g + lambda_cyc*cyc + lambda_id*id.

    Works on tensors or plain floats. ``lambda_id`` overrides the weight (used
    by the identity-loss schedule).
    """
    lid = weights.lambda_id if lambda_id is None else lambda_id
    if isinstance(adv_g, Tensor):
        out = adv_g
        for term, w in ((cls_g, weights.lambda_cls), (cyc, weights.lambda_cyc), (ident, lid)):
            if w:
                out = nd.add(out, nd.scale(term, w))
        return out
    return adv_g + weights.lambda_cls * cls_g + weights.lambda_cyc * cyc + lid * ident


def total_d(adv_d):
    return adv_d


def total_c(cls_c):
    return cls_c


# --------------------------------------------------------------------------
# two-generator reference objectives (plain numpy, probabilities in)


def _clamped_log(p) -> np.ndarray:
    return np.log(np.clip(np.asarray(p, dtype=np.float64), EPS, 1 - EPS))


def _l1(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.abs(a - b).reshape(a.shape[0], -1).sum(axis=1).mean())


@dataclass
class CycleGANLosses:
    adv_dy: float
    adv_g: float
    adv_dx: float
    adv_f: float
    cyc: float
    id: float
    total_gf: float
    total_d: float


def cyclegan_losses(dy_real, dy_fake, dx_real, dx_fake, x, y, f_g_x, g_f_y, f_x, g_y,
                    lambda_cyc: float = 10.0, lambda_id: float = 5.0) -> CycleGANLosses:
    """Two-generator objectives.

    ``dy_real = D_Y(y)``, ``dy_fake = D_Y(G(x))``, ``dx_real = D_X(x)``,
    ``dx_fake = D_X(F(y))`` are per-sample probabilities. ``f_g_x = F(G(x))``,
    ``g_f_y = G(F(y))``, ``f_x = F(x)``, ``g_y = G(y)`` are feature batches.
    The generator adversarial terms are the saturating ``E[log(1 - D(.))]`` form.
    """
    adv_dy = -_clamped_log(dy_real).mean() - _clamped_log(1 - np.asarray(dy_fake)).mean()
    adv_g = _clamped_log(1 - np.asarray(dy_fake)).mean()
    adv_dx = -_clamped_log(dx_real).mean() - _clamped_log(1 - np.asarray(dx_fake)).mean()
    adv_f = _clamped_log(1 - np.asarray(dx_fake)).mean()
    cyc = _l1(f_g_x, x) + _l1(g_f_y, y)
    ident = _l1(f_x, x) + _l1(g_y, y)
    return CycleGANLosses(
        adv_dy=float(adv_dy), adv_g=float(adv_g), adv_dx=float(adv_dx), adv_f=float(adv_f),
        cyc=cyc, id=ident,
        total_gf=float(adv_g + adv_f + lambda_cyc * cyc + lambda_id * ident),
        total_d=float(adv_dx + adv_dy),
    )
