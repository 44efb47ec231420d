"""Binary losses with label smoothing, the focal mix, and the distillation objective."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor


@dataclass(frozen=True)
class LossConfig:
    smooth_pos: float = 0.95
    smooth_neg: float = 0.05
    gamma: float = 1.0
    alpha: float = 0.4
    lambda_bce: float = 0.01
    lambda_focal: float = 1.0
    pos_weight: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("loss.gamma must be >= 0")
        if not 0 < self.alpha < 1:
            raise ValueError("loss.alpha must lie in (0, 1)")
        if self.lambda_bce < 0 or self.lambda_focal < 0:
            raise ValueError("loss.lambda_bce and loss.lambda_focal must be >= 0")
        if not (0 <= self.smooth_neg <= 1 and 0 <= self.smooth_pos <= 1):
            raise ValueError("loss smoothing targets must lie in [0, 1]")
        if self.pos_weight <= 0:
            raise ValueError("loss.pos_weight must be > 0")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    alpha_start: float = 0.8
    alpha_end: float = 0.5
    beta_feat: float = 0.1
    beta_rel: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("distill.temperature must be > 0")
        for f in ("alpha_start", "alpha_end"):
            if not 0 <= getattr(self, f) <= 1:
                raise ValueError(f"distill.{f} must lie in [0, 1]")
        if self.beta_feat < 0 or self.beta_rel < 0:
            raise ValueError("distill betas must be >= 0")


def _labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 1 and n > 1:
        y = np.full(n, y[0])
    return y


def bce_terms(z, y, cfg: LossConfig) -> Tensor:
    """Per-example smoothed, class-weighted BCE (no reduction)."""
    z = nc.as_tensor(z).reshape(-1)
    y = _labels(y, z.shape[0])
    target = np.where(y > 0.5, cfg.smooth_pos, cfg.smooth_neg)
    w = np.where(y > 0.5, cfg.pos_weight, 1.0)
    # log(1 - sigmoid(z)) == log_sigmoid(-z)
    ll = nc.log_sigmoid(z) * target + nc.log_sigmoid(-z) * (1.0 - target)
    return ll * (-w)


def bce_smoothed(z, y, cfg: LossConfig = LossConfig()) -> Tensor:
    return nc.mean(bce_terms(z, y, cfg))


def focal_terms(z, y, cfg: LossConfig) -> Tensor:
    z = nc.as_tensor(z).reshape(-1)
    y = _labels(y, z.shape[0])
    bce = bce_terms(z, y, cfg)
    sign = np.where(y > 0.5, 1.0, -1.0)
    alpha_t = np.where(y > 0.5, cfg.alpha, 1.0 - cfg.alpha)
    # (1 - p_t)^gamma = sigmoid(-sign*z)^gamma, kept in log space
    mod = nc.exp(nc.log_sigmoid(z * (-sign)) * cfg.gamma) if cfg.gamma else Tensor(np.ones(z.shape[0]))
    return bce * cfg.lambda_bce + bce * mod * (alpha_t * cfg.lambda_focal)


def focal_mix(z, y, cfg: LossConfig = LossConfig()) -> Tensor:
    return nc.mean(focal_terms(z, y, cfg))


def alpha_schedule(frac: float, cfg: DistillConfig = DistillConfig()) -> float:
    """Cosine from alpha_start at frac=0 to alpha_end at frac=1."""
    f = min(max(frac, 0.0), 1.0)
    return cfg.alpha_end + 0.5 * (cfg.alpha_start - cfg.alpha_end) * (1.0 + math.cos(math.pi * f))


def kd_bernoulli(z_student, z_teacher, T: float) -> Tensor:
    """T^2 * KL(Bern(sigmoid(z_t/T)) || Bern(sigmoid(z_s/T))), mean over the batch."""
    zs = nc.as_tensor(z_student).reshape(-1) * (1.0 / T)
    zt = np.asarray(getattr(z_teacher, "data", z_teacher), dtype=np.float64).reshape(-1) / T
    p = nc._sigmoid_np(zt)
    lp = -np.logaddexp(0.0, -zt)
    lq = -np.logaddexp(0.0, zt)
    ent = p * lp + (1.0 - p) * lq  # teacher neg-entropy, constant
    cross = nc.log_sigmoid(zs) * p + nc.log_sigmoid(-zs) * (1.0 - p)
    return nc.mean(ent - cross) * (T * T)


def cosine_gram(h) -> Tensor:
    h = nc.as_tensor(h)
    norm = nc.sqrt(nc.tsum(h * h, axis=1, keepdims=True) + 1e-12)
    u = h / norm
    return u @ u.T


def relational_loss(h_teacher, h_student) -> Tensor:
    """Squared Frobenius distance of cosine Gram matrices, divided by B^2."""
    gt = cosine_gram(np.asarray(getattr(h_teacher, "data", h_teacher)))
    gs = cosine_gram(h_student)
    diff = gs - gt.data
    b = diff.shape[0]
    return nc.tsum(diff * diff) * (1.0 / (b * b))


@dataclass
class DistillParts:
    total: Tensor
    sup: float
    kd: float
    feat: float
    rel: float
    alpha: float


def distill_loss(h_student, z_student, h_teacher, z_teacher, y, step_fraction: float,
                 proj, cfg: DistillConfig = DistillConfig(),
                 loss_cfg: LossConfig = LossConfig()) -> DistillParts:
    """(1-a) L_sup + a L_KD + beta_feat L_feat + beta_rel L_rel on one batch."""
    a = alpha_schedule(step_fraction, cfg)
    sup = focal_mix(z_student, y, loss_cfg)
    kd = kd_bernoulli(z_student, z_teacher, cfg.temperature)
    ht = np.asarray(getattr(h_teacher, "data", h_teacher), dtype=np.float64)
    d = proj(nc.as_tensor(h_student)) - ht
    feat = nc.mean(d * d)
    total = sup * (1.0 - a) + kd * a + feat * cfg.beta_feat
    rel_val = 0.0
    if cfg.beta_rel > 0:
        if ht.shape[0] < 2:
            warnings.warn("relational distillation needs batch >= 2; term disabled", RuntimeWarning)
        else:
            rel = relational_loss(ht, h_student)
            total = total + rel * cfg.beta_rel
            rel_val = rel.item()
    return DistillParts(total, sup.item(), kd.item(), feat.item(), rel_val, a)
