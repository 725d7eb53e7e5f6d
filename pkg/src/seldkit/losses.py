"""Multitask losses: weighted cross-entropy + MSE, and homogeneous MSE.

The detection term is summed over classes, the localization term over
classes and coordinates; both are then averaged over batch items and output
frames so magnitudes stay comparable across segment lengths while the
configured weight ratio is preserved. Inactive (class, frame) cells regress
the direction vector to zero unless the masked mode is enabled.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CE_PLUS_MSE = "ce_mse"
MSE_ONLY = "mse"
LOSS_KINDS = (CE_PLUS_MSE, MSE_ONLY)


@dataclass
class LossConfig:
    kind: str = MSE_ONLY
    w_ce: float = 1.0
    w_mse: float = 1.0
    ce_clip_eps: float = 1e-7
    mask_inactive_doa: bool = False

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}, expected one of {LOSS_KINDS}")
        if not (np.isfinite(self.w_ce) and np.isfinite(self.w_mse)):
            raise ValueError("loss weights must be finite")
        if self.w_ce < 0 or self.w_mse < 0:
            raise ValueError("loss weights must be nonnegative")

    def label(self):
        if self.kind == MSE_ONLY:
            return "mse"
        return f"ce{self.w_ce:g}_mse{self.w_mse:g}"


@dataclass
class LossBreakdown:
    """Differentiable total plus its two terms (all scalar Tensors)."""

    total: ad.Tensor
    sed_term: ad.Tensor
    doa_term: ad.Tensor

    def values(self):
        return (float(self.total.data), float(self.sed_term.data),
                float(self.doa_term.data))


def _check_targets(activity_pred, doa_pred, activity_true, doa_true):
    activity_true = np.asarray(activity_true)
    doa_true = np.asarray(doa_true)
    if activity_pred.data.shape != activity_true.shape:
        raise ValueError(f"activity shape mismatch: {activity_pred.data.shape} "
                         f"vs {activity_true.shape}")
    if doa_pred.data.shape != doa_true.shape:
        raise ValueError(f"doa shape mismatch: {doa_pred.data.shape} vs {doa_true.shape}")
    if not np.all((activity_true == 0) | (activity_true == 1)):
        raise ValueError("target activity must be 0/1")
    return activity_true, doa_true


def _doa_term(doa_pred, doa_true, activity_true, masked):
    diff = ad.sub(doa_pred, doa_true)
    if masked:
        diff = ad.mul(diff, activity_true[:, :, :, None])
    # sum over classes and coordinates, mean over batch x frames
    per_frame = ad.reduce_sum(ad.square(diff), axis=(-1, -2))
    return ad.reduce_mean(per_frame)


def ce_mse_loss(activity_pred, doa_pred, activity_true, doa_true, cfg: LossConfig):
    """Weighted sigmoid cross-entropy (detection) plus squared error (DOA)."""
    activity_true, doa_true = _check_targets(activity_pred, doa_pred,
                                             activity_true, doa_true)
    eps = cfg.ce_clip_eps
    p = ad.clip(activity_pred, eps, 1.0 - eps)
    ce = ad.neg(ad.add(ad.mul(activity_true, ad.log(p)),
                       ad.mul(1.0 - activity_true, ad.log(ad.sub(1.0, p)))))
    sed = ad.reduce_mean(ad.reduce_sum(ce, axis=-1))
    doa = _doa_term(doa_pred, doa_true, activity_true, cfg.mask_inactive_doa)
    total = ad.add(ad.mul(sed, cfg.w_ce), ad.mul(doa, cfg.w_mse))
    return LossBreakdown(total=total, sed_term=sed, doa_term=doa)


def mse_loss(activity_pred, doa_pred, activity_true, doa_true,
             cfg: LossConfig = None):
    """Homogeneous squared-error loss on both branches, unweighted."""
    cfg = cfg or LossConfig(kind=MSE_ONLY)
    activity_true, doa_true = _check_targets(activity_pred, doa_pred,
                                             activity_true, doa_true)
    sed = ad.reduce_mean(ad.reduce_sum(ad.square(ad.sub(activity_pred, activity_true)),
                                       axis=-1))
    doa = _doa_term(doa_pred, doa_true, activity_true, cfg.mask_inactive_doa)
    total = ad.add(sed, doa)
    return LossBreakdown(total=total, sed_term=sed, doa_term=doa)


def compute_loss(activity_pred, doa_pred, activity_true, doa_true, cfg: LossConfig):
    if cfg.kind == MSE_ONLY:
        return mse_loss(activity_pred, doa_pred, activity_true, doa_true, cfg)
    return ce_mse_loss(activity_pred, doa_pred, activity_true, doa_true, cfg)
