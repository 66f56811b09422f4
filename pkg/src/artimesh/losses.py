"""Training losses, regularizers and their weighted composition.

All pixel losses are means over every pixel (and channel) of the image so
the balancing weights are resolution-independent.  Per-sample variants
return one value per batch element; the scalar ops average over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Tensor


@dataclass
class LossWeights:
    lam_im: float = 1.0
    lam_m: float = 10.0
    lam_dt: float = 10.0
    lam_f: float = 10.0
    lam_e: float = 0.01
    lam_d: float = 10.0
    lam_a: float = 0.1
    lam_h: float = 1.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"negative loss weight {k}")


def _as4(img) -> Tensor:
    t = img if isinstance(img, Tensor) else Tensor(np.asarray(img))
    if len(t.shape) == 3:
        t = tape.reshape(t, (1,) + tuple(t.shape))
    return t


def intersection_mask(mask_soft, mask_gt) -> Tensor:
    """M~ = M_hat * M, the soft/ground-truth mask intersection."""
    ms = mask_soft if isinstance(mask_soft, Tensor) else Tensor(np.asarray(mask_soft))
    return tape.mul(ms, mask_gt.numpy() if isinstance(mask_gt, Tensor) else np.asarray(mask_gt))


def loss_image_per_sample(img_hat, img_gt, m_tilde) -> Tensor:
    """Masked L1: mean over H*W*3 of |M~ (I_hat - I)| per sample."""
    ih = _as4(img_hat)
    ig = img_gt.numpy() if isinstance(img_gt, Tensor) else np.asarray(img_gt)
    mt = m_tilde if isinstance(m_tilde, Tensor) else Tensor(np.asarray(m_tilde))
    diff = tape.sub(ih, ig)
    weighted = tape.mul(diff, tape.reshape(mt, tuple(mt.shape) + (1,)))
    return tape.tmean(tape.tabs(weighted), axis=(1, 2, 3))


def loss_image(img_hat, img_gt, mask_soft, mask_gt) -> Tensor:
    mt = intersection_mask(mask_soft, mask_gt)
    return tape.tmean(loss_image_per_sample(img_hat, img_gt, mt))


def loss_mask_per_sample(mask_soft, mask_gt, dt_gt, lam_dt: float = 10.0) -> Tensor:
    """mean (M_hat - M)^2 + lam_dt * mean(M_hat * dt(M)) per sample."""
    ms = mask_soft if isinstance(mask_soft, Tensor) else Tensor(np.asarray(mask_soft))
    if len(ms.shape) == 2:
        ms = tape.reshape(ms, (1,) + tuple(ms.shape))
    mg = mask_gt.numpy() if isinstance(mask_gt, Tensor) else np.asarray(mask_gt)
    dt = dt_gt.numpy() if isinstance(dt_gt, Tensor) else np.asarray(dt_gt)
    diff = tape.sub(ms, mg)
    sq = tape.tmean(tape.mul(diff, diff), axis=(1, 2))
    dt_term = tape.tmean(tape.mul(ms, dt), axis=(1, 2))
    return tape.add(sq, tape.mul(dt_term, lam_dt))


def loss_mask(mask_soft, mask_gt, dt_gt, lam_dt: float = 10.0) -> Tensor:
    return tape.tmean(loss_mask_per_sample(mask_soft, mask_gt, dt_gt, lam_dt))


def loss_feature_per_sample(feat_hat, feat_gt, m_tilde) -> Tensor:
    """Masked MSE over H*W*D' of M~ (F_hat - F') per sample."""
    fh = _as4(feat_hat)
    fg = feat_gt.numpy() if isinstance(feat_gt, Tensor) else np.asarray(feat_gt)
    mt = m_tilde if isinstance(m_tilde, Tensor) else Tensor(np.asarray(m_tilde))
    diff = tape.mul(tape.sub(fh, fg), tape.reshape(mt, tuple(mt.shape) + (1,)))
    return tape.tmean(tape.mul(diff, diff), axis=(1, 2, 3))


def loss_feature(feat_hat, feat_gt, m_tilde) -> Tensor:
    return tape.tmean(loss_feature_per_sample(feat_hat, feat_gt, m_tilde))


def reg_deform(delta_v) -> Tensor:
    """Mean squared displacement norm over vertices (and batch)."""
    dv = delta_v if isinstance(delta_v, Tensor) else Tensor(np.asarray(delta_v))
    return tape.tmean(tape.tsum(tape.mul(dv, dv), axis=-1))


def reg_articulation(angles) -> Tensor:
    """Mean squared Euler-angle norm over bones (and batch)."""
    a = angles if isinstance(angles, Tensor) else Tensor(np.asarray(angles))
    return tape.tmean(tape.tsum(tape.mul(a, a), axis=-1))


def loss_hypothesis_per_sample(sigma_k: Tensor, recon_k: Tensor) -> Tensor:
    """(sigma_k - sg[L~_k])^2; no gradient into the reconstruction."""
    target = recon_k.detach() if isinstance(recon_k, Tensor) else Tensor(np.asarray(recon_k))
    d = tape.sub(sigma_k, target)
    return tape.mul(d, d)


def loss_hypothesis(sigma_k, recon_k) -> Tensor:
    s = sigma_k if isinstance(sigma_k, Tensor) else Tensor(np.asarray(sigma_k))
    return tape.tmean(loss_hypothesis_per_sample(s, recon_k))


def reconstruction_per_sample(l_im: Tensor, l_m: Tensor, l_f: Tensor,
                              w: LossWeights) -> Tensor:
    """L~_k = lam_im L_im + lam_m L_m + lam_f L_feat, per sample."""
    out = tape.mul(l_im, w.lam_im)
    out = tape.add(out, tape.mul(l_m, w.lam_m))
    return tape.add(out, tape.mul(l_f, w.lam_f))


def total_objective(recon_k: Tensor, p_k: Tensor, sigma_k: Tensor,
                    r_eik: Tensor, r_def: Tensor, r_art: Tensor,
                    w: LossWeights) -> tuple[Tensor, dict]:
    """L = mean_s p_k L~_k + lam_E R_Eik + lam_d R_def + lam_a R_art
         + lam_h L_hyp.

    Gradient flows through p_k (no detach on the probability factor); the
    regularizers are hypothesis-independent.
    """
    hyp = loss_hypothesis_per_sample(sigma_k, recon_k)
    weighted = tape.tmean(tape.mul(p_k, recon_k))
    total = weighted
    total = tape.add(total, tape.mul(r_eik, w.lam_e))
    total = tape.add(total, tape.mul(r_def, w.lam_d))
    total = tape.add(total, tape.mul(r_art, w.lam_a))
    total = tape.add(total, tape.mul(tape.tmean(hyp), w.lam_h))
    parts = {
        "recon": float(tape.tmean(recon_k).numpy()),
        "weighted_recon": float(weighted.numpy()),
        "hyp": float(tape.tmean(hyp).numpy()),
    }
    return total, parts
