"""Loss terms and image metrics.

Every loss has a ``*_and_grad`` twin returning the gradient w.r.t. the
predicted image, which the trainer feeds to the rasterizer backward pass.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0


@dataclass
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_depth: float = 0.5
    depth_decay_steps: int = 500
    joint: float = 1.0
    static: float = 0.1
    dynamic: float = 0.1

    def __post_init__(self):
        for name in ("lambda_ssim", "lambda_depth", "joint", "static", "dynamic"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _as_channels(img):
    img = np.asarray(img, dtype=float)
    return img[..., None] if img.ndim == 2 else img


def _expand_mask(mask, img):
    mask = np.asarray(mask, dtype=float)
    return mask[..., None] if img.ndim == mask.ndim + 1 else mask


# ---------------------------------------------------------------------------
# L1


def l1_masked_and_grad(pred, gt, mask, mask_pred=True):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    m = _expand_mask(mask, pred)
    if mask_pred:
        per_px = pred.size // m.size if m.size else 1
        count = float(np.sum(m)) * per_px
        if count == 0:
            log.warning("l1_masked: empty mask, returning 0")
            return 0.0, np.zeros_like(pred)
        diff = (pred - gt) * m
        return float(np.sum(np.abs(diff)) / count), np.sign(diff) * m / count
    diff = pred - gt * m
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def l1_masked(pred, gt, mask, mask_pred=True) -> float:
    """Masked mean absolute error.

    With ``mask_pred`` the mean runs over masked pixels only; otherwise the
    prediction is compared everywhere against the masked ground truth.
    """
    return l1_masked_and_grad(pred, gt, mask, mask_pred)[0]


# ---------------------------------------------------------------------------
# SSIM


def _window(h, w):
    size = min(SSIM_WINDOW, h, w)
    if size % 2 == 0:
        size -= 1
    size = max(size, 1)
    r = size // 2
    x = np.arange(size) - r
    k = np.exp(-(x * x) / (2 * SSIM_SIGMA ** 2))
    return k / k.sum(), r


def _blur(x, k, r):
    # x: (..., H, W, C) -> valid region (..., H-2r, W-2r, C)
    y = correlate1d(x, k, axis=-3, mode="constant")
    y = correlate1d(y, k, axis=-2, mode="constant")
    H, W = x.shape[-3], x.shape[-2]
    return y[..., r:H - r, r:W - r, :]


def _blur_adjoint(g, k, r, H, W):
    full = np.zeros(g.shape[:-3] + (H, W, g.shape[-1]))
    full[..., r:H - r, r:W - r, :] = g
    y = correlate1d(full, k, axis=-3, mode="constant")
    return correlate1d(y, k, axis=-2, mode="constant")


def _ssim_terms(a, b):
    k, r = _window(a.shape[0], a.shape[1])
    stack = np.stack([a, b, a * a, b * b, a * b])
    mu_a, mu_b, e_aa, e_bb, e_ab = _blur(stack, k, r)
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * (e_ab - mu_a * mu_b) + SSIM_C2
    B1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    B2 = (e_aa - mu_a ** 2) + (e_bb - mu_b ** 2) + SSIM_C2
    smap = A1 * A2 / (B1 * B2)
    return smap, (k, r, mu_a, mu_b, A1, A2, B1, B2)


def ssim(a, b) -> float:
    """Mean SSIM (Gaussian 11x11 window, sigma 1.5) over the valid region,
    averaged over channels.  Images smaller than the window use the largest
    odd window that fits."""
    a, b = _as_channels(a), _as_channels(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(_ssim_terms(a, b)[0]))


def ssim_and_grad(a, b):
    """SSIM value and its gradient w.r.t. the first image."""
    squeeze = np.ndim(a) == 2
    a, b = _as_channels(a), _as_channels(b)
    smap, (k, r, mu_a, mu_b, A1, A2, B1, B2) = _ssim_terms(a, b)
    g = 1.0 / smap.size
    g_mu_a = g * smap * (2 * mu_b / A1 - 2 * mu_b / A2 - 2 * mu_a / B1 + 2 * mu_a / B2)
    g_e_aa = -g * smap / B2
    g_e_ab = 2 * g * smap / A2
    H, W = a.shape[0], a.shape[1]
    back = _blur_adjoint(np.stack([g_mu_a, g_e_aa, g_e_ab]), k, r, H, W)
    grad = back[0] + 2 * a * back[1] + b * back[2]
    return float(np.mean(smap)), (grad[..., 0] if squeeze else grad)


# ---------------------------------------------------------------------------
# composite losses


def static_loss_and_grad(render_static, gt, mask, lambda_ssim=0.2):
    m = _expand_mask(mask, np.asarray(render_static))
    l1, g1 = l1_masked_and_grad(render_static, gt, mask, mask_pred=True)
    s, gs = ssim_and_grad(np.asarray(render_static) * m, np.asarray(gt) * m)
    value = l1 + lambda_ssim * 0.5 * (1.0 - s)
    return value, g1 - lambda_ssim * 0.5 * gs * m


def static_loss(render_static, gt, mask, lambda_ssim=0.2) -> float:
    """L1 + lambda * D-SSIM with prediction and target both restricted to the static mask."""
    return static_loss_and_grad(render_static, gt, mask, lambda_ssim)[0]


def dynamic_loss_and_grad(render_dynamic, gt, mask, lambda_ssim=0.2):
    m = _expand_mask(mask, np.asarray(render_dynamic))
    target = np.asarray(gt) * (1.0 - m)
    l1, g1 = l1_masked_and_grad(render_dynamic, gt, 1.0 - np.asarray(mask, dtype=float),
                                mask_pred=False)
    s, gs = ssim_and_grad(render_dynamic, target)
    return l1 + lambda_ssim * 0.5 * (1.0 - s), g1 - lambda_ssim * 0.5 * gs


def dynamic_loss(render_dynamic, gt, mask, lambda_ssim=0.2) -> float:
    """Unmasked prediction against the ground truth with static pixels blacked out."""
    return dynamic_loss_and_grad(render_dynamic, gt, mask, lambda_ssim)[0]


def photometric_loss_and_grad(pred, gt, lambda_ssim=0.2):
    l1, g1 = l1_masked_and_grad(pred, gt, np.ones(np.shape(pred)[:2]), mask_pred=False)
    s, gs = ssim_and_grad(pred, gt)
    return l1 + lambda_ssim * 0.5 * (1.0 - s), g1 - lambda_ssim * 0.5 * gs


def depth_weight(step, weights: LossWeights) -> float:
    """lambda_depth * exp(-k step), reaching 1% of the initial weight after
    ``depth_decay_steps``."""
    if weights.depth_decay_steps <= 0:
        return weights.lambda_depth
    k = math.log(100.0) / weights.depth_decay_steps
    return weights.lambda_depth * math.exp(-k * step)


def depth_loss_and_grad(render_depth, gt_depth, mask, step, weights: LossWeights,
                        alignment=(1.0, 0.0)):
    scale, offset = alignment
    target = (np.asarray(gt_depth, dtype=float) - offset) / scale
    m = np.asarray(mask, dtype=float)
    count = float(m.sum())
    if count == 0:
        return 0.0, np.zeros_like(np.asarray(render_depth, dtype=float))
    lam = depth_weight(step, weights)
    diff = (np.asarray(render_depth, dtype=float) - target) * m
    return lam * float(np.abs(diff).sum()) / count, lam * np.sign(diff) / count


def depth_loss(render_depth, gt_depth, mask, step, weights: LossWeights,
               alignment=(1.0, 0.0)) -> float:
    return depth_loss_and_grad(render_depth, gt_depth, mask, step, weights, alignment)[0]


def align_depth(render_depth, gt_depth, mask):
    """Least-squares (scale, offset) with scale * rendered + offset ~ gt on masked pixels."""
    m = np.asarray(mask, dtype=bool)
    x = np.asarray(render_depth, dtype=float)[m]
    y = np.asarray(gt_depth, dtype=float)[m]
    if len(x) == 0:
        return 1.0, 0.0
    if len(x) < 2 or np.ptp(x) == 0:
        return 1.0, float(np.mean(y - x))
    A = np.stack([x, np.ones_like(x)], axis=1)
    (scale, offset), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(scale), float(offset)


def psnr(pred, gt) -> float:
    mse = float(np.mean((np.asarray(pred, dtype=float) - np.asarray(gt, dtype=float)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)
