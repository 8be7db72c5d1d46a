"""ROI-based quantization-factor baseline applied ad hoc to a trained codec."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class RoiConfigError(ValueError):
    pass


@dataclass
class RoiConfig:
    qf: float = 1.4
    mask_source: str = "gt_mask"  # gt_mask | none
    binarize_threshold: float = 0.5
    oracle_rescale: bool = False  # analysis only: multiply back on decode

    def __post_init__(self):
        if not self.qf > 1:
            raise RoiConfigError(f"quantization factor must be > 1, got {self.qf}")
        if self.mask_source not in ("gt_mask", "none"):
            raise RoiConfigError(f"unknown mask source {self.mask_source!r}")
        if not 0 < self.binarize_threshold < 1:
            raise RoiConfigError("binarize_threshold must lie in (0, 1)")


def mask_to_latent(seg_mask: np.ndarray, factor: int = 8, threshold: float = 0.5) -> np.ndarray:
    """Binary latent-resolution ROI: a cell is ROI if any pixel it covers is foreground.

    ``seg_mask`` may be integer class labels (foreground = class > 0) or a soft
    mask in [0, 1], which is binarized at ``threshold`` first.
    """
    m = np.asarray(seg_mask)
    fg = m > 0 if m.dtype.kind in "iub" else m >= threshold
    h, w = fg.shape
    if h % factor or w % factor:
        raise ad.ShapeError(f"mask {fg.shape} not divisible by {factor}")
    return fg.reshape(h // factor, factor, w // factor, factor).any(axis=(1, 3)).astype(np.uint8)


def apply_qf(y: np.ndarray, m: np.ndarray, qf: float) -> np.ndarray:
    """Divide latent values outside the ROI by ``qf``; ROI values are returned untouched."""
    if not qf > 1:
        raise RoiConfigError(f"quantization factor must be > 1, got {qf}")
    y = np.asarray(y)
    m = np.asarray(m).astype(bool)
    if y.shape[-2:] != m.shape:
        raise ad.ShapeError(f"latent spatial shape {y.shape[-2:]} != mask shape {m.shape}")
    out = y.copy()
    outside = np.broadcast_to(~m, y.shape)
    out[outside] = y[outside] / y.dtype.type(qf)
    return out


def roi_transform(seg_masks: np.ndarray, cfg: RoiConfig, factor: int = 8):
    """Latent rewrite hook for :func:`icmaux.metrics.encode_latents`."""
    if cfg.mask_source == "none":
        return None
    masks = [mask_to_latent(s, factor, cfg.binarize_threshold) for s in seg_masks]
    return lambda y, i: apply_qf(y, masks[i], cfg.qf)
