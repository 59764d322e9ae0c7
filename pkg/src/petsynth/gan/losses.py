"""Least-squares adversarial objective and brain-masked L1."""
from __future__ import annotations

import numpy as np

from ..tensor import Tensor, as_tensor, tmean, tsum


def masked_l1_loss(synthetic, real, mask) -> Tensor:
    """``sum(mask * |synthetic - real|) / max(sum(mask), 1)``."""
    synthetic = as_tensor(synthetic)
    real = as_tensor(real, synthetic.dtype)
    if synthetic.shape != real.shape:
        raise ValueError(f"shape mismatch {synthetic.shape} vs {real.shape}")
    m = np.broadcast_to(np.asarray(mask, dtype=synthetic.dtype), synthetic.shape)
    denom = max(float(m.sum()), 1.0)
    return tsum((synthetic - real).abs() * Tensor(m, dtype=synthetic.dtype)) / denom


def lsgan_d_loss(d_real, d_fake) -> Tensor:
    d_real, d_fake = as_tensor(d_real), as_tensor(d_fake)
    return tmean((d_real - 1.0) ** 2) * 0.5 + tmean(d_fake ** 2) * 0.5


def lsgan_g_loss(d_fake) -> Tensor:
    return tmean((as_tensor(d_fake) - 1.0) ** 2)


def adversarial_losses(d_real, d_fake) -> tuple[Tensor, Tensor]:
    """``(loss_d, loss_g_adv)`` of the least-squares GAN."""
    if as_tensor(d_real).shape != as_tensor(d_fake).shape:
        raise ValueError("score maps must share a shape")
    return lsgan_d_loss(d_real, d_fake), lsgan_g_loss(d_fake)
