"""Loss functions: mean-squared error, BCE, cross-entropy, diagonal-Gaussian KL."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tensor
from .layers import log_softmax


def mse(prediction: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    if prediction.data.shape != target.data.shape:
        raise NumericsError(
            f"mse shape mismatch: {prediction.data.shape} vs {target.data.shape}")
    diff = ad.sub(prediction, target)
    return ad.tmean(ad.mul(diff, diff))


def bce(probabilities: Tensor, target) -> Tensor:
    """Binary cross-entropy on probabilities already squashed to (0,1)."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    p = probabilities.data
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise NumericsError("bce requires probabilities strictly inside (0,1)")
    if p.shape != target.data.shape:
        raise NumericsError(
            f"bce shape mismatch: {p.shape} vs {target.data.shape}")
    term = ad.add(ad.mul(target, ad.log(probabilities)),
                  ad.mul(ad.sub(1.0, target), ad.log(ad.sub(1.0, probabilities))))
    return ad.neg(ad.tmean(term))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Softmax cross-entropy; labels are integer class indices (B,)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise NumericsError(
            f"cross_entropy expects logits (B,K) and labels (B,), got "
            f"{logits.data.shape} and {labels.shape}")
    lsm = log_softmax(logits)
    picked = ad.gather_rows(lsm, labels)
    return ad.neg(ad.tmean(picked))


def kl_diag_gaussian(mu: Tensor, log_var: Tensor) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)), summed over dims, averaged over batch."""
    if mu.data.shape != log_var.data.shape:
        raise NumericsError(
            f"kl shape mismatch: {mu.data.shape} vs {log_var.data.shape}")
    inner = ad.sub(ad.add(1.0, log_var), ad.add(ad.mul(mu, mu), ad.exp(log_var)))
    per_sample = ad.tsum(inner, axis=tuple(range(1, mu.data.ndim))) if mu.data.ndim > 1 else inner
    return ad.mul(-0.5, ad.tmean(per_sample))
