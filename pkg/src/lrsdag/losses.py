"""Adaptation objectives: a feature-alignment term over (reference source
features, encoded target features) plus the classification loss.

Every alignment function takes fS and hfT as (B, k) float64 batches (conv
features arrive flattened) and returns `(value, grad)` where `grad` is the
gradient with respect to hfT only. fS is a constant reference: it comes from
the frozen source pathway or from Gaussian samples, so no gradient flows
into it.
"""

from dataclasses import dataclass

import numpy as np

from .tensor_core import ShapeMismatch, cross_entropy, log_softmax, softmax

LOSS_KINDS = ("cls", "cls_mse", "cls_kl", "cls_norm", "cls_kl_rev", "coral")

DISPLAY_NAMES = {
    "cls": "CLS",
    "cls_mse": "CLS+MSE",
    "cls_kl": "CLS+KL",
    "cls_norm": "CLS+Norm",
    "cls_kl_rev": "CLS+KL-Rev",
    "coral": "CORAL",
}


class LossError(Exception):
    pass


class BatchTooSmall(LossError):
    pass


@dataclass(frozen=True)
class AdaptationLoss:
    """Which objective to minimize and how hard to weight the alignment term."""

    kind: str
    align_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise LossError(f"unknown loss kind {self.kind!r}")
        if not np.isfinite(self.align_weight) or self.align_weight < 0:
            raise LossError("align_weight must be finite and >= 0")

    @property
    def needs_sampler(self):
        return self.kind != "cls"

    @property
    def display(self):
        return DISPLAY_NAMES[self.kind]


@dataclass
class FeatureBatchStats:
    """First and second order statistics of one feature batch."""

    mean: np.ndarray
    std: np.ndarray
    covariance: np.ndarray


def batch_stats(features, ddof=0):
    features = np.asarray(features, dtype=np.float64)
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / (features.shape[0] - ddof)
    return FeatureBatchStats(mean=mean, std=np.sqrt(np.diag(cov)), covariance=cov)


def _check_pair(fS, hfT, min_batch=1):
    fS = np.asarray(fS, dtype=np.float64)
    hfT = np.asarray(hfT, dtype=np.float64)
    if fS.shape != hfT.shape or fS.ndim != 2:
        raise ShapeMismatch(f"expected equal (B, k) batches, got {fS.shape} and {hfT.shape}")
    if fS.shape[0] < min_batch:
        raise BatchTooSmall(f"need at least {min_batch} rows, got {fS.shape[0]}")
    return fS, hfT


def loss_mse(fS, hfT):
    """Mean over the batch of the squared L2 distance between paired rows."""
    fS, hfT = _check_pair(fS, hfT)
    b = fS.shape[0]
    diff = hfT - fS
    value = float((diff * diff).sum() / b)
    return value, 2.0 * diff / b


def loss_kl(fS, hfT):
    """Mean row-wise KL(softmax(fS) || softmax(hfT))."""
    fS, hfT = _check_pair(fS, hfT)
    if fS.shape[1] < 2:
        raise ShapeMismatch("KL needs feature dimension >= 2")
    b = fS.shape[0]
    log_p = log_softmax(fS)
    log_q = log_softmax(hfT)
    p = np.exp(log_p)
    value = float((p * (log_p - log_q)).sum() / b)
    grad = (np.exp(log_q) - p) / b
    return value, grad


def loss_kl_rev(fS, hfT):
    """Mean row-wise KL(softmax(hfT) || softmax(fS)); the reversed direction."""
    fS, hfT = _check_pair(fS, hfT)
    if fS.shape[1] < 2:
        raise ShapeMismatch("KL needs feature dimension >= 2")
    b = fS.shape[0]
    log_p = log_softmax(fS)
    log_q = log_softmax(hfT)
    q = np.exp(log_q)
    ratio = log_q - log_p
    row_kl = (q * ratio).sum(axis=1, keepdims=True)
    value = float(row_kl.sum() / b)
    grad = q * (ratio - row_kl) / b
    return value, grad


def loss_norm(fS, hfT):
    """Squared distance between batch means plus between batch stds, / B.

    Standard deviations are per-dimension population estimates (divide by B).
    """
    fS, hfT = _check_pair(fS, hfT, min_batch=2)
    b = fS.shape[0]
    mu_s, mu_t = fS.mean(axis=0), hfT.mean(axis=0)
    centered = hfT - mu_t
    sd_s = fS.std(axis=0)
    sd_t = hfT.std(axis=0)
    d_mu = mu_t - mu_s
    d_sd = sd_t - sd_s
    value = float((d_mu @ d_mu + d_sd @ d_sd) / b)
    # dmu_t/dx = 1/B; dsd_t/dx_ij = (x_ij - mu_j) / (B * sd_j), 0 where sd_j = 0
    sd_term = np.divide(d_sd, sd_t, out=np.zeros_like(sd_t), where=sd_t > 0)
    grad = (2.0 / (b * b)) * (d_mu + centered * sd_term)
    return value, grad


def loss_coral(fS, hfT):
    """Squared Frobenius distance between batch covariances, / (4 d^2).

    Covariances are centered by the batch mean and normalized by B - 1.
    """
    fS, hfT = _check_pair(fS, hfT, min_batch=2)
    b, d = fS.shape
    cs = batch_stats(fS, ddof=1).covariance
    centered_t = hfT - hfT.mean(axis=0)
    ct = centered_t.T @ centered_t / (b - 1)
    diff = cs - ct
    value = float((diff * diff).sum() / (4.0 * d * d))
    grad = centered_t @ (ct - cs) / ((b - 1) * d * d)
    return value, grad


ALIGNMENT_FNS = {
    "cls_mse": loss_mse,
    "cls_kl": loss_kl,
    "cls_norm": loss_norm,
    "cls_kl_rev": loss_kl_rev,
    "coral": loss_coral,
}


def alignment(kind, fS, hfT):
    """Dispatch to the alignment term of `kind`; (0, zeros) for plain cls."""
    if kind == "cls":
        hfT = np.asarray(hfT, dtype=np.float64)
        return 0.0, np.zeros_like(hfT)
    try:
        fn = ALIGNMENT_FNS[kind]
    except KeyError:
        raise LossError(f"unknown loss kind {kind!r}") from None
    return fn(fS, hfT)


def total_loss(spec, fS, hfT, logits, labels):
    """align_weight * alignment(kind) + cross entropy on the target labels."""
    align_value, _ = alignment(spec.kind, fS, hfT)
    return spec.align_weight * align_value + cross_entropy(logits, labels)
