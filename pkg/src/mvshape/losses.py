"""Training objectives over batches of embeddings.

Contrastive losses operate on a 2N x D matrix of projection outputs where
rows 0..N-1 are the first augmented view and rows N..2N-1 the second (pair
i <-> i+N). Inputs are re-normalized to unit rows, so all losses depend only
on pairwise cosine similarities. Labels, where used, are per row (length 2N).

All log-ratios route through shifted logsumexp: at tau = 0.07 raw logits
reach ~14.3, where naive exponentials in float32 lose precision.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (
    AnchorWithoutNegative,
    AnchorWithoutPositive,
    LabelOutOfRange,
    ShapeMismatch,
)

LOSS_NAMES = ("ce", "infonce", "simclr", "supcon", "eps_supinfonce", "sincere")
SUPERVISED_CONTRASTIVE = ("supcon", "eps_supinfonce", "sincere")
SELF_SUPERVISED = ("infonce", "simclr")


@dataclass
class LossSpec:
    name: str
    temperature: float = 0.07
    epsilon: float = 0.25

    def __post_init__(self):
        if self.name not in LOSS_NAMES:
            raise ValueError(f"unknown loss '{self.name}', expected one of {LOSS_NAMES}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")


def _const(arr, like: ad.Tensor) -> ad.Tensor:
    return ad.Tensor(np.asarray(arr, dtype=like.data.dtype))


def _pair_scores(z: ad.Tensor, tau: float) -> ad.Tensor:
    zn = ad.l2_normalize(z, axis=1)
    return ad.mul_scalar(ad.matmul(zn, ad.transpose(zn)), 1.0 / tau)


def _masked_logsumexp_rows(s: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    """logsumexp over the True entries of each row (mask is a constant)."""
    neg_inf = np.where(mask, s.data, -np.inf)
    m = neg_inf.max(axis=1)  # detached shift; rows are guaranteed non-empty
    shifted = ad.sub(s, _const(np.broadcast_to(m[:, None], s.data.shape), s))
    e = ad.mul(ad.exp(shifted), _const(mask.astype(s.data.dtype), s))
    return ad.add(ad.log(ad.tsum(e, axis=1)), _const(m, s))


def _elementwise_logaddexp(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    m = np.maximum(a.data, b.data)
    mc = _const(m, a)
    return ad.add(ad.log(ad.add(ad.exp(ad.sub(a, mc)), ad.exp(ad.sub(b, mc)))), mc)


def _label_masks(labels: np.ndarray, n_rows: int):
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != n_rows:
        raise ShapeMismatch(f"labels length {labels.shape[0]} != batch rows {n_rows}")
    eq = labels[:, None] == labels[None, :]
    offdiag = ~np.eye(n_rows, dtype=bool)
    return eq & offdiag, (~eq), offdiag


def cross_entropy(logits: ad.Tensor, labels) -> ad.Tensor:
    """Mean negative log-softmax of the target class."""
    labels = np.asarray(labels).reshape(-1)
    b, c = logits.data.shape
    if labels.shape[0] != b:
        raise ShapeMismatch(f"labels length {labels.shape[0]} != batch size {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    lse = ad.logsumexp(logits, axis=1)
    picked = ad.tsum(ad.mul(logits, _const(onehot, logits)), axis=1)
    return ad.tmean(ad.sub(lse, picked), axis=0)


def info_nce(z_a: ad.Tensor, z_b: ad.Tensor, tau: float = 0.07) -> ad.Tensor:
    """One-directional: anchors in view a score against all view-b embeddings."""
    if z_a.data.shape != z_b.data.shape:
        raise ShapeMismatch(f"view shapes differ: {z_a.data.shape} vs {z_b.data.shape}")
    n = z_a.data.shape[0]
    za = ad.l2_normalize(z_a, axis=1)
    zb = ad.l2_normalize(z_b, axis=1)
    s = ad.mul_scalar(ad.matmul(za, ad.transpose(zb)), 1.0 / tau)
    lse = ad.logsumexp(s, axis=1)
    pos = ad.tsum(ad.mul(s, _const(np.eye(n), s)), axis=1)
    return ad.tmean(ad.sub(lse, pos), axis=0)


def simclr_ntxent(z: ad.Tensor, tau: float = 0.07) -> ad.Tensor:
    """Symmetric NT-Xent; every row is an anchor, its pair sits N rows away."""
    rows = z.data.shape[0]
    if rows < 4 or rows % 2:
        raise ShapeMismatch(f"need an even batch of >= 4 rows, got {rows}")
    n = rows // 2
    s = _pair_scores(z, tau)
    offdiag = ~np.eye(rows, dtype=bool)
    pairmat = np.zeros((rows, rows))
    idx = np.arange(rows)
    pairmat[idx, (idx + n) % rows] = 1.0
    lse = _masked_logsumexp_rows(s, offdiag)
    pos = ad.tsum(ad.mul(s, _const(pairmat, s)), axis=1)
    return ad.tmean(ad.sub(lse, pos), axis=0)


def supcon(z: ad.Tensor, labels, tau: float = 0.07, per_anchor: bool = False) -> ad.Tensor:
    """Positive-average-outside-the-log form: all non-self rows in the denominator."""
    rows = z.data.shape[0]
    pmask, _, offdiag = _label_masks(labels, rows)
    pcount = pmask.sum(axis=1)
    if np.any(pcount == 0):
        raise AnchorWithoutPositive("every anchor needs at least one same-label row")
    s = _pair_scores(z, tau)
    lse = _masked_logsumexp_rows(s, offdiag)
    pos_mean = ad.mul(ad.tsum(ad.mul(s, _const(pmask, s)), axis=1), _const(1.0 / pcount, s))
    vec = ad.sub(lse, pos_mean)
    return vec if per_anchor else ad.tmean(vec, axis=0)


def _margin_sup_loss(z: ad.Tensor, labels, tau: float, eps: float, per_anchor: bool) -> ad.Tensor:
    rows = z.data.shape[0]
    pmask, nmask, _ = _label_masks(labels, rows)
    pcount = pmask.sum(axis=1)
    ncount = nmask.sum(axis=1)
    if np.any(pcount == 0):
        raise AnchorWithoutPositive("every anchor needs at least one same-label row")
    if np.any(ncount == 0):
        raise AnchorWithoutNegative("every anchor needs at least one different-label row")
    s = _pair_scores(z, tau)
    s_neg = ad.add_scalar(s, eps / tau) if eps else s
    neg_lse = _masked_logsumexp_rows(s_neg, nmask)
    denom = _elementwise_logaddexp(
        s, ad.expand(ad.reshape(neg_lse, (rows, 1)), (rows, rows)))
    terms = ad.sub(denom, s)
    vec = ad.mul(ad.tsum(ad.mul(terms, _const(pmask, s)), axis=1), _const(1.0 / pcount, s))
    return vec if per_anchor else ad.tmean(vec, axis=0)


def sincere(z: ad.Tensor, labels, tau: float = 0.07, per_anchor: bool = False) -> ad.Tensor:
    """Per positive, the denominator holds that positive plus the negatives only,
    so same-class rows are never pushed apart."""
    return _margin_sup_loss(z, labels, tau, 0.0, per_anchor)


def eps_sup_infonce(z: ad.Tensor, labels, tau: float = 0.07, eps: float = 0.25,
                    per_anchor: bool = False) -> ad.Tensor:
    """Margin variant: negatives enter the denominator with similarity + eps.
    At eps = 0 this is exactly `sincere`."""
    return _margin_sup_loss(z, labels, tau, eps, per_anchor)


def apply_contrastive(spec: LossSpec, z_a: ad.Tensor, z_b: ad.Tensor, labels_n) -> ad.Tensor:
    """Dispatch a contrastive LossSpec over a two-view batch (labels per pair)."""
    if spec.name == "infonce":
        return info_nce(z_a, z_b, spec.temperature)
    z = ad.concat((z_a, z_b), axis=0)
    if spec.name == "simclr":
        return simclr_ntxent(z, spec.temperature)
    labels2n = np.concatenate([np.asarray(labels_n), np.asarray(labels_n)])
    if spec.name == "supcon":
        return supcon(z, labels2n, spec.temperature)
    if spec.name == "sincere":
        return sincere(z, labels2n, spec.temperature)
    if spec.name == "eps_supinfonce":
        return eps_sup_infonce(z, labels2n, spec.temperature, spec.epsilon)
    raise ValueError(f"'{spec.name}' is not a contrastive loss")
