"""The three contrastive objectives and their weighted sum.

All losses L2-normalize their embedding inputs at entry instead of
trusting callers, which makes scale invariance a hard property. The local
matching score pools sub-region features into one context vector per word
via attention, compares context and word by cosine, and aggregates the
per-word similarities with a logsumexp.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    Tensor,
    broadcast_to,
    concat,
    l2_normalize,
    logsumexp,
    matmul,
    reshape,
    softmax,
    stack,
    transpose,
)


@dataclass(frozen=True)
class LossWeights:
    """Loss mixing weights and temperatures."""

    alpha: float = 0.1  # weight of the local attentive loss
    beta: float = 0.1  # weight of the perturbation sensitivity loss
    tau: float = 0.07  # contrastive temperature
    tau_local: float = 1.0  # attention/aggregation temperature inside the local score

    def __post_init__(self):
        if self.tau <= 0 or self.tau_local <= 0:
            raise ValueError("temperatures must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss tensors for one batch; `total` carries the gradient graph."""

    global_term: Tensor
    local_term: Tensor
    pert_term: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "global": self.global_term.item(),
            "local": self.local_term.item(),
            "pert": self.pert_term.item(),
            "total": self.total.item(),
        }


def _check_temperature(tau: float) -> None:
    if tau <= 0:
        raise ValueError("temperature must be positive")


def _symmetric_infonce(logits: Tensor) -> Tensor:
    """Mean of row-wise and column-wise cross-entropy with diagonal positives."""
    n = logits.shape[0]
    diag_mask = Tensor(np.eye(n))
    positives = (logits * diag_mask).sum()
    row_loss = (logsumexp(logits, axis=1).sum() - positives) * (1.0 / n)
    col_loss = (logsumexp(logits, axis=0).sum() - positives) * (1.0 / n)
    return (row_loss + col_loss) * 0.5


def global_contrastive_loss(image_embeds: Tensor, text_embeds: Tensor, tau: float) -> Tensor:
    """Symmetric cross-entropy over the cosine similarity matrix of a batch.

    `image_embeds` and `text_embeds` are (B, d) with row i of each side
    forming the positive pair.
    """
    _check_temperature(tau)
    if image_embeds.shape != text_embeds.shape or image_embeds.data.ndim != 2:
        raise ValueError(
            f"expected matching (B, d) embedding batches, got {image_embeds.shape} and {text_embeds.shape}"
        )
    zi = l2_normalize(image_embeds, axis=1)
    zt = l2_normalize(text_embeds, axis=1)
    logits = matmul(zi, transpose(zt)) * (1.0 / tau)
    return _symmetric_infonce(logits)


def attention_weights(image_local: Tensor, text_words: Tensor, tau_local: float = 1.0) -> Tensor:
    """Per-word attention over sub-regions.

    Entry (k, j) is the softmax over sub-regions k of the dot product
    between sub-region k and word j; each column sums to one.
    """
    _check_temperature(tau_local)
    if image_local.data.ndim != 2 or text_words.data.ndim != 2:
        raise ValueError("attention_weights expects 2-D (d, M) and (d, W) tensors")
    if image_local.shape[0] != text_words.shape[0]:
        raise ValueError(
            f"embedding width mismatch: image {image_local.shape[0]}, text {text_words.shape[0]}"
        )
    significance = matmul(transpose(image_local), text_words)  # (M, W)
    return softmax(significance * (1.0 / tau_local), axis=0)


def local_matching_score(image_local: Tensor, text_words: Tensor, tau_local: float = 1.0) -> Tensor:
    """Attentive matching score between one image and one report.

    Each word attends over the M sub-regions; the attention-pooled context
    vector is compared to the word by cosine, and the per-word similarities
    are aggregated with logsumexp at temperature `tau_local`.
    """
    weights = attention_weights(image_local, text_words, tau_local)
    context = matmul(image_local, weights)  # (d, W)
    context_n = l2_normalize(context, axis=0)
    words_n = l2_normalize(text_words, axis=0)
    similarities = (context_n * words_n).sum(axis=0)  # (W,)
    return logsumexp(similarities * (1.0 / tau_local))


def _batched_matching_scores(
    image_locals: Tensor, text_words: Tensor, tau_local: float
) -> Tensor:
    """Scores of every image in a (B, d, M) stack against one (d, W) report."""
    b, d, m = image_locals.shape
    w = text_words.shape[1]
    flat = reshape(transpose(image_locals, (0, 2, 1)), (b * m, d))
    significance = reshape(matmul(flat, text_words), (b, m, w))
    weights = softmax(significance * (1.0 / tau_local), axis=1)
    context = matmul(image_locals, weights)  # (B, d, W)
    context_n = l2_normalize(context, axis=1)
    words_n = broadcast_to(reshape(l2_normalize(text_words, axis=0), (1, d, w)), (b, d, w))
    similarities = (context_n * words_n).sum(axis=1)  # (B, W)
    return logsumexp(similarities * (1.0 / tau_local), axis=1)


def local_contrastive_loss(
    image_locals: Sequence[Tensor] | Tensor,
    text_locals: Sequence[Tensor],
    tau: float,
    tau_local: float = 1.0,
) -> Tensor:
    """Symmetric InfoNCE over the matrix of local matching scores.

    `image_locals` is a (B, d, M) tensor or a sequence of (d, M) tensors;
    `text_locals` is a sequence of (d, W_j) tensors (word counts may vary).
    """
    _check_temperature(tau)
    if not isinstance(image_locals, Tensor):
        image_locals = stack(list(image_locals), axis=0)
    if image_locals.shape[0] != len(text_locals):
        raise ValueError("batch size mismatch between image and text locals")
    columns = [
        _batched_matching_scores(image_locals, words, tau_local) for words in text_locals
    ]
    scores = stack(columns, axis=1)  # (B, B): rows images, columns texts
    return _symmetric_infonce(scores * (1.0 / tau))


def perturbation_sensitivity_loss(
    image_global: Tensor, text_global: Tensor, pert_texts: Tensor, tau: float
) -> Tensor:
    """Cross-entropy of the aligned pair against the perturbed negatives.

    `pert_texts` holds the P non-degenerate perturbed report embeddings as
    columns of a (d, P) tensor.
    """
    _check_temperature(tau)
    if pert_texts.data.ndim != 2 or pert_texts.shape[1] < 1:
        raise ValueError("no perturbation negatives")
    d = image_global.shape[0]
    if text_global.shape != (d,) or pert_texts.shape[0] != d:
        raise ValueError("embedding width mismatch between image, text, and negatives")
    zi = reshape(l2_normalize(image_global, axis=0), (1, d))
    zt = reshape(l2_normalize(text_global, axis=0), (d, 1))
    zp = l2_normalize(pert_texts, axis=0)
    positive = matmul(zi, zt) * (1.0 / tau)  # (1, 1)
    negatives = matmul(zi, zp) * (1.0 / tau)  # (1, P)
    logits = concat([positive, negatives], axis=1)
    return reshape(logsumexp(logits) - reshape(positive, ()), ())


def perturbation_sensitivity_loss_batch(
    samples: Sequence[tuple[Tensor, Tensor, Tensor]], tau: float
) -> Tensor:
    """Mean of per-sample perturbation losses over (image, text, negatives) triples."""
    if not samples:
        raise ValueError("no perturbation negatives")
    losses = [perturbation_sensitivity_loss(zi, zt, zp, tau) for zi, zt, zp in samples]
    return stack(losses).sum() * (1.0 / len(losses))


def total_loss(
    global_term: Tensor,
    local_term: Tensor | None,
    pert_term: Tensor | None,
    weights: LossWeights,
) -> LossBreakdown:
    """Weighted sum of the three terms; a None term contributes exactly zero."""
    zero = Tensor(0.0)
    local = local_term if local_term is not None else zero
    pert = pert_term if pert_term is not None else zero
    total = global_term
    if local_term is not None and weights.alpha != 0.0:
        total = total + local_term * weights.alpha
    if pert_term is not None and weights.beta != 0.0:
        total = total + pert_term * weights.beta
    return LossBreakdown(global_term=global_term, local_term=local, pert_term=pert, total=total)
