"""Zero-shot structure ranking, retrieval, and linear probe harnesses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoders import AlignmentModel
from .perturb import RULES, generate_set
from .rng import derive_seed
from .tensor import Tensor, backward, matmul, no_grad, softplus
from .text import pos_tag, report_from_tokens, tokenize
from .training import sgd_step

logger = logging.getLogger(__name__)


def cosine_similarity(a, b) -> float:
    """Cosine of two embedding vectors, in [-1, 1]."""
    va = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    vb = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na <= 1e-12 or nb <= 1e-12:
        raise ValueError("zero vector")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


@dataclass
class StructureEvalResult:
    """Outcome of ranking each original report against its perturbations."""

    n_samples: int
    n_correct: int
    accuracy: float
    rule_confusions: dict[str, int]  # winning rule when the original lost
    n_skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_correct": self.n_correct,
            "accuracy": self.accuracy,
            "rule_confusions": dict(self.rule_confusions),
            "n_skipped": self.n_skipped,
        }


def structure_eval(pairs, model: AlignmentModel, seed: int) -> StructureEvalResult:
    """Correct iff the original report is the strict cosine argmax for its image.

    Each pair's perturbations are regenerated from (seed, pair id);
    degenerate variants are excluded from the candidate list, and ties
    with the original count as incorrect.
    """
    if not pairs:
        raise ValueError("no pairs to evaluate")
    vocab = model.text_encoder.vocab
    n_correct = 0
    n_ranked = 0
    n_skipped = 0
    confusions = {rule: 0 for rule in RULES}
    with no_grad():
        for pair in pairs:
            report = pos_tag(tokenize(pair.report, vocab))
            variants = generate_set(report, derive_seed(seed, pair.id)).active()
            if not variants:
                logger.warning("pair %s: all perturbations degenerate, skipped", pair.id)
                n_skipped += 1
                continue
            image_embed = model.image_encoder.encode_image(pair.image)[0]
            original_sim = cosine_similarity(
                image_embed, model.text_encoder.encode_text(report)[0]
            )
            variant_sims = [
                cosine_similarity(
                    image_embed,
                    model.text_encoder.encode_text(report_from_tokens(v.tokens, vocab))[0],
                )
                for v in variants
            ]
            n_ranked += 1
            best = max(variant_sims)
            if original_sim > best:
                n_correct += 1
            else:
                winner = variants[int(np.argmax(variant_sims))]
                confusions[winner.rule] += 1
    accuracy = n_correct / n_ranked if n_ranked else 0.0
    return StructureEvalResult(
        n_samples=n_ranked,
        n_correct=n_correct,
        accuracy=accuracy,
        rule_confusions=confusions,
        n_skipped=n_skipped,
    )


def _global_embeddings(pairs, model: AlignmentModel) -> tuple[np.ndarray, np.ndarray]:
    vocab = model.text_encoder.vocab
    image_rows = []
    text_rows = []
    with no_grad():
        for pair in pairs:
            image_rows.append(model.image_encoder.encode_image(pair.image)[0].data)
            report = tokenize(pair.report, vocab)
            text_rows.append(model.text_encoder.encode_text(report)[0].data)
    return np.stack(image_rows), np.stack(text_rows)


def retrieval_eval(pairs, model: AlignmentModel, k_values=(1, 5, 10)) -> dict:
    """Recall@k for image-to-text and text-to-image cosine ranking."""
    k_values = tuple(int(k) for k in k_values)
    if len(pairs) < max(k_values):
        raise ValueError("need at least max(k) pairs")
    images, texts = _global_embeddings(pairs, model)
    images = images / np.linalg.norm(images, axis=1, keepdims=True)
    texts = texts / np.linalg.norm(texts, axis=1, keepdims=True)
    sims = images @ texts.T
    diag = np.diag(sims)
    # rank counts candidates at least as similar as the true partner (ties pessimistic)
    image_to_text = (sims >= diag[:, None]).sum(axis=1)
    text_to_image = (sims >= diag[None, :]).sum(axis=0)
    out = {"image_to_text": {}, "text_to_image": {}}
    for k in k_values:
        out["image_to_text"][k] = float((image_to_text <= k).mean())
        out["text_to_image"][k] = float((text_to_image <= k).mean())
    return out


@dataclass
class ProbeResult:
    finding_accuracy: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"finding_accuracy": dict(self.finding_accuracy)}


def image_embeddings(pairs, model: AlignmentModel) -> np.ndarray:
    """Frozen global image embeddings for a list of pairs."""
    rows = []
    with no_grad():
        for pair in pairs:
            rows.append(model.image_encoder.encode_image(pair.image)[0].data)
    return np.stack(rows)


def linear_probe(
    embeddings: np.ndarray,
    labels: np.ndarray,
    split_seed: int,
    finding_names=None,
    train_fraction: float = 0.75,
    steps: int = 400,
    lr: float = 0.5,
) -> ProbeResult:
    """Per-finding logistic regression on frozen embeddings.

    Trains with the package's own SGD on a seeded train split and reports
    held-out accuracy per finding.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n, width = embeddings.shape
    order = np.random.default_rng(derive_seed(split_seed, 0)).permutation(n)
    n_train = int(round(n * train_fraction))
    train_idx, test_idx = order[:n_train], order[n_train:]
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise ValueError("degenerate split")
    if finding_names is None:
        finding_names = [f"finding_{i}" for i in range(labels.shape[1])]

    result = ProbeResult()
    x_train = Tensor(embeddings[train_idx])
    x_test = embeddings[test_idx]
    for column, name in enumerate(finding_names):
        y = labels[train_idx, column]
        if y.min() == y.max():
            raise ValueError(f"degenerate split: one class missing for {name!r}")
        y_train = Tensor(y.reshape(-1, 1))
        params = {
            "w": Tensor(np.zeros((width, 1)), requires_grad=True),
            "b": Tensor(np.zeros(1), requires_grad=True),
        }
        buffers = {k: np.zeros_like(p.data) for k, p in params.items()}
        for _ in range(steps):
            logits = matmul(x_train, params["w"]) + params["b"]
            loss = (softplus(logits) - y_train * logits).mean()
            backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            params, buffers = sgd_step(params, grads, buffers, lr, 0.9, 0.0)
        scores = x_test @ params["w"].data + params["b"].data
        predictions = (scores.reshape(-1) > 0).astype(np.float64)
        result.finding_accuracy[name] = float(
            (predictions == labels[test_idx, column]).mean()
        )
    return result
