"""End-to-end pre-training loop.

All randomness is derived from the three config seeds plus structural
indices (epoch number, sample id), never drawn from a shared sequential
stream, so disabling one loss term cannot shift the data order or the
negatives of another run. Checkpoints carry parameters, momentum buffers
and the epoch counter; resuming reproduces the uninterrupted metric
stream exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoders import AlignmentModel, EncoderConfig, load_checkpoint, save_checkpoint
from .losses import (
    LossWeights,
    global_contrastive_loss,
    local_contrastive_loss,
    perturbation_sensitivity_loss_batch,
    total_loss,
)
from .perturb import generate_set
from .rng import derive_seed
from .tensor import Tensor, backward, stack, take_row
from .text import pos_tag, report_from_tokens, tokenize


class TrainingDivergedError(RuntimeError):
    """Raised when a loss component stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 64
    lr: float = 0.0015
    momentum: float = 0.9
    weight_decay: float = 5e-4
    weights: LossWeights = field(default_factory=LossWeights)
    data_seed: int = 1
    init_seed: int = 2
    pert_seed: int = 3
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    detach_pert_negatives: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be at least 1")


@dataclass
class CheckpointState:
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    epoch: int


@dataclass
class TrainResult:
    metrics: list[dict]
    state: CheckpointState
    model: AlignmentModel


def sgd_step(params, grads, buffers, lr, momentum, weight_decay):
    """One SGD update with momentum and coupled L2 weight decay.

    buffer <- momentum * buffer + grad + weight_decay * param
    param  <- param - lr * buffer

    Returns fresh param tensors and buffers; inputs are left untouched.
    """
    new_params = {}
    new_buffers = {}
    for name, param in params.items():
        grad = grads[name]
        buf = buffers[name]
        if grad.shape != param.data.shape or buf.shape != param.data.shape:
            raise ValueError(f"shape mismatch for parameter {name!r}")
        new_buf = momentum * buf + grad + weight_decay * param.data
        new_params[name] = Tensor(param.data - lr * new_buf, requires_grad=True)
        new_buffers[name] = new_buf
    return new_params, new_buffers


def _check_finite(values: dict[str, float], epoch: int, step: int) -> None:
    for name in ("global", "local", "pert", "total"):
        if not math.isfinite(values[name]):
            raise TrainingDivergedError(
                f"non-finite {name} loss at epoch {epoch}, step {step}"
            )


def save_state(path, model: AlignmentModel, state: CheckpointState, cfg: TrainConfig) -> None:
    extra = {
        "epoch": state.epoch,
        "momentum": {n: b.reshape(-1).tolist() for n, b in state.buffers.items()},
        "train_config": _config_dict(cfg),
    }
    save_checkpoint(path, model, extra)


def load_state(path) -> tuple[AlignmentModel, CheckpointState]:
    model, extra = load_checkpoint(path)
    params = model.parameters()
    buffers = {
        name: np.array(extra["momentum"][name]).reshape(params[name].shape)
        for name in params
    }
    return model, CheckpointState(params=params, buffers=buffers, epoch=extra["epoch"])


def _config_dict(cfg: TrainConfig) -> dict:
    doc = asdict(cfg)
    doc["encoder"]["conv_channels"] = list(doc["encoder"]["conv_channels"])
    return doc


def train(
    cfg: TrainConfig,
    corpus,
    metrics_path=None,
    checkpoint_dir=None,
    resume_from: CheckpointState | None = None,
    resume_model: AlignmentModel | None = None,
) -> TrainResult:
    """Run the pre-training loop over a synthetic corpus.

    `corpus` is a sequence of SyntheticPair-like objects with `.image`,
    `.report` and `.id`. Metrics rows are returned and, if `metrics_path`
    is given, appended there as JSON lines.
    """
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    if cfg.batch_size > len(corpus):
        raise ValueError("batch size exceeds corpus size")

    weights = cfg.weights
    if resume_from is not None:
        if resume_model is None:
            raise ValueError("resuming needs the model the state belongs to")
        model = resume_model
        model.set_parameters(resume_from.params)
        params = model.parameters()
        buffers = dict(resume_from.buffers)
        start_epoch = resume_from.epoch
    else:
        model = AlignmentModel(replace(cfg.encoder, init_seed=cfg.init_seed))
        params = model.parameters()
        buffers = {name: np.zeros_like(p.data) for name, p in params.items()}
        start_epoch = 0

    vocab = model.text_encoder.vocab
    tokenized = [pos_tag(tokenize(pair.report, vocab)) for pair in corpus]
    n = len(corpus)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size

    metrics: list[dict] = []
    metrics_fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if checkpoint_dir:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            order = np.random.default_rng(derive_seed(cfg.data_seed, epoch)).permutation(n)
            for batch_index in range(steps_per_epoch):
                step = (epoch - 1) * steps_per_epoch + batch_index
                chosen = order[batch_index * cfg.batch_size : (batch_index + 1) * cfg.batch_size]

                images = np.stack([corpus[i].image for i in chosen])
                image_global, image_local = model.image_encoder.encode_batch(images)
                encoded = [model.text_encoder.encode_text(tokenized[i]) for i in chosen]
                text_global = stack([e[0] for e in encoded])

                global_term = global_contrastive_loss(image_global, text_global, weights.tau)

                local_term = None
                if weights.alpha != 0.0:
                    local_term = local_contrastive_loss(
                        image_local, [e[2] for e in encoded], weights.tau, weights.tau_local
                    )

                pert_term = None
                if weights.beta != 0.0:
                    samples = []
                    for row, i in enumerate(chosen):
                        pert_seed = derive_seed(cfg.pert_seed, corpus[i].id, epoch)
                        variants = generate_set(tokenized[i], pert_seed).active()
                        if not variants:
                            continue
                        negatives = stack(
                            [
                                model.text_encoder.encode_text(
                                    report_from_tokens(v.tokens, vocab)
                                )[0]
                                for v in variants
                            ],
                            axis=1,
                        )
                        if cfg.detach_pert_negatives:
                            negatives = negatives.detach()
                        samples.append(
                            (take_row(image_global, row), take_row(text_global, row), negatives)
                        )
                    if samples:
                        pert_term = perturbation_sensitivity_loss_batch(samples, weights.tau)

                breakdown = total_loss(global_term, local_term, pert_term, weights)
                values = breakdown.values()
                _check_finite(values, epoch, step)

                backward(breakdown.total)
                grads = {
                    name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                    for name, p in params.items()
                }
                params, buffers = sgd_step(
                    params, grads, buffers, cfg.lr, cfg.momentum, cfg.weight_decay
                )
                model.set_parameters(params)

                row = {"epoch": epoch, "step": step, **values}
                metrics.append(row)
                if metrics_fh:
                    metrics_fh.write(json.dumps(row) + "\n")

            if (
                checkpoint_dir
                and cfg.checkpoint_every
                and epoch % cfg.checkpoint_every == 0
                and epoch < cfg.epochs
            ):
                state = CheckpointState(params=params, buffers=buffers, epoch=epoch)
                save_state(checkpoint_dir / f"ckpt_epoch_{epoch:04d}.json", model, state, cfg)
    finally:
        if metrics_fh:
            metrics_fh.close()

    state = CheckpointState(params=params, buffers=buffers, epoch=cfg.epochs)
    if checkpoint_dir:
        save_state(checkpoint_dir / "final.json", model, state, cfg)
    return TrainResult(metrics=metrics, state=state, model=model)


def epoch_mean_total(metrics, epoch: int) -> float:
    rows = [m["total"] for m in metrics if m["epoch"] == epoch]
    if not rows:
        raise ValueError(f"no metrics for epoch {epoch}")
    return float(np.mean(rows))
