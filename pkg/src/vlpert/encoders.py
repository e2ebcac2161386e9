"""Small trainable image and text encoders.

The image side is a three-layer stride-2 tanh conv stack; sub-region
features come from a configurable layer's spatial map, projected per cell
to the shared embedding width, while the global embedding projects the
spatially pooled final map. The text side embeds sub-word pieces, adds a
sinusoidal position signal, runs one self-attention block, and derives
word-level features by averaging each word's sub-word columns before a
shared projection.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .rng import derive_seed
from .tensor import Tensor
from .text import SubwordVocabulary, TokenizedReport, default_vocabulary

UNK_PIECE = "[UNK]"


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 32  # width of the shared embedding space
    num_regions: int = 16  # image sub-regions (grid cells of the local layer)
    subword_dim: int = 32  # width of sub-word features
    image_side: int = 32
    image_channels: int = 1
    conv_channels: tuple[int, ...] = (8, 16, 32)
    local_layer: int = 3  # which conv layer's map provides sub-region features
    position_scale: float = 1.0  # amplitude of the sinusoidal position signal
    init_seed: int = 0

    def __post_init__(self):
        for name in ("embed_dim", "num_regions", "subword_dim", "image_side", "image_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.conv_channels:
            raise ValueError("conv stack needs at least one layer")
        if not 1 <= self.local_layer <= len(self.conv_channels):
            raise ValueError("local_layer must point at a conv layer")
        if self.image_side % (2 ** len(self.conv_channels)) != 0:
            raise ValueError("image side must be divisible by the conv stack's total stride")
        grid = self.image_side // (2**self.local_layer)
        if grid * grid != self.num_regions:
            raise ValueError(
                f"num_regions={self.num_regions} inconsistent with a {grid}x{grid} grid "
                f"from layer {self.local_layer} at side {self.image_side}"
            )

    @property
    def local_grid(self) -> int:
        return self.image_side // (2**self.local_layer)


def _init_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    scale = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class ImageEncoder:
    """Conv stack producing one global and M sub-region embeddings."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        rng = np.random.default_rng(derive_seed(config.init_seed, 0))
        self.params: dict[str, Tensor] = {}
        c_in = config.image_channels
        for i, c_out in enumerate(config.conv_channels, start=1):
            self.params[f"conv{i}_w"] = _init_normal(rng, (3, 3, c_in, c_out), 9 * c_in)
            self.params[f"conv{i}_b"] = _zeros(c_out)
            c_in = c_out
        c_local = config.conv_channels[config.local_layer - 1]
        c_last = config.conv_channels[-1]
        self.params["local_w"] = _init_normal(rng, (c_local, config.embed_dim), c_local)
        self.params["local_b"] = _zeros(config.embed_dim)
        self.params["global_w"] = _init_normal(rng, (c_last, config.embed_dim), c_last)
        self.params["global_b"] = _zeros(config.embed_dim)

    def encode_batch(self, images) -> tuple[Tensor, Tensor]:
        """Encode (B, side, side, channels) pixels to (B, d) and (B, d, M)."""
        if not isinstance(images, Tensor):
            images = Tensor(images)
        cfg = self.config
        expected = (cfg.image_side, cfg.image_side, cfg.image_channels)
        if images.data.ndim != 4 or images.shape[1:] != expected:
            raise ValueError(f"image batch shape {images.shape} does not match {expected}")
        history = []
        h = images
        for i in range(1, len(cfg.conv_channels) + 1):
            h = T.tanh(
                T.conv2d(h, self.params[f"conv{i}_w"], self.params[f"conv{i}_b"], stride=2, padding=1)
            )
            history.append(h)

        b = images.shape[0]
        m = cfg.num_regions
        local_map = history[cfg.local_layer - 1]
        c_local = local_map.shape[3]
        cells = T.reshape(local_map, (b * m, c_local))
        cells = T.matmul(cells, self.params["local_w"]) + self.params["local_b"]
        local = T.transpose(T.reshape(cells, (b, m, cfg.embed_dim)), (0, 2, 1))

        last = history[-1]
        pooled = T.reshape(last, (b, last.shape[1] * last.shape[2], last.shape[3])).mean(axis=1)
        global_ = T.matmul(pooled, self.params["global_w"]) + self.params["global_b"]
        return global_, local

    def encode_image(self, pixels) -> tuple[Tensor, Tensor]:
        """Encode one (side, side, channels) image to (d,) and (d, M)."""
        if not isinstance(pixels, Tensor):
            pixels = Tensor(pixels)
        cfg = self.config
        expected = (cfg.image_side, cfg.image_side, cfg.image_channels)
        if pixels.shape != expected:
            raise ValueError(f"image shape {pixels.shape} does not match {expected}")
        batch = T.reshape(pixels, (1,) + expected)
        global_, local = self.encode_batch(batch)
        return T.reshape(global_, (cfg.embed_dim,)), T.reshape(
            local, (cfg.embed_dim, cfg.num_regions)
        )


_position_cache: dict[tuple[int, int], np.ndarray] = {}


def position_signal(length: int, width: int) -> np.ndarray:
    """Sinusoidal position features, (length, width)."""
    key = (length, width)
    cached = _position_cache.get(key)
    if cached is not None:
        return cached
    positions = np.arange(length)[:, None]
    dims = np.arange(width)[None, :]
    angles = positions / np.power(10000.0, (2 * (dims // 2)) / width)
    signal = np.where(dims % 2 == 0, np.sin(angles), np.cos(angles))
    _position_cache[key] = signal
    return signal


def aggregate_subwords(
    subword_feats: Tensor,
    spans: Sequence[tuple[int, int]],
    projection: Tensor,
    bias: Tensor | None = None,
) -> Tensor:
    """Average each word's sub-word columns of a (K, N) tensor, then project to (d, W).

    `spans` must partition [0, N) in order.
    """
    n = subword_feats.shape[1]
    cursor = 0
    for start, stop in spans:
        if start != cursor or stop <= start:
            raise ValueError("spans do not partition the sub-word axis")
        cursor = stop
    if cursor != n:
        raise ValueError("spans do not partition the sub-word axis")
    pooling = np.zeros((n, len(spans)))
    for j, (start, stop) in enumerate(spans):
        pooling[start:stop, j] = 1.0 / (stop - start)
    means = T.matmul(subword_feats, Tensor(pooling))  # (K, W)
    out = T.matmul(T.transpose(projection), means)  # (d, W)
    if bias is not None:
        out = out + T.reshape(bias, (bias.shape[0], 1))
    return out


class TextEncoder:
    """Sub-word embedding + one self-attention block + word aggregation."""

    def __init__(self, config: EncoderConfig, vocab: SubwordVocabulary | None = None):
        self.config = config
        self.vocab = vocab or default_vocabulary()
        self.piece_ids = {UNK_PIECE: 0}
        for piece in self.vocab.pieces:
            self.piece_ids[piece] = len(self.piece_ids)
        rng = np.random.default_rng(derive_seed(config.init_seed, 1))
        k = config.subword_dim
        self.params: dict[str, Tensor] = {
            "embed": _init_normal(rng, (len(self.piece_ids), k), 1),
            "attn_q": _init_normal(rng, (k, k), k),
            "attn_k": _init_normal(rng, (k, k), k),
            "attn_v": _init_normal(rng, (k, k), k),
            "attn_o": _init_normal(rng, (k, k), k),
            "global_w": _init_normal(rng, (k, config.embed_dim), k),
            "global_b": _zeros(config.embed_dim),
            "word_w": _init_normal(rng, (k, config.embed_dim), k),
            "word_b": _zeros(config.embed_dim),
        }

    def encode_text(self, report: TokenizedReport) -> tuple[Tensor, Tensor, Tensor]:
        """Encode a tokenized report to ((d,), (K, N), (d, W))."""
        if not report.tokens:
            raise ValueError("cannot encode an empty report")
        if report.subword_spans is None:
            raise ValueError("report has no sub-word spans; tokenize it first")
        cfg = self.config
        pieces = [p for span in report.subword_spans for p in span]
        n = len(pieces)
        one_hot = np.zeros((n, len(self.piece_ids)))
        for row, piece in enumerate(pieces):
            one_hot[row, self.piece_ids.get(piece, 0)] = 1.0

        x = T.matmul(Tensor(one_hot), self.params["embed"])
        x = x + Tensor(position_signal(n, cfg.subword_dim) * cfg.position_scale)
        q = T.matmul(x, self.params["attn_q"])
        keys = T.matmul(x, self.params["attn_k"])
        values = T.matmul(x, self.params["attn_v"])
        scores = T.matmul(q, T.transpose(keys)) * (1.0 / math.sqrt(cfg.subword_dim))
        attended = T.matmul(T.softmax(scores, axis=1), values)
        h = x + T.matmul(attended, self.params["attn_o"])  # (N, K)

        subword_feats = T.transpose(h)  # (K, N)
        pooled = h.mean(axis=0)
        global_ = T.reshape(
            T.matmul(T.reshape(pooled, (1, cfg.subword_dim)), self.params["global_w"]),
            (cfg.embed_dim,),
        ) + self.params["global_b"]

        spans = []
        cursor = 0
        for span in report.subword_spans:
            spans.append((cursor, cursor + len(span)))
            cursor += len(span)
        words = aggregate_subwords(subword_feats, spans, self.params["word_w"], self.params["word_b"])
        return global_, subword_feats, words


@dataclass(frozen=True)
class EmbeddingBundle:
    """All embeddings of one image-report pair."""

    image_global: Tensor  # (d,)
    image_local: Tensor  # (d, M)
    text_global: Tensor  # (d,)
    text_subword: Tensor  # (K, N)
    text_words: Tensor  # (d, W)


class AlignmentModel:
    """The image and text encoders plus their shared configuration."""

    def __init__(self, config: EncoderConfig, vocab: SubwordVocabulary | None = None):
        self.config = config
        self.image_encoder = ImageEncoder(config)
        self.text_encoder = TextEncoder(config, vocab)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, p in self.image_encoder.params.items():
            out["image." + name] = p
        for name, p in self.text_encoder.params.items():
            out["text." + name] = p
        return out

    def set_parameters(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            scope, _, key = name.partition(".")
            target = self.image_encoder.params if scope == "image" else self.text_encoder.params
            if key not in target:
                raise ValueError(f"unknown parameter {name!r}")
            if target[key].shape != p.shape:
                raise ValueError(f"parameter {name!r} shape {p.shape} != {target[key].shape}")
            target[key] = p

    def encode_pair(self, pixels, report: TokenizedReport) -> EmbeddingBundle:
        image_global, image_local = self.image_encoder.encode_image(pixels)
        text_global, text_subword, text_words = self.text_encoder.encode_text(report)
        return EmbeddingBundle(image_global, image_local, text_global, text_subword, text_words)


CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: AlignmentModel, extra: dict | None = None) -> None:
    """Write model parameters and config as versioned JSON."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "params": {
            name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in model.parameters().items()
        },
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, vocab: SubwordVocabulary | None = None) -> tuple[AlignmentModel, dict]:
    """Rebuild a model from a checkpoint, validating shapes against its config."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    cfg_fields = dict(doc["config"])
    cfg_fields["conv_channels"] = tuple(cfg_fields["conv_channels"])
    config = EncoderConfig(**cfg_fields)
    model = AlignmentModel(config, vocab)
    current = model.parameters()
    if set(doc["params"]) != set(current):
        raise ValueError("checkpoint parameter names do not match the model")
    loaded = {}
    for name, entry in doc["params"].items():
        shape = tuple(entry["shape"])
        if shape != current[name].shape:
            raise ValueError(f"checkpoint parameter {name!r} has shape {shape}, expected {current[name].shape}")
        loaded[name] = Tensor(np.array(entry["data"]).reshape(shape), requires_grad=True)
    model.set_parameters(loaded)
    return model, doc.get("extra", {})
