"""Encoders: shape contracts, aggregation oracle, receptive fields, checkpoints."""

import numpy as np
import pytest

from vlpert.encoders import (
    AlignmentModel,
    EncoderConfig,
    aggregate_subwords,
    load_checkpoint,
    save_checkpoint,
)
from vlpert.losses import LossWeights, global_contrastive_loss, local_contrastive_loss, total_loss
from vlpert.tensor import Tensor, backward, stack
from vlpert.text import report_from_tokens, tokenize


@pytest.fixture(scope="module")
def model():
    return AlignmentModel(EncoderConfig(init_seed=3))


def test_image_shapes(model):
    cfg = model.config
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(cfg.image_side, cfg.image_side, 1))
    global_, local = model.image_encoder.encode_image(image)
    assert global_.shape == (cfg.embed_dim,)
    assert local.shape == (cfg.embed_dim, cfg.num_regions)


def test_zero_image_has_identical_local_columns(model):
    _, local = model.image_encoder.encode_image(np.zeros((32, 32, 1)))
    assert np.array_equal(local.data, np.tile(local.data[:, :1], (1, model.config.num_regions)))


def test_image_shape_mismatch_rejected(model):
    with pytest.raises(ValueError, match="shape"):
        model.image_encoder.encode_image(np.zeros((16, 16, 1)))
    with pytest.raises(ValueError, match="shape"):
        model.image_encoder.encode_batch(np.zeros((2, 32, 32, 3)))


def _receptive_field(cell: int, layers: int, side: int):
    """Input interval covered by one cell after `layers` stride-2 k=3 p=1 convs."""
    lo, hi = cell, cell
    for _ in range(layers):
        lo = 2 * lo - 1
        hi = 2 * hi + 1
    return max(lo, 0), min(hi, side - 1)


def test_local_features_respect_receptive_fields():
    cfg = EncoderConfig(init_seed=5)
    model_ = AlignmentModel(cfg)
    # identity projection exposes raw cell features (embed_dim == last conv width)
    model_.image_encoder.params["local_w"] = Tensor(np.eye(cfg.embed_dim), requires_grad=True)
    model_.image_encoder.params["local_b"] = Tensor(np.zeros(cfg.embed_dim), requires_grad=True)

    rng = np.random.default_rng(1)
    base = rng.uniform(0.2, 0.8, size=(32, 32, 1))
    changed = base.copy()
    patch = (slice(9, 13), slice(24, 28))  # one small region
    changed[patch] += 0.2

    _, local_base = model_.image_encoder.encode_image(base)
    _, local_changed = model_.image_encoder.encode_image(changed)
    grid = cfg.local_grid
    diffs = np.abs(local_base.data - local_changed.data).max(axis=0).reshape(grid, grid)

    affected = np.zeros((grid, grid), dtype=bool)
    for r in range(grid):
        r_lo, r_hi = _receptive_field(r, cfg.local_layer, 32)
        for c in range(grid):
            c_lo, c_hi = _receptive_field(c, cfg.local_layer, 32)
            overlaps_rows = r_lo <= patch[0].stop - 1 and r_hi >= patch[0].start
            overlaps_cols = c_lo <= patch[1].stop - 1 and c_hi >= patch[1].start
            affected[r, c] = overlaps_rows and overlaps_cols

    assert (diffs[~affected] == 0.0).all()
    assert (diffs[affected] > 0.0).any()


def test_text_shapes(model):
    rep = tokenize("the heart is enlarged there is no pneumothorax")
    global_, subword, words = model.text_encoder.encode_text(rep)
    n = rep.subword_count()
    assert global_.shape == (model.config.embed_dim,)
    assert subword.shape == (model.config.subword_dim, n)
    assert words.shape == (model.config.embed_dim, len(rep.tokens))


def test_single_subword_word_equals_projection(model):
    rep = report_from_tokens(["no"])
    assert rep.subword_spans == (("no",),)
    _, subword, words = model.text_encoder.encode_text(rep)
    projection = model.text_encoder.params["word_w"].data
    bias = model.text_encoder.params["word_b"].data
    expected = projection.T @ subword.data[:, 0] + bias
    assert np.allclose(words.data[:, 0], expected, atol=1e-12)


def test_word_order_changes_global_embedding(model):
    a = model.text_encoder.encode_text(report_from_tokens(["lungs", "clear"]))[0]
    b = model.text_encoder.encode_text(report_from_tokens(["clear", "lungs"]))[0]
    assert not np.allclose(a.data, b.data)


def test_unknown_subword_maps_to_unk_without_error(model):
    out = model.text_encoder.encode_text(report_from_tokens(["Ω"]))
    assert np.isfinite(out[0].data).all()


def test_encoders_deterministic(model):
    rep = tokenize("the lobe is dense")
    a = model.text_encoder.encode_text(rep)[0].data
    b = model.text_encoder.encode_text(rep)[0].data
    assert np.array_equal(a, b)
    image = np.random.default_rng(2).uniform(size=(32, 32, 1))
    x = model.image_encoder.encode_image(image)[0].data
    y = model.image_encoder.encode_image(image)[0].data
    assert np.array_equal(x, y)


# -- aggregate_subwords ---------------------------------------------------------


def test_aggregate_mean_of_equal_vectors_is_projection():
    feats = Tensor(np.tile(np.array([[1.0], [2.0], [3.0]]), (1, 4)))  # same column x4
    projection = Tensor(np.random.default_rng(3).normal(size=(3, 2)))
    out = aggregate_subwords(feats, [(0, 4)], projection)
    assert np.allclose(out.data[:, 0], projection.data.T @ np.array([1.0, 2.0, 3.0]), atol=1e-12)


def test_aggregate_identity_projection_mean():
    feats = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    out = aggregate_subwords(feats, [(0, 2)], Tensor(np.eye(2)))
    assert np.array_equal(out.data[:, 0], [0.5, 0.5])


def test_aggregate_matches_dense_oracle():
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(3, 5))
    projection = rng.normal(size=(3, 4))
    spans = [(0, 2), (2, 5)]
    out = aggregate_subwords(Tensor(feats), spans, Tensor(projection))
    expected = projection.T @ np.stack(
        [feats[:, 0:2].mean(axis=1), feats[:, 2:5].mean(axis=1)], axis=1
    )
    assert np.allclose(out.data, expected, atol=1e-12)


def test_aggregate_rejects_non_partition():
    feats = Tensor(np.zeros((2, 4)))
    proj = Tensor(np.eye(2))
    for spans in ([(0, 2)], [(0, 2), (3, 4)], [(0, 5)], [(2, 4), (0, 2)]):
        with pytest.raises(ValueError, match="partition"):
            aggregate_subwords(feats, spans, proj)


def test_aggregate_word_permutation_equivariance():
    rng = np.random.default_rng(5)
    sizes = [2, 1, 3]
    blocks = [rng.normal(size=(4, s)) for s in sizes]
    projection = Tensor(rng.normal(size=(4, 3)))

    def spans_of(order):
        spans, cursor = [], 0
        for i in order:
            spans.append((cursor, cursor + sizes[i]))
            cursor += sizes[i]
        return spans

    base = aggregate_subwords(
        Tensor(np.concatenate(blocks, axis=1)), spans_of([0, 1, 2]), projection
    )
    perm = [2, 0, 1]
    permuted = aggregate_subwords(
        Tensor(np.concatenate([blocks[i] for i in perm], axis=1)), spans_of(perm), projection
    )
    assert np.array_equal(permuted.data, base.data[:, perm])


# -- gradient flow and checkpoints ----------------------------------------------


@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_reaches_every_parameter(seed):
    cfg = EncoderConfig(init_seed=seed)
    model_ = AlignmentModel(cfg)
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(4, 32, 32, 1))
    reports = [
        tokenize("the lungs are clear there is no pneumothorax"),
        tokenize("the heart is enlarged there is no consolidation"),
        tokenize("the pleura is thickened the apex is lucent"),
        tokenize("the lobe is dense there is no pleural effusion"),
    ]
    image_global, image_local = model_.image_encoder.encode_batch(images)
    encoded = [model_.text_encoder.encode_text(r) for r in reports]
    text_global = stack([e[0] for e in encoded])
    weights = LossWeights(alpha=0.5, beta=0.0)
    g = global_contrastive_loss(image_global, text_global, weights.tau)
    lo = local_contrastive_loss(image_local, [e[2] for e in encoded], weights.tau)
    breakdown = total_loss(g, lo, None, weights)
    backward(breakdown.total)
    for name, p in model_.parameters().items():
        assert p.grad is not None and np.abs(p.grad).max() > 0.0, name


def test_checkpoint_roundtrip(tmp_path, model):
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, model, extra={"note": 1})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": 1}
    for name, p in model.parameters().items():
        assert np.array_equal(loaded.parameters()[name].data, p.data), name
    rep = tokenize("the lungs are clear")
    assert np.array_equal(
        loaded.text_encoder.encode_text(rep)[0].data,
        model.text_encoder.encode_text(rep)[0].data,
    )


def test_checkpoint_rejects_bad_version(tmp_path, model):
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, model)
    import json

    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_checkpoint_rejects_shape_mismatch(tmp_path, model):
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, model)
    import json

    doc = json.loads(path.read_text())
    doc["params"]["image.conv1_b"]["shape"] = [5]
    doc["params"]["image.conv1_b"]["data"] = [0.0] * 5
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="shape"):
        load_checkpoint(path)


def test_config_validation():
    with pytest.raises(ValueError, match="num_regions"):
        EncoderConfig(num_regions=9)
    with pytest.raises(ValueError, match="positive"):
        EncoderConfig(embed_dim=0)
    with pytest.raises(ValueError, match="local_layer"):
        EncoderConfig(local_layer=4)
    cfg = EncoderConfig(local_layer=2, num_regions=64)  # 8x8 grid from layer 2
    assert cfg.local_grid == 8


def test_local_layer_knob_changes_region_count():
    cfg = EncoderConfig(local_layer=2, num_regions=64)
    model_ = AlignmentModel(cfg)
    _, local = model_.image_encoder.encode_image(np.zeros((32, 32, 1)))
    assert local.shape == (cfg.embed_dim, 64)
