"""Procedural paired corpus: quadrant glyph images with grammar reports.

Each sample draws four independent finding states. An active finding
renders a deterministic glyph into its own quadrant and contributes a
positive clause ("the <region> is <state>"); an inactive one contributes a
negation clause ("there is no <finding>"). Pixel values are quantized to
the 16-bit grid at generation time so in-memory data and PGM round trips
are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import SplitMix, derive_seed

NOISE_AMPLITUDE = 0.05
GLYPH_INTENSITY = 0.9
_PGM_MAX = 65535
MIN_SIDE = 16


@dataclass(frozen=True)
class Finding:
    name: str  # negation clause noun phrase
    region: str  # positive clause subject
    states: tuple[str, ...]  # positive clause adjectives (seeded choice)
    glyph: str
    quadrant: int  # 0..3, row-major


FINDINGS = (
    Finding("cardiomegaly", "heart", ("enlarged", "large"), "disk", 0),
    Finding("pleural effusion", "pleura", ("thickened", "blunted"), "triangle", 1),
    Finding("pneumothorax", "apex", ("lucent", "collapsed"), "cross", 2),
    Finding("consolidation", "lobe", ("consolidated", "dense"), "square", 3),
)


@dataclass(frozen=True)
class SyntheticPair:
    id: int
    image: np.ndarray  # (side, side, 1) float64 in [0, 1]
    report: str
    labels: tuple[bool, ...]  # aligned with FINDINGS
    seed: int


def _glyph_mask(glyph: str, cell: int, variant: int) -> np.ndarray:
    """Boolean (cell, cell) mask of one glyph.

    `variant` selects the rendering of the finding's state synonym (0 draws
    the full-size form, 1 a visibly smaller/thinner one) so that the state
    word in the report is grounded in the pixels.
    """
    ys, xs = np.mgrid[0:cell, 0:cell]
    center = (cell - 1) / 2.0
    margin = max(cell // 5, 2)
    scale = 1.0 if variant == 0 else 0.55
    if glyph == "disk":
        radius = max((cell / 2.0 - margin) * scale, 1.0)
        return (ys - center) ** 2 + (xs - center) ** 2 <= radius**2
    if glyph == "triangle":
        extent = max(int(round((cell - 2 * margin) * scale)), 2)
        return (ys >= xs) & (ys >= margin) & (ys < margin + extent) & (xs >= margin)
    if glyph == "cross":
        half_width = max(cell // 8, 1) if variant == 0 else max(cell // 16, 0)
        band = max(cell // 5, 2)
        vertical = (np.abs(xs - center) <= half_width) & (ys >= band) & (ys < cell - band)
        horizontal = (np.abs(ys - center) <= half_width) & (xs >= band) & (xs < cell - band)
        return vertical | horizontal
    if glyph == "square":
        half = max((cell - 2 * margin) * scale / 2.0, 1.0)
        return (np.abs(ys - center) <= half) & (np.abs(xs - center) <= half)
    raise ValueError(f"unknown glyph {glyph!r}")


def render_image(labels, side: int, noise_seed: int, state_indices=None) -> np.ndarray:
    """Glyphs for active findings plus seeded background noise, quantized."""
    if side < MIN_SIDE:
        raise ValueError("side too small to render glyphs")
    if state_indices is None:
        state_indices = (0,) * len(FINDINGS)
    rng = np.random.default_rng(noise_seed)
    image = rng.uniform(0.0, NOISE_AMPLITUDE, size=(side, side))
    cell = side // 2
    for finding, active, state in zip(FINDINGS, labels, state_indices):
        if not active:
            continue
        row, col = divmod(finding.quadrant, 2)
        mask = _glyph_mask(finding.glyph, cell, state)
        block = image[row * cell : (row + 1) * cell, col * cell : (col + 1) * cell]
        block[mask] = GLYPH_INTENSITY
    image = np.round(image * _PGM_MAX) / _PGM_MAX
    return image[:, :, None]


def build_report(labels, state_indices) -> str:
    """Grammar text for one label vector given per-finding state picks."""
    clauses = ["the lungs are clear" if not any(labels) else "the lungs are abnormal"]
    for finding, active, state in zip(FINDINGS, labels, state_indices):
        if active:
            clauses.append(f"the {finding.region} is {finding.states[state]}")
        else:
            clauses.append(f"there is no {finding.name}")
    return " ".join(clauses)


def generate_pair(sample_id: int, side: int, seed: int) -> SyntheticPair:
    sample_seed = derive_seed(seed, sample_id)
    rng = SplitMix(sample_seed)
    labels = tuple(rng.randrange(2) == 1 for _ in FINDINGS)
    states = tuple(rng.randrange(len(finding.states)) for finding in FINDINGS)
    image = render_image(labels, side, derive_seed(sample_seed, 1), states)
    return SyntheticPair(
        id=sample_id,
        image=image,
        report=build_report(labels, states),
        labels=labels,
        seed=sample_seed,
    )


def generate_corpus(n: int, side: int = 32, seed: int = 0) -> list[SyntheticPair]:
    """`n` reproducible pairs; each sample depends only on (seed, its index)."""
    if n < 1:
        raise ValueError("need at least one sample")
    if side < MIN_SIDE:
        raise ValueError("side too small to render glyphs")
    return [generate_pair(i, side, seed) for i in range(n)]


# -- persistence -------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """16-bit big-endian binary PGM."""
    flat = image[:, :, 0]
    values = np.round(flat * _PGM_MAX).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{flat.shape[1]} {flat.shape[0]}\n{_PGM_MAX}\n".encode("ascii"))
        fh.write(values.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary PGM file: {path}")
        width, height = (int(v) for v in fh.readline().split())
        maxval = int(fh.readline())
        raw = fh.read(width * height * 2)
    values = np.frombuffer(raw, dtype=">u2").reshape(height, width)
    return (values.astype(np.float64) / maxval)[:, :, None]


def save_corpus(pairs, out_dir) -> None:
    """corpus.jsonl plus one PGM per image under images/."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for pair in pairs:
            image_file = f"images/img_{pair.id:06d}.pgm"
            write_pgm(out_dir / image_file, pair.image)
            row = {
                "id": pair.id,
                "report": pair.report,
                "labels": list(pair.labels),
                "image_file": image_file,
                "seed": pair.seed,
            }
            fh.write(json.dumps(row) + "\n")


def load_corpus(in_dir) -> list[SyntheticPair]:
    in_dir = Path(in_dir)
    pairs = []
    with open(in_dir / "corpus.jsonl", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            image = read_pgm(in_dir / row["image_file"])
            pairs.append(
                SyntheticPair(
                    id=row["id"],
                    image=image,
                    report=row["report"],
                    labels=tuple(bool(v) for v in row["labels"]),
                    seed=row["seed"],
                )
            )
    if not pairs:
        raise ValueError(f"empty corpus at {in_dir}")
    return pairs
