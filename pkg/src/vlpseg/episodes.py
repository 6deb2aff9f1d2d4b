"""Episode supply: synthetic shapes, fold splits, test-pair sampling and a manifest format."""
from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from skimage.draw import ellipse as draw_ellipse
from skimage.draw import polygon as draw_polygon

from .backbones import TEXT_TEMPLATE
from .errors import ClassAbsentError, DataError, EmptyMaskError, FoldError
from .signatures import class_signatures, synthetic_vocabulary

MANIFEST_HEADER = "vlpseg-manifest v1"
MIN_FOREGROUND = 0.01
MAX_FOREGROUND = 0.60


@dataclass
class Episode:
    target_image: np.ndarray  # H x W x 3, float32 in [0, 1]
    reference_image: np.ndarray
    reference_mask: np.ndarray  # H x W, uint8 in {0, 1}
    class_id: int
    text_label: str
    gt_mask: np.ndarray
    seed: int | None = None
    # Full index maps (0 = background, k + 1 = class k), kept when known.
    target_labels: np.ndarray | None = field(default=None, repr=False)
    reference_labels: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    train_classes: tuple[int, ...]
    test_classes: tuple[int, ...]


@dataclass
class Difficulty:
    """Scene parameters; radii are in pixels for a 64 x 64 image and scale with image size."""

    min_radius: float = 9.0
    max_radius: float = 21.0
    max_distractors: int = 2
    distractor_min_radius: float = 6.0
    distractor_max_radius: float = 12.0


def text_for(label: str) -> str:
    return TEXT_TEMPLATE.format(label)


def validate_episode(ep: Episode, vocabulary=None) -> None:
    n = ep.gt_mask.size
    if ep.reference_mask.sum() < MIN_FOREGROUND * n:
        raise EmptyMaskError(f"reference mask covers {ep.reference_mask.mean():.4f} < 1% of the image")
    if not ep.gt_mask.any():
        raise EmptyMaskError("ground-truth mask is empty")
    if vocabulary is not None and ep.class_id not in vocabulary:
        raise DataError(f"class {ep.class_id} not in vocabulary")


# ---------------------------------------------------------------- rendering

def _polygon(shape: str, r: float, theta: float) -> np.ndarray:
    if shape == "square":
        angles, radii = np.arange(4) * np.pi / 2 + np.pi / 4, np.full(4, r * 1.1)
    elif shape == "triangle":
        angles, radii = np.arange(3) * 2 * np.pi / 3, np.full(3, r * 1.25)
    elif shape == "diamond":
        angles, radii = np.arange(4) * np.pi / 2, np.array([r * 1.25, r * 0.8, r * 1.25, r * 0.8])
    elif shape == "pentagon":
        angles, radii = np.arange(5) * 2 * np.pi / 5, np.full(5, r * 1.1)
    elif shape == "star":
        angles, radii = np.arange(10) * np.pi / 5, np.where(np.arange(10) % 2 == 0, r * 1.3, r * 0.65)
    elif shape == "cross":
        a, b = r * 1.15, r * 0.45
        pts = np.array([(b, a), (b, b), (a, b), (a, -b), (b, -b), (b, -a),
                        (-b, -a), (-b, -b), (-a, -b), (-a, b), (-b, b), (-b, a)])
        c, s = math.cos(theta), math.sin(theta)
        return pts @ np.array([[c, s], [-s, c]])
    else:
        raise ValueError(f"unknown polygon shape {shape!r}")
    angles = angles + theta
    return np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)


def render_shape(shape: str, cx: float, cy: float, r: float, theta: float, size: int) -> np.ndarray:
    """Boolean footprint of one shape on a size x size canvas."""
    out = np.zeros((size, size), dtype=bool)
    if shape == "circle":
        rr, cc = draw_ellipse(cy, cx, r, r, shape=out.shape)
    elif shape == "ellipse":
        rr, cc = draw_ellipse(cy, cx, r * 1.3, r * 0.7, shape=out.shape, rotation=theta)
    else:
        pts = _polygon(shape, r, theta)
        rr, cc = draw_polygon(pts[:, 1] + cy, pts[:, 0] + cx, shape=out.shape)
    out[rr, cc] = True
    return out


def _quantize(x: np.ndarray) -> np.ndarray:
    # Snap to 8-bit levels so that PNG round trips are exact.
    return (np.round(np.clip(x, 0, 1) * 255) / 255).astype(np.float32)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.55, size=(4, 4)).astype(np.float32)
    smooth = np.asarray(PILImage.fromarray(coarse, mode="F").resize((size, size), PILImage.BILINEAR))
    grey = smooth + rng.normal(0, 0.02, size=(size, size))
    return np.repeat(grey[..., None], 3, axis=2)


def _class_color(rng: np.random.Generator, hue: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0)), dtype=np.float32)


def render_scene(rng: np.random.Generator, class_id: int, signatures, size: int = 64,
                 difficulty: Difficulty | None = None, distractor_pool=None):
    """One image with a single instance of ``class_id`` drawn on top of 0..max distractors.

    Returns ``(image, labels)`` where ``labels`` is 0 for background and
    ``k + 1`` where class ``k`` is visible.
    """
    difficulty = difficulty or Difficulty()
    sigs = {s.class_id: s for s in signatures}
    k = size / 64.0
    if distractor_pool is None:
        distractor_pool = [c for c in sigs if c != class_id]
    distractor_pool = [c for c in distractor_pool if c != class_id]
    while True:
        image = _background(rng, size)
        labels = np.zeros((size, size), dtype=np.int32)
        n_distract = int(rng.integers(0, difficulty.max_distractors + 1)) if distractor_pool else 0
        for c in rng.choice(distractor_pool, size=n_distract, replace=False) if n_distract else []:
            r = rng.uniform(difficulty.distractor_min_radius, difficulty.distractor_max_radius) * k
            cx, cy = rng.uniform(0, size, size=2)
            fp = render_shape(sigs[int(c)].shape, cx, cy, r, rng.uniform(0, 2 * np.pi), size)
            image[fp] = _class_color(rng, sigs[int(c)].hue)
            labels[fp] = int(c) + 1
        r = rng.uniform(difficulty.min_radius, difficulty.max_radius) * k
        cx, cy = rng.uniform(0.6 * r, size - 0.6 * r, size=2)
        fp = render_shape(sigs[class_id].shape, cx, cy, r, rng.uniform(0, 2 * np.pi), size)
        if not (MIN_FOREGROUND <= fp.mean() <= MAX_FOREGROUND):
            continue
        image[fp] = _class_color(rng, sigs[class_id].hue)
        labels[fp] = class_id + 1
        return _quantize(image), labels


def generate_episode(seed: int, class_id: int, n_classes: int = 20, image_size: int = 64,
                     difficulty: Difficulty | None = None, distractor_classes=None,
                     signature_seed: int = 0) -> Episode:
    """Deterministic synthetic episode: reference and target are independent renders of ``class_id``."""
    if not 0 <= class_id < n_classes:
        raise ValueError(f"class_id {class_id} outside the {n_classes}-class synthetic vocabulary")
    sigs = class_signatures(n_classes, signature_seed)
    rng = np.random.default_rng([seed, class_id])
    ref_img, ref_labels = render_scene(rng, class_id, sigs, image_size, difficulty, distractor_classes)
    tgt_img, tgt_labels = render_scene(rng, class_id, sigs, image_size, difficulty, distractor_classes)
    return Episode(
        target_image=tgt_img,
        reference_image=ref_img,
        reference_mask=(ref_labels == class_id + 1).astype(np.uint8),
        class_id=class_id,
        text_label=text_for(synthetic_vocabulary(n_classes)[class_id]),
        gt_mask=(tgt_labels == class_id + 1).astype(np.uint8),
        seed=seed,
        target_labels=tgt_labels,
        reference_labels=ref_labels,
    )


# ---------------------------------------------------------------- folds

def make_folds(vocabulary, n_folds: int = 4) -> list[FoldSpec]:
    """Class-disjoint splits: fold f tests on the classes with ``id % n_folds == f``."""
    if isinstance(vocabulary, int):
        ids = list(range(vocabulary))
    else:
        ids = sorted(vocabulary)
    if not ids or len(ids) % n_folds:
        raise FoldError(
            f"a vocabulary of {len(ids)} classes cannot be split into {n_folds} equal folds; "
            f"use a class count divisible by {n_folds} (e.g. --classes {max(n_folds, len(ids) // n_folds * n_folds)})"
        )
    return [
        FoldSpec(
            fold_index=f,
            train_classes=tuple(i for i in ids if i % n_folds != f),
            test_classes=tuple(i for i in ids if i % n_folds == f),
        )
        for f in range(n_folds)
    ]


def sample_test_pairs(fold: FoldSpec, n: int = 1000, seed: int = 0, n_classes: int | None = None,
                      image_size: int = 64, difficulty: Difficulty | None = None,
                      signature_seed: int = 0) -> list[Episode]:
    """``n`` synthetic test episodes cycling uniformly over the fold's test classes."""
    if not fold.test_classes:
        raise FoldError(f"fold {fold.fold_index} has no test classes")
    if n_classes is None:
        n_classes = len(fold.train_classes) + len(fold.test_classes)
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32) if n else []
    return [
        generate_episode(int(s), fold.test_classes[k % len(fold.test_classes)], n_classes, image_size,
                         difficulty, signature_seed=signature_seed)
        for k, s in enumerate(seeds)
    ]


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestEntry:
    image: str
    mask: str
    class_id: int


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    vocabulary: dict[int, str]

    def image_path(self, idx: int) -> Path:
        return self.root / self.entries[idx].image

    def mask_path(self, idx: int) -> Path:
        return self.root / self.entries[idx].mask


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise DataError(f"{path}:1: expected header {MANIFEST_HEADER!r}")
    entries, vocab = [], {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        try:
            if cols[0] == "class":
                vocab[int(cols[1])] = cols[2]
            else:
                image, mask, cid = cols
                entries.append(ManifestEntry(image, mask, int(cid)))
        except (ValueError, IndexError):
            raise DataError(f"{path}:{lineno}: malformed manifest row {line!r}") from None
    manifest = DatasetManifest(path.parent, entries, vocab)
    for idx, e in enumerate(entries):
        if e.class_id not in vocab:
            raise DataError(f"{path}: entry {idx} uses class {e.class_id} missing from the vocabulary")
        for p in (manifest.image_path(idx), manifest.mask_path(idx)):
            if not p.is_file():
                raise DataError(f"{path}: entry {idx} references missing file {p}")
    return manifest


def write_manifest(path, entries, vocabulary: dict[int, str]) -> Path:
    path = Path(path)
    rows = [MANIFEST_HEADER]
    rows += [f"class\t{i}\t{label}" for i, label in sorted(vocabulary.items())]
    rows += [f"{e.image}\t{e.mask}\t{e.class_id}" for e in entries]
    path.write_text("\n".join(rows) + "\n")
    return path


def save_image(image: np.ndarray, path) -> None:
    PILImage.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)


def save_index_mask(labels: np.ndarray, path) -> None:
    PILImage.fromarray(labels.astype(np.uint8), mode="L").save(path)


def read_image(path, size: int | None = None) -> np.ndarray:
    try:
        img = PILImage.open(path).convert("RGB")
    except (OSError, FileNotFoundError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), PILImage.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def read_index_mask(path, size: int | None = None) -> np.ndarray:
    try:
        img = PILImage.open(path)
    except (OSError, FileNotFoundError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from None
    if img.mode not in ("L", "P", "1", "I"):
        raise DataError(f"mask {path} must be single-channel, got mode {img.mode}")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), PILImage.NEAREST)
    return np.asarray(img, dtype=np.int32)


def binarize(labels: np.ndarray, class_id: int, path=None) -> np.ndarray:
    """Mask indices store ``class_id + 1``; index 0 is background."""
    mask = (labels == class_id + 1).astype(np.uint8)
    if not mask.any():
        where = f" in {path}" if path is not None else ""
        raise ClassAbsentError(f"class {class_id} does not appear{where}")
    return mask


def episode_from_manifest(manifest: DatasetManifest, ref_idx: int, tgt_idx: int, class_id: int,
                          image_size: int | None = 64) -> Episode:
    if class_id not in manifest.vocabulary:
        raise DataError(f"class {class_id} is not in the manifest vocabulary")
    for idx in (ref_idx, tgt_idx):
        if not 0 <= idx < len(manifest.entries):
            raise DataError(f"entry index {idx} out of range (manifest has {len(manifest.entries)})")
    ref_labels = read_index_mask(manifest.mask_path(ref_idx), image_size)
    tgt_labels = read_index_mask(manifest.mask_path(tgt_idx), image_size)
    ep = Episode(
        target_image=read_image(manifest.image_path(tgt_idx), image_size),
        reference_image=read_image(manifest.image_path(ref_idx), image_size),
        reference_mask=binarize(ref_labels, class_id, manifest.mask_path(ref_idx)),
        class_id=class_id,
        text_label=text_for(manifest.vocabulary[class_id]),
        gt_mask=binarize(tgt_labels, class_id, manifest.mask_path(tgt_idx)),
        target_labels=tgt_labels,
        reference_labels=ref_labels,
    )
    return ep


def write_episode(ep: Episode, out_dir, vocabulary: dict[int, str], stem: str = "episode") -> Path:
    """Write an episode as a two-entry manifest (reference first, target second)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for role, image, labels, mask in (
        ("ref", ep.reference_image, ep.reference_labels, ep.reference_mask),
        ("tgt", ep.target_image, ep.target_labels, ep.gt_mask),
    ):
        if labels is None:
            labels = mask.astype(np.int32) * (ep.class_id + 1)
        save_image(image, out_dir / f"{stem}_{role}.png")
        save_index_mask(labels, out_dir / f"{stem}_{role}_mask.png")
        entries.append(ManifestEntry(f"{stem}_{role}.png", f"{stem}_{role}_mask.png", ep.class_id))
    return write_manifest(out_dir / "manifest.tsv", entries, vocabulary)
