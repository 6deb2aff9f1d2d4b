"""Per-class visual signatures shared by the shape renderer and the oracle VLM."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SHAPES = ("circle", "square", "triangle", "diamond", "ellipse", "cross", "pentagon", "star")

# Pixels whose chroma (max - min over RGB) falls below this are background.
CHROMA_THRESHOLD = 0.15


@dataclass(frozen=True)
class ClassSignature:
    class_id: int
    shape: str
    hue: float  # in [0, 1)


def class_signatures(n_classes: int, seed: int = 0) -> list[ClassSignature]:
    """Evenly spaced hues in a seeded order, shapes cycled in a seeded order."""
    rng = np.random.default_rng(seed)
    hue_slots = rng.permutation(n_classes)
    shape_order = rng.permutation(len(SHAPES))
    return [
        ClassSignature(i, SHAPES[shape_order[i % len(SHAPES)]], float(hue_slots[i]) / n_classes)
        for i in range(n_classes)
    ]


def synthetic_vocabulary(n_classes: int) -> dict[int, str]:
    return {i: f"class{i}" for i in range(n_classes)}
