"""Prediction refinement and model combination."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from odseg.data import as_labels
from odseg.metrics import connected_components_26


@dataclass
class PostprocessConfig:
    thresholds: dict = field(default_factory=dict)  # class index -> theta in (0, 1)
    min_component_size: int = 10
    per_region: bool = False
    morphology: str | None = None  # "open" or "close" applied to the whole tumor
    morph_radius: int = 1

    def __post_init__(self):
        self.thresholds = {int(k): float(v) for k, v in self.thresholds.items()}
        for c, theta in self.thresholds.items():
            if c not in (1, 2, 3) or not 0 < theta < 1:
                raise ValueError(f"threshold for class {c} must be in (0, 1), got {theta}")
        if self.min_component_size < 0 or self.morph_radius < 0:
            raise ValueError("min_component_size and morph_radius must be >= 0")
        if self.morphology not in (None, "open", "close"):
            raise ValueError(f"unknown morphology {self.morphology!r}")


def threshold_probs(probs, thresholds=None, tol=1e-5) -> np.ndarray:
    """Argmax labels; a class with a threshold may only win if it reaches it."""
    probs = np.asarray(probs)
    if probs.ndim != 4:
        raise ValueError("probabilities must be (classes, D, H, W)")
    if np.any(probs < -tol) or np.any(np.abs(probs.sum(axis=0) - 1) > tol):
        raise ValueError("probabilities must be nonnegative and sum to 1 per voxel")
    labels = np.argmax(probs, axis=0).astype(np.uint8)
    for c, theta in (thresholds or {}).items():
        labels[(labels == c) & (probs[c] < theta)] = 0
    return labels


def _shift_stack(mask, radius, reducer):
    padded = np.pad(mask, radius, constant_values=False)
    out = np.zeros(mask.shape, dtype=bool) if reducer is np.logical_or else np.ones(mask.shape, dtype=bool)
    d, h, w = mask.shape
    size = 2 * radius + 1
    for a in range(size):
        for b in range(size):
            for c in range(size):
                reducer(out, padded[a:a + d, b:b + h, c:c + w], out=out)
    return out


def morph(mask, op: str, radius: int = 1) -> np.ndarray:
    """Binary morphology with a ``(2r+1)^3`` cube; outside the volume is background."""
    mask = np.asarray(mask, dtype=bool)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return mask.copy()
    if op == "dilate":
        return _shift_stack(mask, radius, np.logical_or)
    if op == "erode":
        return _shift_stack(mask, radius, np.logical_and)
    if op == "open":
        return morph(morph(mask, "erode", radius), "dilate", radius)
    if op == "close":
        return morph(morph(mask, "dilate", radius), "erode", radius)
    raise ValueError(f"unknown morphology op {op!r}")


def remove_small_components(m, min_size: int, per_region: bool = False) -> np.ndarray:
    """Relabel components smaller than ``min_size`` as background.

    Components are taken over the whole tumor, or over each label separately
    with ``per_region``.
    """
    if min_size < 0:
        raise ValueError("min_size must be >= 0")
    labels = np.array(as_labels(m), dtype=np.uint8, copy=True)
    if min_size == 0:
        return labels
    groups = [labels == c for c in (1, 2, 3)] if per_region else [labels > 0]
    for g in groups:
        comp, sizes = connected_components_26(g)
        small = np.flatnonzero(sizes < min_size) + 1
        if small.size:
            labels[np.isin(comp, small)] = 0
    return labels


def postprocess(probs, cfg: PostprocessConfig) -> np.ndarray:
    labels = threshold_probs(probs, cfg.thresholds)
    if cfg.morphology is not None and cfg.morph_radius > 0:
        keep = morph(labels > 0, cfg.morphology, cfg.morph_radius)
        # voxels gained by closing take their most likely tumor class
        gained = keep & (labels == 0)
        labels[gained] = (np.argmax(np.asarray(probs)[1:], axis=0) + 1)[gained]
        labels[~keep] = 0
    return remove_small_components(labels, cfg.min_component_size, cfg.per_region)


def merge_label(a, b, label: int, mode: str = "replace") -> np.ndarray:
    """Take model ``b``'s map for one label and keep ``a`` everywhere else.

    ``replace``: the output's ``label`` set is exactly ``b``'s, voxels where only
    ``a`` had ``label`` become background. ``union``: ``a``'s claims are kept too.
    """
    la, lb = as_labels(a), as_labels(b)
    if la.shape != lb.shape:
        raise ValueError(f"extents differ: {la.shape} vs {lb.shape}")
    if mode not in ("replace", "union"):
        raise ValueError(f"unknown merge mode {mode!r}")
    out = np.array(la, dtype=np.uint8, copy=True)
    if mode == "replace":
        out[(la == label) & (lb != label)] = 0
    out[lb == label] = label
    return out


def best_of(a_scores: dict, b_scores: dict, names=("a", "b")) -> dict:
    """Per key, the larger score and which record it came from (ties go to ``a``)."""
    if set(a_scores) != set(b_scores):
        raise KeyError(f"score keys differ: {sorted(a_scores)} vs {sorted(b_scores)}")
    out = {}
    for key in a_scores:
        a, b = a_scores[key], b_scores[key]
        if b > a:
            out[key] = {"score": b, "source": names[1], "tie": False}
        else:
            out[key] = {"score": a, "source": names[0], "tie": a == b}
    return out
