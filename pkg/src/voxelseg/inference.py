"""Whole-volume segmentation and iterative centroid refinement.

The first stage classifies every masked voxel without centroid features.
Each refinement round recomputes region centroids from the previous
labelling and reclassifies with the centroid-aware model, stopping when
the changed fraction drops to ``eps`` or after ``max_iters`` rounds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .features import CentroidSet, FeatureConfig, FeatureExtractor, compute_centroids
from .network import NetworkModel
from .volume import LabelVolume, Volume

logger = logging.getLogger(__name__)

DEFAULT_BLOCK = 8192


@dataclass
class SegmentationResult:
    labels: LabelVolume
    iterations: int
    changed_history: list[float] = field(default_factory=list)
    probabilities: np.ndarray | None = None  # per-voxel max class probability

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def foreground_mask(v: Volume) -> np.ndarray:
    """Default mask for unlabelled volumes: strictly positive intensity."""
    return v.data > 0


def segment_once(
    model: NetworkModel,
    v: Volume,
    cfg: FeatureConfig,
    cs: CentroidSet | None = None,
    mask: np.ndarray | None = None,
    block: int = DEFAULT_BLOCK,
    want_probabilities: bool = False,
):
    """Argmax class for every masked voxel; unmasked voxels stay background.

    Distance noise never applies here; ties resolve to the lowest region id.
    """
    if model.with_centroid_pathway and cs is None:
        raise ValueError("model expects centroid distances but none were given")
    if not model.with_centroid_pathway and cs is not None:
        raise ValueError("model has no centroid pathway; do not pass centroids")
    if mask is None:
        mask = foreground_mask(v)
    if mask.shape != v.dims:
        raise ValueError(f"mask shape {mask.shape} does not match volume {v.dims}")
    coords = np.argwhere(mask)
    labels = np.zeros(v.dims, dtype=np.uint16)
    probs_map = np.zeros(v.dims, dtype=np.float32) if want_probabilities else None
    extractor = FeatureExtractor(v, cfg, cs)
    for start in range(0, len(coords), block):
        sel = coords[start : start + block]
        probs = model.forward_batch(extractor.extract(sel))
        labels[sel[:, 0], sel[:, 1], sel[:, 2]] = probs.argmax(axis=1) + 1
        if want_probabilities:
            probs_map[sel[:, 0], sel[:, 1], sel[:, 2]] = probs.max(axis=1)
    result = LabelVolume(v.dims, labels)
    return (result, probs_map) if want_probabilities else result


def changed_fraction(
    prev: LabelVolume, next_labels: LabelVolume, mask: np.ndarray | None = None
) -> float:
    """Fraction of masked voxels whose label changed between two rounds."""
    if prev.dims != next_labels.dims:
        raise ValueError("label volumes must share dims")
    if mask is None:
        mask = np.ones(prev.dims, dtype=bool)
    total = int(mask.sum())
    if total == 0:
        raise ValueError("empty comparison mask")
    return int((prev.labels[mask] != next_labels.labels[mask]).sum()) / total


def segment_refined(
    stage1: NetworkModel,
    full: NetworkModel,
    v: Volume,
    cfg: FeatureConfig,
    mask: np.ndarray | None = None,
    max_iters: int = 10,
    eps: float = 0.0,
    block: int = DEFAULT_BLOCK,
    want_probabilities: bool = False,
) -> SegmentationResult:
    """Stage-1 labelling followed by centroid-refinement rounds."""
    if stage1.with_centroid_pathway:
        raise ValueError("stage-1 model must be built without the centroid pathway")
    if not full.with_centroid_pathway:
        raise ValueError("refinement model must include the centroid pathway")
    if mask is None:
        mask = foreground_mask(v)

    out = segment_once(stage1, v, cfg, None, mask, block, want_probabilities)
    labels, probs_map = out if want_probabilities else (out, None)
    if not (labels.labels > 0).any():
        raise ValueError("stage-1 segmentation is entirely background")

    history: list[float] = []
    iterations = 0
    for _ in range(max_iters):
        cs = compute_centroids(labels, cfg.n_regions)
        out = segment_once(full, v, cfg, cs, mask, block, want_probabilities)
        refined, probs_map = out if want_probabilities else (out, None)
        fraction = changed_fraction(labels, refined, mask)
        history.append(fraction)
        labels = refined
        iterations += 1
        if fraction <= eps:
            break
    else:
        if max_iters > 0:
            logger.warning(
                "refinement did not converge in %d rounds (last change %.4g)",
                max_iters,
                history[-1],
            )
    return SegmentationResult(labels, iterations, history, probs_map)
