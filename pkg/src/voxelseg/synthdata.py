"""Synthetic atlas generation.

A fixed template (per master seed) places N Voronoi sites inside a
foreground sphere and assigns each region an intensity mean; a configurable
number of region pairs share a mean on purpose, so intensity alone cannot
classify them and spatial context has to carry the signal.  Each subject
applies a global rigid jitter plus a small random displacement of the
sites, then labels every foreground voxel by its nearest site.  Region
shapes are Voronoi cells intersected with the sphere, which keeps them
convex and therefore contiguous at small deformations.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .volume import Atlas, LabelVolume, Volume, load_labels, load_volume, save_labels, save_volume

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MAX_RETRIES = 5


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple[int, int, int] = (64, 64, 64)
    n_regions: int = 8
    seed: int = 0
    intensity_range: tuple[float, float] = (0.25, 0.95)
    shared_mean_pairs: int = 2
    noise_std: float = 0.03
    deformation: float = 0.5
    jitter_rot: float = 0.05
    jitter_trans: float = 1.5
    foreground_radius_frac: float = 0.42

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "intensity_range", tuple(self.intensity_range))
        if self.n_regions < 2:
            raise ValueError("n_regions must be >= 2")
        if 2 * self.shared_mean_pairs > self.n_regions:
            raise ValueError("too many shared-mean pairs for the region count")
        if min(self.dims) < 8:
            raise ValueError("dims too small for a foreground sphere")
        if not 0 < self.foreground_radius_frac < 0.5:
            raise ValueError("foreground_radius_frac must be in (0, 0.5)")


@dataclass
class SynthTemplate:
    sites: np.ndarray   # (N, 3) float64, shared across subjects
    means: np.ndarray   # (N,) float64 region intensity means
    center: np.ndarray  # (3,) sphere center
    radius: float


def _rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    ux, uy, uz = axis
    k = np.array([[0.0, -uz, uy], [uz, 0.0, -ux], [-uy, ux, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def build_template(cfg: SynthConfig) -> SynthTemplate:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    center = (np.array(cfg.dims, dtype=np.float64) - 1.0) / 2.0
    radius = cfg.foreground_radius_frac * min(cfg.dims)
    site_radius = 0.7 * radius
    d_min = 1.4 * site_radius / cfg.n_regions ** (1.0 / 3.0)
    sites: list[np.ndarray] = []
    while len(sites) < cfg.n_regions:
        for _ in range(200):
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            p = center + u * site_radius * rng.uniform() ** (1.0 / 3.0)
            if all(np.linalg.norm(p - q) >= d_min for q in sites):
                sites.append(p)
                if len(sites) == cfg.n_regions:
                    break
        else:
            d_min *= 0.9  # prevents livelock on unlucky draws
            continue

    lo, hi = cfg.intensity_range
    n_distinct = cfg.n_regions - cfg.shared_mean_pairs
    distinct = np.linspace(lo, hi, n_distinct)
    means = np.empty(cfg.n_regions)
    # the first `shared_mean_pairs` mean values serve two regions each
    for j in range(cfg.shared_mean_pairs):
        means[2 * j] = means[2 * j + 1] = distinct[j]
    means[2 * cfg.shared_mean_pairs :] = distinct[cfg.shared_mean_pairs :]
    return SynthTemplate(np.array(sites), means, center, radius)


def _subject_rng(cfg: SynthConfig, subject_index: int, retry: int) -> np.random.Generator:
    key = (1, subject_index) if retry == 0 else (1, subject_index, retry)
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=key))


def _label_field(cfg, template, sites, center):
    x, y, z = np.indices(cfg.dims, dtype=np.float64)
    d2_center = (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2
    foreground = d2_center <= template.radius**2
    best = np.full(cfg.dims, np.inf)
    labels = np.zeros(cfg.dims, dtype=np.uint16)
    for i, site in enumerate(sites, start=1):
        d2 = (x - site[0]) ** 2 + (y - site[1]) ** 2 + (z - site[2]) ** 2
        closer = d2 < best
        best[closer] = d2[closer]
        labels[closer] = i
    labels[~foreground] = 0
    return labels


def generate_atlas(
    cfg: SynthConfig, subject_index: int, template: SynthTemplate | None = None
) -> Atlas:
    """Deterministic synthetic atlas for one subject index."""
    if template is None:
        template = build_template(cfg)
    for retry in range(MAX_RETRIES):
        rng = _subject_rng(cfg, subject_index, retry)
        angle = rng.uniform(-cfg.jitter_rot, cfg.jitter_rot)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        shift = rng.uniform(-cfg.jitter_trans, cfg.jitter_trans, size=3)
        disp = rng.normal(0.0, cfg.deformation, size=(cfg.n_regions, 3))
        rot = _rotation_matrix(axis, angle)
        sites = (template.sites - template.center) @ rot.T + template.center + shift + disp
        center = template.center + shift

        labels = _label_field(cfg, template, sites, center)
        counts = np.bincount(labels.ravel(), minlength=cfg.n_regions + 1)[1:]
        if (counts > 0).all():
            break
        logger.warning(
            "subject %d retry %d: empty regions %s",
            subject_index,
            retry + 1,
            [int(i + 1) for i in np.nonzero(counts == 0)[0]],
        )
    else:
        raise ValueError(
            f"subject {subject_index}: degenerate partition after {MAX_RETRIES} retries"
        )

    image = np.zeros(cfg.dims, dtype=np.float32)
    fg = labels > 0
    values = template.means[labels[fg].astype(np.int64) - 1]
    values = values + rng.normal(0.0, cfg.noise_std, size=values.shape)
    image[fg] = np.maximum(values, 1e-3).astype(np.float32)

    return Atlas(
        Volume(cfg.dims, image),
        LabelVolume(cfg.dims, labels),
        f"subj{subject_index:03d}",
    )


def generate_dataset(cfg: SynthConfig, n_subjects: int) -> list[Atlas]:
    """Subjects drawn from one shared template; deterministic per seed."""
    template = build_template(cfg)
    return [generate_atlas(cfg, i, template) for i in range(n_subjects)]


# ---------------------------------------------------------------------------
# on-disk datasets
# ---------------------------------------------------------------------------


def write_dataset(cfg: SynthConfig, n_train: int, n_test: int, out_dir) -> dict:
    """Volumes, labels and a manifest for a train/test split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atlases = generate_dataset(cfg, n_train + n_test)
    entries = []
    for i, atlas in enumerate(atlases):
        split = "train" if i < n_train else "test"
        image_name = f"{atlas.id}.vol"
        labels_name = f"{atlas.id}.lab"
        save_volume(atlas.image, out / image_name)
        save_labels(atlas.labels, out / labels_name)
        entries.append(
            {"id": atlas.id, "split": split, "image": image_name, "labels": labels_name}
        )
    manifest = {
        "format": "vseg-dataset-1",
        "config": asdict(cfg),
        "n_train": n_train,
        "n_test": n_test,
        "atlases": entries,
    }
    with open(out / MANIFEST_NAME, "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(data_dir) -> tuple[list[Atlas], list[Atlas], dict]:
    """Train and test atlases as listed in the dataset manifest."""
    root = Path(data_dir)
    with open(root / MANIFEST_NAME, "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "vseg-dataset-1":
        raise ValueError(f"{root}: unknown dataset manifest format")
    train, test = [], []
    for entry in manifest["atlases"]:
        atlas = Atlas(
            load_volume(root / entry["image"]),
            load_labels(root / entry["labels"]),
            entry["id"],
        )
        (train if entry["split"] == "train" else test).append(atlas)
    return train, test, manifest
