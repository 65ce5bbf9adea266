"""Per-voxel input features.

Each voxel is described by four feature families extracted around it:

* a 3D intensity patch of side ``a``,
* three orthogonal 2D patches of side ``b`` (sagittal = yz plane,
  coronal = xz plane, transverse = xy plane, always in this order),
* the same three orientations extracted at side ``s*c`` and mean-pooled
  by factor ``s`` down to ``c x c``,
* the N Euclidean distances from the voxel to the region centroids,
  divided by the average pairwise centroid distance D.

Out-of-volume intensities are zero.  The flat feature vector concatenates
the families in the order above.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .volume import LabelVolume, Volume

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureConfig:
    a: int = 7
    b: int = 13
    c: int = 13
    s: int = 3
    n_regions: int = 8
    noise_sigma: float = 0.05

    def __post_init__(self):
        for name in ("a", "b", "c"):
            v = getattr(self, name)
            if v <= 0 or v % 2 == 0:
                raise ValueError(f"{name} must be odd and positive, got {v}")
        if self.s <= 0:
            raise ValueError(f"s must be positive, got {self.s}")
        if self.n_regions < 1:
            raise ValueError(f"n_regions must be >= 1, got {self.n_regions}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


class FeatureLayout:
    """Block offsets of the feature families inside the flat vector."""

    def __init__(self, cfg: FeatureConfig):
        a, b, c, n = cfg.a, cfg.b, cfg.c, cfg.n_regions
        off = 0
        self.patch3d = slice(off, off + a**3)
        off += a**3
        self.ortho = tuple(
            slice(off + i * b**2, off + (i + 1) * b**2) for i in range(3)
        )
        off += 3 * b**2
        self.down = tuple(
            slice(off + i * c**2, off + (i + 1) * c**2) for i in range(3)
        )
        off += 3 * c**2
        self.cdist = slice(off, off + n)
        self.length_without_cdist = off
        self.length = off + n


def feature_length(cfg: FeatureConfig, with_cdist: bool = True) -> int:
    layout = FeatureLayout(cfg)
    return layout.length if with_cdist else layout.length_without_cdist


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------


def _box_bounds(center: int, side: int) -> tuple[int, int]:
    lo = center - (side - 1) // 2
    return lo, lo + side


def _copy_box2d(plane: np.ndarray, cy: int, cz: int, side: int) -> np.ndarray:
    out = np.zeros((side, side), dtype=np.float32)
    (y0, y1), (z0, z1) = _box_bounds(cy, side), _box_bounds(cz, side)
    sy0, sy1 = max(y0, 0), min(y1, plane.shape[0])
    sz0, sz1 = max(z0, 0), min(z1, plane.shape[1])
    if sy0 < sy1 and sz0 < sz1:
        out[sy0 - y0 : sy1 - y0, sz0 - z0 : sz1 - z0] = plane[sy0:sy1, sz0:sz1]
    return out


def extract_patch3d(v: Volume, center, a: int) -> np.ndarray:
    """Zero-padded ``a**3`` patch centred on the voxel, indexed (dx, dy, dz)."""
    cx, cy, cz = (int(q) for q in center)
    out = np.zeros((a, a, a), dtype=np.float32)
    bounds = [_box_bounds(c, a) for c in (cx, cy, cz)]
    src = [(max(lo, 0), min(hi, n)) for (lo, hi), n in zip(bounds, v.dims)]
    if all(s0 < s1 for s0, s1 in src):
        dst = [(s0 - lo, s1 - lo) for (s0, s1), (lo, _) in zip(src, bounds)]
        out[dst[0][0] : dst[0][1], dst[1][0] : dst[1][1], dst[2][0] : dst[2][1]] = (
            v.data[src[0][0] : src[0][1], src[1][0] : src[1][1], src[2][0] : src[2][1]]
        )
    return out


def extract_ortho2d(v: Volume, center, b: int) -> np.ndarray:
    """The three orthogonal patches through the voxel, shape (3, b, b).

    Plane order is fixed: sagittal (yz, perpendicular to x), coronal
    (xz, perpendicular to y), transverse (xy, perpendicular to z).
    """
    cx, cy, cz = (int(q) for q in center)
    return np.stack(
        [
            _copy_box2d(v.data[cx, :, :], cy, cz, b),
            _copy_box2d(v.data[:, cy, :], cx, cz, b),
            _copy_box2d(v.data[:, :, cz], cx, cy, b),
        ]
    )


def downscale(patch: np.ndarray, s: int) -> np.ndarray:
    """Mean over non-overlapping s x s blocks (stride-s mean pooling)."""
    m = patch.shape[-1]
    if patch.shape[-2:] != (m, m) or m % s != 0:
        raise ValueError(f"patch sides {patch.shape[-2:]} not divisible by s={s}")
    c = m // s
    blocks = patch.reshape(patch.shape[:-2] + (c, s, c, s))
    k = blocks.ndim
    blocks = blocks.swapaxes(k - 3, k - 2).reshape(patch.shape[:-2] + (c, c, s * s))
    return blocks.sum(axis=-1) / patch.dtype.type(s * s)


def extract_ortho2d_downscaled(v: Volume, center, c: int, s: int) -> np.ndarray:
    """Orthogonal patches of side ``s*c`` mean-pooled down to (3, c, c)."""
    return downscale(extract_ortho2d(v, center, s * c), s)


# ---------------------------------------------------------------------------
# centroids and distances
# ---------------------------------------------------------------------------


@dataclass
class CentroidSet:
    """One centroid per region id 1..N plus the normalization constant D."""

    centroids: np.ndarray  # (N, 3) float64, voxel units
    d_norm: float
    absent: tuple[int, ...] = ()

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[1] != 3:
            raise ValueError(f"centroids must be (N, 3), got {self.centroids.shape}")
        if not self.d_norm > 0:
            raise ValueError(f"d_norm must be positive, got {self.d_norm}")

    @property
    def n_regions(self) -> int:
        return self.centroids.shape[0]


def mean_pairwise_distance(points: np.ndarray) -> float:
    """Average distance over unordered point pairs, self-pairs included."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1))
    # d.sum() double-counts each unordered pair; diagonal contributes 0
    return float(d.sum() / (n * (n + 1)))


def compute_centroids(labels: LabelVolume, n_regions: int) -> CentroidSet:
    """Per-region centers of mass of uniformly weighted voxels.

    Regions with no voxels get the mean of the present centroids so the
    feature vector keeps its fixed length; the replacement is logged.
    """
    xs, ys, zs = labels.labels.nonzero()
    if xs.size == 0:
        raise ValueError("label volume has no foreground voxels")
    lab = labels.labels[xs, ys, zs].astype(np.int64)
    if lab.max() > n_regions:
        raise ValueError(
            f"label {lab.max()} exceeds declared region count {n_regions}"
        )
    counts = np.bincount(lab, minlength=n_regions + 1)[1:]
    cents = np.empty((n_regions, 3), dtype=np.float64)
    for axis, coords in enumerate((xs, ys, zs)):
        sums = np.bincount(lab, weights=coords, minlength=n_regions + 1)[1:]
        with np.errstate(invalid="ignore"):
            cents[:, axis] = sums / counts
    present = counts > 0
    absent = tuple(int(i + 1) for i in np.nonzero(~present)[0])
    if absent:
        cents[~present] = cents[present].mean(axis=0)
        logger.warning(
            "regions %s are empty; centroids replaced by mean of %d present ones",
            absent,
            int(present.sum()),
        )
    d = mean_pairwise_distance(cents)
    if not d > 0:
        raise ValueError("degenerate centroid set: all centroids coincide")
    return CentroidSet(cents, d, absent)


def centroid_distances(voxel, cs: CentroidSet) -> np.ndarray:
    """Euclidean distances from the voxel to every centroid, divided by D."""
    p = np.asarray(voxel, dtype=np.float64)
    d = np.sqrt(((cs.centroids - p) ** 2).sum(axis=1))
    return d / cs.d_norm


def corrupt_distances(d: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Distances plus independent Gaussian(0, sigma^2) noise (training only)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    d = np.asarray(d)
    return d + rng.normal(0.0, sigma, size=d.shape).astype(d.dtype, copy=False)


def save_centroids(cs: CentroidSet, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for i, (cx, cy, cz) in enumerate(cs.centroids, start=1):
            fh.write(f"{i} {cx:.12g} {cy:.12g} {cz:.12g}\n")
        fh.write(f"D {cs.d_norm:.12g}\n")


def load_centroids(path) -> CentroidSet:
    rows, d_norm = [], None
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "D":
                d_norm = float(parts[1])
            else:
                if int(parts[0]) != len(rows) + 1 or len(parts) != 4:
                    raise ValueError(f"malformed centroid line: {line!r}")
                rows.append([float(p) for p in parts[1:]])
    if d_norm is None or not rows:
        raise ValueError(f"{path}: missing centroid rows or D line")
    return CentroidSet(np.array(rows), d_norm)


# ---------------------------------------------------------------------------
# feature vectors
# ---------------------------------------------------------------------------


@dataclass
class FeatureVector:
    patch3d: np.ndarray
    ortho2d: np.ndarray
    ortho2d_down: np.ndarray
    cdist: np.ndarray | None = None

    def flatten(self) -> np.ndarray:
        parts = [self.patch3d.ravel(), self.ortho2d.ravel(), self.ortho2d_down.ravel()]
        if self.cdist is not None:
            parts.append(self.cdist.ravel())
        return np.concatenate(parts).astype(np.float32, copy=False)

    def __len__(self) -> int:
        n = self.patch3d.size + self.ortho2d.size + self.ortho2d_down.size
        return n + (self.cdist.size if self.cdist is not None else 0)


def extract_features(
    v: Volume, center, cfg: FeatureConfig, cs: CentroidSet | None = None
) -> FeatureVector:
    """All feature families at one voxel; omits cdist when ``cs`` is None."""
    cdist = None
    if cs is not None:
        if cs.n_regions != cfg.n_regions:
            raise ValueError(
                f"centroid set has {cs.n_regions} regions, config says {cfg.n_regions}"
            )
        cdist = centroid_distances(center, cs).astype(np.float32)
    return FeatureVector(
        patch3d=extract_patch3d(v, center, cfg.a),
        ortho2d=extract_ortho2d(v, center, cfg.b),
        ortho2d_down=extract_ortho2d_downscaled(v, center, cfg.c, cfg.s),
        cdist=cdist,
    )


class FeatureExtractor:
    """Batched feature extraction over many centers of one volume.

    Pads the volume once and gathers patches through strided window views;
    results are identical to calling :func:`extract_features` per voxel.
    """

    def __init__(self, v: Volume, cfg: FeatureConfig, cs: CentroidSet | None = None):
        if cs is not None and cs.n_regions != cfg.n_regions:
            raise ValueError(
                f"centroid set has {cs.n_regions} regions, config says {cfg.n_regions}"
            )
        self.cfg = cfg
        self.cs = cs
        self.layout = FeatureLayout(cfg)
        m = cfg.s * cfg.c
        sides = (cfg.a, cfg.b, m)
        self._pad_lo = max((side - 1) // 2 for side in sides)
        self._pad_hi = max(side - 1 - (side - 1) // 2 for side in sides)
        padded = np.pad(v.data, (self._pad_lo, self._pad_hi))
        self._win3d = sliding_window_view(padded, (cfg.a,) * 3)
        self._win_b = [
            sliding_window_view(padded, (cfg.b, cfg.b), axis=ax)
            for ax in ((1, 2), (0, 2), (0, 1))
        ]
        self._win_m = [
            sliding_window_view(padded, (m, m), axis=ax)
            for ax in ((1, 2), (0, 2), (0, 1))
        ]

    @property
    def width(self) -> int:
        return self.layout.length if self.cs is not None else self.layout.length_without_cdist

    def extract(self, centers: np.ndarray) -> np.ndarray:
        """Feature matrix (n, width) for integer voxel coordinates (n, 3)."""
        centers = np.asarray(centers, dtype=np.int64)
        if centers.ndim != 2 or centers.shape[1] != 3:
            raise ValueError(f"centers must be (n, 3), got {centers.shape}")
        cfg, lay = self.cfg, self.layout
        n = centers.shape[0]
        out = np.empty((n, self.width), dtype=np.float32)
        plo = self._pad_lo
        m = cfg.s * cfg.c

        start3 = centers + (plo - (cfg.a - 1) // 2)
        out[:, lay.patch3d] = self._win3d[
            start3[:, 0], start3[:, 1], start3[:, 2]
        ].reshape(n, cfg.a**3)

        fixed = centers + plo
        start_b = centers + (plo - (cfg.b - 1) // 2)
        start_m = centers + (plo - (m - 1) // 2)
        for p, (i, j) in enumerate(((1, 2), (0, 2), (0, 1))):
            k = 3 - i - j  # the fixed axis of plane p
            idx = [None, None, None]
            idx[k] = fixed[:, k]
            idx[i], idx[j] = start_b[:, i], start_b[:, j]
            out[:, lay.ortho[p]] = self._win_b[p][tuple(idx)].reshape(n, cfg.b**2)
            idx[i], idx[j] = start_m[:, i], start_m[:, j]
            out[:, lay.down[p]] = downscale(
                self._win_m[p][tuple(idx)], cfg.s
            ).reshape(n, cfg.c**2)

        if self.cs is not None:
            delta = centers[:, None, :].astype(np.float64) - self.cs.centroids[None]
            d = np.sqrt((delta**2).sum(axis=-1)) / self.cs.d_norm
            out[:, lay.cdist] = d.astype(np.float32)
        return out
