"""3D intensity volumes, label volumes and their on-disk format.

A volume file is a single ASCII header line

    ``VSEG1 f32 <nx> <ny> <nz>\\n``   (``u16`` for label volumes)

followed immediately by nx*ny*nz little-endian values in x-fastest order
(x varies fastest, then y, then z).  The linear index of voxel (x, y, z)
is therefore ``x + nx*(y + ny*z)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"VSEG1"

_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


class VolumeFormatError(ValueError):
    """Raised when a volume file cannot be decoded."""


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    return dims


@dataclass(eq=False)
class Volume:
    """Scalar intensity grid; ``data[x, y, z]`` is the voxel at (x, y, z)."""

    dims: tuple[int, int, int]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.dims = _check_dims(self.dims)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape != self.dims:
            raise ValueError(
                f"data shape {self.data.shape} does not match dims {self.dims}"
            )
        if not np.isfinite(self.data).all():
            raise ValueError("volume intensities must be finite")

    @classmethod
    def filled(cls, dims, value=0.0):
        dims = _check_dims(dims)
        return cls(dims, np.full(dims, value, dtype=np.float32))

    def __eq__(self, other):
        return (
            isinstance(other, Volume)
            and self.dims == other.dims
            and np.array_equal(self.data, other.data)
        )


@dataclass(eq=False)
class LabelVolume:
    """Per-voxel region ids; 0 is background, regions are 1..N."""

    dims: tuple[int, int, int]
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.dims = _check_dims(self.dims)
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.labels.shape != self.dims:
            raise ValueError(
                f"labels shape {self.labels.shape} does not match dims {self.dims}"
            )

    @classmethod
    def filled(cls, dims, value=0):
        dims = _check_dims(dims)
        return cls(dims, np.full(dims, value, dtype=np.uint16))

    def max_label(self) -> int:
        return int(self.labels.max())

    def __eq__(self, other):
        return (
            isinstance(other, LabelVolume)
            and self.dims == other.dims
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class Atlas:
    """An intensity volume paired with its manual segmentation."""

    image: Volume
    labels: LabelVolume
    id: str

    def __post_init__(self):
        if self.image.dims != self.labels.dims:
            raise ValueError(
                f"atlas {self.id!r}: image dims {self.image.dims} "
                f"!= label dims {self.labels.dims}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.image.dims


def voxel_at(v: Volume, coord) -> float:
    """Stored intensity at an in-bounds integer coordinate.

    Out-of-bounds access is a contract violation here; padding rules live
    in the feature-extraction layer.
    """
    x, y, z = (int(c) for c in coord)
    nx, ny, nz = v.dims
    if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
        raise IndexError(f"coordinate {(x, y, z)} out of bounds for dims {v.dims}")
    return float(v.data[x, y, z])


def _write(path, dims, kind, array):
    header = f"VSEG1 {kind} {dims[0]} {dims[1]} {dims[2]}\n".encode("ascii")
    payload = np.ascontiguousarray(array.T).astype(_DTYPES[kind], copy=False)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())
    os.replace(tmp, path)


def _read(path, kind):
    with open(path, "rb") as fh:
        header = fh.readline(128)
        if not header.endswith(b"\n"):
            raise VolumeFormatError(f"{path}: missing or oversized header line")
        parts = header.strip().split()
        if len(parts) != 5 or parts[0] != MAGIC:
            raise VolumeFormatError(f"{path}: malformed header {header!r}")
        if parts[1].decode("ascii") != kind:
            raise VolumeFormatError(
                f"{path}: expected payload kind {kind!r}, found {parts[1].decode()!r}"
            )
        try:
            dims = _check_dims(parts[2:5])
        except ValueError as exc:
            raise VolumeFormatError(f"{path}: {exc}") from exc
        dtype = _DTYPES[kind]
        expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
        payload = fh.read(expected + 1)
        if len(payload) != expected:
            raise VolumeFormatError(
                f"{path}: payload is {len(payload)} bytes, header implies {expected}"
            )
    flat = np.frombuffer(payload, dtype=dtype)
    # x-fastest on disk == Fortran order for an (nx, ny, nz) array
    return dims, flat.reshape(dims, order="F")


def save_volume(v: Volume, path) -> None:
    _write(path, v.dims, "f32", v.data)


def load_volume(path) -> Volume:
    dims, data = _read(path, "f32")
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise VolumeFormatError(f"{path}: payload contains non-finite values")
    return Volume(dims, arr)


def save_labels(lv: LabelVolume, path) -> None:
    _write(path, lv.dims, "u16", lv.labels)


def load_labels(path) -> LabelVolume:
    dims, data = _read(path, "u16")
    return LabelVolume(dims, np.ascontiguousarray(data))
