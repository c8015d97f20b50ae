"""3D intensity volumes: file I/O, fixed-threshold segmentation, and
fixed-bin-number grey-level requantization.

Volumes live on disk as a JSON header (dims, spacing, dtype) next to a raw
binary payload with the same stem and a ``.raw`` suffix. Intensities are
little-endian float32, x-fastest ordering; masks use one 0/1 byte per voxel.
In memory everything is a float64/bool array indexed ``[x, y, z]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DegenerateDataError, FormatError

VOLUME_DTYPE = "f32le"
MASK_DTYPE = "u8"


@dataclass(frozen=True)
class VoxelGrid:
    """A 3D intensity field with physical voxel spacing in millimetres."""

    data: np.ndarray  # float64, shape (nx, ny, nz), data[x, y, z]
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        if self.data.ndim != 3:
            raise FormatError(f"grid must be 3D, got shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing_mm):
            raise FormatError(f"spacing must be positive, got {self.spacing_mm}")
        if not np.all(np.isfinite(self.data)):
            raise FormatError("grid contains non-finite intensities")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_count(self) -> int:
        return self.data.size

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz


@dataclass(frozen=True)
class RoiMask:
    """Boolean volume of interest on the same lattice as its parent grid."""

    inside: np.ndarray  # bool, shape (nx, ny, nz)

    def __post_init__(self):
        if self.inside.ndim != 3 or self.inside.dtype != np.bool_:
            raise FormatError("mask must be a 3D boolean array")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.inside.shape

    @property
    def voxel_count(self) -> int:
        return int(self.inside.sum())


@dataclass(frozen=True)
class QuantizedVolume:
    """Grey levels 1..n_levels inside the mask, 0 outside."""

    levels: np.ndarray  # int32, shape (nx, ny, nz)
    n_levels: int
    source_range: tuple[float, float]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.levels.shape

    @property
    def mask(self) -> np.ndarray:
        return self.levels > 0

    def inside_levels(self) -> np.ndarray:
        """1D array of in-mask grey levels."""
        return self.levels[self.levels > 0]


# ---------------------------------------------------------------------------
# File I/O

def _payload_path(header_path: Path) -> Path:
    return header_path.with_suffix(".raw")


def _read_header(path: Path) -> tuple[tuple[int, int, int], tuple[float, float, float], str]:
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON header: {exc}") from exc
    for key in ("dims", "spacing_mm", "dtype"):
        if key not in header:
            raise FormatError(f"{path}: header missing {key!r}")
    dims = tuple(int(v) for v in header["dims"])
    spacing = tuple(float(v) for v in header["spacing_mm"])
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise FormatError(f"{path}: bad dims {dims}")
    return dims, spacing, str(header["dtype"])


def load_volume(path: str | Path) -> VoxelGrid:
    """Load a volume from its JSON header; the payload sits at ``<stem>.raw``."""
    path = Path(path)
    dims, spacing, dtype = _read_header(path)
    if dtype != VOLUME_DTYPE:
        raise FormatError(f"{path}: expected dtype {VOLUME_DTYPE!r}, got {dtype!r}")
    raw = _payload_path(path).read_bytes()
    n = dims[0] * dims[1] * dims[2]
    values = np.frombuffer(raw, dtype="<f4")
    if values.size != n:
        raise FormatError(
            f"{path}: payload holds {values.size} voxels, header declares {n}"
        )
    data = values.astype(np.float64).reshape(dims, order="F")
    return VoxelGrid(data=data, spacing_mm=spacing)


def write_volume(grid: VoxelGrid, path: str | Path) -> None:
    path = Path(path)
    header = {
        "dims": list(grid.dims),
        "spacing_mm": [float(s) for s in grid.spacing_mm],
        "dtype": VOLUME_DTYPE,
    }
    path.write_text(json.dumps(header, sort_keys=True) + "\n")
    payload = grid.data.astype("<f4").ravel(order="F").tobytes()
    _payload_path(path).write_bytes(payload)


def load_mask(path: str | Path) -> RoiMask:
    path = Path(path)
    dims, _spacing, dtype = _read_header(path)
    if dtype != MASK_DTYPE:
        raise FormatError(f"{path}: expected dtype {MASK_DTYPE!r}, got {dtype!r}")
    raw = _payload_path(path).read_bytes()
    n = dims[0] * dims[1] * dims[2]
    values = np.frombuffer(raw, dtype=np.uint8)
    if values.size != n:
        raise FormatError(
            f"{path}: payload holds {values.size} voxels, header declares {n}"
        )
    inside = values.reshape(dims, order="F") > 0
    return RoiMask(inside=np.ascontiguousarray(inside))


def write_mask(mask: RoiMask, path: str | Path, spacing_mm: tuple[float, float, float]) -> None:
    path = Path(path)
    header = {
        "dims": list(mask.dims),
        "spacing_mm": [float(s) for s in spacing_mm],
        "dtype": MASK_DTYPE,
    }
    path.write_text(json.dumps(header, sort_keys=True) + "\n")
    payload = mask.inside.astype(np.uint8).ravel(order="F").tobytes()
    _payload_path(path).write_bytes(payload)


# ---------------------------------------------------------------------------
# Segmentation and requantization

def fixed_threshold(grid: VoxelGrid) -> float:
    """Segmentation threshold from the low-uptake subsample.

    Takes the lowest ceil(15%) of all voxel intensities (background and
    healthy-tissue activity) and returns their mean plus three sample
    standard deviations.
    """
    values = grid.data.ravel()
    m = math.ceil(0.15 * values.size)
    if m < 2:
        raise DegenerateDataError(
            f"need a low-uptake subsample of >= 2 voxels, got {m} (grid has {values.size})"
        )
    low = np.partition(values, m - 1)[:m]
    return float(low.mean() + 3.0 * low.std(ddof=1))


def segment(grid: VoxelGrid, threshold: float) -> RoiMask:
    """Mask of the largest 26-connected component above ``threshold``.

    Candidate voxels are those with intensity strictly greater than the
    threshold; disconnected candidates are resolved by keeping the largest
    component (ties: the component appearing first in scan order).
    """
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    candidates = grid.data > threshold
    if not candidates.any():
        raise DegenerateDataError(f"no voxel above threshold {threshold}")
    labels = kernels.label_components(candidates.astype(np.int32))
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    best = int(np.argmax(sizes))
    return RoiMask(inside=labels == best)


def quantize_fbn(grid: VoxelGrid, mask: RoiMask, n_levels: int = 32) -> QuantizedVolume:
    """Requantize in-mask intensities into ``n_levels`` grey levels by fixed
    bin number: level = min(Q, floor(Q * (x - min) / (max - min)) + 1).

    A constant region maps entirely to level 1.
    """
    if mask.dims != grid.dims:
        raise FormatError(f"mask dims {mask.dims} do not match grid dims {grid.dims}")
    if mask.voxel_count == 0:
        raise DegenerateDataError("mask is empty")
    if n_levels < 2:
        raise ValueError("n_levels must be >= 2")
    inside = mask.inside
    vals = grid.data[inside]
    lo = float(vals.min())
    hi = float(vals.max())
    levels = np.zeros(grid.dims, dtype=np.int32)
    if hi > lo:
        lv = np.floor(n_levels * (vals - lo) / (hi - lo)).astype(np.int64) + 1
        np.minimum(lv, n_levels, out=lv)
        levels[inside] = lv.astype(np.int32)
    else:
        levels[inside] = 1
    return QuantizedVolume(levels=levels, n_levels=n_levels, source_range=(lo, hi))
