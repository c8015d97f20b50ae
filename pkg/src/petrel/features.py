"""Per-study radiomic features: intensity statistics, grey-level histogram
statistics, GLCM and GLSZM texture, morphology, and uptake-gradient
quantiles.

Conventions, applied uniformly so downstream tables never hold missing
values:

* moments are population moments; skewness is m3/m2^1.5 and kurtosis is the
  excess form m4/m2^2 - 3;
* statistics of a zero-variance sample (skewness, kurtosis, GLCM
  correlation) are emitted as 0.0 and the degeneracy is recorded in the
  feature vector's notes;
* entropies use the natural logarithm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DegenerateDataError, FormatError, ValidationError
from .volume import QuantizedVolume, RoiMask, VoxelGrid, quantize_fbn

# the 13 unique 3D direction offsets (each counted in both orderings)
GLCM_DIRECTIONS = np.array(
    [
        (1, 0, 0), (0, 1, 0), (0, 0, 1),
        (1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1),
        (1, 1, 1), (1, 1, -1), (1, -1, 1), (1, -1, -1),
    ],
    dtype=np.int64,
)

EXTERNAL_COLUMNS = ("grade", "sex", "age", "h0", "h1")
CATEGORICAL_COLUMNS = ("grade", "sex")


@dataclass(frozen=True)
class Histogram:
    """Grey-level probabilities p_1..p_Q of a quantized region."""

    n_levels: int
    p: np.ndarray
    n_voxels: int

    def __post_init__(self):
        if self.p.shape != (self.n_levels,):
            raise FormatError("histogram length must equal n_levels")
        if (self.p < 0).any() or abs(float(self.p.sum()) - 1.0) > 1e-12:
            raise FormatError("histogram must be a probability vector")


@dataclass(frozen=True)
class GlcmMatrix:
    """Symmetric joint grey-level probabilities of neighbouring voxel pairs."""

    n_levels: int
    p: np.ndarray
    distance: int

    def __post_init__(self):
        if self.p.shape != (self.n_levels, self.n_levels):
            raise FormatError("GLCM must be Q x Q")
        if abs(float(self.p.sum()) - 1.0) > 1e-12 or (self.p < 0).any():
            raise FormatError("GLCM must be a probability matrix")
        if np.abs(self.p - self.p.T).max() > 1e-12:
            raise FormatError("GLCM must be symmetric")


@dataclass
class FeatureVector:
    """Ordered name -> value map for one patient."""

    patient_id: str
    values: dict[str, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def add(self, other: "FeatureVector") -> None:
        for name, value in other.values.items():
            if name in self.values:
                raise ValidationError(f"duplicate feature name {name!r}")
            if not math.isfinite(value):
                raise ValidationError(f"non-finite value for feature {name!r}")
            self.values[name] = float(value)
        self.notes.extend(other.notes)


def _moments(values: np.ndarray) -> tuple[float, float, float, float]:
    """Population mean, variance, skewness, excess kurtosis."""
    mu = float(values.mean())
    d = values - mu
    m2 = float(np.mean(d * d))
    if m2 <= 0.0:
        return mu, 0.0, 0.0, 0.0
    m3 = float(np.mean(d**3))
    m4 = float(np.mean(d**4))
    return mu, m2, m3 / m2**1.5, m4 / m2**2 - 3.0


def _check_mask(grid: VoxelGrid, mask: RoiMask) -> None:
    if mask.dims != grid.dims:
        raise FormatError(f"mask dims {mask.dims} do not match grid dims {grid.dims}")
    if mask.voxel_count == 0:
        raise DegenerateDataError("mask is empty")


# ---------------------------------------------------------------------------
# Intensity and histogram statistics

def intensity_stats(grid: VoxelGrid, mask: RoiMask) -> FeatureVector:
    """SUV summaries, metabolic volume, TLG, and raw-intensity moments."""
    _check_mask(grid, mask)
    vals = grid.data[mask.inside]
    volume_ml = mask.voxel_count * grid.voxel_volume_mm3 / 1000.0
    mean = float(vals.mean())
    _, var, skew, kurt = _moments(vals)
    fv = FeatureVector(patient_id="")
    fv.values = {
        "suv_max": float(vals.max()),
        "suv_mean": mean,
        "volume_ml": volume_ml,
        "tlg": mean * volume_ml,
        "intensity_variance": var,
        "intensity_skewness": skew,
        "intensity_kurtosis": kurt,
    }
    if var == 0.0:
        fv.notes.append("intensity: zero variance, skewness/kurtosis set to 0")
    return fv


def histogram_from_quantized(q: QuantizedVolume) -> Histogram:
    levels = q.inside_levels()
    counts = np.bincount(levels, minlength=q.n_levels + 1)[1:]
    return Histogram(n_levels=q.n_levels, p=counts / levels.size, n_voxels=levels.size)


def histogram_stats_from_probs(hist: Histogram) -> FeatureVector:
    """First-order statistics of a grey-level probability vector."""
    i = np.arange(1, hist.n_levels + 1, dtype=np.float64)
    p = hist.p
    mean = float(np.sum(i * p))
    d = i - mean
    var = float(np.sum(d * d * p))
    energy = float(np.sum(p * p))
    pos = p > 0
    entropy = float(-np.sum(p[pos] * np.log(p[pos])))
    fv = FeatureVector(patient_id="")
    if var > 0:
        skew = float(np.sum(d**3 * p)) / var**1.5
        kurt = float(np.sum(d**4 * p)) / var**2 - 3.0
    else:
        skew = kurt = 0.0
        fv.notes.append("histogram: zero variance, skewness/kurtosis set to 0")
    fv.values = {
        "hist_mean": mean,
        "hist_variance": var,
        "hist_energy": energy,
        "hist_entropy": entropy,
        "hist_skewness": skew,
        "hist_kurtosis": kurt,
    }
    return fv


def histogram_stats(q: QuantizedVolume) -> FeatureVector:
    return histogram_stats_from_probs(histogram_from_quantized(q))


# ---------------------------------------------------------------------------
# GLCM

def glcm(q: QuantizedVolume, distance: int = 1) -> GlcmMatrix:
    """Merged symmetric co-occurrence matrix over all 13 directions.

    Only pairs with both voxels in-mask are counted; both orderings of each
    pair contribute, and the merged counts are normalized to sum 1.
    """
    if distance < 1:
        raise ValueError("distance must be >= 1")
    counts = kernels.glcm_count(q.levels, GLCM_DIRECTIONS * distance, q.n_levels)
    total = int(counts.sum())
    if total == 0:
        raise DegenerateDataError("no in-mask neighbour pair at this distance")
    return GlcmMatrix(n_levels=q.n_levels, p=counts / total, distance=distance)


def glcm_features(m: GlcmMatrix) -> FeatureVector:
    """Eight co-occurrence summaries of a GLCM."""
    q = m.n_levels
    i = np.arange(1, q + 1, dtype=np.float64)
    ii, jj = np.meshgrid(i, i, indexing="ij")
    p = m.p
    diff = ii - jj
    absdiff = np.abs(diff)
    pos = p > 0
    autocorr = float(np.sum(ii * jj * p))

    pr = p.sum(axis=1)  # row marginal (== column marginal by symmetry)
    mu = float(np.sum(i * pr))
    sigma2 = float(np.sum((i - mu) ** 2 * pr))
    fv = FeatureVector(patient_id="")
    if sigma2 > 0:
        correlation = (autocorr - mu * mu) / sigma2
    else:
        correlation = 0.0
        fv.notes.append("glcm: degenerate marginals, correlation set to 0")
    fv.values = {
        "glcm_max_probability": float(p.max()),
        "glcm_contrast": float(np.sum(diff * diff * p)),
        "glcm_dissimilarity": float(np.sum(absdiff * p)),
        "glcm_homogeneity": float(np.sum(p / (1.0 + absdiff))),
        "glcm_uniformity": float(np.sum(p * p)),
        "glcm_entropy": float(-np.sum(p[pos] * np.log(p[pos]))),
        "glcm_autocorrelation": autocorr,
        "glcm_correlation": correlation,
    }
    return fv


# ---------------------------------------------------------------------------
# GLSZM

def glszm_features(q: QuantizedVolume) -> FeatureVector:
    """Zone-count and zone-size summaries over 26-connected equal-level zones."""
    n_voxels = int((q.levels > 0).sum())
    if n_voxels == 0:
        raise DegenerateDataError("mask is empty")
    labels = kernels.label_components(q.levels)
    sizes = np.bincount(labels.ravel())[1:].astype(np.float64)
    n_zones = sizes.size
    fv = FeatureVector(patient_id="")
    fv.values = {
        "glszm_zone_percentage": n_zones / n_voxels,
        "glszm_large_zone_emphasis": float(np.sum(sizes * sizes)) / n_zones,
    }
    return fv


# ---------------------------------------------------------------------------
# Morphology

def _surface_area(mask: RoiMask, spacing_mm) -> float:
    sx, sy, sz = spacing_mm
    inside = mask.inside
    face_areas = (sy * sz, sx * sz, sx * sy)
    total = 0.0
    for axis, area in enumerate(face_areas):
        n = inside.shape[axis]
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        a = inside[tuple(lo)]
        b = inside[tuple(hi)]
        internal_exposed = int((a & ~b).sum()) + int((~a & b).sum())
        first = [slice(None)] * 3
        last = [slice(None)] * 3
        first[axis] = 0
        last[axis] = n - 1
        boundary = int(inside[tuple(first)].sum()) + int(inside[tuple(last)].sum())
        total += area * (internal_exposed + boundary)
    return total


def morphology_features(mask: RoiMask, spacing_mm) -> FeatureVector:
    """Asphericity from exposed voxel faces, plus ellipsoidal elongation and
    flatness from the covariance of physical voxel centres.

    The face-count surface systematically overestimates a smooth surface
    (about 1.5x for a ball), so asphericity carries that bias; it is still a
    consistent shape ranking across studies on the same lattice.
    """
    if mask.voxel_count < 4:
        raise DegenerateDataError("need >= 4 voxels for morphology")
    volume = mask.voxel_count * spacing_mm[0] * spacing_mm[1] * spacing_mm[2]
    area = _surface_area(mask, spacing_mm)
    asphericity = (area**3 / (36.0 * math.pi * volume**2)) ** (1.0 / 3.0) - 1.0

    coords = np.argwhere(mask.inside).astype(np.float64) * np.asarray(spacing_mm)
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / coords.shape[0]
    eigvals = np.linalg.eigvalsh(cov)  # ascending
    lam3, lam2, lam1 = (max(float(v), 0.0) for v in eigvals)
    if lam1 <= 0 or lam2 / lam1 < 1e-12:
        raise DegenerateDataError("voxel centres are collinear")
    fv = FeatureVector(patient_id="")
    fv.values = {
        "asphericity": asphericity,
        "elongation": math.sqrt(lam2 / lam1),
        "flatness": math.sqrt(lam3 / lam1),
    }
    return fv


# ---------------------------------------------------------------------------
# Gradient quantiles

def gradient_quantiles(
    grid: VoxelGrid,
    mask: RoiMask,
    probs: tuple[float, ...] = (0.25, 0.5, 0.75, 0.9),
) -> FeatureVector:
    """Quantiles of normalized uptake-gradient magnitudes.

    The gradient is the central difference over physical spacing, evaluated
    at interior voxels (all six axial neighbours in-mask), and normalized by
    the in-mask maximum so the quantiles are scale-invariant.
    """
    _check_mask(grid, mask)
    inside = mask.inside
    interior = inside.copy()
    for axis in range(3):
        shifted_up = np.zeros_like(inside)
        shifted_dn = np.zeros_like(inside)
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        n = inside.shape[axis]
        src[axis] = slice(1, n)
        dst[axis] = slice(0, n - 1)
        shifted_up[tuple(dst)] = inside[tuple(src)]
        src[axis] = slice(0, n - 1)
        dst[axis] = slice(1, n)
        shifted_dn[tuple(dst)] = inside[tuple(src)]
        interior &= shifted_up & shifted_dn
    if not interior.any():
        raise DegenerateDataError("mask has no interior voxel")

    mag2 = np.zeros(grid.dims)
    for axis, s in enumerate(grid.spacing_mm):
        g = np.zeros(grid.dims)
        n = grid.dims[axis]
        mid = [slice(None)] * 3
        up = [slice(None)] * 3
        dn = [slice(None)] * 3
        mid[axis] = slice(1, n - 1)
        up[axis] = slice(2, n)
        dn[axis] = slice(0, n - 2)
        g[tuple(mid)] = (grid.data[tuple(up)] - grid.data[tuple(dn)]) / (2.0 * s)
        mag2 += g * g
    suv_max = float(grid.data[inside].max())
    norm = suv_max if suv_max > 0 else 1.0
    sample = np.sqrt(mag2[interior]) / norm
    quants = np.quantile(sample, probs)
    fv = FeatureVector(patient_id="")
    fv.values = {
        f"gradient_q{int(round(p * 100))}": float(v) for p, v in zip(probs, quants)
    }
    return fv


# ---------------------------------------------------------------------------
# Assembly

@dataclass(frozen=True)
class FeatureConfig:
    n_levels: int = 32
    glcm_distance: int = 1
    gradient_probs: tuple[float, ...] = (0.25, 0.5, 0.75, 0.9)
    external_columns: tuple[str, ...] = ()
    strict_external: bool = True


def extract_all(
    grid: VoxelGrid,
    mask: RoiMask,
    config: FeatureConfig = FeatureConfig(),
    external: dict[str, float] | None = None,
    patient_id: str = "",
) -> FeatureVector:
    """Compute every configured feature family for one study, in a fixed
    deterministic name order, then append externally supplied columns."""
    external = external or {}
    fv = FeatureVector(patient_id=patient_id)
    fv.add(intensity_stats(grid, mask))
    q = quantize_fbn(grid, mask, config.n_levels)
    fv.add(histogram_stats(q))
    fv.add(glcm_features(glcm(q, config.glcm_distance)))
    fv.add(glszm_features(q))
    fv.add(morphology_features(mask, grid.spacing_mm))
    fv.add(gradient_quantiles(grid, mask, config.gradient_probs))
    for name in config.external_columns:
        if name in external:
            value = float(external[name])
            if not math.isfinite(value):
                raise ValidationError(f"non-finite external value for {name!r}")
            fv.values[name] = value
        elif config.strict_external:
            raise ValidationError(f"missing external column {name!r}")
    return fv


def feature_kinds(names) -> dict[str, str]:
    """Continuous/categorical flag for each feature name."""
    return {
        name: ("categorical" if name in CATEGORICAL_COLUMNS else "continuous")
        for name in names
    }
