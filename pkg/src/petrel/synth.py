"""Seeded synthetic cohorts for desk-scale verification: either direct
feature tables with planted linear dependencies and an exponential hazard,
or image-level cohorts of ellipsoidal lesions with smoothed interior
texture that exercise the full extraction path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ValidationError
from .rng import DOMAIN_SYNTH, stream
from .survival import SurvivalData
from .table import FeatureTable
from .volume import RoiMask, VoxelGrid

CLINICAL_COLUMNS = ("grade", "sex", "age", "suv_max", "tlg")

# the downstream default split needs folds + n_test rows
_MIN_COHORT = 35


@dataclass(frozen=True)
class PlantedDependency:
    name: str
    parents: tuple[str, ...]
    weights: tuple[float, ...]
    noise_sd: float = 0.0

    def __post_init__(self):
        if len(self.parents) != len(self.weights):
            raise ValidationError("one weight per parent required")
        if not all(np.isfinite(self.weights)):
            raise ValidationError("dependency weights must be finite")
        if self.noise_sd < 0:
            raise ValidationError("noise sd must be >= 0")


@dataclass(frozen=True)
class SynthSpec:
    n_patients: int
    seed: int
    mode: str = "table"  # "table" | "image"
    # -- table mode --
    n_texture_features: int = 38
    n_latent: int = 4
    latent_noise_sd: float = 0.6
    dependencies: tuple[PlantedDependency, ...] = ()
    hazard: tuple[tuple[str, float], ...] = ()
    baseline_hazard: float = 0.05
    censor_window: tuple[float, float] = (5.0, 60.0)
    # -- image mode --
    grid_shape: tuple[int, int, int] = (48, 48, 48)
    spacing_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)
    semi_axis_range: tuple[float, float] = (6.0, 14.0)
    smoothness_range: tuple[float, float] = (2.5, 3.0)
    gamma_range: tuple[float, float] = (0.6, 2.5)
    clip_quantile_range: tuple[float, float] = (0.85, 1.0)
    intensity_range: tuple[float, float] = (4.0, 18.0)
    # level shift between two smooth subregions: spreads the histogram
    # without reshaping its probability profile
    bimodal_shift_range: tuple[float, float] = (0.0, 0.0)
    split_fraction_range: tuple[float, float] = (0.3, 0.7)
    split_smoothness: float = 4.0

    def __post_init__(self):
        if self.mode not in ("table", "image"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.n_patients < _MIN_COHORT:
            raise ValidationError(
                f"cohort size {self.n_patients} below minimum {_MIN_COHORT}"
            )
        if self.censor_window[0] <= 0 or self.censor_window[1] < self.censor_window[0]:
            raise ValidationError("censor window must be 0 < lo <= hi")
        if self.mode == "image":
            hi = max(self.semi_axis_range)
            if 2 * hi + 2 > min(self.grid_shape):
                raise ValidationError("blob does not fit inside the grid")


@dataclass(frozen=True)
class ImageCohort:
    patient_ids: list[str]
    grids: list[VoxelGrid]
    masks: list[RoiMask]
    externals: list[dict]
    survival: SurvivalData


def _survival_from_lp(rng, ids, lp, h0, censor_window) -> SurvivalData:
    n = len(ids)
    u = rng.uniform(size=n)
    t_event = -np.log(u) / (h0 * np.exp(lp))
    t_cens = rng.uniform(censor_window[0], censor_window[1], size=n)
    event = (t_event <= t_cens).astype(int)
    time = np.minimum(t_event, t_cens)
    return SurvivalData(patient_ids=list(ids), time=time, event=event)


def synth_table(spec: SynthSpec) -> tuple[FeatureTable, SurvivalData]:
    """Feature table with latent-factor texture columns, clinical columns,
    planted dependencies, and survival times from h0 * exp(x' beta)."""
    rng = stream(spec.seed, DOMAIN_SYNTH, 0)
    n = spec.n_patients
    ids = [f"syn{i:04d}" for i in range(n)]

    factors = rng.standard_normal((n, spec.n_latent))
    loadings = rng.uniform(-1.0, 1.0, size=(spec.n_texture_features, spec.n_latent))
    texture = factors @ loadings.T + spec.latent_noise_sd * rng.standard_normal(
        (n, spec.n_texture_features)
    )
    names = [f"t{j:02d}" for j in range(spec.n_texture_features)]
    columns = {nm: texture[:, j] for j, nm in enumerate(names)}

    columns["grade"] = rng.integers(1, 4, size=n).astype(np.float64)
    columns["sex"] = rng.integers(0, 2, size=n).astype(np.float64)
    columns["age"] = rng.uniform(45.0, 85.0, size=n)
    columns["suv_max"] = np.exp(1.2 + 0.35 * factors[:, 0] + 0.25 * rng.standard_normal(n)) + 1.0
    columns["tlg"] = columns["suv_max"] * np.exp(0.5 * rng.standard_normal(n)) * 8.0
    names += list(CLINICAL_COLUMNS)

    for dep in spec.dependencies:
        for parent in dep.parents:
            if parent not in columns:
                raise ValidationError(f"dependency parent {parent!r} not generated")
        if dep.name in columns:
            raise ValidationError(f"dependency name {dep.name!r} collides")
        col = np.zeros(n)
        for parent, w in zip(dep.parents, dep.weights):
            col = col + w * columns[parent]
        if dep.noise_sd > 0:
            col = col + dep.noise_sd * rng.standard_normal(n)
        columns[dep.name] = col
        names.append(dep.name)

    lp = np.zeros(n)
    for name, beta in spec.hazard:
        if name not in columns:
            raise ValidationError(f"hazard feature {name!r} not generated")
        lp = lp + beta * columns[name]
    surv = _survival_from_lp(rng, ids, lp, spec.baseline_hazard, spec.censor_window)

    values = np.column_stack([columns[nm] for nm in names])
    table = FeatureTable(patient_ids=ids, names=names, values=values)
    return table, surv


def _synth_lesion(rng, spec: SynthSpec) -> tuple[VoxelGrid, RoiMask]:
    nx, ny, nz = spec.grid_shape
    axes = rng.uniform(*spec.semi_axis_range, size=3)
    center = (np.array([nx, ny, nz], dtype=np.float64) - 1) / 2 + rng.uniform(-1.5, 1.5, size=3)
    ix, iy, iz = np.indices((nx, ny, nz), dtype=np.float64)
    r2 = (
        ((ix - center[0]) / axes[0]) ** 2
        + ((iy - center[1]) / axes[1]) ** 2
        + ((iz - center[2]) / axes[2]) ** 2
    )
    mask = r2 <= 1.0

    sigma = rng.uniform(*spec.smoothness_range)
    tex = gaussian_filter(rng.standard_normal((nx, ny, nz)), sigma)
    lo, hi = tex[mask].min(), tex[mask].max()
    tex = np.clip((tex - lo) / (hi - lo), 0.0, 1.0)
    gamma = rng.uniform(*spec.gamma_range)
    tex = tex**gamma
    clip_q = rng.uniform(*spec.clip_quantile_range)
    if clip_q < 1.0:
        cap = np.quantile(tex[mask], clip_q)
        if cap > 0:
            tex = np.minimum(tex, cap) / cap
    shift = rng.uniform(*spec.bimodal_shift_range)
    if shift > 0:
        # raise one smooth blobby subregion by a constant level: widens the
        # histogram without reshaping either lobe
        split = gaussian_filter(rng.standard_normal((nx, ny, nz)), spec.split_smoothness)
        frac = rng.uniform(*spec.split_fraction_range)
        tex = (tex + shift * (split > np.quantile(split[mask], frac))) / (1.0 + shift)
    scale = rng.uniform(*spec.intensity_range)
    values = 0.4 + 0.05 * rng.standard_normal((nx, ny, nz))  # low background
    values = np.where(mask, 1.0 + scale * tex, values)

    grid = VoxelGrid(data=values.astype(np.float64), spacing_mm=spec.spacing_mm)
    return grid, RoiMask(inside=mask)


def synth_images(spec: SynthSpec) -> ImageCohort:
    """Image cohort: one smoothed ellipsoidal lesion per patient, external
    clinical covariates, and null-hazard survival. Patient i draws from its
    own stream, so cohort size changes never reshuffle earlier patients."""
    ids = [f"syn{i:04d}" for i in range(spec.n_patients)]
    grids, masks, externals = [], [], []
    for i in range(spec.n_patients):
        rng = stream(spec.seed, DOMAIN_SYNTH, i + 1)
        grid, mask = _synth_lesion(rng, spec)
        grids.append(grid)
        masks.append(mask)
        externals.append(
            {
                "grade": float(rng.integers(1, 4)),
                "sex": float(rng.integers(0, 2)),
                "age": float(rng.uniform(45.0, 85.0)),
                "h0": float(rng.standard_normal()),
                "h1": float(rng.standard_normal()),
            }
        )
    rng = stream(spec.seed, DOMAIN_SYNTH, 0)
    surv = _survival_from_lp(
        rng, ids, np.zeros(spec.n_patients), spec.baseline_hazard, spec.censor_window
    )
    return ImageCohort(
        patient_ids=ids, grids=grids, masks=masks, externals=externals, survival=surv
    )


def synth_cohort(spec: SynthSpec):
    """Dispatch on spec.mode: table mode returns (FeatureTable,
    SurvivalData); image mode returns an ImageCohort."""
    if spec.mode == "table":
        return synth_table(spec)
    return synth_images(spec)
