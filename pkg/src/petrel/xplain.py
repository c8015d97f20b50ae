"""Feature-on-feature explanation models.

Each continuous column is regressed on all remaining columns with an
l1-penalized linear model: a held-out test set is drawn once per table,
the penalty is chosen by repeated k-fold cross-validation over a 100-point
logarithmic grid, per-fold fits vote on strong predictors (coefficient
magnitude at least 20% of the summed magnitudes), the 2-3 most frequently
selected predictors are refit on the full training rows at a freshly
cross-validated penalty, and the final model is scored on the untouched
test rows (MSE on the dependent feature's original scale).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConvergenceError, DegenerateDataError, ValidationError
from .rng import DOMAIN_XPLAIN, stream
from .table import FeatureTable

LAMBDA_GRID_SIZE = 100
LAMBDA_MIN_RATIO = 1e-4
PATH_TOL = 1e-7
PATH_MAX_SWEEPS = 200


@dataclass(frozen=True)
class LassoModel:
    predictor_names: tuple[str, ...]
    coefs: np.ndarray  # on standardized predictors
    intercept: float  # on the original y scale
    lam: float
    x_means: np.ndarray
    x_sds: np.ndarray  # population scale; 0 marks a frozen constant column
    y_mean: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        sds = np.where(self.x_sds > 0, self.x_sds, 1.0)
        z = (x - self.x_means) / sds
        return self.y_mean + z @ self.coefs

    def coef_map(self) -> dict[str, float]:
        return {n: float(b) for n, b in zip(self.predictor_names, self.coefs)}


@dataclass(frozen=True)
class SplitConfig:
    n_test: int = 30
    folds: int = 5
    repetitions: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_test < 1:
            raise ValidationError("n_test must be >= 1")
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")
        if self.repetitions < 1:
            raise ValidationError("repetitions must be >= 1")


@dataclass(frozen=True)
class CvResult:
    lam: float
    cv_mse: float
    fold_models: tuple[LassoModel, ...]
    grid: np.ndarray
    mean_mse: np.ndarray


@dataclass
class ExplanationReport:
    dependent: str
    selected: list[tuple[str, float]]  # final standardized-scale coefficients
    cv_mse: float
    test_mse: float
    selection_frequency: dict[str, float]
    lam: float
    predictor_names: list[str]
    model: LassoModel
    test_indices: tuple[int, ...]
    fold_selections: list[list[str]] = field(default_factory=list)
    degenerate_selection: bool = False


def _standardize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    means = x.mean(axis=0)
    sds = x.std(axis=0)  # population scale keeps the Gram diagonal at 1
    safe = np.where(sds > 0, sds, 1.0)
    z = (x - means) / safe
    z[:, sds == 0] = 0.0
    return z, means, sds


def _gram(z: np.ndarray, yc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = z.shape[0]
    return z.T @ z / n, z.T @ yc / n


def lasso_fit(x: np.ndarray, y: np.ndarray, lam: float, names=None) -> LassoModel:
    """Minimize (1/2N)|y - b0 - Xb|^2 + lam*|b|_1 with internal
    standardization of X and centering of y; the intercept is unpenalized.
    Constant predictors keep coefficient exactly 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValidationError("X and y shapes do not match")
    if x.shape[0] < 2:
        raise ValidationError("need >= 2 rows")
    if lam < 0:
        raise ValidationError("penalty must be non-negative")
    z, means, sds = _standardize(x)
    y_mean = float(y.mean())
    g, c = _gram(z, y - y_mean)
    beta, _, converged = kernels.lasso_cd(g, c, lam)
    if not converged:
        raise ConvergenceError(f"coordinate descent did not converge at lam={lam}")
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(x.shape[1]))
    return LassoModel(
        predictor_names=names,
        coefs=beta,
        intercept=y_mean,
        lam=float(lam),
        x_means=means,
        x_sds=sds,
        y_mean=y_mean,
    )


def lambda_max(x: np.ndarray, y: np.ndarray) -> float:
    """Smallest penalty with an all-zero solution."""
    z, _, _ = _standardize(np.asarray(x, dtype=np.float64))
    yc = y - y.mean()
    return float(np.abs(z.T @ yc).max() / len(y))


def _lambda_grid(lmax: float) -> np.ndarray:
    if lmax <= 0:
        # degenerate design (all-constant predictors); any penalty gives the
        # null model, so use a token grid
        return np.full(LAMBDA_GRID_SIZE, 1.0)
    return np.logspace(np.log10(lmax), np.log10(lmax * LAMBDA_MIN_RATIO), LAMBDA_GRID_SIZE)


def _fold_splits(n: int, split: SplitConfig, rng: np.random.Generator):
    """Repetitions x folds held-out index arrays (contiguous chunks of a
    fresh permutation per repetition)."""
    out = []
    for _ in range(split.repetitions):
        perm = rng.permutation(n)
        out.extend(np.sort(chunk) for chunk in np.array_split(perm, split.folds))
    return out


def cv_lambda(
    x: np.ndarray,
    y: np.ndarray,
    split: SplitConfig,
    rng: np.random.Generator,
    names=None,
) -> CvResult:
    """Pick the penalty minimizing mean held-out MSE over repeated k-fold
    splits of a descending 100-point grid; ties keep the larger penalty.
    Returns the per-fold models refit at the winning penalty.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if n < split.folds:
        raise ValidationError(f"need >= {split.folds} rows for {split.folds}-fold CV")
    if float(np.var(y)) == 0.0:
        raise DegenerateDataError("dependent variable has zero variance")
    grid = _lambda_grid(lambda_max(x, y))
    heldouts = _fold_splits(n, split, rng)

    sq_err = np.zeros(grid.size)
    n_pred = 0
    fold_betas = []
    for held in heldouts:
        train = np.setdiff1d(np.arange(n), held, assume_unique=True)
        xt, yt = x[train], y[train]
        z, means, sds = _standardize(xt)
        y_mean = float(yt.mean())
        g, c = _gram(z, yt - y_mean)
        safe = np.where(sds > 0, sds, 1.0)
        zh = (x[held] - means) / safe
        zh[:, sds == 0] = 0.0
        beta = np.zeros(x.shape[1])
        betas_at = np.empty((grid.size, x.shape[1]))
        for i, lam in enumerate(grid):
            # warm-started traversal runs on a sweep budget at a loose
            # tolerance; only the winning grid point is re-solved tightly
            beta, _, _ = kernels.lasso_cd(
                g, c, float(lam), beta=beta,
                tol=PATH_TOL, max_sweeps=PATH_MAX_SWEEPS,
            )
            betas_at[i] = beta
        pred = y_mean + zh @ betas_at.T  # held x grid
        sq_err += ((y[held][:, None] - pred) ** 2).sum(axis=0)
        n_pred += held.size
        fold_betas.append((betas_at, means, sds, y_mean, g, c))

    mean_mse = sq_err / n_pred
    best = int(np.argmin(mean_mse))  # argmin takes the first = largest lam on ties
    lam = float(grid[best])
    prednames = tuple(names) if names is not None else tuple(f"x{j}" for j in range(x.shape[1]))
    fold_models = []
    for betas_at, means, sds, y_mean, gram, corr in fold_betas:
        # tighten the winning grid point for stable selection votes; a
        # capped budget is kept because near-duplicate predictor columns
        # can make the last digit unreachable, and votes don't need it
        beta, _, _ = kernels.lasso_cd(
            gram, corr, lam, beta=betas_at[best].copy(), max_sweeps=50_000
        )
        fold_models.append(
            LassoModel(
                predictor_names=prednames,
                coefs=beta,
                intercept=y_mean,
                lam=lam,
                x_means=means,
                x_sds=sds,
                y_mean=y_mean,
            )
        )
    fold_models = tuple(fold_models)
    return CvResult(
        lam=lam,
        cv_mse=float(mean_mse[best]),
        fold_models=fold_models,
        grid=grid,
        mean_mse=mean_mse,
    )


def select_strong(coefs: dict[str, float], cutoff: float = 0.2) -> tuple[list[str], bool]:
    """Names with |coef| >= cutoff * sum|coef|; fewer than 2 qualifying
    falls back to the top 2 by magnitude (ties by name). All-zero
    coefficients return the 2 first names with a degeneracy flag.
    """
    if len(coefs) < 2:
        raise ValidationError("need >= 2 candidate predictors")
    ranked = sorted(coefs, key=lambda n: (-abs(coefs[n]), n))
    total = sum(abs(v) for v in coefs.values())
    if total == 0.0:
        return sorted(coefs)[:2], True
    strong = [n for n in ranked if abs(coefs[n]) >= cutoff * total]
    if len(strong) < 2:
        strong = ranked[:2]
    return strong, False


def _test_indices(n: int, split: SplitConfig) -> np.ndarray:
    rng = stream(split.seed, DOMAIN_XPLAIN, 0)
    return np.sort(rng.permutation(n)[: split.n_test])


def xplain_feature(
    table: FeatureTable, j: str, split: SplitConfig, _test_idx=None
) -> ExplanationReport:
    """Full explanation protocol for one dependent feature."""
    if j not in table.names:
        raise ValidationError(f"unknown feature {j!r}")
    if table.kinds[j] != "continuous":
        raise ValidationError(f"{j!r} is categorical")
    n = table.n_patients
    if n < split.folds + split.n_test:
        raise ValidationError("table too small for the requested split")

    test_idx = _test_indices(n, split) if _test_idx is None else _test_idx
    cv_idx = np.setdiff1d(np.arange(n), test_idx, assume_unique=True)
    predictors = [name for name in table.names if name != j]
    xall = table.values[:, [table.names.index(p) for p in predictors]]
    yall = table.column(j)
    y_cv = yall[cv_idx]
    if float(np.var(y_cv)) == 0.0:
        raise DegenerateDataError(f"dependent feature {j!r} has zero variance")

    rng = stream(split.seed, DOMAIN_XPLAIN, table.names.index(j) + 1)
    cv = cv_lambda(xall[cv_idx], y_cv, split, rng, names=predictors)

    counts = dict.fromkeys(predictors, 0)
    mags = dict.fromkeys(predictors, 0.0)
    fold_selections = []
    degenerate = False
    for model in cv.fold_models:
        sel, degen = select_strong(model.coef_map())
        degenerate = degenerate or degen
        fold_selections.append(sel)
        for name in sel:
            counts[name] += 1
        for name, b in model.coef_map().items():
            mags[name] += abs(b)
    n_fits = len(cv.fold_models)
    freq = {name: counts[name] / n_fits for name in predictors}
    ranked = sorted(predictors, key=lambda p: (-freq[p], -mags[p], p))
    retained = [p for p in ranked if freq[p] >= 0.5]
    if len(retained) < 2:
        retained = ranked[:2]
    elif len(retained) > 3:
        retained = retained[:3]
    retained = sorted(retained, key=lambda p: (-freq[p], -mags[p], p))

    x_small = table.values[:, [table.names.index(p) for p in retained]]
    final_cv = cv_lambda(x_small[cv_idx], y_cv, split, rng, names=retained)
    final = lasso_fit(x_small[cv_idx], y_cv, final_cv.lam, names=retained)
    pred = final.predict(x_small[test_idx])
    test_mse = float(np.mean((yall[test_idx] - pred) ** 2))

    return ExplanationReport(
        dependent=j,
        selected=[(p, float(b)) for p, b in zip(retained, final.coefs)],
        cv_mse=final_cv.cv_mse,
        test_mse=test_mse,
        selection_frequency={k: v for k, v in sorted(freq.items()) if v > 0},
        lam=final_cv.lam,
        predictor_names=predictors,
        model=final,
        test_indices=tuple(int(i) for i in test_idx),
        fold_selections=fold_selections,
        degenerate_selection=degenerate,
    )


@dataclass
class XplainBatch:
    reports: list[ExplanationReport]
    failures: dict[str, str]


def xplain_all(table: FeatureTable, split: SplitConfig) -> XplainBatch:
    """One report per continuous feature, sharing a single test-set draw."""
    test_idx = _test_indices(table.n_patients, split)
    reports: list[ExplanationReport] = []
    failures: dict[str, str] = {}
    for name in table.continuous_names():
        try:
            reports.append(xplain_feature(table, name, split, _test_idx=test_idx))
        except (ValidationError, DegenerateDataError, ConvergenceError) as exc:
            failures[name] = str(exc)
    return XplainBatch(reports=reports, failures=failures)
