"""Correlation structure of a feature table: Pearson matrix, sparse
partial-correlation graph, PCA of the standardized features, and k-means
clustering of the feature coordinates in PC space.

The sparse precision estimate is an l1-penalized Gaussian log-likelihood
maximum computed by block coordinate descent (one lasso subproblem per
column, via the shared Gram-form kernel), with the penalty picked by BIC
over a descending, warm-started grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConvergenceError, DegenerateDataError, ValidationError
from .rng import DOMAIN_KMEANS, stream
from .table import FeatureTable


@dataclass(frozen=True)
class CorrelationMatrix:
    names: list[str]
    r: np.ndarray

    def __post_init__(self):
        p = len(self.names)
        if self.r.shape != (p, p):
            raise ValidationError("correlation matrix shape mismatch")


@dataclass(frozen=True)
class GgmGraph:
    nodes: list[str]
    edges: list[tuple[str, str, float]]
    penalty: float
    bic: float
    precision: np.ndarray
    grid: tuple[float, ...]
    bic_by_penalty: dict[float, float]


@dataclass(frozen=True)
class PcaResult:
    names: list[str]
    eigenvalues: np.ndarray  # descending
    loadings: np.ndarray  # columns are unit eigenvectors
    means: np.ndarray
    sds: np.ndarray  # ddof=1
    cumulative: np.ndarray  # cumulative variance fractions


@dataclass(frozen=True)
class ClusterAssignment:
    k: int
    assignment: dict[str, int]
    centroids: np.ndarray
    wcss: float
    coords: np.ndarray = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# Pearson correlation

def _continuous_matrix(table: FeatureTable) -> tuple[list[str], np.ndarray]:
    names = table.continuous_names()
    idx = [table.names.index(n) for n in names]
    return names, table.values[:, idx]


def pearson_matrix(table: FeatureTable) -> CorrelationMatrix:
    """Pairwise Pearson coefficients of the continuous columns."""
    names, x = _continuous_matrix(table)
    if x.shape[0] < 2:
        raise ValidationError("need >= 2 rows for correlation")
    sds = x.std(axis=0, ddof=1)
    for name, sd in zip(names, sds):
        if sd == 0:
            raise DegenerateDataError(f"zero-variance column {name!r}")
    r = np.atleast_2d(np.corrcoef(x, rowvar=False))
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return CorrelationMatrix(names=names, r=r)


# ---------------------------------------------------------------------------
# Sparse precision / partial-correlation graph

def _glasso_once(S, rho, W, tol=1e-7, max_iter=200):
    """One penalty point of the block-coordinate-descent precision estimate.

    W is the working covariance estimate (modified in place; pass a warm
    start from a larger penalty). Returns (W, Theta, converged).
    """
    p = S.shape[0]
    idx = np.arange(p)
    np.fill_diagonal(W, np.diagonal(S) + rho)
    B = np.zeros((p, p))  # column j holds beta for subproblem j
    converged = False
    for _ in range(max_iter):
        max_delta = 0.0
        for j in range(p):
            rest = idx != j
            W11 = W[np.ix_(rest, rest)]
            s12 = S[rest, j]
            beta, _, ok = kernels.lasso_cd(W11, s12, rho, beta=B[rest, j])
            if not ok:
                return W, None, False
            B[rest, j] = beta
            w12 = W11 @ beta
            delta = np.abs(W[rest, j] - w12).max() if p > 1 else 0.0
            max_delta = max(max_delta, float(delta))
            W[rest, j] = w12
            W[j, rest] = w12
        if max_delta < tol:
            converged = True
            break
    if not converged:
        return W, None, False

    theta = np.zeros((p, p))
    for j in range(p):
        rest = idx != j
        beta = B[rest, j]
        t22 = 1.0 / (W[j, j] - float(W[rest, j] @ beta))
        theta[j, j] = t22
        theta[rest, j] = -beta * t22
    return W, theta, True


def _refit_support(S, nz, tol=1e-9, max_iter=500):
    """Unpenalized Gaussian MLE constrained to the zero pattern ``nz``.

    Same block scheme as the penalized pass, but each column subproblem is
    a plain linear solve restricted to that column's permitted entries.
    Returns the (symmetrized) precision, or None on failure.
    """
    p = S.shape[0]
    idx = np.arange(p)
    W = S.copy()
    B = np.zeros((p, p))
    converged = False
    for _ in range(max_iter):
        max_delta = 0.0
        for j in range(p):
            rest = idx != j
            allowed = nz[rest, j]
            if allowed.any():
                W11 = W[np.ix_(rest, rest)]
                try:
                    beta_a = np.linalg.solve(
                        W11[np.ix_(allowed, allowed)], S[rest, j][allowed]
                    )
                except np.linalg.LinAlgError:
                    return None
                beta = np.zeros(p - 1)
                beta[allowed] = beta_a
                w12 = W11 @ beta
            else:
                beta = np.zeros(p - 1)
                w12 = np.zeros(p - 1)
            B[rest, j] = beta
            max_delta = max(max_delta, float(np.abs(W[rest, j] - w12).max()))
            W[rest, j] = w12
            W[j, rest] = w12
        if max_delta < tol:
            converged = True
            break
    if not converged:
        return None
    theta = np.zeros((p, p))
    for j in range(p):
        rest = idx != j
        beta = B[rest, j]
        denom = W[j, j] - float(W[rest, j] @ beta)
        if denom <= 0:
            return None
        theta[j, j] = 1.0 / denom
        theta[rest, j] = -beta / denom
    return (theta + theta.T) / 2.0


def ggm_fit(table: FeatureTable, penalty_grid=None) -> GgmGraph:
    """Estimate the partial-correlation graph of the continuous columns.

    The penalized path (descending penalty grid, warm-started) proposes
    candidate supports: an edge needs a nonzero precision entry in both
    column subproblems (AND rule). Each distinct support is then refit
    without penalty under its zero constraints, and scored by
    BIC = -N(log det Omega - tr(S Omega)) + ln(N) * n_edges; scoring the
    refit rather than the shrunk estimate keeps the edge cost honest.
    Ties go to the larger (sparser) penalty. Edge weights are the refit
    partial correlations -omega_ij / sqrt(omega_ii * omega_jj).
    """
    names, x = _continuous_matrix(table)
    p = len(names)
    if p < 3:
        raise ValidationError("need >= 3 continuous columns")
    n = x.shape[0]
    if n < 2:
        raise ValidationError("need >= 2 rows")
    sds = x.std(axis=0, ddof=1)
    zero = [nm for nm, sd in zip(names, sds) if sd == 0]
    if zero:
        raise DegenerateDataError(f"zero-variance column {zero[0]!r}")
    S = np.corrcoef(x, rowvar=False)
    S = (S + S.T) / 2.0

    if penalty_grid is None:
        penalty_grid = np.logspace(np.log10(0.01), np.log10(0.95), 30)
    grid = sorted({float(r) for r in np.asarray(penalty_grid, dtype=np.float64)}, reverse=True)
    if not grid:
        raise ValidationError("penalty grid is empty")
    if grid[-1] <= 0:
        raise ValidationError("penalties must be positive")

    best = None
    bic_by_penalty: dict[float, float] = {}
    refit_cache: dict[bytes, tuple[np.ndarray, float] | None] = {}
    W = S.copy()  # warm start carried down the grid
    for rho in grid:
        W, theta, ok = _glasso_once(S, rho, W)
        if not ok:
            W = S.copy()  # reset the warm start after a failed point
            continue
        nz = (theta != 0.0) & (theta.T != 0.0)
        np.fill_diagonal(nz, False)
        key = nz.tobytes()
        if key not in refit_cache:
            omega = _refit_support(S, nz)
            if omega is None:
                refit_cache[key] = None
            else:
                sign, logdet = np.linalg.slogdet(omega)
                if sign <= 0:
                    refit_cache[key] = None
                else:
                    n_edges = int(nz.sum()) // 2
                    bic = -n * (logdet - float((S * omega).sum())) + np.log(n) * n_edges
                    refit_cache[key] = (omega, float(bic))
        cached = refit_cache[key]
        if cached is None:
            continue
        omega, bic = cached
        bic_by_penalty[rho] = bic
        # strict < keeps the largest penalty among BIC ties
        if best is None or bic < best[0]:
            best = (bic, rho, omega, nz)
    if best is None:
        raise ConvergenceError("no penalty grid point converged")

    bic, rho, omega, nz = best
    edges = []
    for i in range(p):
        for j in range(i + 1, p):
            if nz[i, j]:
                w = -omega[i, j] / np.sqrt(omega[i, i] * omega[j, j])
                edges.append((names[i], names[j], float(np.clip(w, -1.0, 1.0))))
    return GgmGraph(
        nodes=names,
        edges=edges,
        penalty=rho,
        bic=bic,
        precision=omega,
        grid=tuple(grid),
        bic_by_penalty=bic_by_penalty,
    )


def to_dot(graph: GgmGraph, floor: float = 0.05) -> str:
    """Render the graph for graphviz; the floor hides weak edges from the
    drawing only (the stored edge list keeps them)."""
    lines = ["graph ggm {", "  node [shape=ellipse];"]
    for name in graph.nodes:
        lines.append(f'  "{name}";')
    for a, b, w in graph.edges:
        if abs(w) >= floor:
            style = "solid" if w >= 0 else "dashed"
            lines.append(f'  "{a}" -- "{b}" [label="{w:.3f}", style={style}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# PCA on the correlation matrix

def pca(table: FeatureTable) -> PcaResult:
    """Eigendecompose the correlation matrix of the continuous columns.

    Eigenvalues come back descending; each loading column is oriented so
    its largest-magnitude entry is positive, making output reproducible
    across linear-algebra backends.
    """
    corr = pearson_matrix(table)
    names, x = _continuous_matrix(table)
    eigvals, eigvecs = np.linalg.eigh(corr.r)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]
    for k in range(eigvecs.shape[1]):
        col = eigvecs[:, k]
        if col[np.argmax(np.abs(col))] < 0:
            eigvecs[:, k] = -col
    total = eigvals.sum()
    cumulative = np.cumsum(eigvals) / total
    return PcaResult(
        names=names,
        eigenvalues=eigvals,
        loadings=eigvecs,
        means=x.mean(axis=0),
        sds=x.std(axis=0, ddof=1),
        cumulative=cumulative,
    )


def components_for_variance(p: PcaResult, fraction: float = 0.95) -> int:
    """Smallest k whose leading eigenvalues capture >= fraction of variance."""
    if not 0.0 < fraction <= 1.0:
        raise ValidationError("fraction must be in (0, 1]")
    hit = p.cumulative >= fraction - 1e-12
    return int(np.argmax(hit)) + 1


def scores(p: PcaResult, table: FeatureTable, k: int) -> np.ndarray:
    """Project (standardized) table rows onto the first k loadings."""
    if not 1 <= k <= len(p.names):
        raise ValidationError(f"k must be in 1..{len(p.names)}")
    names, x = _continuous_matrix(table)
    if names != p.names:
        raise ValidationError("table columns do not match the fitted roster")
    z = (x - p.means) / p.sds
    return z @ p.loadings[:, :k]


# ---------------------------------------------------------------------------
# k-means over feature coordinates in PC space

def _kmeans_once(rows, k, rng, tol=1e-10, max_iter=500):
    n = rows.shape[0]
    centers = np.empty((k, rows.shape[1]))
    centers[0] = rows[int(rng.integers(n))]
    d2 = ((rows - centers[0]) ** 2).sum(axis=1)
    for m in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[m] = rows[int(rng.integers(n))]
        else:
            centers[m] = rows[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, ((rows - centers[m]) ** 2).sum(axis=1))

    prev_wcss = np.inf
    for _ in range(max_iter):
        dist = ((rows[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        point_d2 = dist[np.arange(n), assign]
        for c in range(k):
            member = assign == c
            if member.any():
                centers[c] = rows[member].mean(axis=0)
            else:
                far = int(point_d2.argmax())
                centers[c] = rows[far]
                assign[far] = c
                point_d2[far] = 0.0
        dist = ((rows[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        wcss = float(dist[np.arange(n), assign].sum())
        if prev_wcss - wcss <= tol * max(prev_wcss, 1.0):
            break
        prev_wcss = wcss
    return assign, centers, wcss


def kmeans_loadings(
    p: PcaResult,
    k: int = 12,
    seed: int = 0,
    restarts: int = 20,
    variance_fraction: float = 0.95,
    scale: str = "sqrt_eigenvalue",
) -> ClusterAssignment:
    """Cluster features by their coordinates in the retained PC subspace.

    Coordinates are loading rows over the first k_dims components (k_dims
    chosen to reach the variance fraction), scaled by sqrt(eigenvalue) so
    distances match the biplot geometry; pass scale="raw" for unscaled
    loadings. Best WCSS over seeded k-means++ restarts wins; ties keep the
    earliest restart.
    """
    n_feat = len(p.names)
    if not 2 <= k <= n_feat:
        raise ValidationError(f"k must be in 2..{n_feat}")
    k_dims = components_for_variance(p, variance_fraction)
    coords = p.loadings[:, :k_dims].copy()
    if scale == "sqrt_eigenvalue":
        coords *= np.sqrt(p.eigenvalues[:k_dims])
    elif scale != "raw":
        raise ValidationError(f"unknown scale {scale!r}")
    if np.unique(coords, axis=0).shape[0] < k:
        raise ValidationError("k exceeds the number of distinct feature coordinates")

    best = None
    for r in range(restarts):
        rng = stream(seed, DOMAIN_KMEANS, r)
        assign, centers, wcss = _kmeans_once(coords, k, rng)
        if best is None or wcss < best[0]:
            best = (wcss, assign, centers)
    wcss, assign, centers = best

    # relabel clusters in order of first appearance over the feature list
    relabel: dict[int, int] = {}
    for c in assign:
        if int(c) not in relabel:
            relabel[int(c)] = len(relabel)
    for c in range(k):  # clusters that ended empty keep trailing ids
        relabel.setdefault(c, len(relabel))
    new_centers = np.empty_like(centers)
    for old, new in relabel.items():
        new_centers[new] = centers[old]
    assignment = {name: relabel[int(c)] for name, c in zip(p.names, assign)}
    return ClusterAssignment(
        k=k, assignment=assignment, centroids=new_centers, wcss=wcss, coords=coords
    )
