"""Hot numeric kernels, each with a numba ``@njit`` path and a pure-numpy
fallback.

The backend is chosen once at import: numba when it is importable and the
environment variable ``PETREL_NO_NUMBA`` is unset (or "0"). Set
``PETREL_NO_NUMBA=1`` to force the numpy path; ``set_backend`` switches at
runtime (used by the tests and the benchmark). Both paths produce the same
results: integer kernels match exactly, the lasso solver to float roundoff.

Kernels here are the loops that dominate pipeline runtime:

* ``glcm_count``      - co-occurrence counting over 3D direction offsets
* ``label_components``- 26-connected labelling of equal-valued voxel zones
* ``lasso_cd``        - coordinate descent for l1-penalized least squares
                        in Gram form (shared by the regression models and
                        the sparse precision-matrix estimator)
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("PETREL_NO_NUMBA", "").strip().lower() in {"1", "true", "yes"}


_use_numba = HAVE_NUMBA and not _env_disabled()


def use_numba() -> bool:
    return _use_numba


def backend_name() -> str:
    return "numba" if _use_numba else "numpy"


def set_backend(mode: str) -> None:
    """Select the kernel backend: "numba", "numpy", or "auto"."""
    global _use_numba
    if mode == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not importable")
        _use_numba = True
    elif mode == "numpy":
        _use_numba = False
    elif mode == "auto":
        _use_numba = HAVE_NUMBA and not _env_disabled()
    else:
        raise ValueError(f"unknown backend {mode!r}")


# ---------------------------------------------------------------------------
# GLCM co-occurrence counting

def _glcm_count_py(levels, offsets, n_levels):
    nx, ny, nz = levels.shape
    counts = np.zeros((n_levels, n_levels), dtype=np.int64)
    for m in range(offsets.shape[0]):
        dx, dy, dz = offsets[m, 0], offsets[m, 1], offsets[m, 2]
        for x in range(nx):
            x2 = x + dx
            if x2 < 0 or x2 >= nx:
                continue
            for y in range(ny):
                y2 = y + dy
                if y2 < 0 or y2 >= ny:
                    continue
                for z in range(nz):
                    z2 = z + dz
                    if z2 < 0 or z2 >= nz:
                        continue
                    a = levels[x, y, z]
                    if a == 0:
                        continue
                    b = levels[x2, y2, z2]
                    if b == 0:
                        continue
                    counts[a - 1, b - 1] += 1
                    counts[b - 1, a - 1] += 1
    return counts


def _glcm_count_np(levels, offsets, n_levels):
    counts = np.zeros((n_levels, n_levels), dtype=np.int64)
    for dx, dy, dz in offsets:
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        for axis, d in enumerate((dx, dy, dz)):
            n = levels.shape[axis]
            if abs(d) >= n:
                src = None
                break
            if d >= 0:
                src[axis] = slice(0, n - d)
                dst[axis] = slice(d, n)
            else:
                src[axis] = slice(-d, n)
                dst[axis] = slice(0, n + d)
        if src is None:
            continue
        a = levels[tuple(src)]
        b = levels[tuple(dst)]
        ok = (a > 0) & (b > 0)
        ai = a[ok] - 1
        bi = b[ok] - 1
        np.add.at(counts, (ai, bi), 1)
        np.add.at(counts, (bi, ai), 1)
    return counts


# ---------------------------------------------------------------------------
# 26-connected labelling of equal-valued zones
#
# Labels maximal 26-connected sets of equal nonzero value. Output labels are
# 1..L in order of each component's first voxel in C-order scan of the
# array, so both backends (and any rerun) emit identical labellings.

def _label_union_find_py(values):
    nx, ny, nz = values.shape
    n = nx * ny * nz
    parent = np.arange(n, dtype=np.int64)
    flat = values.reshape(n)

    # predecessor offsets: strictly earlier in C-order scan
    offs = np.array(
        [
            (-1, -1, -1), (-1, -1, 0), (-1, -1, 1),
            (-1, 0, -1), (-1, 0, 0), (-1, 0, 1),
            (-1, 1, -1), (-1, 1, 0), (-1, 1, 1),
            (0, -1, -1), (0, -1, 0), (0, -1, 1),
            (0, 0, -1),
        ],
        dtype=np.int64,
    )

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                i = (x * ny + y) * nz + z
                v = flat[i]
                if v == 0:
                    continue
                for m in range(13):
                    x2 = x + offs[m, 0]
                    y2 = y + offs[m, 1]
                    z2 = z + offs[m, 2]
                    if x2 < 0 or x2 >= nx or y2 < 0 or y2 >= ny or z2 < 0 or z2 >= nz:
                        continue
                    j = (x2 * ny + y2) * nz + z2
                    if flat[j] != v:
                        continue
                    ri = find(i)
                    rj = find(j)
                    if ri != rj:
                        if ri < rj:
                            parent[rj] = ri
                        else:
                            parent[ri] = rj

    labels = np.zeros(n, dtype=np.int32)
    next_label = 0
    for i in range(n):
        if flat[i] == 0:
            continue
        r = find(i)
        if labels[r] == 0:
            next_label += 1
            labels[r] = next_label
        labels[i] = labels[r]
    return labels.reshape(nx, ny, nz)


def _all_offsets_26():
    out = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == 0 and dy == 0 and dz == 0:
                    continue
                out.append((dx, dy, dz))
    return out


def _label_propagate_np(values):
    # Parallel-style connected components: hook every voxel to the minimum
    # representative among equal-valued 26-neighbours, then compress with
    # pointer jumping; repeat to a fixed point.
    shape = values.shape
    n = values.size
    valid = values > 0
    rep = np.arange(n, dtype=np.int64).reshape(shape)
    rep[~valid] = -1

    offsets = _all_offsets_26()
    while True:
        prev = rep.copy()
        for dx, dy, dz in offsets:
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            skip = False
            for axis, d in enumerate((dx, dy, dz)):
                m = shape[axis]
                if abs(d) >= m:
                    skip = True
                    break
                if d >= 0:
                    src[axis] = slice(0, m - d)
                    dst[axis] = slice(d, m)
                else:
                    src[axis] = slice(-d, m)
                    dst[axis] = slice(0, m + d)
            if skip:
                continue
            a = tuple(src)
            b = tuple(dst)
            same = valid[a] & valid[b] & (values[a] == values[b])
            region = rep[a]
            nbr = rep[b]
            np.minimum(region, np.where(same, nbr, region), out=region)
        # pointer jumping until stable
        flat = rep.reshape(n)
        ok = flat >= 0
        while True:
            jumped = flat.copy()
            jumped[ok] = flat[flat[ok]]
            if np.array_equal(jumped, flat):
                break
            flat = jumped
        rep = flat.reshape(shape)
        if np.array_equal(rep, prev):
            break

    # canonical labels: order of component minimum flat index
    flat = rep.reshape(n)
    labels = np.zeros(n, dtype=np.int32)
    roots = flat[flat >= 0]
    if roots.size:
        uniq = np.unique(roots)  # sorted == first-occurrence order of minima
        lut = np.zeros(n, dtype=np.int32)
        lut[uniq] = np.arange(1, uniq.size + 1, dtype=np.int32)
        labels[flat >= 0] = lut[roots]
    return labels.reshape(shape)


# ---------------------------------------------------------------------------
# Coordinate descent for the l1-penalized quadratic in Gram form:
#   minimize (1/2) b' G b - c' b + lam * |b|_1
# For a regression design this is G = X'X/N, c = X'y/N; the sparse precision
# estimator passes covariance blocks directly. Columns with G_jj <= 0 are
# frozen at zero.

def _lasso_cd_py(G, c, lam, beta, tol, max_sweeps):
    # Full sweeps alternate with cheap sweeps over the active (nonzero)
    # set; convergence is only ever declared by a full sweep, so the fixed
    # point matches plain cyclic descent.
    p = c.shape[0]
    active = np.zeros(p, dtype=np.bool_)
    sweeps = 0
    while sweeps < max_sweeps:
        max_delta = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            dot = 0.0
            for k in range(p):
                dot += G[j, k] * beta[k]
            rho = c[j] - dot + gjj * beta[j]
            if rho > lam:
                bnew = (rho - lam) / gjj
            elif rho < -lam:
                bnew = (rho + lam) / gjj
            else:
                bnew = 0.0
            delta = abs(bnew - beta[j])
            if delta > max_delta:
                max_delta = delta
            beta[j] = bnew
            active[j] = bnew != 0.0
        sweeps += 1
        if max_delta < tol:
            return sweeps, True
        while sweeps < max_sweeps:
            inner_delta = 0.0
            for j in range(p):
                if not active[j]:
                    continue
                gjj = G[j, j]
                if gjj <= 0.0:
                    continue
                dot = 0.0
                for k in range(p):
                    dot += G[j, k] * beta[k]
                rho = c[j] - dot + gjj * beta[j]
                if rho > lam:
                    bnew = (rho - lam) / gjj
                elif rho < -lam:
                    bnew = (rho + lam) / gjj
                else:
                    bnew = 0.0
                delta = abs(bnew - beta[j])
                if delta > inner_delta:
                    inner_delta = delta
                beta[j] = bnew
            sweeps += 1
            if inner_delta < tol:
                break
    return max_sweeps, False


def _lasso_cd_np(G, c, lam, beta, tol, max_sweeps):
    p = c.shape[0]
    diag = np.ascontiguousarray(np.diagonal(G))
    active = np.zeros(p, dtype=np.bool_)
    sweeps = 0
    while sweeps < max_sweeps:
        max_delta = 0.0
        for j in range(p):
            gjj = diag[j]
            if gjj <= 0.0:
                continue
            rho = c[j] - float(G[j] @ beta) + gjj * beta[j]
            if rho > lam:
                bnew = (rho - lam) / gjj
            elif rho < -lam:
                bnew = (rho + lam) / gjj
            else:
                bnew = 0.0
            delta = abs(bnew - beta[j])
            if delta > max_delta:
                max_delta = delta
            beta[j] = bnew
            active[j] = bnew != 0.0
        sweeps += 1
        if max_delta < tol:
            return sweeps, True
        while sweeps < max_sweeps:
            inner_delta = 0.0
            for j in range(p):
                if not active[j]:
                    continue
                gjj = diag[j]
                rho = c[j] - float(G[j] @ beta) + gjj * beta[j]
                if rho > lam:
                    bnew = (rho - lam) / gjj
                elif rho < -lam:
                    bnew = (rho + lam) / gjj
                else:
                    bnew = 0.0
                delta = abs(bnew - beta[j])
                if delta > inner_delta:
                    inner_delta = delta
                beta[j] = bnew
            sweeps += 1
            if inner_delta < tol:
                break
    return max_sweeps, False


if HAVE_NUMBA:
    _glcm_count_nb = numba.njit(cache=True, nogil=True)(_glcm_count_py)
    _label_union_find_nb = numba.njit(cache=True, nogil=True)(_label_union_find_py)
    _lasso_cd_nb = numba.njit(cache=True, nogil=True)(_lasso_cd_py)


def glcm_count(levels: np.ndarray, offsets: np.ndarray, n_levels: int) -> np.ndarray:
    """Symmetric co-occurrence counts of ``levels`` (0 = outside mask) over
    the given integer offsets, both orderings of each pair."""
    levels = np.ascontiguousarray(levels, dtype=np.int32)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if _use_numba:
        return _glcm_count_nb(levels, offsets, n_levels)
    return _glcm_count_np(levels, offsets, n_levels)


def label_components(values: np.ndarray) -> np.ndarray:
    """Label 26-connected components of equal nonzero value.

    Returns an int32 array, 0 for background, component labels 1..L ordered
    by first appearance in C-order scan. Identical for both backends.
    """
    values = np.ascontiguousarray(values, dtype=np.int32)
    if _use_numba:
        return _label_union_find_nb(values)
    return _label_propagate_np(values)


def lasso_cd(
    G: np.ndarray,
    c: np.ndarray,
    lam: float,
    beta: np.ndarray | None = None,
    tol: float = 1e-9,
    max_sweeps: int = 100_000,
) -> tuple[np.ndarray, int, bool]:
    """Solve the Gram-form l1 problem by cyclic coordinate descent.

    ``beta`` is a warm start (copied). Returns (beta, sweeps, converged)
    where convergence means the largest single-coefficient change in a
    sweep fell below ``tol``.
    """
    G = np.ascontiguousarray(G, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    if beta is None:
        beta = np.zeros(c.shape[0])
    else:
        beta = np.array(beta, dtype=np.float64)
    if _use_numba:
        sweeps, converged = _lasso_cd_nb(G, c, float(lam), beta, float(tol), int(max_sweeps))
    else:
        sweeps, converged = _lasso_cd_np(G, c, float(lam), beta, float(tol), int(max_sweeps))
    return beta, int(sweeps), bool(converged)


def warm_kernels() -> None:
    """Trigger JIT compilation of all numba kernels on tiny inputs."""
    if not _use_numba:
        return
    lv = np.zeros((2, 2, 2), dtype=np.int32)
    lv[0, 0, 0] = 1
    lv[1, 0, 0] = 1
    glcm_count(lv, np.array([[1, 0, 0]], dtype=np.int64), 2)
    label_components(lv)
    lasso_cd(np.eye(2), np.array([0.5, -0.2]), 0.1)
