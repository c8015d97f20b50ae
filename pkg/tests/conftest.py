from __future__ import annotations

import numpy as np
import pytest

from petrel import kernels


@pytest.fixture(scope="session", autouse=True)
def _warm_numba():
    # compile JIT kernels once so per-test timings stay honest
    kernels.warm_kernels()
    yield


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run a test under both kernel backends."""
    if request.param == "numba" and not kernels.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend("auto")


def random_blob_mask(rng: np.random.Generator, shape, p_fill=0.6):
    """Random mask with at least one interior voxel: thresholded noise plus a
    guaranteed solid 3x3x3 core around the centre."""
    from petrel.volume import RoiMask

    inside = rng.random(shape) < p_fill
    cx, cy, cz = (s // 2 for s in shape)
    inside[max(cx - 1, 0):cx + 2, max(cy - 1, 0):cy + 2, max(cz - 1, 0):cz + 2] = True
    return RoiMask(inside=inside)
