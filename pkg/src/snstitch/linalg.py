"""Dense float64 matrix helpers, Jacobi SVD / pseudoinverse, and seeded RNGs.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The SVD
rotation loop runs in a compiled extension when one is built; otherwise the
pure-Python twin in ``_jacobi_py`` is used. Set ``SNSTITCH_PURE_PYTHON=1`` to
force the fallback.
"""
import os

import numpy as np

from .errors import NumericalError, ShapeError

if os.environ.get("SNSTITCH_PURE_PYTHON", "") not in ("", "0"):
    from ._jacobi_py import jacobi_rotate as _jacobi_rotate
    BACKEND = "python"
else:
    try:
        from ._jacobi import jacobi_rotate as _jacobi_rotate
        BACKEND = "cython"
    except ImportError:
        from ._jacobi_py import jacobi_rotate as _jacobi_rotate
        BACKEND = "python"

MAX_SWEEPS = 100
DEFAULT_PINV_TOL = 1e-10
# pair is treated as orthogonal once |<u_p,u_q>| <= ROTATION_TOL * |u_p||u_q|
ROTATION_TOL = 1e-15


def as_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b):
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def svd(a, max_sweeps=MAX_SWEEPS, backend=None):
    """Thin SVD ``a = u @ diag(s) @ vt`` by one-sided (Hestenes) Jacobi.

    Singular values come back in descending order. ``backend`` may be
    ``"python"`` or ``"cython"`` to pin an implementation (benchmarks, tests).
    """
    a = as_matrix(a)
    if a.size == 0:
        raise ShapeError("svd of an empty matrix")
    if not np.all(np.isfinite(a)):
        raise NumericalError("svd input contains NaN or Inf")
    rows, cols = a.shape
    transposed = rows < cols
    if transposed:
        a = a.T
        rows, cols = cols, rows

    rotate = _pick_backend(backend)
    # rows of `work` are the columns of `a`
    work = np.array(a.T, order="C", copy=True)
    vt = np.eye(cols)
    sweeps = rotate(work, vt, ROTATION_TOL, max_sweeps)
    if sweeps < 0:
        raise NumericalError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    s = np.sqrt(np.einsum("ij,ij->i", work, work))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    work = work[order]
    vt = vt[order]
    u = np.zeros((rows, cols))
    nz = s > 0
    u[:, nz] = (work[nz] / s[nz, None]).T

    if transposed:
        return vt.T, s, u.T
    return u, s, vt


def _pick_backend(backend):
    if backend is None:
        return _jacobi_rotate
    if backend == "python":
        from ._jacobi_py import jacobi_rotate
        return jacobi_rotate
    if backend == "cython":
        from ._jacobi import jacobi_rotate
        return jacobi_rotate
    raise ValueError(f"unknown backend {backend!r}")


def pinv(a, tol=DEFAULT_PINV_TOL, return_rank=False, backend=None):
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below ``tol * sigma_max`` are treated as zero.
    """
    if tol < 0:
        raise ValueError("tol must be non-negative")
    u, s, vt = svd(a, backend=backend)
    cutoff = tol * s[0] if s.size else 0.0
    keep = s > cutoff
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    result = (vt.T * inv_s) @ u.T
    if return_rank:
        return result, int(keep.sum())
    return result


def make_rng(seed):
    """Seeded PCG64 generator. ``seed`` may be an int or a sequence of ints."""
    return np.random.Generator(np.random.PCG64(seed))


def gaussian(rng, rows, cols, std=1.0):
    if std <= 0:
        raise ValueError("std must be positive")
    return rng.normal(0.0, std, size=(rows, cols))
