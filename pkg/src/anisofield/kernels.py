"""Backend selection for the series-summation kernels.

The compiled extension is used when it imports; setting the environment
variable ``ANISOFIELD_PURE_PYTHON=1`` before import forces the numpy fallback.
Both backends expose the same two functions and agree to rounding level.
"""
import os

import numpy as np

from . import _pykernels

_ext = None
if os.environ.get("ANISOFIELD_PURE_PYTHON", "") != "1":
    try:
        from . import _ckernels as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"


def get_backend(name=None):
    """Return the kernel module for ``name`` ("cython", "python" or None)."""
    if name is None:
        return _ext if _ext is not None else _pykernels
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ext is None:
            raise RuntimeError("compiled kernels are not available")
        return _ext
    raise ValueError(f"unknown backend {name!r}")


def _checkpoints(checkpoints, n_max):
    ck = np.asarray(checkpoints, dtype=np.intp).ravel()
    if ck.size and (np.any(np.diff(ck) < 0) or ck[0] < 0):
        raise ValueError("checkpoints must be sorted and non-negative")
    if ck.size and ck[-1] > n_max:
        raise ValueError(f"checkpoint {int(ck[-1])} exceeds the {n_max} available terms")
    return np.ascontiguousarray(ck)


def lepage_sum(points, inv_alpha, xi, coef_a, coef_b, g, checkpoints,
               threads=1, backend=None):
    """Partial sums of ``sum_n exp(a_n + b_n / alpha(u)) (e^{i<u, xi_n>} - 1) g_n``.

    ``inv_alpha`` holds 1/alpha per evaluation point. Returns a complex array
    of shape (n_points, n_checkpoints).
    """
    mod = get_backend(backend)
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    inv_alpha = np.ascontiguousarray(np.broadcast_to(
        np.asarray(inv_alpha, dtype=np.float64), (points.shape[0],)))
    xi = np.ascontiguousarray(np.atleast_2d(xi), dtype=np.float64)
    if xi.shape[1] != points.shape[1]:
        raise ValueError("spectral points and evaluation points differ in dimension")
    ck = _checkpoints(checkpoints, xi.shape[0])
    g = np.asarray(g, dtype=np.complex128)
    constant = bool(inv_alpha.size == 0 or np.all(inv_alpha == inv_alpha[0]))
    re, im = mod.lepage_sum(
        points, inv_alpha, xi,
        np.ascontiguousarray(coef_a, dtype=np.float64),
        np.ascontiguousarray(coef_b, dtype=np.float64),
        np.ascontiguousarray(g.real), np.ascontiguousarray(g.imag),
        ck, constant, int(threads),
    )
    return np.asarray(re) + 1j * np.asarray(im)


def weighted_partial_sums(weights, g, checkpoints, threads=1, backend=None):
    """Partial sums of ``sum_n W[p, n] g_n`` at the checkpoints, shape (P, K)."""
    mod = get_backend(backend)
    w = np.atleast_2d(np.asarray(weights))
    g = np.asarray(g, dtype=np.complex128)
    ck = _checkpoints(checkpoints, min(w.shape[1], g.shape[0]))
    w_re = np.ascontiguousarray(w.real, dtype=np.float64)
    w_im = np.ascontiguousarray(w.imag if np.iscomplexobj(w) else np.zeros_like(w_re))
    re, im = mod.weighted_partial_sums(
        w_re, w_im, np.ascontiguousarray(g.real), np.ascontiguousarray(g.imag),
        ck, int(threads),
    )
    return np.asarray(re) + 1j * np.asarray(im)
