"""Operator-scaling geometry.

Matrix powers ``r**E = expm(log(r) E)``, the integral norm
``||x||_E = int_0^inf ||exp(-tE) x|| dt``, the radial part ``tau_E`` (the
radius solving ``||r**(-E) x||_E = 1``), quasi-metrics built on it, and
``E^t``-homogeneous functions.
"""
from dataclasses import dataclass, field
from functools import cached_property
import math

import numpy as np


class NumericError(ArithmeticError):
    """A numerical routine failed to reach its tolerance.

    ``residual`` carries the best error estimate available at failure.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


# ---------------------------------------------------------------------------
# matrix exponential

_TAYLOR_DEGREE = 16
_SCALE_TARGET = 0.5


def expm_batch(a):
    """Matrix exponential of a stack of small square matrices.

    Scaling and squaring around a degree-16 Taylor core: each matrix is scaled
    by ``2**-s`` so its 1-norm is at most 1/2, which puts the truncation error
    below ``0.5**17 / 17!`` (about 2e-20), then squared back ``s`` times.
    The number of squarings is chosen per matrix.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError("expected a (..., d, d) array")
    shape = a.shape
    d = shape[-1]
    x = a.reshape(-1, d, d)
    norm1 = np.abs(x).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        s = np.where(norm1 > _SCALE_TARGET,
                     np.ceil(np.log2(norm1 / _SCALE_TARGET)), 0.0).astype(int)
    if np.any(~np.isfinite(norm1)):
        raise NumericError("non-finite matrix entries in expm")
    xs = x / np.ldexp(1.0, s)[:, None, None]
    eye = np.broadcast_to(np.eye(d), xs.shape)
    p = eye + xs / _TAYLOR_DEGREE
    for k in range(_TAYLOR_DEGREE - 1, 0, -1):
        p = eye + (xs @ p) / k
    for j in range(int(s.max(initial=0))):
        m = s > j
        p[m] = p[m] @ p[m]
    return p.reshape(shape)


def expm(a):
    """Matrix exponential of a single square matrix."""
    return expm_batch(np.asarray(a, dtype=np.float64)[None])[0]


# ---------------------------------------------------------------------------
# scaling matrix

_GL_HIGH = np.polynomial.legendre.leggauss(20)
_GL_LOW = np.polynomial.legendre.leggauss(14)
_TAIL_REL = 1e-13
_QUAD_REL = 1e-13
_MAX_NODES = 200_000


class ScalingMatrix:
    """A real matrix whose eigenvalues all have positive real parts.

    Attributes: ``E`` (the matrix), ``d``, ``q`` (trace), ``a1`` and ``abar``
    (smallest and largest real part of the spectrum), ``spectrum``.
    """

    def __init__(self, E):
        E = np.array(E, dtype=np.float64, ndmin=2)
        if E.ndim != 2 or E.shape[0] != E.shape[1]:
            raise ValueError("scaling matrix must be square")
        if not np.all(np.isfinite(E)):
            raise ValueError("scaling matrix has non-finite entries")
        E.setflags(write=False)
        self.E = E
        self.d = E.shape[0]
        self.spectrum = np.linalg.eigvals(E)
        self.a1 = float(self.spectrum.real.min())
        self.abar = float(self.spectrum.real.max())
        self.q = float(np.trace(E))
        if self.a1 <= 0:
            raise ValueError(
                f"eigenvalues must have positive real parts (min real part {self.a1:g})")
        re_sum = float(self.spectrum.real.sum())
        if abs(re_sum - self.q) > 1e-10 * max(1.0, abs(self.q)):
            raise NumericError("trace and eigenvalue sum disagree", abs(re_sum - self.q))

    @classmethod
    def identity(cls, d):
        return cls(np.eye(d))

    @property
    def normalized(self):
        """True when every eigenvalue has real part at least one."""
        return self.a1 >= 1.0

    def normalize(self):
        """Return ``E / a1``, whose smallest eigenvalue real part is one."""
        return ScalingMatrix(self.E / self.a1)

    @cached_property
    def T(self):
        return ScalingMatrix(self.E.T)

    def __eq__(self, other):
        return isinstance(other, ScalingMatrix) and np.array_equal(self.E, other.E)

    def __hash__(self):
        return hash(self.E.tobytes())

    def __repr__(self):
        return f"ScalingMatrix({self.E.tolist()!r})"

    def to_dict(self):
        return {"entries": self.E.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(data["entries"])

    # -- quadrature nodes for the integral norm ---------------------------------

    @cached_property
    def _norm_nodes(self):
        """Panels, weights and propagators ``exp(-t E)`` on [0, T].

        Panel width is halved until the 20- and 14-point Gauss-Legendre rules
        agree to ``_QUAD_REL`` on probe vectors; panels are appended until the
        tail bound ``||exp(-TE)|| * int_0^inf ||exp(-sE)|| ds`` falls below
        ``_TAIL_REL`` times a lower bound of the result.
        """
        E = self.E
        opnorm = max(np.linalg.norm(E, 2), 1e-300)
        width = min(4.0, 8.0 / opnorm)
        rng = np.random.default_rng(12345)
        probes = np.vstack([np.eye(self.d), rng.normal(size=(8, self.d))])
        probes /= np.linalg.norm(probes, axis=1, keepdims=True)
        last = None
        for _ in range(8):
            edges, tail = self._panels(width, opnorm)
            hi = self._rule(edges, _GL_HIGH)
            lo = self._rule(edges, _GL_LOW)
            val_hi = self._integrate(hi, probes)
            val_lo = self._integrate(lo, probes)
            err = float(np.max(np.abs(val_hi - val_lo) / val_hi))
            last = err
            if err <= _QUAD_REL:
                return {"t": hi[0], "w": hi[1], "prop": hi[2], "tail": tail,
                        "err": err, "T": float(edges[-1])}
            width /= 2.0
        raise NumericError("integral-norm quadrature did not converge", last)

    def _panels(self, width, opnorm):
        step = 4
        n = step
        while True:
            T = n * width
            PT = expm(-T * self.E)
            decay = np.linalg.norm(PT, 2)
            if decay * opnorm < _TAIL_REL * 1e-2 or n * 20 > _MAX_NODES:
                break
            n += step
        edges = np.arange(n + 1) * width
        # crude bound of int_0^inf ||exp(-sE)|| ds from the panel sums
        t, w, prop = self._rule(edges, _GL_LOW)
        mass = float(np.sum(w * np.linalg.norm(prop, 2, axis=(1, 2))))
        tail = decay * mass * opnorm
        if tail > _TAIL_REL:
            raise NumericError("integral-norm truncation exceeded node budget", tail)
        return edges, tail

    def _rule(self, edges, rule):
        x, w = rule
        a = edges[:-1, None]
        b = edges[1:, None]
        t = (0.5 * (b - a) * x[None, :] + 0.5 * (a + b)).ravel()
        ww = (0.5 * (b - a) * w[None, :]).ravel()
        prop = expm_batch(-t[:, None, None] * self.E[None, :, :])
        return t, ww, prop

    @staticmethod
    def _integrate(rule, x):
        _, w, prop = rule
        y = (prop[None, :, :, :] * x[:, None, None, :]).sum(axis=-1)
        return (np.sqrt((y * y).sum(axis=-1)) * w[None, :]).sum(axis=-1)


def mat_power(M, r):
    """``r**E = expm(log(r) E)`` for scalar ``r > 0``."""
    if not np.isscalar(r) and np.ndim(r) != 0:
        return mat_power_batch(M, r)
    r = float(r)
    if not r > 0:
        raise ValueError(f"matrix power needs r > 0, got {r}")
    return expm(math.log(r) * M.E)


def mat_power_batch(M, r):
    """Stack of ``r_i**E`` for an array of positive ``r``."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(~(r > 0)):
        raise ValueError("matrix power needs r > 0")
    return expm_batch(np.log(r)[..., None, None] * M.E)


def _apply(mats, x):
    # elementwise product-and-sum keeps each row independent of the batch
    return (mats * x[..., None, :]).sum(axis=-1)


_CHUNK = 2048


def e_norm(M, x, return_tail=False):
    """The integral norm ``int_0^inf ||exp(-tE) x|| dt``.

    Equivalent to ``int_0^1 ||theta**E x|| dtheta / theta``. ``x`` may be a
    single vector or an (n, d) batch. With ``return_tail`` the truncation tail
    bound (relative) is returned as well.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if xs.shape[-1] != M.d:
        raise ValueError(f"expected vectors of length {M.d}")
    nodes = M._norm_nodes
    w = nodes["w"]
    prop = nodes["prop"]
    out = np.empty(xs.shape[0])
    for i in range(0, xs.shape[0], _CHUNK):
        blk = xs[i:i + _CHUNK]
        y = np.einsum("kij,nj->nki", prop, blk)
        out[i:i + _CHUNK] = (np.sqrt((y * y).sum(axis=-1)) * w).sum(axis=-1)
    res = out[0] if single else out
    if return_tail:
        return res, nodes["tail"]
    return res


# ---------------------------------------------------------------------------
# radial part

_TAU_TOL = 1e-13
_TAU_MAXIT = 200
_LOG_BRACKET = 30 * math.log(10.0)


def _tau_objective(M, x, ell):
    """F(ell) = ||exp(-ell E) x||_E and its derivative -||exp(-ell E) x||."""
    y = np.einsum("nij,nj->ni", expm_batch(-ell[:, None, None] * M.E), x)
    return e_norm(M, y), np.sqrt((y * y).sum(axis=-1))


def tau(M, x):
    """Radial part ``tau_E(x)``: the ``r`` with ``||r**(-E) x||_E = 1``.

    The objective ``ell -> ||exp(-ell E) x||_E = int_ell^inf ||exp(-sE) x|| ds``
    is strictly decreasing in ``ell = log r``. It is solved by bisection on
    ``ell`` with Newton steps taken whenever they stay inside the bracket.
    Accepts a vector or an (n, d) batch; ``tau(0) = 0``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if xs.shape[-1] != M.d:
        raise ValueError(f"expected vectors of length {M.d}")
    n = xs.shape[0]
    out = np.zeros(n)
    nz = np.any(xs != 0, axis=1)
    if not np.any(nz):
        return out[0] if single else out
    xv = xs[nz]
    n0 = e_norm(M, xv)
    if not np.all((n0 > 0) & np.isfinite(n0)):
        raise NumericError("E-norm under- or overflows; input outside the double range", None)
    guesses = np.stack([np.log(n0) / M.a1, np.log(n0) / M.abar])
    lo = guesses.min(axis=0) - 0.5
    hi = guesses.max(axis=0) + 0.5

    # expand until F(lo) >= 1 >= F(hi)
    for _ in range(200):
        f_lo, _d = _tau_objective(M, xv, lo)
        bad = f_lo < 1.0
        if not np.any(bad):
            break
        lo = np.where(bad, lo - 2.0 * (hi - lo), lo)
        if np.any(lo < -_LOG_BRACKET):
            raise NumericError("tau bracket expansion fell below 1e-30", float(lo.min()))
    for _ in range(200):
        f_hi, _d = _tau_objective(M, xv, hi)
        bad = f_hi > 1.0
        if not np.any(bad):
            break
        hi = np.where(bad, hi + 2.0 * (hi - lo), hi)
        if np.any(hi > _LOG_BRACKET):
            raise NumericError("tau bracket expansion exceeded 1e30", float(hi.max()))

    ell = 0.5 * (lo + hi)
    active = np.ones(len(xv), dtype=bool)
    for _ in range(_TAU_MAXIT):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        f, phi = _tau_objective(M, xv[idx], ell[idx])
        resid = f - 1.0
        above = resid > 0
        lo[idx] = np.where(above, ell[idx], lo[idx])
        hi[idx] = np.where(above, hi[idx], ell[idx])
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = ell[idx] + resid / phi
        inside = (newton > lo[idx]) & (newton < hi[idx]) & np.isfinite(newton)
        nxt = np.where(inside, newton, 0.5 * (lo[idx] + hi[idx]))
        nxt = np.where(resid == 0, ell[idx], nxt)
        step = np.abs(nxt - ell[idx])
        ell[idx] = nxt
        done = (step <= _TAU_TOL * (1.0 + np.abs(nxt))) | (resid == 0) \
            | (hi[idx] - lo[idx] <= _TAU_TOL * (1.0 + np.abs(nxt)))
        active[idx[done]] = False
    else:
        if np.any(active):
            raise NumericError("tau iteration cap reached",
                               float(np.max(hi[active] - lo[active])))
    out[nz] = np.exp(ell)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# quasi-metrics

EUCLIDEAN = "euclidean"
TAU = "tau"
PRODUCT_ALPHA_TAU = "product_alpha_tau"
_KINDS = (EUCLIDEAN, TAU, PRODUCT_ALPHA_TAU)


def _quantize(x, bits=40):
    m, e = np.frexp(x)
    return np.ldexp(np.round(np.ldexp(m, bits)), e - bits)


@dataclass(eq=False)
class QuasiMetricSpec:
    """A computable quasi-metric.

    ``kind`` is ``"euclidean"``, ``"tau"`` (``rho(x, y) = tau_E(x - y)``) or
    ``"product_alpha_tau"`` (``|a - a'| + tau_E(u - v)`` on points
    ``(a, u)``). ``h_low``/``h_high`` are the comparison exponents against the
    Euclidean norm when known. With ``cache=True`` inputs are snapped to 40
    mantissa bits and tau values memoised on the snapped point.
    """

    kind: str = EUCLIDEAN
    matrix: ScalingMatrix | None = None
    dim: int | None = None
    h_low: float | None = None
    h_high: float | None = None
    cache: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown quasi-metric kind {self.kind!r}")
        if self.kind != EUCLIDEAN:
            if self.matrix is None:
                raise ValueError(f"{self.kind} quasi-metric needs a scaling matrix")
            self.dim = self.matrix.d + (1 if self.kind == PRODUCT_ALPHA_TAU else 0)
        for h in (self.h_low, self.h_high):
            if h is not None and not 0 < h <= 1:
                raise ValueError("comparison exponents must lie in (0, 1]")
        if self.h_low is not None and self.h_high is not None and self.h_low > self.h_high:
            raise ValueError("h_low must not exceed h_high")

    @classmethod
    def euclidean(cls, dim=None, **kw):
        return cls(EUCLIDEAN, None, dim, h_low=1.0, h_high=1.0, **kw)

    @classmethod
    def tau_e(cls, matrix, **kw):
        if not isinstance(matrix, ScalingMatrix):
            matrix = ScalingMatrix(matrix)
        return cls(TAU, matrix, **kw)

    @classmethod
    def product_alpha_tau(cls, matrix, **kw):
        if not isinstance(matrix, ScalingMatrix):
            matrix = ScalingMatrix(matrix)
        return cls(PRODUCT_ALPHA_TAU, matrix, **kw)

    def to_dict(self):
        out = {"kind": self.kind}
        if self.matrix is not None:
            out["matrix"] = self.matrix.to_dict()
        for key in ("h_low", "h_high"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        kind = data.pop("kind", EUCLIDEAN)
        mat = data.pop("matrix", None)
        matrix = ScalingMatrix.from_dict(mat) if mat is not None else None
        return cls(kind, matrix, **data)

    def tau_values(self, h):
        """tau_E on an (n, d) batch of differences, through the cache if enabled."""
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        if not self.cache:
            return tau(self.matrix, h)
        hq = _quantize(h)
        # canonical sign so that h and -h share one entry
        lead = np.take_along_axis(hq, np.argmax(hq != 0, axis=1)[:, None], axis=1)
        hq = np.where(lead < 0, -hq, hq)
        keys = [row.tobytes() for row in hq]
        out = np.empty(len(keys))
        missing = {}
        for i, k in enumerate(keys):
            v = self._cache.get(k)
            if v is None:
                missing.setdefault(k, []).append(i)
            else:
                out[i] = v
        if missing:
            rows = np.array([hq[idx[0]] for idx in missing.values()])
            vals = tau(self.matrix, rows)
            for (k, idx), v in zip(missing.items(), vals):
                self._cache[k] = float(v)
                out[idx] = v
        return out


def rho(spec, x, y):
    """Evaluate the quasi-metric on points or on aligned (n, dim) batches."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    single = x.ndim == 1 and y.ndim == 1
    xs = np.atleast_2d(x)
    ys = np.atleast_2d(y)
    if xs.shape[-1] != ys.shape[-1]:
        raise ValueError("points have different dimensions")
    if spec.dim is not None and xs.shape[-1] != spec.dim:
        raise ValueError(f"{spec.kind} quasi-metric expects points of dimension {spec.dim}")
    xs, ys = np.broadcast_arrays(xs, ys)
    diff = xs - ys
    if spec.kind == EUCLIDEAN:
        out = np.sqrt((diff * diff).sum(axis=-1))
    elif spec.kind == TAU:
        out = spec.tau_values(diff)
    else:
        out = np.abs(diff[:, 0]) + spec.tau_values(diff[:, 1:])
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# envelope diagnostics


@dataclass
class EnvelopeReport:
    kappa: float
    c21: float
    c22: float
    ratio_high_min: float
    ratio_high_max: float
    ratio_low_min: float
    ratio_low_max: float
    n_pairs: int

    def to_dict(self):
        return dict(self.__dict__)


def envelope_probe(spec, box, n_probes, seed, h_low=None, h_high=None):
    """Empirical comparison constants between ``spec`` and the Euclidean norm.

    Reports the range of ``rho/||x-y||**h_high`` and ``rho/||x-y||**h_low``
    over random pairs with ``||x - y|| <= 1`` inside ``box``, plus the largest
    observed quasi-triangle ratio ``kappa`` over random triples (at least 1).
    """
    box = np.asarray(box, dtype=np.float64)
    h_low = spec.h_low if h_low is None else h_low
    h_high = spec.h_high if h_high is None else h_high
    if h_low is None or h_high is None:
        raise ValueError("comparison exponents h_low and h_high are required")
    if box.ndim != 2 or box.shape[1] != 2 or np.any(box[:, 1] <= box[:, 0]):
        raise ValueError("box must be a non-empty list of [low, high] intervals")
    rng = np.random.default_rng(seed)
    dim = box.shape[0]
    lo, hi = box[:, 0], box[:, 1]
    x = rng.uniform(lo, hi, size=(n_probes, dim))
    direction = rng.normal(size=(n_probes, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = np.exp(rng.uniform(np.log(1e-4), 0.0, size=n_probes))
    y = np.clip(x + radius[:, None] * direction, lo, hi)
    dist = np.linalg.norm(x - y, axis=1)
    keep = (dist > 0) & (dist <= 1)
    x, y, dist = x[keep], y[keep], dist[keep]
    r = rho(spec, x, y)
    rh = r / dist ** h_high
    rl = r / dist ** h_low
    z = rng.uniform(lo, hi, size=(len(x), dim))
    rxz = rho(spec, x, z)
    den = r + rho(spec, y, z)
    kappa = max(1.0, float(np.max(rxz / den))) if len(x) else 1.0
    return EnvelopeReport(
        kappa=kappa,
        c21=float(rh.min()), c22=float(rl.max()),
        ratio_high_min=float(rh.min()), ratio_high_max=float(rh.max()),
        ratio_low_min=float(rl.min()), ratio_low_max=float(rl.max()),
        n_pairs=int(len(x)),
    )


# ---------------------------------------------------------------------------
# homogeneous functions


class HomogeneousPsi:
    """An ``E^t``-homogeneous function: ``psi(c**(E^t) xi) = c psi(xi)``.

    The built-in form is ``sum_i |<xi, w_i>|**(1/a_i)`` where ``E w_i = a_i w_i``
    (real eigenpairs of ``E``). A custom evaluator may be supplied instead;
    homogeneity is then the caller's responsibility.
    """

    def __init__(self, matrix, evaluator=None):
        self.matrix = matrix
        self._custom = evaluator
        if evaluator is None:
            vals, vecs = np.linalg.eig(matrix.E)
            if np.any(np.abs(vals.imag) > 1e-12) or np.any(np.abs(vecs.imag) > 1e-12):
                raise ValueError("built-in psi needs a real eigenbasis; supply an evaluator")
            vecs = vecs.real
            if abs(np.linalg.det(vecs)) < 1e-10:
                raise ValueError("built-in psi needs a diagonalizable matrix")
            self.eigenvalues = vals.real
            self.basis = vecs

    def __call__(self, xi):
        xi = np.asarray(xi, dtype=np.float64)
        if self._custom is not None:
            return np.asarray(self._custom(xi), dtype=np.float64)
        coords = np.abs(xi @ self.basis)
        return (coords ** (1.0 / self.eigenvalues)).sum(axis=-1)

    def log(self, xi):
        with np.errstate(divide="ignore"):
            return np.log(self(xi))

    def to_dict(self):
        if self._custom is not None:
            return {"form": "custom"}
        return {"form": "eigen_sum"}
