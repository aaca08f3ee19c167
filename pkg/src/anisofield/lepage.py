"""LePage series fields.

For a stability index alpha and a point u,

    S_m(alpha, u) = sum_n T_n**(-1/alpha) f_alpha(u, xi_n) m(xi_n)**(-1/alpha) g_n

where ``xi_n`` are i.i.d. with Lebesgue density ``m``. Both built-in kernels
have the form ``f_alpha(u, xi) = (exp(i<u, xi>) - 1) psi_alpha(xi)`` with
``log psi_alpha = A(xi) + B(xi)/alpha``, so each term's coefficient is
``exp(a_n + b_n/alpha)`` with ``a_n = A(xi_n)`` and
``b_n = B(xi_n) - log T_n - log m(xi_n)``. Those two arrays are computed once
per realization and shared by every point, which is what lets a spatially
varying alpha(u) (multistable fields) reuse the same summation kernel.
"""
from dataclasses import dataclass, field
import math
import warnings

import numpy as np
from scipy import integrate, special, stats

from . import kernels
from .quasi_metric import HomogeneousPsi, NumericError, ScalingMatrix, e_norm, tau
from .seeding import derived_seed
from .shot_noise import SeriesRealization
from .subgaussian import COMPLEX_GAUSSIAN, as_source

E_CONST = math.e


def _log_norm(x):
    """log of the Euclidean norm of each row, safe for huge entries."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        big = np.max(np.abs(x), axis=-1)
        scaled = x / np.where(big > 0, big, 1.0)[..., None]
        out = np.log(big) + 0.5 * np.log((scaled * scaled).sum(axis=-1))
    return np.where(big > 0, out, -np.inf)


def _unit_sphere_area(d):
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def _uniform_directions(u, d):
    """Directions on the Euclidean sphere from uniforms of shape (n, d)."""
    if d == 1:
        return np.where(u[:, :1] < 0.5, -1.0, 1.0)
    z = special.ndtri(np.clip(u, 1e-300, 1 - 1e-16))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# spectral densities


class SpectralDensity:
    """Lebesgue density ``m`` of the spectral points with a matching sampler."""

    d = 1

    def log_pdf(self, xi):
        raise NotImplementedError

    def sample(self, n, rng):
        raise NotImplementedError

    def pdf(self, xi):
        return np.exp(self.log_pdf(xi))

    def describe(self):
        raise NotImplementedError


class IsotropicMixture(SpectralDensity):
    """``||xi||**alpha0`` inside the ball of radius ``r0`` and
    ``||xi||**(-d) (log ||xi||)**(-1-zeta)`` outside, normalised.

    Radii are sampled by inverse CDF: ``r0 U**(1/(alpha0+d))`` inside and
    ``exp(log(r0) U**(-1/zeta))`` in the tail. Tail radii beyond the double
    range come out as ``inf`` and are dropped by the field simulator.
    """

    def __init__(self, alpha0=1.5, r0=E_CONST, zeta=0.1, d=1):
        if not alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        if not r0 >= E_CONST * (1 - 1e-15):
            raise ValueError("cutoff r0 must be at least e")
        if not zeta > 0:
            raise ValueError("zeta must be positive")
        self.alpha0 = float(alpha0)
        self.r0 = float(r0)
        self.zeta = float(zeta)
        self.d = int(d)
        area = _unit_sphere_area(self.d)
        self.c_inside = area * self.r0 ** (self.alpha0 + self.d) / (self.alpha0 + self.d)
        self.c_tail = area * math.log(self.r0) ** (-self.zeta) / self.zeta
        self.norm_const = self.c_inside + self.c_tail
        self.w_inside = self.c_inside / self.norm_const

    def log_pdf_radius(self, logr):
        logr = np.asarray(logr, dtype=np.float64)
        inside = logr <= math.log(self.r0)
        with np.errstate(divide="ignore", invalid="ignore"):
            a = self.alpha0 * logr
            b = -self.d * logr - (1 + self.zeta) * np.log(np.maximum(logr, 1e-300))
        return np.where(inside, a, b) - math.log(self.norm_const)

    def log_pdf(self, xi):
        xi = np.asarray(xi, dtype=np.float64).reshape(-1, self.d)
        return self.log_pdf_radius(_log_norm(xi))

    def sample_log_radius(self, u_pick, u_rad):
        inside = u_pick < self.w_inside
        with np.errstate(divide="ignore"):
            lin = math.log(self.r0) + np.log(u_rad) / (self.alpha0 + self.d)
            ltail = math.log(self.r0) * (1.0 - u_rad) ** (-1.0 / self.zeta)
        return np.where(inside, lin, ltail)

    def sample(self, n, rng):
        u = rng.random((int(n), 2 + self.d))
        logr = self.sample_log_radius(u[:, 0], u[:, 1])
        with np.errstate(over="ignore", invalid="ignore"):
            xi = np.exp(logr)[:, None] * _uniform_directions(u[:, 2:], self.d)
        xi[~np.all(np.isfinite(xi), axis=1)] = np.inf
        return xi

    def radial_cdf(self, r):
        r = np.asarray(r, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            inner = self.w_inside * (r / self.r0) ** (self.alpha0 + self.d)
            outer = self.w_inside + (1 - self.w_inside) * (
                1 - (np.log(r) / math.log(self.r0)) ** (-self.zeta))
        return np.where(r <= self.r0, inner, np.where(np.isinf(r), 1.0, outer))

    def describe(self):
        return {"kind": "isotropic_mixture", "alpha0": self.alpha0, "r0": self.r0,
                "zeta": self.zeta, "d": self.d}


class EigenProduct(SpectralDensity):
    """Product of one-dimensional mixtures in the eigen-coordinates of ``E``.

    With ``E w_i = a_i w_i`` and ``y_i = <xi, w_i>``,
    ``m(xi) = |det W| prod_i m_i(y_i)`` where ``m_i`` is the 1-D
    :class:`IsotropicMixture` with tail parameter ``zeta[i]``. Heavy tails per
    eigen-axis keep the series weights bounded for strongly anisotropic ``E``.
    """

    def __init__(self, matrix, zeta=0.1, alpha0=1.0, r0=E_CONST):
        if not isinstance(matrix, ScalingMatrix):
            matrix = ScalingMatrix(matrix)
        self.matrix = matrix
        self.d = matrix.d
        psi = HomogeneousPsi(matrix)
        self.basis = psi.basis
        self.eigenvalues = psi.eigenvalues
        zetas = np.broadcast_to(np.asarray(zeta, dtype=np.float64), (self.d,))
        self.axes = [IsotropicMixture(alpha0, r0, float(z), 1) for z in zetas]
        self.log_det = math.log(abs(np.linalg.det(self.basis)))

    def log_pdf(self, xi):
        xi = np.asarray(xi, dtype=np.float64).reshape(-1, self.d)
        y = xi @ self.basis
        out = np.full(len(xi), self.log_det)
        for i, m in enumerate(self.axes):
            out = out + m.log_pdf(y[:, i:i + 1])
        return out

    def sample_coordinates(self, n, rng):
        """Eigen-coordinates ``y`` of ``n`` samples; overflowed entries are inf."""
        u = rng.random((int(n), 3 * self.d))
        y = np.empty((int(n), self.d))
        with np.errstate(over="ignore"):
            for i, m in enumerate(self.axes):
                logr = m.sample_log_radius(u[:, 3 * i], u[:, 3 * i + 1])
                y[:, i] = np.where(u[:, 3 * i + 2] < 0.5, -1.0, 1.0) * np.exp(logr)
        return y

    def sample(self, n, rng):
        y = self.sample_coordinates(n, rng)
        bad = ~np.all(np.isfinite(y), axis=1)
        y[bad] = 0.0
        xi = np.linalg.solve(self.basis.T, y.T).T
        xi[bad] = np.inf
        return xi

    def describe(self):
        return {"kind": "eigen_product", "matrix": self.matrix.to_dict(),
                "zeta": [m.zeta for m in self.axes], "alpha0": self.axes[0].alpha0,
                "r0": self.axes[0].r0}


class UserPlugin(SpectralDensity):
    """A density given by ``log_pdf(xi)`` and ``sampler(n, rng)``."""

    def __init__(self, d, log_pdf, sampler, name="user"):
        self.d = int(d)
        self._log_pdf = log_pdf
        self._sampler = sampler
        self.name = name

    def log_pdf(self, xi):
        return np.asarray(self._log_pdf(np.asarray(xi, dtype=np.float64).reshape(-1, self.d)))

    def sample(self, n, rng):
        return np.asarray(self._sampler(int(n), rng), dtype=np.float64).reshape(-1, self.d)

    def describe(self):
        return {"kind": "user", "name": self.name, "d": self.d}


def gaussian_density(d=1, scale=1.0):
    """Centred isotropic Gaussian density as a :class:`UserPlugin`."""

    def log_pdf(xi):
        return (-0.5 * (xi * xi).sum(axis=1) / scale ** 2
                - d * math.log(scale * math.sqrt(2 * math.pi)))

    def sampler(n, rng):
        return scale * rng.standard_normal((n, d))

    return UserPlugin(d, log_pdf, sampler, name=f"gaussian(scale={scale:g})")


def density_from_dict(data, matrix=None):
    data = dict(data)
    kind = data.pop("kind")
    if kind == "isotropic_mixture":
        return IsotropicMixture(**data)
    if kind == "eigen_product":
        mat = data.pop("matrix", None)
        m = ScalingMatrix.from_dict(mat) if mat is not None else matrix
        if m is None:
            raise ValueError("eigen_product density needs a scaling matrix")
        return EigenProduct(m, **data)
    if kind == "gaussian":
        return gaussian_density(**data)
    raise ValueError(f"unknown density kind {kind!r}")


def radial_gof(density, n, seed, bins=50):
    """Chi-square test of sampled radii against the analytic radial law.

    For :class:`EigenProduct` the first eigen-coordinate is tested against its
    one-dimensional mixture. Radii beyond the double range form one extra
    censored cell. Returns the p-value.
    """
    rng = np.random.default_rng(seed)
    if isinstance(density, IsotropicMixture):
        xi = density.sample(n, rng)
        fin = np.all(np.isfinite(xi), axis=1)
        radial = density
        r = np.full(len(xi), np.inf)
        r[fin] = np.exp(_log_norm(xi[fin]))
    elif isinstance(density, EigenProduct):
        radial = density.axes[0]
        r = np.abs(density.sample_coordinates(n, rng)[:, 0])
    else:
        raise TypeError("radial_gof supports the built-in densities only")
    u_max = float(radial.radial_cdf(np.finfo(float).max))
    u = radial.radial_cdf(r)
    edges = np.linspace(0.0, u_max, bins + 1)
    counts = np.histogram(u[np.isfinite(r)], bins=edges)[0]
    expected = np.full(bins, u_max / bins)
    if u_max < 1.0:
        counts = np.append(counts, np.count_nonzero(~np.isfinite(r)))
        expected = np.append(expected, 1.0 - u_max)
    return float(stats.chisquare(counts, expected * counts.sum()).pvalue)


# ---------------------------------------------------------------------------
# kernels


class Kernel:
    """``f_alpha(u, xi) = (exp(i<u, xi>) - 1) psi_alpha(xi)`` with
    ``log psi_alpha = A + B/alpha``."""

    d = 1

    def log_psi_parts(self, xi):
        raise NotImplementedError

    def check_alpha(self, alpha):
        a = np.asarray(alpha, dtype=np.float64)
        if np.any((a <= 0) | (a >= 2)):
            raise ValueError("stability index must lie in (0, 2)")

    def psi_alpha(self, xi, alpha):
        A, B = self.log_psi_parts(np.asarray(xi, dtype=np.float64).reshape(-1, self.d))
        with np.errstate(invalid="ignore", over="ignore"):
            return np.exp(A + B / alpha)

    def f(self, u, xi, alpha):
        xi = np.asarray(xi, dtype=np.float64).reshape(-1, self.d)
        u = np.asarray(u, dtype=np.float64).reshape(-1, self.d)
        phase = u @ xi.T
        return (np.expm1(1j * phase)) * self.psi_alpha(xi, alpha)[None, :]

    def describe(self):
        raise NotImplementedError


class HarmonizableOS(Kernel):
    """Operator-scaling kernel ``psi_alpha = psi**(-H - q(E)/alpha)``.

    Well defined (stochastically continuous field) iff ``0 < H < a1``.
    """

    def __init__(self, psi, H):
        if not isinstance(psi, HomogeneousPsi):
            psi = HomogeneousPsi(psi if isinstance(psi, ScalingMatrix) else ScalingMatrix(psi))
        self.psi = psi
        self.matrix = psi.matrix
        self.d = self.matrix.d
        self.H = float(H)
        if not 0 < self.H < self.matrix.a1:
            raise ValueError(
                f"Hurst-type index must satisfy H in (0, a1) = (0, {self.matrix.a1:g}); got H = {self.H:g}")

    def log_psi_parts(self, xi):
        lp = self.psi.log(xi)
        return -self.H * lp, -self.matrix.q * lp

    def cond_hs_constant(self, alpha, n_probes=2000, seed=0):
        """Largest ``psi_alpha(xi) / tau_{E^t}(xi)**(-H - q/alpha)`` over probes ``||xi|| > 1``."""
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(n_probes, self.d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        xi = v * np.exp(rng.uniform(0, 5, size=(n_probes, 1)))
        t = tau(self.matrix.T, xi)
        ratio = self.psi_alpha(xi, alpha) / t ** (-self.H - self.matrix.q / alpha)
        return float(ratio.max())

    def describe(self):
        return {"kind": "harmonizable_os", "H": self.H, "matrix": self.matrix.to_dict(),
                "psi": self.psi.to_dict()}


class RieszBessel(Kernel):
    """Anisotropic Riesz-Bessel kernel
    ``psi_alpha = tau_{E^t}**(-2 beta1/alpha) (1 + tau_{E^t}**2)**(-beta2/alpha)``.

    Requires ``q(E)/2 < beta1 + beta2`` and, for each alpha used,
    ``beta1 < q(E)/2 + alpha a1/2`` (checked at construction when ``alpha``
    is given, otherwise at simulation time). Spectral points with norm above
    ``TAU_LIMIT`` are treated as negligible (the radial part is not resolved
    there).
    """

    TAU_LIMIT = 1e25

    def __init__(self, matrix, beta1, beta2, alpha=None):
        if not isinstance(matrix, ScalingMatrix):
            matrix = ScalingMatrix(matrix)
        self.matrix = matrix
        self.d = matrix.d
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        if not matrix.q / 2 < self.beta1 + self.beta2:
            raise ValueError(
                f"Riesz-Bessel kernel needs q(E)/2 < beta1 + beta2; got q(E)/2 = {matrix.q / 2:g}, "
                f"beta1 + beta2 = {self.beta1 + self.beta2:g}")
        if alpha is not None:
            self.check_alpha(alpha)

    def check_alpha(self, alpha):
        super().check_alpha(alpha)
        a = float(np.min(alpha))
        bound = self.matrix.q / 2 + a * self.matrix.a1 / 2
        if not self.beta1 < bound:
            raise ValueError(
                f"Riesz-Bessel kernel needs beta1 < q(E)/2 + alpha a1/2 = {bound:g}; got beta1 = {self.beta1:g}")

    def log_psi_parts(self, xi):
        xi = np.asarray(xi, dtype=np.float64).reshape(-1, self.d)
        ok = np.all(np.isfinite(xi), axis=1) & (_log_norm(xi) < math.log(self.TAU_LIMIT))
        logt = np.full(len(xi), np.inf)
        if np.any(ok):
            with np.errstate(divide="ignore"):
                logt[ok] = np.log(tau(self.matrix.T, xi[ok]))
        B = -2 * self.beta1 * logt - self.beta2 * np.logaddexp(0.0, 2 * logt)
        A = np.where(ok, 0.0, -np.inf)
        return A, np.where(ok, B, 0.0)

    def describe(self):
        return {"kind": "riesz_bessel", "beta1": self.beta1, "beta2": self.beta2,
                "matrix": self.matrix.to_dict()}


class ZeroKernel(Kernel):
    """The kernel identically equal to zero."""

    def __init__(self, d=1):
        self.d = int(d)

    def log_psi_parts(self, xi):
        n = len(np.asarray(xi).reshape(-1, self.d))
        return np.full(n, -np.inf), np.zeros(n)

    def describe(self):
        return {"kind": "zero", "d": self.d}


def kernel_from_dict(data, matrix):
    data = dict(data)
    kind = data.pop("kind")
    data.pop("matrix", None)
    if kind == "harmonizable_os":
        form = data.pop("psi", "eigen_sum")
        if isinstance(form, dict):
            form = form.get("form")
        if form != "eigen_sum":
            raise ValueError("only the eigen_sum psi form is configurable")
        return HarmonizableOS(HomogeneousPsi(matrix), data.pop("H"))
    if kind == "riesz_bessel":
        return RieszBessel(matrix, data.pop("beta1"), data.pop("beta2"))
    if kind == "zero":
        return ZeroKernel(matrix.d)
    raise ValueError(f"unknown kernel kind {kind!r}")


# ---------------------------------------------------------------------------
# stability index fields


@dataclass(frozen=True)
class AlphaField:
    """Constant ``alpha0`` or ``clamp(c0 + <c, u>, lo, hi)`` with ``[lo, hi]`` in (0, 2)."""

    c0: float
    c: tuple = ()
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        lo = self.c0 if self.lo is None else self.lo
        hi = self.c0 if self.hi is None else self.hi
        if not (0 < lo <= hi < 2):
            raise ValueError(f"alpha range [{lo:g}, {hi:g}] must lie inside (0, 2)")
        if self.is_constant and not 0 < self.c0 < 2:
            raise ValueError(f"alpha must lie in (0, 2); got {self.c0:g}")

    @classmethod
    def constant(cls, alpha0):
        return cls(float(alpha0))

    @classmethod
    def affine(cls, c0, c, lo, hi):
        return cls(float(c0), tuple(float(v) for v in np.atleast_1d(c)), float(lo), float(hi))

    @property
    def is_constant(self):
        return len(self.c) == 0 or not any(self.c)

    def __call__(self, u):
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        if self.is_constant:
            return np.full(len(u), self.c0 if self.lo is None else
                           min(max(self.c0, self.lo), self.hi))
        return np.clip(self.c0 + u @ np.asarray(self.c), self.lo, self.hi)

    def range_on(self, box):
        """``(min alpha, max alpha)`` over a box."""
        box = np.asarray(box, dtype=np.float64)
        if self.is_constant:
            v = float(self(np.zeros((1, len(box))))[0])
            return v, v
        corners = np.array(np.meshgrid(*box, indexing="ij")).reshape(len(box), -1).T
        vals = self(corners)
        return float(vals.min()), float(vals.max())

    def lipschitz(self, spec, box, n_probes=2000, seed=0):
        """Empirical ``max |alpha(u) - alpha(v)| / rho(u, v)`` over random pairs."""
        from .quasi_metric import rho

        box = np.asarray(box, dtype=np.float64)
        rng = np.random.default_rng(seed)
        u = rng.uniform(box[:, 0], box[:, 1], size=(n_probes, len(box)))
        v = rng.uniform(box[:, 0], box[:, 1], size=(n_probes, len(box)))
        r = rho(spec, u, v)
        ok = r > 0
        return float(np.max(np.abs(self(u) - self(v))[ok] / r[ok])) if np.any(ok) else 0.0

    def to_dict(self):
        if self.is_constant:
            return {"kind": "constant", "value": self.c0}
        return {"kind": "affine", "c0": self.c0, "c": list(self.c), "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        kind = data.pop("kind")
        if kind == "constant":
            return cls.constant(data.pop("value"))
        if kind == "affine":
            return cls.affine(data.pop("c0"), data.pop("c"), data.pop("lo"), data.pop("hi"))
        raise ValueError(f"unknown alpha field kind {kind!r}")


# ---------------------------------------------------------------------------
# grids and simulation


@dataclass
class FieldGrid:
    """Complex field values on a box grid, row-major (last axis fastest)."""

    box: np.ndarray
    resolution: tuple
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(-1, 2)
        self.resolution = tuple(int(r) for r in self.resolution)
        self.values = np.asarray(self.values, dtype=np.complex128).ravel()
        if len(self.resolution) != len(self.box):
            raise ValueError("resolution and box dimensions differ")
        if self.values.size != int(np.prod(self.resolution)):
            raise ValueError("value count does not match the grid resolution")

    @property
    def d(self):
        return len(self.resolution)

    def coords(self, axis):
        return grid_axis(self.box[axis], self.resolution[axis])

    def spacing(self, axis):
        c = self.coords(axis)
        return float(c[1] - c[0]) if len(c) > 1 else 0.0

    @property
    def points(self):
        return grid_points(self.box, self.resolution)

    def array(self):
        return self.values.reshape(self.resolution)


def grid_axis(interval, n):
    a, b = float(interval[0]), float(interval[1])
    if n < 1:
        raise ValueError("grid resolution must be positive")
    if n == 1:
        return np.array([a])
    return a + (b - a) * np.arange(n) / (n - 1)


def grid_points(box, resolution):
    axes = [grid_axis(iv, n) for iv, n in zip(np.asarray(box).reshape(-1, 2), resolution)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class SeriesTerms:
    """Per-realization coefficient arrays for the summation kernel."""

    xi: np.ndarray
    coef_a: np.ndarray
    coef_b: np.ndarray
    g: np.ndarray
    n_dropped: int


def series_terms(kernel, density, real, N=None):
    """Coefficients ``a_n, b_n`` such that term n has weight ``exp(a_n + b_n/alpha)``.

    Spectral points that are not finite (tail radii past the double range) or
    where ``psi`` vanishes get weight zero and are counted in ``n_dropped``.
    """
    if kernel.d != density.d:
        raise ValueError(f"kernel dimension {kernel.d} differs from density dimension {density.d}")
    N = real.n_max if N is None else int(N)
    if N > real.n_max:
        raise ValueError(f"N = {N} exceeds the realization's N_max = {real.n_max}")
    xi = np.array(real.xi[:N], dtype=np.float64)
    if xi.shape[1] != kernel.d:
        raise ValueError("realization marks do not match the kernel dimension")
    ok = np.all(np.isfinite(xi), axis=1)
    A = np.full(N, -np.inf)
    B = np.zeros(N)
    if np.any(ok):
        a_ok, b_ok = kernel.log_psi_parts(xi[ok])
        logm = density.log_pdf(xi[ok])
        A[ok] = a_ok
        B[ok] = b_ok - np.log(real.T[:N][ok]) - logm
    good = np.isfinite(A) & np.isfinite(B) & (A < np.inf)
    # kernel identically zero keeps A = -inf with finite B: a legitimate zero weight
    zero_kernel = ok & (A == -np.inf) & np.isfinite(B)
    drop = ~(good | zero_kernel)
    A[drop] = -np.inf
    B[drop | ~np.isfinite(B)] = 0.0
    xi[~ok | drop] = 0.0
    return SeriesTerms(xi, A, B, np.asarray(real.g[:N]), int(np.count_nonzero(~ok | (drop & ok))))


def draw_realization(density, N, seed, source=COMPLEX_GAUSSIAN):
    return SeriesRealization.draw(seed, N, marks=density.sample, source=source)


def evaluate_points(terms, points, alpha_values, checkpoints=None, threads=1, backend=None):
    """Partial sums of the series at arbitrary points for given alpha(u) values."""
    n = len(terms.coef_a)
    ck = [n] if checkpoints is None else list(checkpoints)
    inv_alpha = 1.0 / np.asarray(alpha_values, dtype=np.float64)
    vals = kernels.lepage_sum(points, inv_alpha, terms.xi, terms.coef_a, terms.coef_b,
                              terms.g, ck, threads=threads, backend=backend)
    return vals[:, 0] if checkpoints is None else vals


def _prepare(kernel, density, alpha, box, N, seed, source, apply_d_alpha, realization):
    source = as_source(source)
    if not isinstance(alpha, AlphaField):
        alpha = AlphaField.constant(alpha)
    a, b = alpha.range_on(box)
    kernel.check_alpha(np.array([a, b]))
    if apply_d_alpha and source.kind != COMPLEX_GAUSSIAN:
        raise ValueError("the stable constant d_alpha presumes complex Gaussian multipliers")
    if realization is None:
        realization = draw_realization(density, N, seed, source)
    terms = series_terms(kernel, density, realization, N)
    return alpha, terms


def _metadata(kernel, density, alpha, N, seed, source, apply_d_alpha, terms, backend):
    return {
        "kernel": kernel.describe(),
        "density": density.describe(),
        "alpha": alpha.to_dict(),
        "N": int(N),
        "seed": None if seed is None else int(seed),
        "source": as_source(source).kind,
        "d_alpha_applied": bool(apply_d_alpha),
        "n_dropped_terms": int(terms.n_dropped),
        "backend": kernels.BACKEND if backend is None else backend,
    }


def _scale(values, alpha_values, apply_d_alpha):
    if not apply_d_alpha:
        return values
    uniq, inv = np.unique(alpha_values, return_inverse=True)
    d = np.array([stable_constant(a) for a in uniq])[inv]
    return values / (d if values.ndim == 1 else d[:, None])


def simulate_field(kernel, density, alpha, box, resolution, N, seed,
                   source=COMPLEX_GAUSSIAN, apply_d_alpha=False, threads=1,
                   realization=None, backend=None):
    """Simulate ``S_{m,N}(alpha(u), u)`` on a grid from one realization.

    With ``apply_d_alpha`` the series is divided by ``d_alpha(u)`` so that it
    matches the stochastic-integral field in law.
    """
    box = np.asarray(box, dtype=np.float64).reshape(-1, 2)
    if len(box) != kernel.d:
        raise ValueError("box dimension differs from the kernel dimension")
    alpha, terms = _prepare(kernel, density, alpha, box, N, seed, source,
                            apply_d_alpha, realization)
    pts = grid_points(box, resolution)
    al = alpha(pts)
    vals = evaluate_points(terms, pts, al, threads=threads, backend=backend)
    vals = _scale(vals, al, apply_d_alpha)
    meta = _metadata(kernel, density, alpha, N, seed, source, apply_d_alpha, terms, backend)
    return FieldGrid(box, tuple(resolution), vals, meta)


def simulate_lines(kernel, density, alpha, box, resolution, lines, N, seed,
                   source=COMPLEX_GAUSSIAN, apply_d_alpha=False, threads=1,
                   realization=None, backend=None):
    """Field values along selected grid lines of a box grid, one realization.

    ``lines`` maps an axis to a list of index tuples for the remaining axes;
    the result maps each axis to an array of shape (n_lines, resolution[axis]).
    Used when the full grid is too large to evaluate but only axis-parallel
    increments are needed.
    """
    box = np.asarray(box, dtype=np.float64).reshape(-1, 2)
    alpha, terms = _prepare(kernel, density, alpha, box, N, seed, source,
                            apply_d_alpha, realization)
    axes = [grid_axis(iv, n) for iv, n in zip(box, resolution)]
    chunks, layout = [], []
    for axis, fixed in lines.items():
        for idx in fixed:
            idx = list(idx)
            pts = np.empty((resolution[axis], len(box)))
            other = [j for j in range(len(box)) if j != axis]
            for j, i in zip(other, idx):
                pts[:, j] = axes[j][i]
            pts[:, axis] = axes[axis]
            chunks.append(pts)
            layout.append(axis)
    pts = np.vstack(chunks)
    al = alpha(pts)
    vals = _scale(evaluate_points(terms, pts, al, threads=threads, backend=backend),
                  al, apply_d_alpha)
    out = {axis: [] for axis in lines}
    pos = 0
    for axis in layout:
        n = resolution[axis]
        out[axis].append(vals[pos:pos + n])
        pos += n
    meta = _metadata(kernel, density, alpha, N, seed, source, apply_d_alpha, terms, backend)
    return {axis: np.array(v) for axis, v in out.items()}, meta


# ---------------------------------------------------------------------------
# stable constant


def _wynn_epsilon(partial):
    """Wynn's epsilon acceleration of a sequence of partial sums."""
    s = np.asarray(partial, dtype=np.float64)
    n = len(s)
    e_prev = np.zeros(n + 1)
    e_cur = s.copy()
    best = s[-1]
    table_prev, table = e_prev[:n], e_cur
    for k in range(1, n):
        diff = table[1:] - table[:-1]
        with np.errstate(divide="ignore", invalid="ignore"):
            nxt = table_prev[1:len(table)] + 1.0 / diff
        if not np.all(np.isfinite(nxt)):
            break
        table_prev, table = table, nxt
        if k % 2 == 0 and len(table):
            best = table[-1]
    return float(best)


def _sine_moment_quadrature(alpha):
    """``int_0^inf sin(t) t**(-alpha) dt`` by half-period summation."""
    head, _ = integrate.quad(lambda t: np.sinc(t / np.pi), 0.0, np.pi,
                             weight="alg", wvar=(1.0 - alpha, 0.0), epsabs=0, epsrel=1e-13)
    x, w = np.polynomial.legendre.leggauss(40)
    k = np.arange(1, 81)[:, None]
    t = np.pi * (k + 0.5 + 0.5 * x[None, :])
    terms = (0.5 * np.pi * w[None, :] * np.sin(t) * t ** (-alpha)).sum(axis=1)
    partial = head + np.cumsum(terms)
    return _wynn_epsilon(partial)


def stable_constant_factors(alpha):
    """The three factors of ``d_alpha`` by quadrature and in closed form.

    Returns a dict with keys ``abs_moment`` (``E|N(0,1)|**alpha``),
    ``cos_moment`` (``(1/2pi) int |cos|**alpha``) and ``sine_integral``
    (``int_0^inf sin(t)/t**alpha dt``), each a ``(quadrature, closed_form)``
    pair.
    """
    a = float(alpha)
    if not 0 < a < 2:
        raise ValueError(f"alpha must lie in (0, 2); got {a}")
    abs_q, _ = integrate.quad(lambda x: 2 * x ** a * np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi),
                              0, np.inf, epsabs=0, epsrel=1e-13, limit=200)
    cos_q, _ = integrate.quad(lambda t: np.cos(t) ** a, 0, math.pi / 2, epsabs=0,
                              epsrel=1e-13, limit=200)
    cos_q *= 2 / math.pi
    sin_q = _sine_moment_quadrature(a)
    abs_c = 2 ** (a / 2) * math.gamma((a + 1) / 2) / math.sqrt(math.pi)
    cos_c = math.gamma((a + 1) / 2) / (math.sqrt(math.pi) * math.gamma(a / 2 + 1))
    sin_c = math.pi / 2 if a == 1 else math.gamma(1 - a) * math.cos(math.pi * a / 2)
    return {"abs_moment": (abs_q, abs_c), "cos_moment": (cos_q, cos_c),
            "sine_integral": (sin_q, sin_c)}


_D_ALPHA_TOL = 1e-6


def stable_constant(alpha, source=COMPLEX_GAUSSIAN):
    """``d_alpha`` linking the LePage series to the stable stochastic integral.

    ``d = E|Re g|**a**(1/a) * ((1/2pi) int|cos|**a)**(-1/a) * (int sin/t**a)**(1/a)``
    with every factor computed by quadrature and checked against its closed
    form (relative agreement 1e-6 or a NumericError).
    """
    if as_source(source).kind != COMPLEX_GAUSSIAN:
        raise ValueError("d_alpha is defined for complex Gaussian multipliers")
    a = float(alpha)
    fac = stable_constant_factors(a)
    for name, (q, c) in fac.items():
        if abs(q - c) > _D_ALPHA_TOL * abs(c):
            raise NumericError(f"{name} quadrature disagrees with its closed form", abs(q - c) / abs(c))
    (m1, _), (m2, _), (m3, _) = fac["abs_moment"], fac["cos_moment"], fac["sine_integral"]
    return m1 ** (1 / a) * m2 ** (-1 / a) * m3 ** (1 / a)


def series_log_charfunc(z, kernel_alpha_integral, alpha):
    """Log characteristic function ``log E exp(i Re(conj(z) S))`` of the limit series.

    ``kernel_alpha_integral`` is ``int |f_alpha(u, xi)|**alpha dxi`` at the
    point of interest; the multipliers are complex Gaussian. Derived from the
    shot-noise representation, independent of the density.
    """
    fac = stable_constant_factors(alpha)
    return -(abs(z) ** alpha) * kernel_alpha_integral * fac["abs_moment"][1] * fac["sine_integral"][1]


def kernel_alpha_integral(kernel, u, alpha):
    """``int |f_alpha(u, xi)|**alpha dxi`` for one-dimensional kernels."""
    if kernel.d != 1:
        raise ValueError("kernel_alpha_integral is implemented for d = 1")
    u = float(np.ravel(u)[0])

    def integrand(x):
        return float(np.abs(kernel.f([[u]], [[x]], alpha)[0, 0]) ** alpha)

    pts = [abs(2 * math.pi / u) * k for k in (1, 2, 4)] if u else None
    total = 0.0
    for sgn in (-1.0, 1.0):
        v1, _ = integrate.quad(lambda x: integrand(sgn * x), 0, 1, limit=200)
        v2, _ = integrate.quad(lambda x: integrand(sgn * x), 1, 50, limit=400, points=pts)
        v3, _ = integrate.quad(lambda x: integrand(sgn * x), 50, np.inf, limit=400)
        total += v1 + v2 + v3
    return total


# ---------------------------------------------------------------------------
# moment check


@dataclass
class MomentReport:
    estimate: float
    se: float
    batch_means: np.ndarray
    tail_index: float
    unstable: bool

    @property
    def heavy_tailed(self):
        """Tail index below 2: finite mean but the se is unreliable."""
        return self.tail_index < 2

    def to_dict(self):
        return {"estimate": self.estimate, "se": self.se,
                "batch_means": [float(b) for b in self.batch_means],
                "tail_index": self.tail_index, "unstable": bool(self.unstable),
                "heavy_tailed": bool(self.heavy_tailed)}


def _hill(x, k):
    x = np.sort(x[x > 0])[::-1]
    if len(x) <= k or k < 2:
        return float("inf")
    logs = np.log(x[:k + 1])
    h = float(np.mean(logs[:k] - logs[k]))
    return float("inf") if h <= 0 else 1.0 / h


def moment_check(kernel, density, alpha, x0, p, M, seed=0, batches=20):
    """Monte-Carlo estimate of ``E|V_1(x0)|**(2p)`` with ``V_1 = f_alpha(x0, xi) m(xi)**(-1/alpha)``.

    The estimate is the mean of ``batches`` batch means; ``se`` comes from
    their dispersion. The run is flagged unstable when the Hill estimate of
    the sample tail index is at most 1 (infinite mean) or when the largest
    batch mean exceeds ten times the median batch mean.
    """
    M = int(M)
    if M < 10_000:
        raise ValueError("moment_check needs M >= 10**4")
    if not p > 0:
        raise ValueError("p must be positive")
    rng = np.random.default_rng(seed)
    xi = density.sample(M, rng)
    ok = np.all(np.isfinite(xi), axis=1)
    vals = np.zeros(M)
    if np.any(ok):
        A, B = kernel.log_psi_parts(xi[ok])
        logm = density.log_pdf(xi[ok])
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            logw = A + (B - logm) / alpha
            phase = xi[ok] @ np.atleast_1d(np.asarray(x0, dtype=np.float64))
            amp = np.abs(2 * np.sin(0.5 * phase))
            v = (amp * np.exp(logw)) ** (2 * p)
        vals[ok] = np.where(np.isfinite(v), v, np.where(amp > 0, np.inf, 0.0))
    means = vals.reshape(batches, -1).mean(axis=1) if M % batches == 0 else \
        np.array([c.mean() for c in np.array_split(vals, batches)])
    est = float(means.mean())
    se = float(means.std(ddof=1) / math.sqrt(batches))
    idx = _hill(vals, max(10, int(math.sqrt(M))))
    med = float(np.median(means))
    unstable = bool(idx <= 1.0 or (med > 0 and means.max() > 10 * med) or not np.isfinite(est))
    return MomentReport(est, se, means, idx, unstable)


def moment_integral(kernel, density, alpha, x0, p):
    """Deterministic ``int |f_alpha(x0, xi)|**(2p) m(xi)**(1 - 2p/alpha) dxi`` for d = 1."""
    if kernel.d != 1:
        raise ValueError("moment_integral is implemented for d = 1")
    u = float(np.ravel(x0)[0])

    def integrand(x):
        f = np.abs(kernel.f([[u]], [[x]], alpha)[0, 0])
        return float(f ** (2 * p) * math.exp((1 - 2 * p / alpha) * float(density.log_pdf([[x]])[0])))

    total = 0.0
    r0 = getattr(density, "r0", 1.0)
    for sgn in (-1.0, 1.0):
        for lo, hi in ((0, 1), (1, r0), (r0, 50), (50, np.inf)):
            if hi > lo:
                v, _ = integrate.quad(lambda x: integrand(sgn * x), lo, hi, limit=400)
                total += v
    return total


# ---------------------------------------------------------------------------
# envelope integral


@dataclass
class EnvelopeIntegral:
    h: np.ndarray
    values: np.ndarray
    slope: float
    predicted_slope: float
    log_exponent: float
    corrected_slope: float
    ratio_spread: float
    c_norm: float

    def to_dict(self):
        return {"h": self.h.tolist(), "I": self.values.tolist(), "slope": self.slope,
                "predicted_slope": self.predicted_slope, "log_exponent": self.log_exponent,
                "corrected_slope": self.corrected_slope, "ratio_spread": self.ratio_spread,
                "c_norm": self.c_norm}


def norm_constant(matrix, n_dir=720, seed=0):
    """Smallest ``c`` with ``|<u, xi>| <= c ||tau_E(u)**(E^t) xi||_{E^t}``.

    Equals ``sup |<theta, y>| / ||y||_{E^t}`` over ``||theta||_E = 1``; the
    supremum is taken over a direction grid (d <= 2) or random directions.
    """
    d = matrix.d
    if d == 1:
        # ||theta||_E = 1 means |theta| = e; ||y||_{E^t} = |y| / e
        return float(matrix.E[0, 0] ** 2)
    if d == 2:
        ang = np.linspace(0, np.pi, n_dir, endpoint=False)
        v = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        v = np.random.default_rng(seed).normal(size=(n_dir * 4, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    theta = v / e_norm(matrix, v)[:, None]
    y = v / e_norm(matrix.T, v)[:, None]
    return float(np.max(np.abs(theta @ y.T)))


def _g_squared_times_weight(kernel, density, alpha, h, xi, c_norm):
    """``g(h, xi)**2 m(xi)**(1 - 2/alpha)`` on a batch of spectral points."""
    E_t = kernel.matrix.T
    hx = np.einsum("ij,nj->ni", np.asarray(_mat_pow(E_t, h)), xi)
    scale = np.minimum(c_norm * e_norm(E_t, hx), 1.0)
    A, B = kernel.log_psi_parts(xi)
    logm = density.log_pdf(xi)
    with np.errstate(over="ignore", invalid="ignore"):
        return scale ** 2 * np.exp(2 * (A + B / alpha) + (1 - 2 / alpha) * logm)


def _mat_pow(M, r):
    from .quasi_metric import mat_power

    return mat_power(M, r)


def envelope_integral(kernel, density, alpha, h_grid, mc_samples=200_000, seed=0):
    """``I(h) = int g(h, xi)**2 m(xi)**(1 - 2/alpha) dxi`` on a grid of h.

    ``g(h, xi) = min(c ||h**(E^t) xi||_{E^t}, 1) |psi_alpha(xi)|`` with ``c``
    from :func:`norm_constant`. Deterministic quadrature for d <= 2, Monte
    Carlo with the density as proposal for d >= 3. Reports the log-log slope
    (prediction ``2H``) and the slope after removing the
    ``|log h|**(2(1+zeta)(1/alpha - 1/2))`` factor when ``zeta`` is known.
    """
    if not isinstance(kernel, HarmonizableOS):
        raise TypeError("envelope_integral applies to the operator-scaling kernel")
    h = np.asarray(h_grid, dtype=np.float64)
    if np.any((h <= 0) | (h > math.exp(-1) + 1e-15)):
        raise ValueError("h must lie in (0, 1/e]")
    c = norm_constant(kernel.matrix)
    d = kernel.d
    vals = np.empty(len(h))
    for i, hh in enumerate(h):
        if d == 1:
            vals[i] = _envelope_1d(kernel, density, alpha, hh, c)
        elif d == 2:
            vals[i] = _envelope_2d(kernel, density, alpha, hh, c)
        else:
            rng = np.random.default_rng(seed)
            xi = density.sample(mc_samples, rng)
            xi = xi[np.all(np.isfinite(xi), axis=1)]
            w = _g_squared_times_weight(kernel, density, alpha, hh, xi, c)
            vals[i] = float(np.mean(w * np.exp(-density.log_pdf(xi)))) * len(xi) / mc_samples
    if np.any(~np.isfinite(vals)) or np.any(vals <= 0):
        raise NumericError("envelope integral is not finite and positive", None)
    x = np.log(h)
    slope = float(np.polyfit(x, np.log(vals), 1)[0])
    zeta = getattr(density, "zeta", None)
    log_exp = 2 * (1 + zeta) * (1 / alpha - 0.5) if zeta is not None else 0.0
    corr = np.log(vals) - log_exp * np.log(np.abs(x))
    cslope = float(np.polyfit(x, corr, 1)[0])
    ratio = vals / (h ** (2 * kernel.H) * np.abs(x) ** log_exp)
    return EnvelopeIntegral(h, vals, slope, 2 * kernel.H, log_exp, cslope,
                            float(ratio.max() / ratio.min()), c)


def _envelope_1d(kernel, density, alpha, h, c):
    e = float(kernel.matrix.E[0, 0])
    # ||h**e xi||_E = h**e |xi| / e, saturating where c h**e |xi| / e = 1
    brk = e / (c * h ** e)

    def f(x):
        xi = np.array([[x]])
        return float(_g_squared_times_weight(kernel, density, alpha, h, xi, c)[0])

    total = 0.0
    r0 = getattr(density, "r0", 1.0)
    cuts = sorted({0.0, min(r0, brk), max(r0, brk), 1.0})
    for sgn in (-1.0, 1.0):
        edges = cuts + [np.inf]
        for lo, hi in zip(edges[:-1], edges[1:]):
            if hi > lo:
                v, _ = integrate.quad(lambda x: f(sgn * x), lo, hi, limit=500,
                                      epsabs=0, epsrel=1e-10)
                total += v
    return total


def _envelope_2d(kernel, density, alpha, h, c, n_angle=128):
    x, w = np.polynomial.legendre.leggauss(n_angle // 4)
    # four quadrants keep the |xi_i| kinks of psi on panel boundaries
    ang = np.concatenate([(q + 0.5 + 0.5 * x) * np.pi / 2 for q in range(4)])
    wts = np.concatenate([w * np.pi / 4] * 4)
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def radial(r):
        xi = r * dirs
        with np.errstate(all="ignore"):
            v = _g_squared_times_weight(kernel, density, alpha, h, xi, c) * r
        return np.where(np.isfinite(v), v, 0.0)

    total = 0.0
    r0 = getattr(density, "r0", 1.0)
    for lo, hi in ((0, 1), (1, r0), (r0, 1 / h), (1 / h, np.inf)):
        if hi > lo:
            v, _ = integrate.quad_vec(radial, lo, hi, epsabs=0, epsrel=1e-9, limit=400)
            total += float(np.dot(wts, v))
    return total


# ---------------------------------------------------------------------------
# density invariance


@dataclass
class InvarianceReport:
    points: np.ndarray
    char_args: np.ndarray
    phi_a: np.ndarray
    phi_b: np.ndarray
    se: np.ndarray
    cell_pass: np.ndarray
    min_pass_fraction: float

    @property
    def n_pass(self):
        return int(self.cell_pass.sum())

    @property
    def passed(self):
        return self.n_pass >= math.ceil(self.min_pass_fraction * self.cell_pass.size - 1e-9)

    def to_dict(self):
        return {"points": self.points.tolist(),
                "char_args": [[complex(z).real, complex(z).imag] for z in self.char_args],
                "phi_a": [[[v.real, v.imag] for v in row] for row in self.phi_a],
                "phi_b": [[[v.real, v.imag] for v in row] for row in self.phi_b],
                "se": self.se.tolist(), "cell_pass": self.cell_pass.tolist(),
                "n_pass": self.n_pass, "n_cells": int(self.cell_pass.size),
                "passed": bool(self.passed)}


def replicate_values(kernel, density, alpha, points, N, seeds, source=COMPLEX_GAUSSIAN,
                     threads=1, backend=None):
    """Series values at ``points`` for each seed; shape (len(seeds), n_points)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.empty((len(seeds), len(points)), dtype=np.complex128)
    al = np.full(len(points), float(alpha))
    for i, s in enumerate(seeds):
        terms = series_terms(kernel, density, draw_realization(density, N, s, source), N)
        out[i] = evaluate_points(terms, points, al, threads=threads, backend=backend)
    return out


def empirical_charfunc(samples, char_args):
    """``mean exp(i Re(conj(z) S))`` per point and argument, with standard errors."""
    s = np.asarray(samples)
    z = np.asarray(char_args, dtype=np.complex128)
    e = np.exp(1j * (np.conj(z)[None, None, :] * s[:, :, None]).real)
    phi = e.mean(axis=0)
    var = np.clip(1.0 - np.abs(phi) ** 2, 0.0, None)
    return phi, np.sqrt(var / s.shape[0])


def fdd_invariance_test(kernel, density_a, density_b, alpha, points, M, char_args, N,
                        seed=0, source=COMPLEX_GAUSSIAN, min_pass_fraction=14 / 15,
                        threads=1, backend=None):
    """Two-sample comparison of characteristic functions under two densities.

    Each cell (point, argument) passes when the empirical characteristic
    functions differ by at most three pooled standard errors.
    """
    M = int(M)
    if M < 1000:
        raise ValueError("fdd_invariance_test needs M >= 1000 replications")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    seeds_a = [derived_seed(seed, "fdd-a", i) for i in range(M)]
    seeds_b = [derived_seed(seed, "fdd-b", i) for i in range(M)]
    sa = replicate_values(kernel, density_a, alpha, pts, N, seeds_a, source, threads, backend)
    sb = replicate_values(kernel, density_b, alpha, pts, N, seeds_b, source, threads, backend)
    phi_a, se_a = empirical_charfunc(sa, char_args)
    phi_b, se_b = empirical_charfunc(sb, char_args)
    se = np.sqrt(se_a ** 2 + se_b ** 2)
    ok = np.abs(phi_a - phi_b) <= 3 * se
    # identical characteristic functions (e.g. both exactly 1) pass with zero se
    ok |= np.abs(phi_a - phi_b) == 0
    return InvarianceReport(pts, np.asarray(char_args, dtype=np.complex128), phi_a, phi_b,
                            se, ok, float(min_pass_fraction))
