"""Symmetric sub-Gaussian multipliers (parameter s = 1) and Monte-Carlo checks.

A complex variable Z is sub-Gaussian with parameter s when
``E exp(Re(conj(z) Z)) <= exp(s**2 |z|**2 / 2)`` for every complex z. The
checks here compare empirical frequencies and moment generating functions
against the resulting bounds; a violation means exceeding the bound by more
than three Monte-Carlo standard errors.
"""
from dataclasses import dataclass
import math

import numpy as np
from scipy import stats

from .seeding import substream

COMPLEX_GAUSSIAN = "complex_gaussian"
RADEMACHER_REAL = "rademacher_real"
RADEMACHER_COMPLEX = "rademacher_complex"
SOURCES = (COMPLEX_GAUSSIAN, RADEMACHER_REAL, RADEMACHER_COMPLEX)

SIGMA_SLACK = 3.0
_SHARD = 100_000


@dataclass(frozen=True)
class SubGaussianSource:
    """Law of the multipliers ``g_n``.

    ``complex_gaussian``: independent standard normal real and imaginary parts.
    ``rademacher_real``: +1 or -1 with probability 1/2.
    ``rademacher_complex``: a Rademacher sign times a uniform phase in
    {1, i, -1, -i} (an extension used to exercise complex symmetry).
    """

    kind: str = COMPLEX_GAUSSIAN

    def __post_init__(self):
        if self.kind not in SOURCES:
            raise ValueError(f"unknown sub-Gaussian source {self.kind!r}; expected one of {SOURCES}")

    @property
    def parameter(self):
        return 1.0


def as_source(source):
    return source if isinstance(source, SubGaussianSource) else SubGaussianSource(source)


def draw(source, n, rng):
    """``n`` i.i.d. complex draws from ``source`` using generator ``rng``."""
    source = as_source(source)
    n = int(n)
    if n < 0:
        raise ValueError("sample size must be non-negative")
    # one draw per call so that shorter draws are prefixes of longer ones
    if source.kind == COMPLEX_GAUSSIAN:
        return rng.standard_normal((n, 2)).view(np.complex128).ravel()
    k = rng.integers(0, 8, size=n)
    sign = 1.0 - 2.0 * (k & 1)
    if source.kind == RADEMACHER_REAL:
        return sign.astype(np.complex128)
    return sign * np.array([1, 1j, -1, -1j])[k >> 1]


def _shards(total):
    start = 0
    while start < total:
        stop = min(total, start + _SHARD)
        yield start, stop
        start = stop


def _samples(source, M, seed, label):
    """Draw M variates in fixed-size shards, each from its own substream."""
    out = np.empty(M, dtype=np.complex128)
    for i, (a, b) in enumerate(_shards(M)):
        out[a:b] = draw(source, b - a, substream(seed, label, i))
    return out


@dataclass
class CheckRow:
    """One line of a verifier report."""

    arg: object
    empirical: float
    bound: float
    se: float
    violated: bool
    arg_name: str = "t"

    def to_dict(self):
        arg = self.arg
        if isinstance(arg, complex):
            arg = [arg.real, arg.imag]
        return {self.arg_name: arg, "empirical": self.empirical, "bound": self.bound,
                "se": self.se, "violated": bool(self.violated)}


def _binomial_se(p, M):
    p = min(max(p, 0.0), 1.0)
    return math.sqrt(p * (1.0 - p) / M)


def tail_bound(t):
    """``4 exp(-t**2 / 8)``: the tail bound for parameter 1."""
    return 4.0 * math.exp(-t * t / 8.0)


def tail_check(source, t_grid, M, seed=0):
    """Compare ``P(|Z| > t)`` with ``4 exp(-t**2/8)`` for each t."""
    M = int(M)
    if M < 10_000:
        raise ValueError("tail_check needs M >= 10**4")
    z = np.abs(_samples(source, M, seed, "tail"))
    rows = []
    for t in np.atleast_1d(t_grid):
        t = float(t)
        if not t > 0:
            raise ValueError("tail levels must be positive")
        emp = float(np.count_nonzero(z > t)) / M
        bound = tail_bound(t)
        se = _binomial_se(bound, M)
        rows.append(CheckRow(t, emp, bound, se, emp > bound + SIGMA_SLACK * se))
    return rows


def mgf_rows(samples, z_grid):
    """MGF ratio rows ``mean(exp(Re(conj(z) Z))) / exp(|z|**2/2)`` for given samples."""
    samples = np.asarray(samples, dtype=np.complex128)
    M = samples.size
    rows = []
    for z in np.atleast_1d(z_grid):
        z = complex(z)
        if abs(z) > 3:
            raise ValueError("mgf_check is limited to |z| <= 3")
        scale = math.exp(abs(z) ** 2 / 2.0)
        vals = np.exp((np.conj(z) * samples).real)
        ratio = float(vals.mean()) / scale
        se = float(vals.std()) / math.sqrt(M) / scale
        rows.append(CheckRow(z, ratio, 1.0, se, ratio > 1.0 + SIGMA_SLACK * se, "z"))
    return rows


def mgf_check(source, z_grid, M, seed=0):
    """Empirical MGF over the sub-Gaussian envelope on a grid of complex z."""
    return mgf_rows(_samples(source, int(M), seed, "mgf"), z_grid)


def sup_partial_sum_tail(weights, source, t, M, N_max=None, seed=0):
    """``P(sup_N |sum_{n<=N} a_n g_n| > t ||a||)`` against ``8 exp(-t**2/8)``.

    The supremum runs over ``N <= N_max`` with exact tracking of every partial
    sum. Returns a single :class:`CheckRow`.
    """
    a = np.asarray(weights, dtype=np.float64).ravel()
    if N_max is not None:
        a = a[:int(N_max)]
    norm = float(np.sqrt(np.sum(a * a)))
    if not norm > 0:
        raise ValueError("weights must not be identically zero")
    t = float(t)
    if not t > 0:
        raise ValueError("t must be positive")
    M = int(M)
    level = t * norm
    hits = 0
    for i, (lo, hi) in enumerate(_shards(M)):
        rng = substream(seed, "supsum", i)
        g = draw(source, (hi - lo) * a.size, rng).reshape(hi - lo, a.size)
        partial = np.cumsum(g * a, axis=1)
        hits += int(np.count_nonzero(np.abs(partial).max(axis=1) > level))
    emp = hits / M
    bound = 8.0 * math.exp(-t * t / 8.0)
    se = _binomial_se(bound, M)
    return CheckRow(t, emp, bound, se, emp > bound + SIGMA_SLACK * se)


def series_mgf_check(weights, source, z_grid, M, seed=0):
    """MGF check of the truncated series ``sum a_n g_n`` with parameter ``||a||``.

    The sum is divided by ``||a||`` so the parameter-1 envelope applies.
    """
    a = np.asarray(weights, dtype=np.float64).ravel()
    norm = float(np.sqrt(np.sum(a * a)))
    if not norm > 0:
        raise ValueError("weights must not be identically zero")
    out = np.empty(int(M), dtype=np.complex128)
    for i, (lo, hi) in enumerate(_shards(int(M))):
        g = draw(source, (hi - lo) * a.size, substream(seed, "series-mgf", i))
        out[lo:hi] = (g.reshape(hi - lo, a.size) * a).sum(axis=1) / norm
    return mgf_rows(out, z_grid)


def symmetry_check(source, M, seed=0, level=0.01):
    """Two-sample KS comparison of Z against an independent copy of -Z.

    Returns the smaller of the real-part and imaginary-part p-values and
    whether it clears ``level``. Components that are identically zero are
    skipped.
    """
    x = _samples(source, int(M), seed, "sym-a")
    y = -_samples(source, int(M), seed, "sym-b")
    pvals = []
    for part in (np.real, np.imag):
        a, b = part(x), part(y)
        if np.all(a == 0) and np.all(b == 0):
            continue
        pvals.append(float(stats.ks_2samp(a, b).pvalue))
    p = min(pvals)
    return {"pvalue": p, "passed": p > level}
