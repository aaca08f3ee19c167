"""Poisson-arrival series ``S_N(x) = sum_{n<=N} W_n(x) g_n`` and their rests.

One :class:`SeriesRealization` freezes the arrival times ``T_n``, the marks
``xi_n`` and the multipliers ``g_n``; every evaluation point reads the same
draw. Weights ``W_n`` are produced by a :class:`WEvaluator`, canonically
``W_n(alpha, u) = T_n**(-1/alpha) V_n(alpha, u)``.
"""
from dataclasses import dataclass, field
import csv
import io
import math
import warnings

import numpy as np

from . import kernels
from .seeding import ARRIVALS, MULTIPLIERS, SPECTRAL, substream
from .subgaussian import SubGaussianSource, as_source, draw

DEFAULT_N_MAX = 100_000


def draw_arrivals(n, rng):
    """First ``n`` arrival times of a unit-rate Poisson process."""
    n = int(n)
    if n < 1:
        raise ValueError("need at least one arrival")
    gaps = rng.standard_exponential(n)
    # a zero gap would break strict monotonicity; it has probability ~2**-53 per draw
    while np.any(gaps <= 0):
        bad = gaps <= 0
        gaps[bad] = rng.standard_exponential(int(bad.sum()))
    return np.cumsum(gaps)


@dataclass(frozen=True, eq=False)
class SeriesRealization:
    """A frozen draw of ``(T_n, xi_n, g_n)`` for ``n <= n_max``."""

    T: np.ndarray
    xi: np.ndarray
    g: np.ndarray
    seed: int | None = None
    source: SubGaussianSource = field(default_factory=SubGaussianSource)

    def __post_init__(self):
        n = len(self.T)
        if len(self.xi) != n or len(self.g) != n:
            raise ValueError("T, xi and g must have the same length")
        if n and (self.T[0] <= 0 or np.any(np.diff(self.T) <= 0)):
            raise ValueError("arrival times must be positive and strictly increasing")
        for arr in (self.T, self.xi, self.g):
            arr.setflags(write=False)

    @property
    def n_max(self):
        return len(self.T)

    @classmethod
    def draw(cls, seed, n_max=DEFAULT_N_MAX, marks=None, source="complex_gaussian"):
        """Draw a realization from independent substreams of ``seed``.

        ``marks(n, rng)`` samples the i.i.d. marks ``xi_n`` (spectral points
        for LePage series); by default no marks are drawn.
        """
        source = as_source(source)
        T = draw_arrivals(n_max, substream(seed, ARRIVALS))
        if marks is None:
            xi = np.zeros((n_max, 0))
        else:
            xi = np.asarray(marks(n_max, substream(seed, SPECTRAL)), dtype=np.float64)
            if xi.ndim == 1:
                xi = xi[:, None]
        g = draw(source, n_max, substream(seed, MULTIPLIERS))
        real = cls(T, xi, g, seed, source)
        real.check_arrivals()
        return real

    def check_arrivals(self):
        """Soft law-of-large-numbers check on ``T_N / N``; warns on failure."""
        n = self.n_max
        dev = abs(self.T[-1] / n - 1.0)
        if dev > 5.0 / math.sqrt(n):
            warnings.warn(f"T_N/N deviates from 1 by {dev:.3g} (> 5/sqrt(N))", RuntimeWarning)
            return False
        return True

    def with_multipliers(self, g):
        return SeriesRealization(self.T, self.xi, np.asarray(g, dtype=np.complex128),
                                 self.seed, self.source)


class WEvaluator:
    """Deterministic weights ``W_n(x)`` of a realization.

    Subclasses implement :meth:`weights`, returning an array of shape
    ``(n_points, n_terms)`` for a batch of points. Evaluation is pure.
    """

    def weights(self, real, points, n_terms=None):
        raise NotImplementedError


class ShotNoiseW(WEvaluator):
    """``W_n(alpha) = T_n**(-1/alpha) X_n`` with scalar marks ``X_n = xi_n[:, 0]``.

    Points are stability indices alpha.
    """

    def weights(self, real, points, n_terms=None):
        n = real.n_max if n_terms is None else int(n_terms)
        alpha = np.asarray(points, dtype=np.float64).reshape(-1)
        logT = np.log(real.T[:n])
        return np.exp(-logT[None, :] / alpha[:, None]) * real.xi[:n, 0][None, :]


class FunctionW(WEvaluator):
    """Weights from a user function ``fn(real, points, n_terms) -> (P, n)``."""

    def __init__(self, fn):
        self.fn = fn

    def weights(self, real, points, n_terms=None):
        n = real.n_max if n_terms is None else int(n_terms)
        return np.atleast_2d(np.asarray(self.fn(real, points, n)))


class ZeroW(WEvaluator):
    def weights(self, real, points, n_terms=None):
        n = real.n_max if n_terms is None else int(n_terms)
        return np.zeros((1 if np.ndim(points) == 0 else len(points), n))


def partial_sums(real, W, x, checkpoints, threads=1, backend=None):
    """``S_N(x)`` for each checkpoint N, computed in one compensated pass.

    ``x`` is a batch of points (one per row, or a 1-D array of scalar points).
    Returns complex values of shape ``(n_points, n_checkpoints)``. ``S_0 = 0``.
    """
    ck = np.asarray(checkpoints, dtype=np.intp).ravel()
    if ck.size and ck.max() > real.n_max:
        raise ValueError(f"checkpoint {int(ck.max())} exceeds N_max = {real.n_max}")
    n = int(ck.max()) if ck.size else 0
    w = W.weights(real, x, n)
    return kernels.weighted_partial_sums(w, real.g[:n], ck, threads=threads, backend=backend)


@dataclass
class ConditionalParameter:
    """Truncated ``s(x, y)`` with a heuristic estimate of the neglected tail.

    ``tail_sq`` extrapolates ``sum_{n > N_max} |W_n(x) - W_n(y)|**2`` from a
    power law fitted to the last decade of terms (``inf`` when the fitted
    decay is too slow to sum); ``decay`` is the fitted exponent.
    """

    value: float
    tail_sq: float
    decay: float

    @property
    def extrapolated(self):
        return math.sqrt(self.value ** 2 + self.tail_sq)


def _increment_sq(real, W, x, y):
    pts = np.stack([np.atleast_1d(np.asarray(x, dtype=np.float64)),
                    np.atleast_1d(np.asarray(y, dtype=np.float64))])
    w = W.weights(real, pts)
    dw = w[0] - w[1]
    return (dw * np.conj(dw)).real


def conditional_parameter(real, W, x, y):
    """``s(x, y) = (sum_n |W_n(x) - W_n(y)|**2)**(1/2)`` up to ``N_max``."""
    c = _increment_sq(real, W, x, y)
    value = math.sqrt(math.fsum(c))
    n = len(c)
    lo = max(1, n // 10)
    tail_sq, decay = 0.0, float("nan")
    seg = c[lo:]
    if value > 0 and seg.size >= 20 and np.any(seg > 0):
        # bin the last decade geometrically and fit log(mean term) ~ log(n)
        edges = np.unique(np.geomspace(lo, n, 11).astype(int))
        mids, means = [], []
        for a, b in zip(edges[:-1], edges[1:]):
            m = c[a:b].mean()
            if b > a and m > 0:
                mids.append(math.sqrt(a * b))
                means.append(m)
        if len(mids) >= 3:
            slope, icpt = np.polyfit(np.log(mids), np.log(means), 1)
            decay = -float(slope)
            if decay > 1:
                tail_sq = float(math.exp(icpt) * n ** (1 - decay) / (decay - 1))
            else:
                tail_sq = float("inf")
    return ConditionalParameter(value, tail_sq, decay)


def rest_parameter(real, W, x, y, N):
    """``r_N(x, y) = (sum_{N < n <= N_max} |W_n(x) - W_n(y)|**2)**(1/2)``."""
    c = _increment_sq(real, W, x, y)
    return math.sqrt(math.fsum(c[int(N):]))


def admissible_pprime(b, p):
    """Open interval of admissible ``1/p'``: ``(0, 1/b - 1/min(2p, 2))``.

    Requires ``0 < b < min(2, 2p)``; raises ValueError naming the violated
    constraint otherwise.
    """
    b = float(b)
    p = float(p)
    if not p > 0:
        raise ValueError(f"moment order p must be positive, got {p}")
    cap = min(2.0, 2.0 * p)
    if not 0 < b < cap:
        raise ValueError(
            f"need 0 < b < min(2, 2p) = {cap:g} for the rate interval "
            f"1/p' in (0, 1/b - 1/min(2p, 2)); got b = {b:g}, p = {p:g}")
    return 0.0, 1.0 / b - 1.0 / cap


def check_pprime(pprime, b, p):
    lo, hi = admissible_pprime(b, p)
    inv = 1.0 / float(pprime)
    if not lo < inv < hi:
        raise ValueError(
            f"1/p' = {inv:.6g} lies outside the admissible interval "
            f"(0, 1/b - 1/min(2p, 2)) = (0, {hi:.6g}) for b = {b:g}, p = {p:g}")
    return inv


def geometric_checkpoints(k_min, k_max):
    return [2 ** k for k in range(int(k_min), int(k_max) + 1)]


@dataclass
class RateProfile:
    """Per-checkpoint ``sup_x |S_{N_ref}(x) - S_N(x)|`` and its scaled version."""

    N: np.ndarray
    sup_rest: np.ndarray
    scaled: np.ndarray
    pprime: float
    N_ref: int

    @property
    def running_max(self):
        return np.maximum.accumulate(self.scaled)

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["N", "sup_rest", "scaled_value"])
        for n, r, s in zip(self.N, self.sup_rest, self.scaled):
            wr.writerow([int(n), repr(float(r)), repr(float(s))])
        return buf.getvalue()


def rate_profile(real, W, x_grid, checkpoints, N_ref, pprime, b=None, p=None,
                 threads=1, backend=None):
    """Truncation-rate diagnostic against a reference partial sum.

    Rests are approximated by ``S_{N_ref} - S_N``; the part beyond ``N_ref``
    is unobservable. When ``b`` (largest alpha) and ``p`` (moment order) are
    given, ``1/p'`` is checked against the admissible interval.
    """
    ck = np.asarray(sorted(int(c) for c in checkpoints), dtype=np.intp)
    N_ref = int(N_ref)
    if ck.size == 0:
        raise ValueError("at least one checkpoint is required")
    # a checkpoint at N_ref itself is a self-difference and always allowed
    inner = ck[ck < N_ref]
    if inner.size and N_ref < 10 * inner.max():
        raise ValueError(f"N_ref = {N_ref} must be at least 10 x the largest checkpoint {int(inner.max())}")
    if N_ref > real.n_max:
        raise ValueError(f"N_ref = {N_ref} exceeds N_max = {real.n_max}")
    if b is not None and p is not None:
        inv = check_pprime(pprime, b, p)
    else:
        inv = 1.0 / float(pprime)
    S = partial_sums(real, W, x_grid, np.append(ck, N_ref), threads=threads, backend=backend)
    rest = np.abs(S[:, -1:] - S[:, :-1])
    sup = rest.max(axis=0)
    scaled = ck.astype(float) ** inv * sup
    return RateProfile(ck, sup, scaled, float(pprime), N_ref)


def normal_marks(n, rng):
    """Standard normal marks ``X_n`` for the plain shot-noise series."""
    return rng.standard_normal(n)


@dataclass
class RateStudy:
    """Replicated rate profiles for the shot-noise series with normal marks.

    ``quantile_curve`` is the chosen quantile (across replications) of the
    running max of ``N**(1/p') sup_alpha |S_{N_ref} - S_N|`` at each
    checkpoint; ``change`` is its relative growth from the end of the first
    checkpoint decade to the last checkpoint.
    """

    checkpoints: np.ndarray
    quantile_curve: np.ndarray
    first_decade_index: int
    change: float
    quantile: float
    replications: int

    def to_dict(self):
        return {"checkpoints": self.checkpoints.tolist(),
                "quantile_curve": self.quantile_curve.tolist(),
                "first_decade_checkpoint": int(self.checkpoints[self.first_decade_index]),
                "change": self.change, "quantile": self.quantile,
                "replications": self.replications}


def rate_study(seed, replications, alpha_grid, checkpoints, N_ref, pprime, p=1.0,
               quantile=0.95, threads=1, backend=None):
    """Run :func:`rate_profile` over independent replications and summarise."""
    from .seeding import replication_seeds

    alpha_grid = np.asarray(alpha_grid, dtype=np.float64)
    ck = np.asarray(sorted(int(c) for c in checkpoints))
    check_pprime(pprime, float(alpha_grid.max()), p)
    runs = []
    for s in replication_seeds(seed, replications):
        real = SeriesRealization.draw(s, N_ref, marks=normal_marks)
        prof = rate_profile(real, ShotNoiseW(), alpha_grid, ck, N_ref, pprime,
                            threads=threads, backend=backend)
        runs.append(prof.running_max)
    curve = np.quantile(np.array(runs), quantile, axis=0)
    first = int(np.searchsorted(ck, 10 * ck[0], side="right") - 1)
    change = float(abs(curve[-1] - curve[first]) / curve[first])
    return RateStudy(ck, curve, first, change, float(quantile), int(replications))
