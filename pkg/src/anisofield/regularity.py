"""Empirical regularity of sampled fields: nets, modulus profiles, exponents.

Everything here is pure analysis over immutable grids. Increments are taken
over lattice offsets: for a translation-invariant quasi-metric the distance of
a pair depends only on its offset, so the supremum of ``|S(x) - S(y)|`` at one
offset is exact over all of its translates.
"""
from dataclasses import dataclass, field
import csv
import io
import json
import math
import warnings

import numpy as np
from scipy import stats

from .lepage import FieldGrid, grid_axis
from .quasi_metric import EUCLIDEAN, NumericError, QuasiMetricSpec, rho
from .seeding import SUBSAMPLING, substream

DEFAULT_BUDGET = 200_000
MAX_OFFSETS = 50_000


# ---------------------------------------------------------------------------
# nets


def net_level(h_low, c22, k, d):
    """``nu_k = min{n >= 1 : c22 d**(h_low/2) 2**(-n h_low) <= 2**(-k)}``."""
    if not 0 < h_low <= 1:
        raise ValueError("h_low must lie in (0, 1]")
    if not c22 > 0:
        raise ValueError("c22 must be positive")
    if k < 1:
        raise ValueError("scale index k must be at least 1")

    def ok(n):
        return c22 * d ** (h_low / 2) * 2.0 ** (-n * h_low) <= 2.0 ** (-k)

    n = max(1, math.ceil((k + math.log2(c22) + 0.5 * h_low * math.log2(d)) / h_low) - 1)
    while not ok(n):
        n += 1
    while n > 1 and ok(n - 1):
        n -= 1
    return n


@dataclass
class DyadicNet:
    """Dyadics ``j / 2**level`` inside a box, kept as per-axis coordinates.

    Axes of zero length carry their single coordinate; an axis containing no
    dyadic of the level uses its two endpoints.
    """

    box: np.ndarray
    level: int
    axes: list

    @property
    def size(self):
        return int(np.prod([len(a) for a in self.axes]))

    def points(self, max_points=10_000_000):
        if self.size > max_points:
            raise MemoryError(f"net has {self.size} points; raise max_points to materialise it")
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def corner_candidates(self, probes):
        """For each probe the net points at the corners of its enclosing cell."""
        probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
        lo, hi = [], []
        for j, ax in enumerate(self.axes):
            i = np.clip(np.searchsorted(ax, probes[:, j], side="right") - 1, 0, len(ax) - 1)
            lo.append(ax[i])
            hi.append(ax[np.minimum(i + 1, len(ax) - 1)])
        d = len(self.axes)
        out = np.empty((2 ** d, len(probes), d))
        for c in range(2 ** d):
            for j in range(d):
                out[c, :, j] = hi[j] if (c >> j) & 1 else lo[j]
        return out

    def distance(self, spec, probes):
        """Upper bound on ``min_{net} rho(probe, .)``, exact up to the cell corners."""
        cand = self.corner_candidates(probes)
        p = np.atleast_2d(np.asarray(probes, dtype=np.float64))
        best = np.full(len(p), np.inf)
        for c in cand:
            best = np.minimum(best, rho(spec, p, c))
        return best

    def covers(self, spec, probes, radius):
        """Whether each probe has a net point within ``radius``.

        Corners are tried nearest-first (Euclidean), so most probes cost a
        single quasi-metric evaluation.
        """
        p = np.atleast_2d(np.asarray(probes, dtype=np.float64))
        cand = self.corner_candidates(p)
        order = np.argsort(np.linalg.norm(cand - p[None], axis=2), axis=0)
        ok = np.zeros(len(p), dtype=bool)
        for rank in range(len(cand)):
            todo = np.flatnonzero(~ok)
            if not len(todo):
                break
            c = cand[order[rank, todo], todo]
            ok[todo] = rho(spec, p[todo], c) <= radius
        return ok


def comparison_constant(spec, h_low, n_dir=360, n_rad=60, margin=1.02, seed=0):
    """``c22`` with ``rho(0, x) <= c22 ||x||**h_low`` for ``||x|| <= 1``.

    Supremum over a direction grid (d = 2), random directions (d >= 3) and
    log-spaced radii in [1e-8, 1], inflated by ``margin``.
    """
    d = spec.dim if spec.dim is not None else 1
    if d == 1:
        v = np.array([[1.0], [-1.0]])
    elif d == 2:
        a = np.linspace(0, 2 * np.pi, n_dir, endpoint=False)
        v = np.stack([np.cos(a), np.sin(a)], axis=1)
    else:
        v = np.random.default_rng(seed).normal(size=(n_dir * d, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = np.geomspace(1e-8, 1.0, n_rad)
    x = (r[:, None, None] * v[None]).reshape(-1, d)
    vals = rho(spec, x, np.zeros_like(x)) / np.linalg.norm(x, axis=1) ** h_low
    return margin * float(vals.max())


def build_net(box, h_low, c22, k, d=None, max_axis=2 ** 26):
    """The dyadic ``2**-k``-net of ``box`` for a quasi-metric with
    ``rho(x, y) <= c22 ||x - y||**h_low`` when ``||x - y|| <= 1``.

    Raises MemoryError when an axis would carry more than ``max_axis`` points.
    """
    box = np.asarray(box, dtype=np.float64).reshape(-1, 2)
    if np.any(box[:, 1] < box[:, 0]):
        raise ValueError("box intervals must have low <= high")
    d = len(box) if d is None else int(d)
    # degenerate axes drop out of the dimension count
    d_eff = max(1, int(np.count_nonzero(box[:, 1] > box[:, 0])))
    level = net_level(h_low, c22, k, min(d, d_eff))
    step = 2.0 ** (-level)
    axes = []
    for a, b in box:
        if a == b:
            axes.append(np.array([a]))
            continue
        lo, hi = math.ceil(a / step), math.floor(b / step)
        if hi - lo + 1 > max_axis:
            raise MemoryError(f"net level {level} puts {hi - lo + 1} points on one axis")
        j = np.arange(lo, hi + 1)
        axes.append(j * step if len(j) else np.array([a, b]))
    return DyadicNet(box, level, axes)


# ---------------------------------------------------------------------------
# offset sups


@dataclass
class OffsetSups:
    """Per-offset distances, increment sups and pair counts of a grid field."""

    offsets: np.ndarray
    rho: np.ndarray
    sup: np.ndarray
    count: np.ndarray


def _grid_offsets(resolution, rng, max_offsets):
    """Lattice offsets up to sign; all of them when few enough, else a log-uniform sample."""
    res = np.asarray(resolution)
    total = int(np.prod(2 * res - 1))
    if total // 2 <= max_offsets:
        mesh = np.meshgrid(*[np.arange(-(n - 1), n) for n in res], indexing="ij")
        off = np.stack([m.ravel() for m in mesh], axis=1)
    else:
        d = len(res)
        v = rng.normal(size=(max_offsets * 2, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        length = np.exp(rng.uniform(0, math.log(float(res.max())), size=(len(v), 1)))
        off = np.rint(v * length).astype(np.int64)
        off = np.clip(off, -(res - 1), res - 1)
    # keep one representative of each +/- pair
    nz = off != 0
    first = np.argmax(nz, axis=1)
    lead = off[np.arange(len(off)), first]
    off = off[nz.any(axis=1) & (lead > 0)]
    off = np.unique(off, axis=0)
    if len(off) > max_offsets:
        off = off[np.sort(rng.choice(len(off), max_offsets, replace=False))]
    return off


def _shift_slices(delta, shape):
    a, b = [], []
    for dj, n in zip(delta, shape):
        if dj >= 0:
            a.append(slice(dj, n))
            b.append(slice(0, n - dj))
        else:
            a.append(slice(0, n + dj))
            b.append(slice(-dj, n))
    return tuple(a), tuple(b)


def offset_sups(field, spec, budget=DEFAULT_BUDGET, seed=0, max_offsets=MAX_OFFSETS):
    """Exact sup of ``|S(x) - S(x + delta)|`` per lattice offset ``delta``.

    Offsets are processed in a seeded random order. Each distance bucket
    takes at most ``budget`` pairs: the offset that crosses the budget uses a
    random subset of its translates and later offsets of the bucket are
    skipped.
    """
    if int(np.prod(field.resolution)) < 2:
        raise ValueError("the grid needs at least two points")
    rng = substream(seed, SUBSAMPLING)
    off = _grid_offsets(field.resolution, rng, max_offsets)
    spacing = np.array([field.spacing(j) for j in range(field.d)])
    vec = off * spacing
    if spec.kind == EUCLIDEAN:
        r = np.linalg.norm(vec, axis=1)
    else:
        r = rho(spec, vec, np.zeros_like(vec))
    arr = field.array()
    order = rng.permutation(len(off))
    used = {}
    sups = np.zeros(len(off))
    counts = np.zeros(len(off), dtype=np.int64)
    for i in order:
        if not r[i] > 0:
            continue
        bucket = math.floor(-math.log2(r[i]))
        left = budget - used.get(bucket, 0)
        if left <= 0:
            continue
        sa, sb = _shift_slices(off[i], arr.shape)
        diff = np.abs(arr[sa] - arr[sb]).ravel()
        if len(diff) > left:
            diff = diff[rng.choice(len(diff), left, replace=False)]
        used[bucket] = used.get(bucket, 0) + len(diff)
        sups[i] = diff.max()
        counts[i] = len(diff)
    keep = counts > 0
    return OffsetSups(off[keep], r[keep], sups[keep], counts[keep])


# ---------------------------------------------------------------------------
# reports and fits


@dataclass
class HolderFit:
    beta: float
    intercept: float
    residual: float
    ci: tuple
    eta: float
    eta_fitted: bool = False
    condition: float | None = None

    def to_dict(self):
        return {"beta": self.beta, "intercept": self.intercept, "residual": self.residual,
                "ci": list(self.ci), "eta": self.eta, "eta_fitted": self.eta_fitted,
                "condition": self.condition}


@dataclass
class RegularityReport:
    """Per-scale buckets plus whatever fits and ratios were computed on them."""

    scales: np.ndarray
    counts: np.ndarray
    sups: np.ndarray
    fit: HolderFit | None = None
    holder_C: float | None = None
    directional: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.sups = np.asarray(self.sups, dtype=np.float64)
        if np.any(np.diff(self.scales) >= 0):
            raise ValueError("bucket scales must be strictly decreasing")
        if np.any(self.counts <= 0):
            raise ValueError("every reported bucket needs a positive pair count")

    def to_dict(self):
        return {
            "buckets": [{"scale": float(s), "count": int(c), "sup": float(v)}
                        for s, c, v in zip(self.scales, self.counts, self.sups)],
            "fit": None if self.fit is None else self.fit.to_dict(),
            "holder_C": self.holder_C,
            "directional": {str(k): v.to_dict() if hasattr(v, "to_dict") else v
                            for k, v in self.directional.items()},
            "metadata": self.metadata,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["log_scale", "log_sup"])
        for s, v in zip(self.scales, self.sups):
            wr.writerow([repr(math.log(s)), repr(math.log(v)) if v > 0 else "-inf"])
        return buf.getvalue()


def _bucket_index(dist):
    """k with dist in (2**-(k+1), 2**-k]."""
    k = np.ceil(-np.log2(dist) - 1).astype(np.int64)
    k = np.where(dist <= 2.0 ** (-(k + 1)), k + 1, k)
    return np.where(dist > 2.0 ** (-k), k - 1, k)


def modulus_profile(field, spec, k_range=None, budget=DEFAULT_BUDGET, seed=0,
                    max_offsets=MAX_OFFSETS):
    """Sup of ``|S(x) - S(y)|`` over pairs with ``rho(x, y)`` in ``(2**-(k+1), 2**-k]``."""
    os_ = offset_sups(field, spec, budget, seed, max_offsets)
    return _profile_from(os_.rho, os_.sup, os_.count, k_range,
                         {"spec": spec.to_dict(), "budget": budget, "seed": seed})


def _profile_from(dist, sups, counts, k_range, meta):
    k = _bucket_index(dist)
    lo, hi = (int(k.min()), int(k.max())) if k_range is None else (int(k_range[0]), int(k_range[1]))
    scales, cnt, sup, empty = [], [], [], []
    for kk in range(lo, hi + 1):
        sel = k == kk
        if not np.any(sel):
            empty.append(kk)
            continue
        scales.append(2.0 ** (-kk))
        cnt.append(int(counts[sel].sum()))
        sup.append(float(sups[sel].max()))
    if empty:
        warnings.warn(f"dropped empty buckets k = {empty}", RuntimeWarning)
    return RegularityReport(scales, cnt, sup, metadata=meta)


def fit_holder(scales, sups, eta=0.0, joint=False, level=0.95):
    """Least-squares ``log sup - eta log|log scale| = beta log scale + c``.

    With ``joint=True`` both beta and eta are fitted and the condition number
    of the design is reported. ``ci`` is a t-interval from the residuals.
    """
    s = np.asarray(scales, dtype=np.float64)
    v = np.asarray(sups, dtype=np.float64)
    if len(s) < 4:
        raise NumericError(f"need at least 4 buckets to fit an exponent, got {len(s)}", None)
    if np.any(v <= 0) or np.any(s <= 0):
        raise NumericError("bucket sups and scales must be positive", None)
    x = np.log(s)
    if (eta != 0 or joint) and np.any(s >= 1):
        raise NumericError("log corrections need scales below 1", None)
    cols = [x, np.ones_like(x)]
    if joint:
        cols.insert(1, np.log(np.abs(x)))
        y = np.log(v)
    else:
        y = np.log(v) - (eta * np.log(np.abs(x)) if eta else 0.0)
    A = np.stack(cols, axis=1)
    if np.linalg.matrix_rank(A) < A.shape[1] or len(s) <= A.shape[1]:
        raise NumericError("rank-deficient exponent regression", None)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    dof = len(s) - A.shape[1]
    sigma2 = float(res @ res) / dof
    cov = sigma2 * np.linalg.inv(A.T @ A)
    half = float(stats.t.ppf(0.5 + level / 2, dof) * math.sqrt(cov[0, 0]))
    beta = float(coef[0])
    resid = float(math.sqrt(np.mean(res * res)))
    if joint:
        return HolderFit(beta, float(coef[2]), resid, (beta - half, beta + half), float(coef[1]),
                         True, float(np.linalg.cond(A)))
    return HolderFit(beta, float(coef[1]), resid, (beta - half, beta + half), float(eta))


def fit_report(report, eta=0.0, joint=False, k_range=None):
    """Fit a :class:`RegularityReport` in place, optionally over a sub-range of k."""
    s, v = report.scales, report.sups
    if k_range is not None:
        sel = (s <= 2.0 ** (-k_range[0])) & (s >= 2.0 ** (-k_range[1]))
        s, v = s[sel], v[sel]
    report.fit = fit_holder(s, v, eta, joint)
    return report.fit


# ---------------------------------------------------------------------------
# directional exponents


@dataclass
class AxisExponent:
    axis: int
    scales: np.ndarray
    sups: np.ndarray
    fit: HolderFit | None

    @property
    def beta(self):
        return float("nan") if self.fit is None else self.fit.beta

    @property
    def constant(self):
        return bool(np.all(self.sups == 0))

    def to_dict(self):
        return {"axis": self.axis, "scales": self.scales.tolist(), "sups": self.sups.tolist(),
                "beta": self.beta, "constant": self.constant,
                "fit": None if self.fit is None else self.fit.to_dict()}


def lag_sups(lines, max_lag=None):
    """Pooled ``max |v[i + l] - v[i]|`` over lines, for every lag ``l``."""
    v = np.atleast_2d(np.asarray(lines))
    n = v.shape[1]
    max_lag = n - 1 if max_lag is None else min(int(max_lag), n - 1)
    out = np.empty(max_lag)
    for lag in range(1, max_lag + 1):
        out[lag - 1] = np.abs(v[:, lag:] - v[:, :-lag]).max()
    return out


def line_exponent(lines, spacing, eta=0.0, k_range=None, axis=0):
    """Exponent of increments along parallel lines with Euclidean lag scale."""
    v = np.atleast_2d(np.asarray(lines))
    if v.shape[1] < 2 ** 7:
        raise ValueError(f"need at least 128 points along axis {axis}, got {v.shape[1]}")
    sups = lag_sups(v)
    h = spacing * np.arange(1, len(sups) + 1)
    rep = _profile_from(h, sups, np.full(len(h), v.shape[0]), None, {})
    s, sp = rep.scales, rep.sups
    if k_range is not None:
        sel = (s <= 2.0 ** (-k_range[0])) & (s >= 2.0 ** (-k_range[1]))
        s, sp = s[sel], sp[sel]
    fit = None if np.all(sp == 0) else fit_holder(s, sp, eta)
    return AxisExponent(axis, s, sp, fit)


def _lines_along(field, axis):
    arr = np.moveaxis(field.array(), axis, -1)
    return arr.reshape(-1, arr.shape[-1])


def directional_exponents(field, axes=None, eta=0.0, k_range=None):
    """Per-axis exponents from increments along all grid lines of each axis.

    ``field`` is a :class:`FieldGrid` or a mapping ``axis -> (lines, spacing)``
    (as produced from :func:`anisofield.lepage.simulate_lines`).
    """
    if isinstance(field, FieldGrid):
        axes = range(field.d) if axes is None else axes
        return {a: line_exponent(_lines_along(field, a), field.spacing(a), eta, k_range, a)
                for a in axes}
    axes = field.keys() if axes is None else axes
    return {a: line_exponent(field[a][0], field[a][1], eta, k_range, a) for a in axes}


def windowed_exponents(values, coords, windows, eta=0.0, k_range=None):
    """Line exponents restricted to coordinate windows ``[(lo, hi), ...]``.

    ``values`` holds one or more lines sampled at ``coords``.
    """
    v = np.atleast_2d(np.asarray(values))
    c = np.asarray(coords, dtype=np.float64)
    spacing = float(c[1] - c[0])
    out = []
    for lo, hi in windows:
        sel = (c >= lo) & (c <= hi)
        out.append(line_exponent(v[:, sel], spacing, eta, k_range))
    return out


# ---------------------------------------------------------------------------
# Hölder ratios


@dataclass
class HolderRatio:
    C: float
    C_coarse: float
    stable: bool

    def to_dict(self):
        return {"C": self.C, "C_coarse": self.C_coarse, "stable": self.stable}


def _holder_C(field, spec, beta, eta, budget, seed, max_offsets):
    os_ = offset_sups(field, spec, budget, seed, max_offsets)
    den = os_.rho ** beta * (np.log1p(1.0 / os_.rho) ** eta if eta else 1.0)
    return float(np.max(os_.sup / den)) if len(den) else 0.0


def coarsen(field):
    """Every other grid point along each axis (axes with at least 3 points)."""
    arr = field.array()
    sl = tuple(slice(None, None, 2) if n >= 3 else slice(None) for n in field.resolution)
    sub = arr[sl]
    box = field.box.copy()
    for j, n in enumerate(field.resolution):
        if n >= 3:
            box[j, 1] = grid_axis(field.box[j], n)[::2][-1]
    return FieldGrid(box, sub.shape, sub.ravel(), dict(field.metadata))


def holder_membership(field, spec, beta, eta=0.0, budget=DEFAULT_BUDGET, seed=0,
                      max_offsets=MAX_OFFSETS):
    """``C = sup |dS| / (rho**beta log(1 + 1/rho)**eta)`` and a refinement check.

    Stable means the ratio grows by less than 20% from the 2x coarser grid to
    the full grid.
    """
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    c = _holder_C(field, spec, beta, eta, budget, seed, max_offsets)
    cc = _holder_C(coarsen(field), spec, beta, eta, budget, seed, max_offsets)
    stable = c <= 1.2 * cc if cc > 0 else c == 0
    return HolderRatio(c, cc, bool(stable))


# ---------------------------------------------------------------------------
# truncation rates


@dataclass
class RateReport:
    N: np.ndarray
    sup_rest: np.ndarray
    scaled: np.ndarray
    pprime: float

    @property
    def running_max(self):
        return np.maximum.accumulate(self.scaled)

    @property
    def bound(self):
        return float(self.scaled.max())

    def to_dict(self):
        return {"N": self.N.tolist(), "sup_rest": self.sup_rest.tolist(),
                "scaled": self.scaled.tolist(), "pprime": self.pprime, "bound": self.bound}


def rate_report(N, rests, pprime):
    """``sup_x |R_N(x)| / (b(N) sqrt(log(N + 2)))`` with ``b(N) = (N + 1)**(-1/p')``.

    ``rests`` has one row per N (points along the second axis).
    """
    N = np.asarray(N, dtype=np.float64)
    r = np.abs(np.atleast_2d(np.asarray(rests)))
    if r.shape[0] != len(N):
        r = r.T
    if r.shape[0] != len(N):
        raise ValueError("rests must have one row per N")
    sup = r.max(axis=1)
    b = (N + 1) ** (-1.0 / pprime)
    return RateReport(N, sup, sup / (b * np.sqrt(np.log(N + 2))), float(pprime))
