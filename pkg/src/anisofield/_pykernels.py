"""Pure numpy versions of the compiled kernels.

Terms are summed in blocks: numpy's pairwise reduction inside a block, then a
Neumaier accumulator across blocks. Block boundaries are aligned with the
checkpoints so each partial sum is read off exactly.
"""
import numpy as np

_BLOCK = 512
_MAX_CELLS = 1 << 20


def _neumaier_add(s, c, x):
    t = s + x
    big = np.abs(s) >= np.abs(x)
    c += np.where(big, (s - t) + x, (x - t) + s)
    return t, c


def _segments(checkpoints):
    """Yield (start, stop, checkpoint slots reached at stop)."""
    start = 0
    k = 0
    n_ck = len(checkpoints)
    while k < n_ck and checkpoints[k] == 0:
        k += 1
    first = list(range(k))
    if first:
        yield 0, 0, first
    while k < n_ck:
        stop = int(checkpoints[k])
        slots = []
        while k < n_ck and checkpoints[k] == stop:
            slots.append(k)
            k += 1
        pos = start
        while pos < stop:
            nxt = min(pos + _BLOCK, stop)
            yield pos, nxt, slots if nxt == stop else []
            pos = nxt
        start = stop


def _accumulate(n_points, checkpoints, block_terms):
    """Drive compensated accumulation; ``block_terms(lo, hi)`` -> (re, im)."""
    n_ck = len(checkpoints)
    out_re = np.zeros((n_points, n_ck))
    out_im = np.zeros((n_points, n_ck))
    sr = np.zeros(n_points)
    cr = np.zeros(n_points)
    si = np.zeros(n_points)
    ci = np.zeros(n_points)
    for lo, hi, slots in _segments(checkpoints):
        if hi > lo:
            tr, ti = block_terms(lo, hi)
            sr, cr = _neumaier_add(sr, cr, tr.sum(axis=1))
            si, ci = _neumaier_add(si, ci, ti.sum(axis=1))
        for k in slots:
            out_re[:, k] = sr + cr
            out_im[:, k] = si + ci
    return out_re, out_im


def lepage_sum(points, inv_alpha, xi, coef_a, coef_b, g_re, g_im, checkpoints,
               constant_alpha, num_threads=1):
    points = np.asarray(points, dtype=np.float64)
    n_points = points.shape[0]
    checkpoints = np.asarray(checkpoints, dtype=np.intp)
    out_re = np.zeros((n_points, len(checkpoints)))
    out_im = np.zeros((n_points, len(checkpoints)))
    if n_points == 0 or len(checkpoints) == 0:
        return out_re, out_im
    chunk = max(1, _MAX_CELLS // _BLOCK)
    n_terms = int(checkpoints[-1])
    const_coef = None
    if constant_alpha:
        const_coef = np.exp(coef_a[:n_terms] + coef_b[:n_terms] * inv_alpha[0])
    for p0 in range(0, n_points, chunk):
        pts = points[p0:p0 + chunk]
        ia = np.asarray(inv_alpha[p0:p0 + chunk])[:, None]

        def block_terms(lo, hi, pts=pts, ia=ia):
            # same summation order as the compiled loop: huge |xi| leave the
            # phase barely resolved, so BLAS rounding would show up in the sums
            theta = np.zeros((len(pts), hi - lo))
            for j in range(pts.shape[1]):
                theta += pts[:, j:j + 1] * xi[lo:hi, j][None, :]
            hs = np.sin(0.5 * theta)
            hc = np.cos(0.5 * theta)
            re = -2.0 * hs * hs
            im = 2.0 * hs * hc
            if const_coef is not None:
                c = const_coef[lo:hi][None, :]
            else:
                c = np.exp(coef_a[lo:hi][None, :] + coef_b[lo:hi][None, :] * ia)
            gr = g_re[lo:hi]
            gi = g_im[lo:hi]
            return c * (re * gr - im * gi), c * (re * gi + im * gr)

        r, i = _accumulate(len(pts), checkpoints, block_terms)
        out_re[p0:p0 + chunk] = r
        out_im[p0:p0 + chunk] = i
    return out_re, out_im


def weighted_partial_sums(w_re, w_im, g_re, g_im, checkpoints, num_threads=1):
    w_re = np.asarray(w_re, dtype=np.float64)
    w_im = np.asarray(w_im, dtype=np.float64)
    checkpoints = np.asarray(checkpoints, dtype=np.intp)

    def block_terms(lo, hi):
        a = w_re[:, lo:hi]
        b = w_im[:, lo:hi]
        gr = g_re[lo:hi]
        gi = g_im[lo:hi]
        return a * gr - b * gi, a * gi + b * gr

    return _accumulate(w_re.shape[0], checkpoints, block_terms)
