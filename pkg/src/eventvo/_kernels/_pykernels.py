"""Reference (numpy) versions of the per-event frontend kernels."""

from __future__ import annotations

import numpy as np

# stay, +x, -x, +y, -y
HYPOTHESES = ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1))


def neighbor_lookup(table, x, y, r):
    """Nearest registered id in the ``(2r+1)^2`` square around ``(x, y)``.

    Returns ``(id or -1, cells visited)``; ties go to the first cell in
    raster order.
    """
    h, w = table.shape
    y0, y1 = max(y - r, 0), min(y + r + 1, h)
    x0, x1 = max(x - r, 0), min(x + r + 1, w)
    block = table[y0:y1, x0:x1]
    visited = block.size
    ys, xs = np.nonzero(block >= 0)
    if len(ys) == 0:
        return -1, visited
    d2 = (ys + y0 - y) ** 2 + (xs + x0 - x) ** 2
    i = int(np.argmin(d2))
    return int(block[ys[i], xs[i]]), visited


def binarize(patch, n_newest):
    """Keep the ``n_newest`` most recent timestamps (ties included)."""
    finite = np.isfinite(patch)
    n = int(finite.sum())
    if n == 0:
        return np.zeros(patch.shape, dtype=np.uint8)
    vals = patch[finite]
    if n > n_newest:
        tau = np.partition(vals, n - n_newest)[n - n_newest]
    else:
        tau = vals.min()
    return (finite & (patch >= tau)).astype(np.uint8)


def harris_mask(mask, sigma, k):
    """Harris response at the patch center of a binary mask."""
    b = mask.astype(float)
    s = b.shape[0]
    w = s // 2
    gx = (b[:-2, 2:] + 2 * b[1:-1, 2:] + b[2:, 2:]) - (b[:-2, :-2] + 2 * b[1:-1, :-2] + b[2:, :-2])
    gy = (b[2:, :-2] + 2 * b[2:, 1:-1] + b[2:, 2:]) - (b[:-2, :-2] + 2 * b[:-2, 1:-1] + b[:-2, 2:])
    i = np.arange(1, s - 1) - w
    g = np.exp(-(i[:, None] ** 2 + i[None, :] ** 2) / (2.0 * sigma * sigma))
    a = float((g * gx * gx).sum())
    c = float((g * gy * gy).sum())
    bxy = float((g * gx * gy).sum())
    return a * c - bxy * bxy - k * (a + c) ** 2


def harris_score(plane, x, y, w, n_newest, sigma, k):
    """Binarize the SAE patch around ``(x, y)`` and score it; border -> -inf."""
    h, wd = plane.shape
    if x < w or y < w or x >= wd - w or y >= h - w:
        return float("-inf")
    patch = plane[y - w:y + w + 1, x - w:x + w + 1]
    return harris_mask(binarize(patch, n_newest), sigma, k)


def hypothesis_votes(template, w, dx, dy, out):
    """Add the votes of one event at offset ``(dx, dy)`` into ``out`` (len 5)."""
    s = 2 * w + 1
    for j, (hx, hy) in enumerate(HYPOTHESES):
        u, v = dx - hx + w, dy - hy + w
        if 0 <= u < s and 0 <= v < s and template[v, u]:
            out[j] += 1


def hypothesis_scores(template, w, dx, dy):
    """Votes of a batch of event offsets for every hypothesis."""
    out = np.zeros(len(HYPOTHESES), dtype=np.int64)
    s = 2 * w + 1
    dx = np.asarray(dx, dtype=np.int64)
    dy = np.asarray(dy, dtype=np.int64)
    for j, (hx, hy) in enumerate(HYPOTHESES):
        u, v = dx - hx + w, dy - hy + w
        ok = (u >= 0) & (u < s) & (v >= 0) & (v < s)
        out[j] = int(template[v[ok], u[ok]].sum())
    return out
