"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` and are used when the extension is not built
(or when ``FLOWGUIDE_BACKEND=python``). Reductions go through ``np.einsum``
rather than BLAS so that identical query rows always produce identical
outputs, independent of their position in the batch.
"""
from __future__ import annotations

import numpy as np

NAME = "python"

# query rows per chunk for large groups; bounds the logits buffer
_CHUNK = 512


def grouped_attention(q, k, v, passthrough, order, offsets, heads, exclude_self):
    """Multi-head softmax attention restricted to groups of rows.

    Rows ``order[offsets[g]:offsets[g+1]]`` form group ``g``; each row attends
    to the rows of its own group (minus itself when ``exclude_self``). Rows
    left with no keys copy ``passthrough``. Rows in no group are zero.
    """
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    passthrough = np.asarray(passthrough, dtype=np.float64)
    order = np.asarray(order, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    n, c = q.shape
    d = c // heads
    scale = 1.0 / np.sqrt(d)
    out = np.zeros((n, c), dtype=np.float64)

    lengths = np.diff(offsets)
    for L in np.unique(lengths):
        L = int(L)
        if L == 0:
            continue
        gids = np.flatnonzero(lengths == L)
        idx = order[offsets[gids][:, None] + np.arange(L)[None, :]]  # (G, L)
        if exclude_self and L == 1:
            out[idx[:, 0]] = passthrough[idx[:, 0]]
            continue
        G = len(gids)
        K = k[idx].reshape(G, L, heads, d).transpose(0, 2, 1, 3)
        V = v[idx].reshape(G, L, heads, d).transpose(0, 2, 1, 3)
        # reference value per query: first member that is a key for it
        D0 = V - V[:, :, :1]
        D1 = V - V[:, :, 1:2] if exclude_self else None
        for s in range(0, L, _CHUNK):
            e = min(s + _CHUNK, L)
            Q = q[idx[:, s:e]].reshape(G, e - s, heads, d).transpose(0, 2, 1, 3)
            logits = np.einsum("ghld,ghmd->ghlm", Q, K) * scale
            if exclude_self:
                rows = np.arange(s, e)
                logits[:, :, rows - s, rows] = -np.inf
            logits -= logits.max(axis=-1, keepdims=True)
            w = np.exp(logits)
            w /= w.sum(axis=-1, keepdims=True)
            res = np.einsum("ghlm,ghmd->ghld", w, D0) + V[:, :, :1]
            if exclude_self and s == 0:
                res[:, :, 0] = (
                    np.einsum("ghm,ghmd->ghd", w[:, :, 0], D1) + V[:, :, 1]
                )
            out[idx[:, s:e]] = res.transpose(0, 2, 1, 3).reshape(G, e - s, c)
    return out


def bilinear_warp(image, fx, fy):
    """Backward-warp ``image`` (H, W, C): sample it at ``(x + fx, y + fy)``.

    Returns the warped image and a boolean mask of pixels whose sample point
    lies inside ``[0, W-1] x [0, H-1]``; invalid pixels are zero.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = xs + np.asarray(fx, dtype=np.float64)
    sy = ys + np.asarray(fy, dtype=np.float64)
    mask = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)

    x0 = np.clip(np.floor(sx), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(sy), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = np.where(mask, sx - x0, 0.0)[..., None]
    ay = np.where(mask, sy - y0, 0.0)[..., None]

    top = image[y0, x0] * (1.0 - ax) + image[y0, x1] * ax
    bot = image[y1, x0] * (1.0 - ax) + image[y1, x1] * ax
    warped = top * (1.0 - ay) + bot * ay
    warped[~mask] = 0.0
    return warped, mask
