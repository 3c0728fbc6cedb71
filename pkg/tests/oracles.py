"""Slow, independent reference implementations used as test oracles.

Nothing here calls into the vectorized code paths it checks.
"""

import math

import numpy as np


def naive_conv2d(x, w, b):
    """6-nested-loop 'same' cross-correlation with (k-1)//2 before / rest after padding."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    lo = (k - 1) // 2
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                acc = b[o]
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            ii, jj = i + di - lo, j + dj - lo
                            if 0 <= ii < h and 0 <= jj < wd:
                                acc += x[c, ii, jj] * w[o, c, di, dj]
                out[o, i, j] = acc
    return out


def naive_maxpool2(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2))
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[ch, i, j] = max(
                    x[ch, 2 * i, 2 * j], x[ch, 2 * i, 2 * j + 1],
                    x[ch, 2 * i + 1, 2 * j], x[ch, 2 * i + 1, 2 * j + 1],
                )
    return out


def scalar_rbf(x, centers, scales):
    """Normalized RBF memberships written out with Python floats."""
    terms = []
    for v, rho in zip(centers, scales):
        dist = math.sqrt(sum((float(a) - float(c)) ** 2 for a, c in zip(x, v)))
        terms.append(-dist / float(rho))
    top = max(terms)
    ex = [math.exp(t - top) for t in terms]
    total = math.fsum(ex)
    return [e / total for e in ex]


def scalar_bof(features, centers, scales):
    rows = [scalar_rbf(f, centers, scales) for f in features]
    n = len(rows)
    return [math.fsum(r[k] for r in rows) / n for k in range(len(centers))]


def _reflect(i, n):
    # half-sample symmetric: -1 -> 0, n -> n-1
    if i < 0:
        return -i - 1
    if i >= n:
        return 2 * n - i - 1
    return i


def naive_minkowski(img, n, p):
    """Per-channel Minkowski p-mean of |n-th derivative| with sigma = 0, by double loop.

    Derivatives are central differences (second order: [1,-2,1] and the
    product of central differences), borders reflect.
    """
    h, w, _ = img.shape
    out = []
    for c in range(3):
        def px(i, j):
            return float(img[_reflect(i, h), _reflect(j, w), c])

        def dx(i, j):
            return 0.5 * (px(i, j + 1) - px(i, j - 1))

        values = []
        for i in range(h):
            for j in range(w):
                if n == 0:
                    v = abs(px(i, j))
                elif n == 1:
                    gx = dx(i, j)
                    gy = 0.5 * (px(i + 1, j) - px(i - 1, j))
                    v = math.sqrt(gx * gx + gy * gy)
                else:
                    gxx = px(i, j + 1) - 2 * px(i, j) + px(i, j - 1)
                    gyy = px(i + 1, j) - 2 * px(i, j) + px(i - 1, j)
                    # y-difference of the x-differences, each with reflected indexing
                    gxy = 0.5 * (dx(_reflect(i + 1, h), j) - dx(_reflect(i - 1, h), j))
                    v = math.sqrt(gxx * gxx + gyy * gyy + 2 * gxy * gxy)
                values.append(v)
        if math.isinf(p):
            out.append(max(values))
        else:
            out.append((math.fsum(v ** p for v in values) / len(values)) ** (1.0 / p))
    return np.array(out)


def central_difference(f, arrays, h=1e-5):
    """Central-difference gradients of scalar ``f()`` w.r.t. each array (perturbed in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            gf[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def grad_rel_error(analytic, numeric):
    """max |a - n| / max(1, |a|) over all entries."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a))))


def scalar_adam(p, grads, lr, b1, b2, eps):
    """Adam on a single float over a sequence of gradients."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
    return p
