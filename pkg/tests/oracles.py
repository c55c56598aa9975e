"""Slow, obviously-correct reference computations used only by the tests."""
import math

import numpy as np


def gemm_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for kk in range(k):
                s += a[i, kk] * b[kk, j]
            out[i, j] = s
    return out


def conv_direct(x, w4, stride, padding):
    """Sliding-window convolution; ``w4`` is out x C x kh x kw."""
    c, h, wd = x.shape
    o, _, kh, kw = w4.shape
    xp = np.zeros((c, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((o, oh, ow))
    for f in range(o):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[f, i, j] = sum(float(v) for v in (patch * w4[f]).ravel())
    return out


def mlp_forward_loop(weights, biases, x):
    """Per-sample, per-unit recomputation of a ReLU MLP (ReLU between layers)."""
    out = []
    for sample in x:
        a = list(sample)
        for li, (w, b) in enumerate(zip(weights, biases)):
            z = [sum(w[o, i] * a[i] for i in range(len(a))) + b[o] for o in range(w.shape[0])]
            a = [max(v, 0.0) for v in z] if li < len(weights) - 1 else z
        out.append(a)
    return np.array(out)


def norm_loop(values):
    return math.sqrt(sum(float(v) * float(v) for v in values))


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    """Elementwise ``|a-b| / max(|a|, |b|, floor)``; the floor keeps ~0 entries absolute."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def rows_equal_classes(e):
    """Partition of row indices into classes of identical boolean rows (pairwise compare)."""
    n = e.shape[0]
    classes = []
    assigned = [False] * n
    for i in range(n):
        if assigned[i]:
            continue
        cls = [i]
        assigned[i] = True
        for j in range(i + 1, n):
            if not assigned[j] and all(e[i, c] == e[j, c] for c in range(e.shape[1])):
                cls.append(j)
                assigned[j] = True
        classes.append(cls)
    return classes


def random_block_mask(rng, scheme, p_row=0.6, p_col=0.6):
    from blkrew.blocks import LayerMask

    lm = LayerMask.full(scheme)
    lm.row_alive &= rng.random(lm.row_alive.shape) < p_row
    lm.col_alive &= rng.random(lm.col_alive.shape) < p_col
    return lm
