"""Independent reference implementations used as test oracles.

Nothing here imports the code under test except the Tensor container
needed to drive analytic backward passes.
"""
import math
from itertools import product

import numpy as np

from stereoscore.autodiff import Tensor


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Six nested loops, float64 accumulation."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for s in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = float(b[o])
                    for c in range(c_in):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[s, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[s, o, i, j] = acc
    return out


def numeric_grads(fn, arrays, eps=1e-3, dtype=np.float64):
    """Central finite differences of scalar ``fn(*tensors)`` w.r.t. every element of every array."""
    arrays = [np.array(a, dtype=dtype) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + eps
            fp = fn(*[Tensor(x, dtype=dtype) for x in arrays]).item()
            a[idx] = orig - eps
            fm = fn(*[Tensor(x, dtype=dtype) for x in arrays]).item()
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grads(fn, arrays, dtype=np.float64):
    tensors = [Tensor(np.array(a, dtype=dtype), requires_grad=True, dtype=dtype) for a in arrays]
    fn(*tensors).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def rel_error(a, b):
    """max |a - b| scaled by the largest magnitude of either gradient."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def grad_check(fn, arrays, eps=1e-3, dtype=np.float64):
    """Largest relative error between analytic and numeric gradients over all inputs."""
    ana = analytic_grads(fn, arrays, dtype)
    num = numeric_grads(fn, arrays, eps, dtype)
    return max(rel_error(a, n) for a, n in zip(ana, num))


def fsum_mean(values):
    values = list(values)
    return math.fsum(values) / len(values)


def brute_ranks(x):
    """Average ranks by counting: rank = #smaller + (#equal + 1) / 2."""
    x = list(map(float, x))
    return [sum(1 for y in x if y < v) + (sum(1 for y in x if y == v) + 1) / 2.0 for v in x]


def brute_pearson(x, y):
    x = list(map(float, x))
    y = list(map(float, y))
    mx, my = fsum_mean(x), fsum_mean(y)
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def brute_spearman(x, y):
    return brute_pearson(brute_ranks(x), brute_ranks(y))


def brute_rmse(x, y):
    return math.sqrt(math.fsum((a - b) ** 2 for a, b in zip(x, y)) / len(x))


def closed_form_spearman(x, y):
    """1 - 6 sum(d^2) / (n (n^2 - 1)); valid only without ties."""
    n = len(x)
    rx = {v: i + 1 for i, v in enumerate(sorted(x))}
    ry = {v: i + 1 for i, v in enumerate(sorted(y))}
    d2 = sum((rx[a] - ry[b]) ** 2 for a, b in zip(x, y))
    return 1 - 6 * d2 / (n * (n * n - 1))


def brute_patch_count(height, width, size=32, stride=32):
    """Scan every pixel offset and keep those on the stride grid whose window fits."""
    count = 0
    for r, c in product(range(height), range(width)):
        if r % stride == 0 and c % stride == 0 and r + size <= height and c + size <= width:
            count += 1
    return count
