"""Shared test oracles."""

import numpy as np

from funnelkit.numerics import GradTape


def fd_check(loss_fn, params, n_coords=10, h=1e-4, seed=0):
    """Compare tape gradients with central differences on random coordinates.

    ``loss_fn()`` must build a scalar Tensor from ``params`` (a dict of
    Tensors).  Returns the worst |g_fd - g_ad| / max(1, |g_fd|) and the
    number of coordinates checked.
    """
    with GradTape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    rng = np.random.default_rng(seed)
    names = sorted(params)
    worst = 0.0
    checked = 0
    for i in range(n_coords):
        name = names[rng.integers(len(names))] if i >= len(names) else names[i]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.data.shape)
        orig = p.data[idx]
        p.data[idx] = orig + h
        up = float(loss_fn().data)
        p.data[idx] = orig - h
        down = float(loss_fn().data)
        p.data[idx] = orig
        g_fd = (up - down) / (2 * h)
        g_ad = grads[name][idx] if name in grads else 0.0
        worst = max(worst, abs(g_fd - g_ad) / max(1.0, abs(g_fd)))
        checked += 1
    return worst, checked


def brute_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out
