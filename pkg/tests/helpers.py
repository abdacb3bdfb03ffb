"""Independent oracles shared by the test modules."""

import math

import numpy as np


def central_fd(f, arrays, h=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = f()
            arr[idx] = old - h
            down = f()
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(a, n, floor=1e-6):
    """Entrywise |a - n| / max(|a|, |n|, floor), maximised."""
    a = np.asarray(a, dtype=float)
    n = np.asarray(n, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def brute_auc(scores, labels):
    """Count every positive-negative pair; ties score one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    hits = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    return hits / (len(pos) * len(neg))


def scalar_adam(grad_fn, w, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float Adam trajectory used as an oracle."""
    m = v = 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        w = w - lr * mh / (math.sqrt(vh) + eps)
        path.append(w)
    return path
