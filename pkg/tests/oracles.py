"""Reference computations shared by the unit tests and the acceptance gate."""

import numpy as np

from dpltm.nn import LabeledBatch, forward, init_network


def random_case(rng, max_dims=(6, 5, 4, 3), max_batch=8, p_keep=0.7):
    n_layers = rng.integers(1, len(max_dims))
    dims = [int(rng.integers(1, m + 1)) for m in max_dims[:n_layers + 1]]
    dims[-1] = max(dims[-1], 2)
    params = init_network(dims, int(rng.integers(1 << 30)))
    for b in params.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    mask = [rng.random(w.shape) < p_keep for w in params.weights]
    n = int(rng.integers(1, max_batch + 1))
    batch = LabeledBatch(rng.random((n, dims[0])), rng.integers(0, dims[-1], n))
    return params, mask, batch


def smooth_case(rng, margin=1e-3, **kw):
    """random_case redrawn until every hidden pre-activation is at least `margin` from the ReLU kink.

    Central differences with step h are only valid when no perturbation of
    size h flips a hidden unit, so the margin must exceed h by a safe factor.
    """
    while True:
        params, mask, batch = random_case(rng, **kw)
        _, cache = forward(params, mask, batch)
        hidden = cache.preacts[:-1]
        if all(np.abs(z).min() >= margin for z in hidden if z.size):
            return params, mask, batch


def loss_only(params, mask, batch):
    logits, _ = forward(params, mask, batch)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(batch)), batch.labels].mean()


def finite_difference_grads(params, mask, batch, h=1e-4):
    """Central differences over every weight and bias; independent of backprop."""
    out_w, out_b = [], []
    for arrays, out in ((params.weights, out_w), (params.biases, out_b)):
        for a in arrays:
            g = np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                old = a[idx]
                a[idx] = old + h
                up = loss_only(params, mask, batch)
                a[idx] = old - h
                down = loss_only(params, mask, batch)
                a[idx] = old
                g[idx] = (up - down) / (2 * h)
            out.append(g)
    return out_w, out_b


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(1e-6, np.maximum(np.abs(a), np.abs(b)))


def grid_score_range(nu, step=0.01):
    """Brute force max |S(C,A) - S(C',A')| over the grid, chunked over pairs."""
    g = np.arange(0, 1 + step / 2, step)
    a, c = np.meshgrid(g, g, indexing="ij")
    s = (a * (1 - nu * c)).ravel()
    best = 0.0
    for i in range(0, len(s), 1024):
        best = max(best, float(np.abs(s[i:i + 1024, None] - s[None, :]).max()))
    return best
