"""Finite-difference oracle shared by the gradient tests."""

import numpy as np

from devinr.inr import forward_backward, init_network


def loss_only(net, coords, targets, t, latent):
    pred = net.forward_batch(coords, t, latent).astype(np.float64)
    r = pred - targets
    return float(np.dot(r, r) / r.size)


def close(a, n, rel=1e-3, floor=1e-6):
    return abs(a - n) <= max(rel * max(abs(a), abs(n)), floor)


def fd_probes(config, seed, n_probes, step=1e-5, batch=6):
    """Compare analytic and central-difference gradients at random parameter/latent entries.

    The step is small because deep nets at omega0=10 have enough curvature for
    the O(step**2) truncation error to reach 1e-3 at step 1e-4.

    Returns a list of (analytic, numeric) pairs; the network runs in float64.
    """
    rng = np.random.default_rng(seed)
    net = init_network(config, rng, dtype=np.float64)
    for layer in net.layers:
        for arr in layer.arrays():
            arr += rng.normal(0, 0.05, size=arr.shape)
    coords = rng.uniform(-0.5, 0.5, size=(batch, config.d))
    t = float(rng.uniform(0.26, 0.45))
    latent = rng.normal(0, 0.3, size=config.latent_dim)
    targets = rng.uniform(0, 1, size=batch)
    _, grads = forward_backward(net, coords, targets, t, latent)

    params = list(net.parameters())
    grad_arrays = list(grads.arrays())
    out = []
    for _ in range(n_probes):
        which = int(rng.integers(len(params) + 1))
        if which == len(params):
            j = int(rng.integers(config.latent_dim))
            plus, minus = latent.copy(), latent.copy()
            plus[j] += step
            minus[j] -= step
            num = (loss_only(net, coords, targets, t, plus) - loss_only(net, coords, targets, t, minus)) / (2 * step)
            out.append((float(grads.latent[j]), num))
            continue
        arr = params[which]
        idx = tuple(int(rng.integers(n)) for n in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + step
        lp = loss_only(net, coords, targets, t, latent)
        arr[idx] = orig - step
        lm = loss_only(net, coords, targets, t, latent)
        arr[idx] = orig
        out.append((float(grad_arrays[which][idx]), (lp - lm) / (2 * step)))
    return out
