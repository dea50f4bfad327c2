"""Central finite differences, used as the gradient oracle across the suite."""

import numpy as np

from bixnas import autodiff as ad
from bixnas.supernet import build_supernet


def numeric_grad(f, arr, eps=1e-6):
    """d f() / d arr by central differences; ``arr`` is perturbed in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def op_fd_error(fn, arrays, seed=0):
    """Worst relative error of backward vs FD for ``sum(fn(*inputs) * R)`` over every input."""
    rng = np.random.default_rng(seed)
    tensors = [ad.parameter(np.array(a, dtype=np.float64)) for a in arrays]
    out = fn(*tensors)
    r = rng.normal(size=out.shape)
    ad.backward((out * ad.Tensor(r)).sum())
    worst = 0.0
    for t in tensors:

        def f():
            return float(np.sum(fn(*[ad.Tensor(u.data) for u in tensors]).data * r))

        worst = max(worst, rel_err(t.grad, numeric_grad(f, t.data)))
    return worst


def supernet_fd_error(cfg, seed, mode="elementwise", per_tensor=8, eps=1e-6):
    """Worst per-tensor relative error of the dense supernet's weight gradients.

    ``elementwise`` checks every coordinate, ``sampled`` a random subset of
    coordinates per tensor, ``directional`` one random direction per tensor.
    """
    net = build_supernet(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, cfg.in_channels, 8, 8))
    y = rng.integers(0, cfg.num_classes, size=(2, 8, 8))

    def loss():
        with ad.no_grad():
            return float(ad.cross_entropy(net.forward(x, mode="train"), y).data)

    net.zero_grad()
    ad.backward(ad.cross_entropy(net.forward(x, mode="train"), y))
    worst = 0.0
    for p in net.params.values():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if mode == "directional":
            d = rng.normal(size=p.shape)
            base = p.data.copy()
            p.data = base + eps * d
            hi = loss()
            p.data = base - eps * d
            lo = loss()
            p.data = base
            err = rel_err(np.sum(g * d), (hi - lo) / (2 * eps))
        elif mode == "sampled":
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
            num = []
            for i in picks:
                old = flat[i]
                flat[i] = old + eps
                hi = loss()
                flat[i] = old - eps
                lo = loss()
                flat[i] = old
                num.append((hi - lo) / (2 * eps))
            err = rel_err(g.reshape(-1)[picks], num)
        else:
            err = rel_err(g, numeric_grad(loss, p.data, eps))
        worst = max(worst, err)
    return worst
