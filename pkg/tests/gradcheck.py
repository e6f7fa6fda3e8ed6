"""Central finite-difference gradient checks that know where ReLU kinks are.

A stencil ``theta ± h`` that moves any ReLU pre-activation across zero has no
meaningful finite-difference reference (the loss is not differentiable
between the two probe points), so every parameter is classified as
kink-free or kink-crossing by recording the activation pattern of every
network evaluated inside ``loss_fn``.
"""

import contextlib
from dataclasses import dataclass

import numpy as np

from crossdomain import tensor
from crossdomain.tensor import relative_errors


@contextlib.contextmanager
def record_patterns(sink):
    original = tensor.Mlp.forward_cache

    def wrapped(self, x):
        out, cache = original(self, x)
        sink.extend((h > 0).ravel() for h in cache[1:])
        return out, cache

    tensor.Mlp.forward_cache = wrapped
    try:
        yield sink
    finally:
        tensor.Mlp.forward_cache = original


def _probe(loss_fn):
    sink = []
    with record_patterns(sink):
        value = float(loss_fn())
    return value, (np.concatenate(sink) if sink else np.zeros(0, bool))


@dataclass
class GradCheck:
    rel: np.ndarray
    kink: np.ndarray

    @property
    def pass_fraction(self):
        return float(np.mean(self.rel <= 1e-4))

    @property
    def kink_free_ok(self):
        return bool(np.all(self.rel[~self.kink] <= 1e-4))

    @property
    def n_kink(self):
        return int(self.kink.sum())

    def ok(self, min_fraction=0.99):
        return self.kink_free_ok and self.pass_fraction >= min_fraction


def check(loss_fn, params, analytic, h=1e-3, max_per_param=None, rng=None):
    """Compare ``analytic`` (aligned with ``params``) against central differences of ``loss_fn``.

    ``max_per_param`` subsamples entries of large arrays (uniformly, without
    replacement) to bound the cost on wide networks.
    """
    _, base = _probe(loss_fn)
    rng = np.random.default_rng(rng)
    rels, kinks = [], []
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, max_per_param, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            up, pu = _probe(loss_fn)
            flat[j] = orig - h
            down, pd = _probe(loss_fn)
            flat[j] = orig
            num = (up - down) / (2 * h)
            rels.append(relative_errors([np.array([gflat[j]])], [np.array([num])])[0])
            kinks.append(not (np.array_equal(pu, base) and np.array_equal(pd, base)))
    return GradCheck(np.array(rels), np.array(kinks, bool))
