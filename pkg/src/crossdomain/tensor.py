"""Dense MLPs with hand-written reverse-mode gradients, Adam, and DMCW checkpoints.

Every network in the package (denoiser, critics, policy, CVAE heads,
domain classifiers) is an :class:`Mlp`. Parameters are float32 by default;
``dtype=np.float64`` builds an otherwise identical network, which is what
the finite-difference gradient checks run on.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, NonFiniteError

DMCW_MAGIC = b"DMCW"
DMCW_VERSION = 1


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(arr)))[0])
        raise NonFiniteError(f"non-finite value in {what} at flat index {bad}")
    return arr


def mean64(x, axis=None):
    """Mean with float64 accumulation, used for every loss reduction."""
    return np.mean(x, axis=axis, dtype=np.float64)


class Mlp:
    """Fully connected ReLU network with a linear output layer.

    Weights are stored as ``(fan_in, fan_out)`` so a forward pass is ``x @ W + b``.
    Initialization is uniform in ``±1/sqrt(fan_in)`` for weights and biases.
    """

    def __init__(self, layer_sizes, rng=None, dtype=np.float32):
        layer_sizes = [int(n) for n in layer_sizes]
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise DimensionError(f"need at least input and output sizes >= 1, got {layer_sizes}")
        rng = np.random.default_rng(rng)
        self.layer_sizes = layer_sizes
        self.dtype = np.dtype(dtype)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(self.dtype))
            self.biases.append(rng.uniform(-bound, bound, fan_out).astype(self.dtype))

    @classmethod
    def from_arrays(cls, weights, biases):
        net = cls.__new__(cls)
        net.weights = [np.asarray(w) for w in weights]
        net.biases = [np.asarray(b) for b in biases]
        net.dtype = net.weights[0].dtype
        net.layer_sizes = [net.weights[0].shape[0]] + [w.shape[1] for w in net.weights]
        for w, b in zip(net.weights, net.biases):
            if b.shape != (w.shape[1],):
                raise DimensionError(f"bias shape {b.shape} does not match weight shape {w.shape}")
        for w_prev, w_next in zip(net.weights[:-1], net.weights[1:]):
            if w_prev.shape[1] != w_next.shape[0]:
                raise DimensionError(f"layer shapes {w_prev.shape} and {w_next.shape} do not chain")
        return net

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def copy(self):
        return Mlp.from_arrays([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype):
        return Mlp.from_arrays([w.astype(dtype) for w in self.weights],
                               [b.astype(dtype) for b in self.biases])

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(
                f"input shape {x.shape} does not match network input (n, {self.in_dim})")
        return x

    def forward(self, x):
        out, _ = self.forward_cache(x)
        return out

    __call__ = forward

    def forward_cache(self, x):
        """Forward pass returning the output and the activations needed by backward."""
        h = self._check_input(x)
        inputs = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            h = z if i == last else np.maximum(z, 0)
        check_finite(h, "network output")
        return h, inputs

    def backward(self, cache, grad_out, need_input_grad=False):
        """Gradients of ``sum(grad_out * output)`` w.r.t. every parameter.

        Returns ``(grads, grad_input)`` where ``grads`` is aligned with
        :attr:`params` and ``grad_input`` is None unless requested.
        """
        inputs = cache
        grad_out = np.asarray(grad_out, dtype=self.dtype)
        expected = (inputs[0].shape[0], self.out_dim)
        if grad_out.shape != expected:
            raise DimensionError(f"upstream gradient shape {grad_out.shape} != output shape {expected}")
        grads = [None] * (2 * len(self.weights))
        g = grad_out
        grad_input = None
        for i in range(len(self.weights) - 1, -1, -1):
            h = inputs[i]
            grads[2 * i] = h.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or need_input_grad:
                g = g @ self.weights[i].T
                if i > 0:
                    # ReLU derivative: h is the post-activation of layer i-1.
                    g = g * (h > 0)
                else:
                    grad_input = g
        for k, gr in enumerate(grads):
            check_finite(gr, f"gradient of parameter {k}")
        return grads, grad_input


def polyak_update(target, online, tau):
    """In place: target <- (1 - tau) * target + tau * online."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"Polyak coefficient must be in (0, 1), got {tau}")
    for pt, po in zip(target.params, online.params):
        pt *= 1.0 - tau
        pt += tau * po


class Adam:
    """Bias-corrected Adam over a list of arrays, updated in place."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise DimensionError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        offset = 0
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            bad = ~np.isfinite(g)
            if bad.any():
                idx = offset + int(np.flatnonzero(bad.ravel())[0])
                raise NonFiniteError(f"non-finite gradient at flat parameter index {idx}")
            offset += g.size
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def finite_difference_grads(loss_fn, params, h=1e-3):
    """Central finite differences of a scalar ``loss_fn()`` w.r.t. ``params`` (mutated and restored)."""
    out = []
    for p in params:
        g = np.zeros(p.shape, dtype=np.float64)
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = float(loss_fn())
            flat[j] = orig - h
            down = float(loss_fn())
            flat[j] = orig
            g.reshape(-1)[j] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_errors(analytic, numeric, atol=1e-9):
    """Elementwise ``|a - n| / max(|a|, |n|)``; pairs both below ``atol`` count as exact."""
    a = np.concatenate([np.ravel(x) for x in analytic]).astype(np.float64)
    n = np.concatenate([np.ravel(x) for x in numeric]).astype(np.float64)
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)
    rel[diff <= atol] = 0.0
    return rel


# --------------------------------------------------------------------------- checkpoints


def save_networks(path, networks, meta=None):
    """Write named networks to ``path`` (DMCW) and a JSON sidecar next to it.

    The DMCW body holds every layer of every network in order; the sidecar
    records which consecutive layers belong to which name.
    """
    path = Path(path)
    layers = []
    index = []
    for name, net in networks.items():
        index.append({"name": name, "n_layers": len(net.weights)})
        layers.extend(zip(net.weights, net.biases))
    header = bytearray(DMCW_MAGIC)
    header += struct.pack("<II", DMCW_VERSION, len(layers))
    for w, _ in layers:
        header += struct.pack("<II", *w.shape)
    body = b"".join(
        np.ascontiguousarray(w, dtype="<f4").tobytes() + np.ascontiguousarray(b, dtype="<f4").tobytes()
        for w, b in layers)
    path.write_bytes(bytes(header) + body)
    sidecar = {"format": "DMCW", "version": DMCW_VERSION, "networks": index, "meta": meta or {}}
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def sidecar_path(path):
    return Path(path).with_suffix(".json")


def read_layers(path):
    """Parse a DMCW file into a list of ``(W, b)`` float32 pairs."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError("DMCW file shorter than its header", offset=len(data))
    if data[:4] != DMCW_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {DMCW_MAGIC!r}", offset=0)
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != DMCW_VERSION:
        raise FormatError(f"unsupported DMCW version {version}", offset=4)
    pos = 12
    if len(data) < pos + 8 * n_layers:
        raise FormatError("truncated layer table", offset=len(data))
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<II", data, pos))
        pos += 8
    layers = []
    for fan_in, fan_out in dims:
        n = fan_in * fan_out + fan_out
        if len(data) < pos + 4 * n:
            raise FormatError("truncated parameter block", offset=len(data))
        flat = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(np.float32)
        layers.append((flat[: fan_in * fan_out].reshape(fan_in, fan_out).copy(),
                       flat[fan_in * fan_out:].copy()))
        pos += 4 * n
    if pos != len(data):
        raise FormatError("trailing bytes after parameter blocks", offset=pos)
    return layers


def load_networks(path):
    """Inverse of :func:`save_networks`; returns ``(dict name -> Mlp, meta)``."""
    layers = read_layers(path)
    sidecar = json.loads(sidecar_path(path).read_text())
    nets = {}
    pos = 0
    for entry in sidecar["networks"]:
        chunk = layers[pos: pos + entry["n_layers"]]
        pos += entry["n_layers"]
        nets[entry["name"]] = Mlp.from_arrays([w for w, _ in chunk], [b for _, b in chunk])
    if pos != len(layers):
        raise FormatError(f"sidecar accounts for {pos} layers, file holds {len(layers)}")
    return nets, sidecar.get("meta", {})
