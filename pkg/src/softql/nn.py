"""Dense MLP with hand-written reverse-mode gradients and an ADAM optimizer.

Arrays are plain ``float64`` numpy arrays laid out row-major, one row per
example.  Only the fixed fully-connected topology used by the Q-function
and the sampling network is supported.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

CHECKPOINT_VERSION = 1
HIDDEN_SIZES = (200, 200)
OUTPUT_ACTIVATIONS = ("identity", "tanh")

# When set, every forward/backward pass checks its outputs for NaN/Inf.
DEBUG_FINITE = False


def set_debug(flag: bool) -> None:
    global DEBUG_FINITE
    DEBUG_FINITE = bool(flag)


def _check_finite(name, arr):
    if DEBUG_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {name}")


@dataclass
class MlpParams:
    """Weights ``W[i]`` of shape (fan_in, fan_out) and biases ``b[i]``.

    Hidden layers use ReLU; the last layer uses ``output``.
    """

    weights: list
    biases: list
    output: str = "identity"

    def __post_init__(self):
        if self.output not in OUTPUT_ACTIVATIONS:
            raise InvalidInputError(f"unknown output activation {self.output!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidInputError("need one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvalidInputError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise InvalidInputError(f"layer {i} does not chain onto layer {i - 1}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def sizes(self) -> list:
        return [self.in_dim] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list:
        """All parameter arrays in a fixed order (W0, b0, W1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.output)

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases], self.output)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def same_shapes(self, other: "MlpParams") -> bool:
        return [a.shape for a in self.arrays()] == [a.shape for a in other.arrays()]


def init_mlp(in_dim, out_dim, rng, hidden=HIDDEN_SIZES, output="identity") -> MlpParams:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases."""
    sizes = [in_dim, *hidden, out_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in) if fan_in else 1.0
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights, biases, output)


def _as_batch(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise InvalidInputError(f"input shape {x.shape} incompatible with in_dim {params.in_dim}")
    return x


def mlp_forward(params: MlpParams, x, return_cache=False):
    """Evaluate the network on a batch ``x`` of shape (batch, in_dim)."""
    h = _as_batch(params, x)
    cache = [h]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w
        z += b
        if i < last:
            h = np.maximum(z, 0.0, out=z)
        elif params.output == "tanh":
            h = np.tanh(z, out=z)
        else:
            h = z
        cache.append(h)
    _check_finite("mlp_forward output", h)
    return (h, cache) if return_cache else h


def mlp_backward(params: MlpParams, x, cotangent, cache=None, param_grads=True):
    """Vector-Jacobian product of the forward map.

    Returns ``(grads, dx)`` where ``grads`` is an ``MlpParams`` holding the
    cotangent contracted with d(output)/d(param) summed over the batch, and
    ``dx`` the per-row input gradient.  ``grads`` is None when
    ``param_grads`` is false (saves the weight-gradient products).
    """
    if cache is None:
        _, cache = mlp_forward(params, x, return_cache=True)
    g = np.asarray(cotangent, dtype=np.float64)
    out = cache[-1]
    if g.shape != out.shape:
        raise InvalidInputError(f"cotangent shape {g.shape} != output shape {out.shape}")
    if params.output == "tanh":
        g = g * (1.0 - out * out)
    n = len(params.weights)
    dws, dbs = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            # ReLU'(0) is taken as 0; g is a fresh matmul result here
            g *= cache[i + 1] > 0.0
        if param_grads:
            dws[i] = cache[i].T @ g
            dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    _check_finite("mlp_backward input gradient", g)
    grads = MlpParams(dws, dbs, params.output) if param_grads else None
    return grads, g


class Adam:
    """Bias-corrected ADAM; ``step`` updates ``params`` in place.

    ``step`` descends along ``grads``; pass a negated gradient to ascend.
    """

    def __init__(self, params: MlpParams, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise InvalidInputError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, params: MlpParams, grads: MlpParams) -> None:
        p_arrays, g_arrays = params.arrays(), grads.arrays()
        if [a.shape for a in p_arrays] != [a.shape for a in g_arrays] or \
                [a.shape for a in p_arrays] != [a.shape for a in self.m]:
            raise InvalidInputError("gradient / optimizer state shapes do not match parameters")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(p_arrays, g_arrays, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: Adam, params: MlpParams, grads: MlpParams):
    state.step(params, grads)
    return state, params


def save_checkpoint(path, networks: dict, metadata=None) -> Path:
    """Write named parameter sets to an ``.npz`` archive (no pickling)."""
    path = Path(path)
    payload = {"__version__": np.array(CHECKPOINT_VERSION),
               "__meta__": np.array(json.dumps(metadata or {}, sort_keys=True))}
    for name, params in networks.items():
        if "/" in name:
            raise InvalidInputError(f"network name {name!r} may not contain '/'")
        payload[f"{name}/output"] = np.array(params.output)
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            payload[f"{name}/W{i}"] = w
            payload[f"{name}/b{i}"] = b
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(networks, metadata)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {version}")
        metadata = json.loads(str(data["__meta__"]))
        names = sorted({k.split("/")[0] for k in data.files if "/" in k})
        networks = {}
        for name in names:
            n_layers = sum(1 for k in data.files if k.startswith(f"{name}/W"))
            networks[name] = MlpParams(
                [data[f"{name}/W{i}"] for i in range(n_layers)],
                [data[f"{name}/b{i}"] for i in range(n_layers)],
                str(data[f"{name}/output"]))
    return networks, metadata
