"""Feed-forward networks: evaluation, reverse-mode gradients, IBP and L1 Lipschitz bounds."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import Box
from .interval import Interval

_EPS = np.finfo(np.float64).eps


def _relu(z):
    return np.maximum(z, 0.0)


def _linear(z):
    return z


ACTIVATIONS = {"relu": _relu, "tanh": np.tanh, "sigmoid": expit, "linear": _linear}
# slope bound of each activation (all are monotone non-decreasing)
ACT_LIPSCHITZ = {"relu": 1.0, "tanh": 1.0, "sigmoid": 0.25, "linear": 1.0}


def _act_grad(act, z, a):
    if act == "relu":
        return (z > 0.0).astype(np.float64)  # subgradient 0 at the kink
    if act == "tanh":
        return 1.0 - a * a
    if act == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    act: str = "relu"

    def __post_init__(self):
        self.w = np.array(self.w, dtype=np.float64, ndmin=2)
        self.b = np.array(self.b, dtype=np.float64).reshape(-1)
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.act!r}")
        if self.w.shape[0] != self.b.shape[0]:
            raise ValueError(f"weight rows {self.w.shape[0]} != bias length {self.b.shape[0]}")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.b))):
            raise ValueError("layer parameters must be finite")


class MlpNet:
    """Dense network ``x -> act_L(W_L ... act_1(W_1 x + b_1) ... + b_L)``."""

    def __init__(self, layers):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.w.shape[0] != nxt.w.shape[1]:
                raise ValueError(f"layer dims do not chain: {prev.w.shape} -> {nxt.w.shape}")

    @classmethod
    def init(cls, sizes, act="relu", out_act="linear", rng=None, scale=1.0):
        """He/Glorot-style random init for layer sizes ``[in, h1, ..., out]``."""
        rng = np.random.default_rng(rng)
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            a = out_act if last else act
            gain = np.sqrt(2.0) if a == "relu" else 1.0
            w = rng.normal(0.0, scale * gain / np.sqrt(n_in), size=(n_out, n_in))
            layers.append(Layer(w, np.zeros(n_out), a))
        return cls(layers)

    @classmethod
    def zeros(cls, sizes, act="relu", out_act="linear"):
        return cls([Layer(np.zeros((o, i)), np.zeros(o), out_act if k == len(sizes) - 2 else act)
                    for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:]))])

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[0]

    @property
    def n_params(self) -> int:
        return sum(l.w.size + l.b.size for l in self.layers)

    # ------------------------------------------------------------ evaluation

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        a = np.atleast_2d(x)
        if a.shape[-1] != self.in_dim:
            raise ValueError(f"input dim {a.shape[-1]} != network input dim {self.in_dim}")
        for layer in self.layers:
            a = ACTIVATIONS[layer.act](a @ layer.w.T + layer.b)
        return a[0] if single else a

    def value(self, x) -> np.ndarray:
        """Scalar output for a batch, shape ``(B,)``."""
        out = self.forward(np.atleast_2d(x))
        return out[:, 0]

    __call__ = forward

    def _forward_cache(self, x):
        zs, acts = [], [x]
        a = x
        for layer in self.layers:
            z = a @ layer.w.T + layer.b
            a = ACTIVATIONS[layer.act](z)
            zs.append(z)
            acts.append(a)
        return zs, acts

    def backprop_scalar(self, x, upstream):
        """Gradient of ``sum_i upstream[i] * net(x_i)`` w.r.t. every parameter.

        Returns a list of ``(dW, db)`` pairs aligned with :attr:`layers`.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.out_dim != 1:
            raise ValueError("backprop_scalar needs a scalar-output network")
        up = np.broadcast_to(np.asarray(upstream, dtype=np.float64), (x.shape[0],))
        zs, acts = self._forward_cache(x)
        delta = up[:, None].copy()
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            delta = delta * _act_grad(layer.act, zs[i], acts[i + 1])
            grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
            if i:
                delta = delta @ layer.w
        return grads

    def value_and_backprop(self, x, upstream_fn):
        """Forward once, then backprop ``upstream_fn(values)`` (per-sample weights)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        zs, acts = self._forward_cache(x)
        vals = acts[-1][:, 0]
        up = upstream_fn(vals)
        delta = np.asarray(up, dtype=np.float64)[:, None]
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            delta = delta * _act_grad(layer.act, zs[i], acts[i + 1])
            grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
            if i:
                delta = delta @ layer.w
        return vals, grads

    # ------------------------------------------------------------ bounds

    def propagate_interval(self, lo, hi):
        """Sound output enclosure for a batch of input boxes.

        Affine layers use centre/radius form (equivalent to per-row corner
        arithmetic) plus a floating-point rounding allowance.
        """
        lo = np.atleast_2d(np.asarray(lo, dtype=np.float64))
        hi = np.atleast_2d(np.asarray(hi, dtype=np.float64))
        for layer in self.layers:
            c = 0.5 * (lo + hi)
            r = 0.5 * (hi - lo)
            aw = np.abs(layer.w)
            cz = c @ layer.w.T + layer.b
            rz = r @ aw.T
            slack = 2.0 * (layer.w.shape[1] + 2) * _EPS * ((np.abs(c) + r) @ aw.T + np.abs(layer.b))
            f = ACTIVATIONS[layer.act]
            lo = f(cz - rz - slack)
            hi = f(cz + rz + slack)
        return lo, hi

    def lipschitz_l1(self) -> float:
        """Product of per-layer L1-induced norms (max absolute column sum)."""
        L = 1.0
        for layer in self.layers:
            L *= ACT_LIPSCHITZ[layer.act] * float(np.abs(layer.w).sum(axis=0).max())
        return L

    def lipschitz_l1_grad(self):
        """The product bound and its (sub)gradient, as ``(L, [(dW, db), ...])``.

        Each factor's subgradient is the sign pattern of its largest column;
        ties resolve to the lowest column index.
        """
        norms, cols = [], []
        for layer in self.layers:
            s = np.abs(layer.w).sum(axis=0)
            j = int(s.argmax())
            norms.append(ACT_LIPSCHITZ[layer.act] * float(s[j]))
            cols.append(j)
        L = float(np.prod(norms))
        grads = []
        for i, layer in enumerate(self.layers):
            others = float(np.prod(norms[:i] + norms[i + 1:]))
            dw = np.zeros_like(layer.w)
            dw[:, cols[i]] = ACT_LIPSCHITZ[layer.act] * np.sign(layer.w[:, cols[i]]) * others
            grads.append((dw, np.zeros_like(layer.b)))
        return L, grads

    # ------------------------------------------------------------ parameters

    def params(self):
        out = []
        for layer in self.layers:
            out.extend([layer.w, layer.b])
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        i = 0
        for layer in self.layers:
            n = layer.w.size
            layer.w = theta[i:i + n].reshape(layer.w.shape).copy()
            i += n
            n = layer.b.size
            layer.b = theta[i:i + n].copy()
            i += n
        if i != theta.size:
            raise ValueError(f"expected {i} parameters, got {theta.size}")

    @staticmethod
    def flatten_grads(grads) -> np.ndarray:
        return np.concatenate([np.concatenate([dw.ravel(), db.ravel()]) for dw, db in grads])

    def copy(self) -> "MlpNet":
        return MlpNet([Layer(l.w.copy(), l.b.copy(), l.act) for l in self.layers])

    # ------------------------------------------------------------ io

    def to_json(self) -> dict:
        return {"kind": "mlp",
                "layers": [{"w": l.w.tolist(), "b": l.b.tolist(), "act": l.act} for l in self.layers]}

    @classmethod
    def from_json(cls, obj) -> "MlpNet":
        if obj.get("kind", "mlp") != "mlp":
            raise ValueError(f"not an mlp description: kind={obj.get('kind')!r}")
        try:
            layers = [Layer(np.array(l["w"], dtype=np.float64, ndmin=2), l["b"], l.get("act", "linear"))
                      for l in obj["layers"]]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed mlp layer description: {exc}") from exc
        return cls(layers)

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def forward(net: MlpNet, x):
    return net.forward(x)


def backprop_scalar(net: MlpNet, x, upstream=1.0):
    return net.backprop_scalar(x, upstream)


def propagate_interval(net: MlpNet, box: Box) -> Interval:
    lo, hi = net.propagate_interval(box.lo, box.hi)
    return Interval(lo[0], hi[0])


def lipschitz_l1(net: MlpNet) -> float:
    return net.lipschitz_l1()
