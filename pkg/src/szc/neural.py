"""Small dense networks in numpy: forward, backprop, Adam, soft target updates."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Q_ARCH = (2, 24, 48, 24, 20)
WEIGHTS_FORMAT = "szc-weights/1"
_OUTPUTS = ("linear", "tanh")


class NetworkError(ValueError):
    """Shape, architecture or bookkeeping mismatch."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient was nan or inf; the update was not applied."""


@dataclass
class NetworkParams:
    """Layer weights ``w`` of shape (fan_in, fan_out) and biases of shape (fan_out,).

    Hidden layers use ReLU; ``output`` is "linear" or "tanh".  ``version`` is
    bumped by every in-place update so stale forward caches can be detected.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = "linear"
    version: int = 0

    def __post_init__(self):
        if self.output not in _OUTPUTS:
            raise NetworkError(f"unknown output activation {self.output!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise NetworkError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise NetworkError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise NetworkError(f"layer {i}: fan-in {w.shape[0]} does not match previous "
                                   f"fan-out {self.weights[i - 1].shape[1]}")

    @property
    def arch(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             self.output)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def to_json(self) -> dict:
        return {"format": WEIGHTS_FORMAT, "arch": list(self.arch), "activation": "relu",
                "output": self.output,
                "layers": [{"w": w.tolist(), "b": b.tolist()}
                           for w, b in zip(self.weights, self.biases)]}

    @classmethod
    def from_json(cls, data: dict) -> "NetworkParams":
        if data.get("activation", "relu") != "relu":
            raise NetworkError("only relu hidden activations are supported")
        try:
            ws = [np.array(layer["w"], dtype=float) for layer in data["layers"]]
            bs = [np.array(layer["b"], dtype=float) for layer in data["layers"]]
        except (KeyError, TypeError) as exc:
            raise NetworkError("weights JSON needs 'layers' with 'w' and 'b'") from exc
        net = cls(ws, bs, data.get("output", "linear"))
        if "arch" in data and tuple(data["arch"]) != net.arch:
            raise NetworkError(f"declared arch {data['arch']} does not match layers {net.arch}")
        return net


def init_network(arch, rng: np.random.Generator, output: str = "linear") -> NetworkParams:
    """Glorot-uniform weights, zero biases."""
    arch = [int(a) for a in arch]
    if len(arch) < 2 or min(arch) < 1:
        raise NetworkError(f"bad architecture {arch}")
    ws, bs = [], []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, (fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return NetworkParams(ws, bs, output)


def zeros_like_network(net: NetworkParams) -> NetworkParams:
    return NetworkParams([np.zeros_like(w) for w in net.weights],
                         [np.zeros_like(b) for b in net.biases], net.output)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]    # input to each layer, batched (B, fan_in)
    pre: list[np.ndarray]       # pre-activations, (B, fan_out)
    output: np.ndarray          # (B, n_out)
    squeeze: bool
    version: int
    owner: int


def forward(params: NetworkParams, x) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network on one input vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != params.arch[0]:
        raise NetworkError(f"input shape {x.shape} does not match fan-in {params.arch[0]}")
    inputs, pre = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
        else:
            h = np.tanh(z) if params.output == "tanh" else z
    cache = ForwardCache(inputs, pre, h, squeeze, params.version, id(params))
    return (h[0] if squeeze else h), cache


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray = field(repr=False)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def backward(params: NetworkParams, cache: ForwardCache, output_gradient) -> Gradients:
    """Reverse-mode gradients of sum(output_gradient * output).

    For a batch the parameter gradients are summed over rows; scale
    ``output_gradient`` to get a mean.
    """
    if cache.owner != id(params) or cache.version != params.version:
        raise NetworkError("forward cache is stale (parameters changed since forward)")
    g = np.asarray(output_gradient, dtype=float)
    g = g[None, :] if cache.squeeze and g.ndim == 1 else g
    if g.shape != cache.output.shape:
        raise NetworkError(f"output gradient shape {g.shape} != output {cache.output.shape}")
    n = len(params.weights)
    gw: list[np.ndarray] = [None] * n     # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n     # type: ignore[list-item]
    if params.output == "tanh":
        g = g * (1.0 - cache.output ** 2)
    for i in range(n - 1, -1, -1):
        gw[i] = cache.inputs[i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
        if i > 0:
            g = g * (cache.pre[i - 1] > 0)
    return Gradients(gw, gb, g[0] if cache.squeeze else g)


def mse_loss(predicted, target) -> tuple[float, np.ndarray]:
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise NetworkError(f"prediction {p.shape} and target {t.shape} differ in shape")
    diff = p - t
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: NetworkParams, lr: float = 1e-3, **kw) -> "AdamState":
        arrs = net.arrays()
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs], lr=lr, **kw)

    def to_json(self) -> dict:
        return {"step": self.step, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "m": [a.tolist() for a in self.m],
                "v": [a.tolist() for a in self.v]}

    @classmethod
    def from_json(cls, data: dict) -> "AdamState":
        return cls([np.array(a, dtype=float) for a in data["m"]],
                   [np.array(a, dtype=float) for a in data["v"]],
                   int(data["step"]), float(data["lr"]), float(data["beta1"]),
                   float(data["beta2"]), float(data["eps"]))


def adam_step(params: NetworkParams, grads: Gradients, adam: AdamState) -> tuple[NetworkParams, AdamState]:
    """One bias-corrected Adam update, applied in place (descending the gradient)."""
    gs = grads.arrays()
    ps = params.arrays()
    if len(gs) != len(ps) or any(g.shape != p.shape for g, p in zip(gs, ps)):
        raise NetworkError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in gs):
        raise NonFiniteError("non-finite gradient; Adam step rejected")
    adam.step += 1
    c1 = 1.0 - adam.beta1 ** adam.step
    c2 = 1.0 - adam.beta2 ** adam.step
    for p, g, m, v in zip(ps, gs, adam.m, adam.v):
        m *= adam.beta1
        m += (1.0 - adam.beta1) * g
        v *= adam.beta2
        v += (1.0 - adam.beta2) * g * g
        p -= adam.lr * (m / c1) / (np.sqrt(v / c2) + adam.eps)
    params.version += 1
    return params, adam


def soft_update(target: NetworkParams, online: NetworkParams, tau: float) -> NetworkParams:
    """target <- (1 - tau) target + tau online, in place."""
    if not 0.0 <= tau <= 1.0:
        raise NetworkError("tau must lie in [0, 1]")
    if target.arch != online.arch or target.output != online.output:
        raise NetworkError(f"architecture mismatch {target.arch} vs {online.arch}")
    for t, o in zip(target.arrays(), online.arrays()):
        t *= 1.0 - tau
        t += tau * o
    target.version += 1
    return target


def save_network(path, net: NetworkParams, adam: AdamState | None = None) -> None:
    data = net.to_json()
    if adam is not None:
        data["adam"] = adam.to_json()
    Path(path).write_text(json.dumps(data) + "\n")


def load_network(path) -> tuple[NetworkParams, AdamState | None]:
    data = json.loads(Path(path).read_text())
    adam = AdamState.from_json(data["adam"]) if "adam" in data else None
    return NetworkParams.from_json(data), adam
