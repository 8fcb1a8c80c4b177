"""Numpy multilayer perceptrons with hand-written reverse mode, Adam and SmoothL1.

Inputs may be a single vector or a (batch, width) matrix; batch rows are independent.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

LINEAR = "linear"
BOUNDED = "bounded"  # tanh, range (-1, 1)
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    layers: list  # [(W (out x in), b (out,)), ...]
    activation: str = "relu"
    output_map: str = LINEAR

    def __post_init__(self):
        for (W0, _), (W1, _) in zip(self.layers, self.layers[1:]):
            if W1.shape[1] != W0.shape[0]:
                raise ValueError("layer dimensions do not chain")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.output_map not in (LINEAR, BOUNDED):
            raise ValueError(f"unknown output map {self.output_map!r}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in self.layers for a in pair]

    def copy(self) -> "MlpParams":
        return MlpParams([(W.copy(), b.copy()) for W, b in self.layers],
                         self.activation, self.output_map)

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_mlp(sizes, rng: np.random.Generator, output_map: str = LINEAR) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append((W, b))
    return MlpParams(layers, "relu", output_map)


@dataclass
class Tape:
    inputs: list  # input to each layer
    pre: list  # pre-activation of each layer
    y: np.ndarray
    squeeze: bool


def forward(p: MlpParams, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != p.in_dim:
        raise ValueError(f"input width {h.shape[1]} != network input {p.in_dim}")
    inputs, pre = [], []
    last = len(p.layers) - 1
    for i, (W, b) in enumerate(p.layers):
        inputs.append(h)
        z = h @ W.T + b
        pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
        elif p.output_map == BOUNDED:
            h = np.tanh(z)
        else:
            h = z
    y = h[0] if squeeze else h
    return y, Tape(inputs, pre, h, squeeze)


def backward(p: MlpParams, tape: Tape, dy, param_grads: bool = True):
    """Gradients of sum(dy * y) w.r.t. parameters (flat list matching ``p.arrays()``)
    and w.r.t. the input. With ``param_grads=False`` the list is empty."""
    if len(tape.pre) != len(p.layers):
        raise ValueError("tape does not belong to this network")
    g = np.asarray(dy, dtype=float)
    if tape.squeeze:
        g = g[None, :]
    if g.shape != tape.y.shape:
        raise ValueError(f"cotangent shape {g.shape} != output shape {tape.y.shape}")
    if p.output_map == BOUNDED:
        g = g * (1.0 - tape.y**2)
    grads = [None] * (2 * len(p.layers)) if param_grads else []
    for i in range(len(p.layers) - 1, -1, -1):
        W, _ = p.layers[i]
        if param_grads:
            grads[2 * i] = g.T @ tape.inputs[i]
            grads[2 * i + 1] = g.sum(axis=0)
        g = g @ W
        if i > 0:
            g = g * (tape.pre[i - 1] > 0)
    dx = g[0] if tape.squeeze else g
    return grads, dx


def smooth_l1(pred, target, beta: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean SmoothL1 over all elements and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = pred - target
    a = np.abs(d)
    quad = a < beta
    loss = np.where(quad, 0.5 * d * d / beta, a - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d)) / d.size
    return float(loss.mean()), grad


@dataclass
class OptState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, p: MlpParams, lr: float, **kw) -> "OptState":
        arrs = p.arrays()
        return cls(lr, m=[np.zeros_like(a) for a in arrs], v=[np.zeros_like(a) for a in arrs], **kw)


def adam_step(p: MlpParams, grads, opt: OptState) -> tuple[MlpParams, OptState]:
    """Bias-corrected Adam; updates ``p`` and ``opt`` in place and returns them."""
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for a, g, m, v in zip(p.arrays(), grads, opt.m, opt.v):
        if a.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        a -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return p, opt


def soft_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    """target <- tau * online + (1 - tau) * target, in place."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    for t, o in zip(target.arrays(), online.arrays()):
        if t.shape != o.shape:
            raise ValueError("shape mismatch in soft update")
        t *= 1.0 - tau
        t += tau * o
    return target


# --------------------------------------------------------------------------- checkpoints


def save_params(named: dict[str, MlpParams], path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write networks as an ``.npz`` of row-major arrays plus a JSON layout record."""
    arrays = {}
    layout = {"version": CHECKPOINT_VERSION, "nets": {}}
    for name, p in named.items():
        layout["nets"][name] = {
            "activation": p.activation,
            "output_map": p.output_map,
            "shapes": [list(W.shape) for W, _ in p.layers],
        }
        for i, (W, b) in enumerate(p.layers):
            arrays[f"{name}/W{i}"] = np.ascontiguousarray(W)
            arrays[f"{name}/b{i}"] = np.ascontiguousarray(b)
    for key, a in (extra or {}).items():
        arrays[f"extra/{key}"] = np.asarray(a)
    arrays["__layout__"] = np.frombuffer(json.dumps(layout, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_params(path) -> tuple[dict[str, MlpParams], dict[str, np.ndarray]]:
    with np.load(path) as z:
        layout = json.loads(bytes(z["__layout__"]).decode())
        if layout.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {layout.get('version')}")
        nets = {}
        for name, spec in layout["nets"].items():
            layers = []
            for i, shape in enumerate(spec["shapes"]):
                W = z[f"{name}/W{i}"].copy()
                if list(W.shape) != shape:
                    raise ValueError(f"checkpoint layer {name}/{i} has wrong shape")
                layers.append((W, z[f"{name}/b{i}"].copy()))
            nets[name] = MlpParams(layers, spec["activation"], spec["output_map"])
        extra = {k[len("extra/"):]: z[k].copy() for k in z.files if k.startswith("extra/")}
    return nets, extra
