"""Dense ReLU networks, the ADAM optimizer, and checkpoint serialization."""
from __future__ import annotations

import base64
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = ("relu", "sigmoid", "identity")


@dataclass
class DenseLayer:
    weight: Tensor
    bias: Tensor
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ad.ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} are inconsistent")

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.add_bias(ad.matmul(x, self.weight), self.bias)
        if self.activation == "relu":
            return ad.relu(h)
        if self.activation == "sigmoid":
            return ad.sigmoid(h)
        return h


@dataclass
class Mlp:
    layers: list

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ad.ShapeError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")

    @property
    def dims(self) -> list:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def activations(self) -> list:
        return [layer.activation for layer in self.layers]

    def parameters(self) -> list:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "Mlp":
        return Mlp([DenseLayer(Tensor(l.weight.data.copy(), requires_grad=True),
                               Tensor(l.bias.data.copy(), requires_grad=True),
                               l.activation) for l in self.layers])

    def __call__(self, x) -> Tensor:
        return forward(self, x)


def init_mlp(dims: Sequence[int], activations=None, seed: int = 0) -> Mlp:
    """He-initialized MLP: weights ~ N(0, 2/fan_in), biases zero.

    ``activations`` may be a single name applied to hidden layers, or one name
    per layer. By default hidden layers use relu and the last layer identity.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("need at least input and output widths")
    if any(d <= 0 for d in dims):
        raise ValueError(f"layer widths must be positive, got {dims}")
    n = len(dims) - 1
    if activations is None or isinstance(activations, str):
        hidden = activations or "relu"
        activations = [hidden] * (n - 1) + ["identity"]
    activations = list(activations)
    if len(activations) != n:
        raise ValueError(f"expected {n} activations, got {len(activations)}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append(DenseLayer(Tensor(w, requires_grad=True),
                                 Tensor(np.zeros(fan_out), requires_grad=True), act))
    return Mlp(layers)


def forward(net: Mlp, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2 or x.shape[1] != net.layers[0].n_in:
        raise ad.ShapeError(f"input {x.shape} does not match first layer width {net.layers[0].n_in}")
    for layer in net.layers:
        x = layer(x)
    return x


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class NonFiniteError(FloatingPointError):
    pass


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected ADAM update, applied in place to ``params``."""
    if len(params) != len(grads):
        raise ad.ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ad.ShapeError("optimizer state does not match parameter list")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ad.ShapeError(f"param {i}: shape {p.shape}, grad {g.shape}, state {state.m[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {i} (shape {p.shape})")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.lr:
            p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# -- checkpoints --------------------------------------------------------------
#
# Line-oriented UTF-8 text. First line "vaelab-checkpoint 1". Then lines of
#   meta <key> <value>
#   array <name> <comma-separated shape> <base64 of little-endian float64>
# Arrays of the same net are named "<net>.<layer index>.weight|bias" and each
# net has "meta <net>.activations relu,relu,identity". Optimizer moments are
# "adam.m.<i>" / "adam.v.<i>" in parameter order.

CHECKPOINT_MAGIC = "vaelab-checkpoint 1"


class CheckpointError(ValueError):
    pass


def _encode(a: np.ndarray) -> str:
    shape = ",".join(str(d) for d in a.shape) or "-"
    return shape + " " + base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode()


def _decode(shape: str, payload: str) -> np.ndarray:
    dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
    return np.frombuffer(base64.b64decode(payload), dtype="<f8").reshape(dims).copy()


def save_checkpoint(path, nets: dict, meta: dict, adam: Optional[AdamState] = None) -> None:
    lines = [CHECKPOINT_MAGIC]
    for k, v in meta.items():
        lines.append(f"meta {k} {v}")
    for name, net in nets.items():
        lines.append(f"meta {name}.activations {','.join(net.activations)}")
        for i, layer in enumerate(net.layers):
            lines.append(f"array {name}.{i}.weight {_encode(layer.weight.data)}")
            lines.append(f"array {name}.{i}.bias {_encode(layer.bias.data)}")
    if adam is not None:
        lines.append(f"meta adam.lr {adam.lr!r}")
        lines.append(f"meta adam.beta1 {adam.beta1!r}")
        lines.append(f"meta adam.beta2 {adam.beta2!r}")
        lines.append(f"meta adam.eps {adam.eps!r}")
        lines.append(f"meta adam.t {adam.t}")
        for i, (m, v) in enumerate(zip(adam.m, adam.v)):
            lines.append(f"array adam.m.{i} {_encode(m)}")
            lines.append(f"array adam.v.{i} {_encode(v)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Return (nets, meta, adam_state_or_None)."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a vaelab checkpoint")
    meta, arrays = {}, {}
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split(" ")
        if parts[0] == "meta" and len(parts) >= 3:
            meta[parts[1]] = " ".join(parts[2:])
        elif parts[0] == "array" and len(parts) == 4:
            arrays[parts[1]] = _decode(parts[2], parts[3])
        else:
            raise CheckpointError(f"{path}:{n}: malformed line")
    nets = {}
    for key in [k for k in meta if k.endswith(".activations")]:
        name = key[: -len(".activations")]
        acts = meta.pop(key).split(",")
        layers = []
        for i, act in enumerate(acts):
            try:
                w, b = arrays[f"{name}.{i}.weight"], arrays[f"{name}.{i}.bias"]
            except KeyError:
                raise CheckpointError(f"{path}: missing arrays for {name} layer {i}") from None
            layers.append(DenseLayer(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), act))
        nets[name] = Mlp(layers)
    adam = None
    if "adam.t" in meta:
        adam = AdamState(lr=float(meta.pop("adam.lr")), beta1=float(meta.pop("adam.beta1")),
                         beta2=float(meta.pop("adam.beta2")), eps=float(meta.pop("adam.eps")),
                         t=int(meta.pop("adam.t")))
        i = 0
        while f"adam.m.{i}" in arrays:
            adam.m.append(arrays[f"adam.m.{i}"])
            adam.v.append(arrays[f"adam.v.{i}"])
            i += 1
    return nets, meta, adam
