"""Small dense feedforward network with exact backprop and SGD.

The network exposes two outputs per forward pass: the representation (the
output of ``repr_layer_index``) and the logits (the output of the final
layer).  Layers after the representation layer form the classifier head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ACTIVATIONS = ("relu", "identity")


class ShapeError(ValueError):
    """Raised when an input or gradient does not match the network's shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a gradient or loss becomes NaN or infinite."""


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class ForwardRecord:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    outputs: list[np.ndarray]


@dataclass
class DenseNet:
    layers: list[Layer]
    repr_layer_index: int
    num_classes: int
    # Fixed (untrained) input standardization: x -> (x - input_mean) / input_scale.
    input_mean: np.ndarray | None = None
    input_scale: np.ndarray | None = None
    last_record: ForwardRecord | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"layer {i}: bias shape {layer.bias.shape} != ({layer.out_dim},)")
            if i > 0 and self.layers[i - 1].out_dim != layer.in_dim:
                raise ShapeError(
                    f"layer {i}: input dim {layer.in_dim} does not chain with "
                    f"layer {i - 1} output dim {self.layers[i - 1].out_dim}"
                )
        if not 0 <= self.repr_layer_index < len(self.layers):
            raise ShapeError(f"repr_layer_index {self.repr_layer_index} out of range")
        if (self.input_mean is None) != (self.input_scale is None):
            raise ValueError("input_mean and input_scale must be set together")
        if self.input_mean is not None:
            self.input_mean = np.asarray(self.input_mean, dtype=float)
            self.input_scale = np.asarray(self.input_scale, dtype=float)
            if self.input_mean.shape != (self.in_dim,) or self.input_scale.shape != (self.in_dim,):
                raise ShapeError(f"input scaling must have shape ({self.in_dim},)")
            if not np.all(self.input_scale > 0):
                raise ValueError("input_scale must be positive")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def repr_dim(self) -> int:
        return self.layers[self.repr_layer_index].out_dim

    def parameters(self) -> list[np.ndarray]:
        """Flat list of parameter arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "DenseNet":
        layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        mean = None if self.input_mean is None else self.input_mean.copy()
        scale = None if self.input_scale is None else self.input_scale.copy()
        return DenseNet(layers, self.repr_layer_index, self.num_classes, mean, scale)

    def set_input_scaling(self, x: np.ndarray, rel_floor: float = 0.1, min_scale: float = 1e-8) -> None:
        """Standardize inputs with the column mean and std of ``x``.

        Each column's scale is at least ``rel_floor`` times the mean column
        std, so a column that is (nearly) constant in ``x`` cannot blow up
        inputs that vary there, e.g. border pixels of unseen rotations.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.in_dim or len(x) == 0:
            raise ShapeError(f"scaling data must be (n>0, {self.in_dim})")
        std = x.std(axis=0)
        self.input_mean = x.mean(axis=0)
        self.input_scale = np.maximum(std, max(rel_floor * float(std.mean()), min_scale))

    def state_dict(self) -> dict:
        return {
            "repr_layer_index": self.repr_layer_index,
            "num_classes": self.num_classes,
            "layers": [
                {"weight": l.weight.tolist(), "bias": l.bias.tolist(), "activation": l.activation}
                for l in self.layers
            ],
            "input_mean": None if self.input_mean is None else self.input_mean.tolist(),
            "input_scale": None if self.input_scale is None else self.input_scale.tolist(),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "DenseNet":
        layers = [
            Layer(np.asarray(l["weight"], dtype=float), np.asarray(l["bias"], dtype=float), l["activation"])
            for l in state["layers"]
        ]
        return cls(layers, state["repr_layer_index"], state["num_classes"], state.get("input_mean"), state.get("input_scale"))


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net: DenseNet) -> "Gradients":
        return cls([np.zeros_like(l.weight) for l in net.layers], [np.zeros_like(l.bias) for l in net.layers])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scale(self, c: float) -> "Gradients":
        return Gradients([c * w for w in self.weights], [c * b for b in self.biases])


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    velocity: list[np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


def init_dense_net(
    layer_sizes: list[int],
    num_classes: int,
    rng: np.random.Generator,
    repr_layer_index: int | None = None,
    hidden_activation: str = "relu",
) -> DenseNet:
    """Build a net with Glorot-uniform weights and zero biases.

    ``layer_sizes`` lists every width including input and output, e.g.
    ``[256, 64, 64, 10]``.  Hidden layers use ``hidden_activation``; the last
    layer is linear.  By default the representation is the last hidden layer.
    """
    if len(layer_sizes) < 2:
        raise ShapeError("need at least input and output sizes")
    layers = []
    n = len(layer_sizes) - 1
    for i in range(n):
        fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_out, fan_in))
        act = "identity" if i == n - 1 else hidden_activation
        layers.append(Layer(w, np.zeros(fan_out), act))
    if repr_layer_index is None:
        repr_layer_index = max(n - 2, 0)
    return DenseNet(layers, repr_layer_index, num_classes)


def forward(net: DenseNet, batch: np.ndarray, record: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(repr, logits)`` for a batch and optionally record activations for backward."""
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {x.shape}")
    if net.input_mean is not None and x.shape[1] == net.in_dim:
        x = (x - net.input_mean) / net.input_scale
    inputs, pres, outs = [], [], []
    for i, layer in enumerate(net.layers):
        if x.shape[1] != layer.in_dim:
            raise ShapeError(f"layer {i}: expected input width {layer.in_dim}, got {x.shape[1]}")
        z = x @ layer.weight.T + layer.bias
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        inputs.append(x)
        pres.append(z)
        outs.append(h)
        x = h
    net.last_record = ForwardRecord(inputs, pres, outs) if record else None
    return outs[net.repr_layer_index], outs[-1]


def backward(
    net: DenseNet,
    d_repr: np.ndarray | None = None,
    d_logits: np.ndarray | None = None,
) -> Gradients:
    """Reverse-mode gradients of the last recorded forward pass.

    ``d_repr`` and ``d_logits`` are the gradients of the scalar objective with
    respect to the two forward outputs; either may be omitted.
    """
    rec = net.last_record
    if rec is None:
        raise RuntimeError("backward called without a recorded forward pass")
    grads = Gradients.zeros_like(net)
    g = None
    for i in range(len(net.layers) - 1, -1, -1):
        upstream = None
        if i == len(net.layers) - 1 and d_logits is not None:
            upstream = np.asarray(d_logits, dtype=float)
        if i == net.repr_layer_index and d_repr is not None:
            dr = np.asarray(d_repr, dtype=float)
            upstream = dr if upstream is None else upstream + dr
        if upstream is not None:
            if upstream.shape != rec.outputs[i].shape:
                raise ShapeError(f"layer {i}: upstream grad shape {upstream.shape} != {rec.outputs[i].shape}")
            g = upstream if g is None else g + upstream
        if g is None:
            continue
        layer = net.layers[i]
        if layer.activation == "relu":
            g = g * (rec.pre[i] > 0)
        grads.weights[i] = g.T @ rec.inputs[i]
        grads.biases[i] = g.sum(axis=0)
        g = g @ layer.weight
    return grads


def sgd_step(net: DenseNet, grads: Gradients, opt: OptimizerState) -> DenseNet:
    """In-place SGD update with L2 weight decay and heavy-ball momentum.

    Update rule (per parameter): ``v = m*v + (g + wd*w); w -= lr*v``.  The
    first step initializes ``v`` to ``g + wd*w``.
    """
    arrays = grads.arrays()
    params = net.parameters()
    if len(arrays) != len(params):
        raise ShapeError("gradient/parameter count mismatch")
    for p, g in zip(params, arrays):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
    first = opt.velocity is None
    if first:
        opt.velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, arrays, opt.velocity):
        d = g + opt.weight_decay * p
        if opt.momentum > 0:
            if first:
                v[...] = d
            else:
                v *= opt.momentum
                v += d
            d = v
        p -= opt.learning_rate * d
    return net


def grad_check(
    net: DenseNet,
    loss_fn: Callable[[DenseNet], tuple[float, Gradients]],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(net)`` must return ``(loss, grads)`` for the current parameters
    (it closes over the batch).  The network's parameters are perturbed in
    place and restored.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    _, grads = loss_fn(net)
    analytic = [g.copy() for g in grads.arrays()]
    worst = 0.0
    for p, ga in zip(net.parameters(), analytic):
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + epsilon
            fp, _ = loss_fn(net)
            p[idx] = orig - epsilon
            fm, _ = loss_fn(net)
            p[idx] = orig
            num = (fp - fm) / (2 * epsilon)
            err = abs(ga[idx] - num) / max(1e-8, abs(ga[idx]) + abs(num))
            worst = max(worst, err)
    return worst
