"""Small reverse-mode differentiation engine over dense (batch, feature) float64 arrays.

Every differentiable operation appends a record to a :class:`Tape`; a record
keeps the op name, the ids of its inputs and the forward value, plus a
closure mapping the upstream gradient to one gradient per input.  Because a
record can only reference nodes that already exist, the tape is in
topological order by construction and :func:`backward` is a single reverse
sweep.

The module also carries the multilayer perceptron used for generators and
critics, and an Adam optimizer that works on any ``name -> array`` mapping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from kgans.errors import ContractError, PoisonedStateError, ShapeError

LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.9
BN_EPS = 1e-5

ACTIVATIONS = ("leaky_relu", "sigmoid", "linear")

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Append-only record of a computation."""

    def __init__(self) -> None:
        self.ops: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self._backward: list[BackwardFn | None] = []
        self.params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.values)

    def record(
        self,
        op: str,
        value: np.ndarray,
        inputs: tuple[Tensor, ...] = (),
        backward: BackwardFn | None = None,
    ) -> Tensor:
        # inputs already exist, so their ids are smaller than the new one
        ids = tuple(t.id for t in inputs)
        node_id = len(self.values)
        self.ops.append(op)
        self.inputs.append(ids)
        self.values.append(value)
        self._backward.append(backward)
        return Tensor(self, node_id, value)

    def leaf(self, value, name: str | None = None) -> Tensor:
        """Register an input; named leaves are treated as parameters by :func:`backward`."""
        value = np.asarray(value, dtype=np.float64)
        node = self.record("param" if name else "const", value)
        if name is not None:
            if name in self.params:
                raise ContractError(f"parameter {name!r} registered twice on one tape")
            self.params[name] = node.id
        return node

    def constant(self, value) -> Tensor:
        return self.leaf(value)


class Tensor:
    """Handle to one node of a tape. The wrapped array must not be mutated."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape: Tape, node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, op={self.tape.ops[self.id]!r}, shape={self.shape})"

    def _lift(self, other) -> Tensor:
        if isinstance(other, Tensor):
            if other.tape is not self.tape:
                raise ContractError("cannot combine tensors from different tapes")
            return other
        return self.tape.constant(other)

    # arithmetic

    def __add__(self, other) -> Tensor:
        other = self._lift(other)
        sa, sb = self.shape, other.shape
        return self.tape.record(
            "add",
            self.value + other.value,
            (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = self._lift(other)
        sa, sb = self.shape, other.shape
        return self.tape.record(
            "sub",
            self.value - other.value,
            (self, other),
            lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        )

    def __rsub__(self, other) -> Tensor:
        return self._lift(other) - self

    def __neg__(self) -> Tensor:
        return self.tape.record("neg", -self.value, (self,), lambda g: (-g,))

    def __mul__(self, other) -> Tensor:
        other = self._lift(other)
        a, b = self.value, other.value
        return self.tape.record(
            "mul",
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = self._lift(other)
        a, b = self.value, other.value
        return self.tape.record(
            "div",
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __matmul__(self, other) -> Tensor:
        other = self._lift(other)
        a, b = self.value, other.value
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        return self.tape.record("matmul", a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    # reductions

    def sum(self, axis: int | None = None) -> Tensor:
        shape = self.shape
        if axis is None:
            return self.tape.record(
                "sum", np.asarray(self.value.sum()), (self,), lambda g: (np.broadcast_to(g, shape),)
            )
        return self.tape.record(
            "sum",
            self.value.sum(axis=axis),
            (self,),
            lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),),
        )

    def mean(self, axis: int | None = None) -> Tensor:
        n = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / n)

    # elementwise

    def abs(self) -> Tensor:
        x = self.value
        return self.tape.record("abs", np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def square(self) -> Tensor:
        x = self.value
        return self.tape.record("square", x * x, (self,), lambda g: (2.0 * g * x,))

    def relu(self) -> Tensor:
        mask = self.value > 0
        return self.tape.record("relu", np.where(mask, self.value, 0.0), (self,), lambda g: (g * mask,))

    def leaky_relu(self, slope: float = LEAKY_SLOPE) -> Tensor:
        scale = np.where(self.value > 0, 1.0, slope)
        return self.tape.record("leaky_relu", self.value * scale, (self,), lambda g: (g * scale,))

    def sigmoid(self) -> Tensor:
        s = _sigmoid(self.value)
        return self.tape.record("sigmoid", s, (self,), lambda g: (g * s * (1.0 - s),))

    # row plumbing

    def rows(self, start: int, stop: int) -> Tensor:
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            full[start:stop] = g
            return (full,)

        return self.tape.record("rows", self.value[start:stop], (self,), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    tape = parts[0].tape
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return tape.record("concat", np.concatenate([p.value for p in parts], axis=0), tuple(parts), back)


def batch_norm_train(x: Tensor, scale: Tensor, shift: Tensor, eps: float = BN_EPS) -> Tensor:
    """Normalize each feature with the batch's own mean and (biased) variance."""
    xv = x.value
    n = xv.shape[0]
    mu = xv.mean(axis=0)
    inv = 1.0 / np.sqrt(xv.var(axis=0) + eps)
    xhat = (xv - mu) * inv
    gamma = scale.value

    def back(g):
        dxhat = g * gamma
        dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return x.tape.record("batch_norm", gamma * xhat + shift.value, (x, scale, shift), back)


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every named leaf on the tape.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    if loss.tape is not tape:
        raise ContractError("loss tensor belongs to another tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * (loss.id + 1)
    grads[loss.id] = np.ones_like(loss.value)
    for node in range(loss.id, -1, -1):
        g = grads[node]
        fn = tape._backward[node]
        if g is None or fn is None:
            continue
        for parent, pg in zip(tape.inputs[node], fn(g)):
            if pg is None:
                continue
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg
    out: dict[str, np.ndarray] = {}
    for name, node in tape.params.items():
        g = grads[node] if node <= loss.id else None
        out[name] = np.zeros_like(tape.values[node]) if g is None else np.asarray(g, dtype=np.float64)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(x: np.ndarray, kind: str, slope: float) -> np.ndarray:
    if kind == "leaky_relu":
        return np.where(x > 0, x, slope * x)
    if kind == "sigmoid":
        return _sigmoid(x)
    return x


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "linear"
    bn_scale: np.ndarray | None = None
    bn_shift: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    @property
    def batch_norm(self) -> bool:
        return self.bn_scale is not None


@dataclass
class MlpParams:
    """Dense network: each layer is affine -> optional batch-norm -> activation."""

    layers: list[Layer]
    leaky_slope: float = LEAKY_SLOPE
    bn_momentum: float = BN_MOMENTUM
    bn_eps: float = BN_EPS

    def __post_init__(self):
        if not self.layers:
            raise ContractError("an MLP needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ContractError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.weight.shape[1],):
                raise ShapeError(f"layer {i}: bias shape {layer.bias.shape} vs weight {layer.weight.shape}")
            if i and self.layers[i - 1].weight.shape[1] != layer.weight.shape[0]:
                raise ShapeError(f"layer {i}: input dim does not chain with previous layer")
            if layer.batch_norm and np.any(layer.running_var <= 0):
                raise ContractError(f"layer {i}: running variance must be positive")

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        activations: Sequence[str],
        batch_norm: Sequence[bool] | None = None,
        rng: np.random.Generator | None = None,
        **kwargs,
    ) -> MlpParams:
        """Glorot-uniform weights, zero biases; ``sizes`` includes the input width."""
        if len(sizes) != len(activations) + 1:
            raise ContractError("need one activation per layer")
        rng = rng if rng is not None else np.random.default_rng()
        batch_norm = batch_norm or [False] * len(activations)
        layers = []
        for fan_in, fan_out, act, bn in zip(sizes[:-1], sizes[1:], activations, batch_norm):
            if fan_in < 1 or fan_out < 1:
                raise ContractError("layer sizes must be positive")
            a = math.sqrt(6.0 / (fan_in + fan_out))
            layer = Layer(rng.uniform(-a, a, size=(fan_in, fan_out)), np.zeros(fan_out), act)
            if bn:
                layer.bn_scale = np.ones(fan_out)
                layer.bn_shift = np.zeros(fan_out)
                layer.running_mean = np.zeros(fan_out)
                layer.running_var = np.ones(fan_out)
            layers.append(layer)
        return cls(layers, **kwargs)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name; the arrays are the live storage, not copies."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{i}.weight"] = layer.weight
            out[f"{i}.bias"] = layer.bias
            if layer.batch_norm:
                out[f"{i}.bn_scale"] = layer.bn_scale
                out[f"{i}.bn_shift"] = layer.bn_shift
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if layer.batch_norm:
                out[f"{i}.running_mean"] = layer.running_mean
                out[f"{i}.running_var"] = layer.running_var
        return out

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.named_parameters().items()}

    def copy(self) -> MlpParams:
        layers = [
            Layer(**{k: (None if v is None else v.copy()) if k != "activation" else v for k, v in vars(l).items()})
            for l in self.layers
        ]
        return MlpParams(layers, self.leaky_slope, self.bn_momentum, self.bn_eps)

    def state_dict(self) -> dict:
        """JSON-ready description: flat float lists plus shapes."""
        arrays = {**self.named_parameters(), **self.buffers()}
        return {
            "activations": [l.activation for l in self.layers],
            "batch_norm": [l.batch_norm for l in self.layers],
            "leaky_slope": self.leaky_slope,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
            "arrays": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in arrays.items()},
        }

    @classmethod
    def from_state_dict(cls, state: Mapping) -> MlpParams:
        arrays = {
            k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in state["arrays"].items()
        }
        layers = []
        for i, (act, bn) in enumerate(zip(state["activations"], state["batch_norm"])):
            layer = Layer(arrays[f"{i}.weight"], arrays[f"{i}.bias"], act)
            if bn:
                layer.bn_scale = arrays[f"{i}.bn_scale"]
                layer.bn_shift = arrays[f"{i}.bn_shift"]
                layer.running_mean = arrays[f"{i}.running_mean"]
                layer.running_var = arrays[f"{i}.running_var"]
            layers.append(layer)
        return cls(layers, state["leaky_slope"], state["bn_momentum"], state["bn_eps"])


def forward(
    params: MlpParams,
    batch,
    mode: str = "train",
    tape: Tape | None = None,
    update_stats: bool = True,
    prefix: str | None = "",
) -> Tensor | np.ndarray:
    """Run the network on a (B, input_dim) batch.

    With a tape, parameters are registered as leaves named ``prefix + name``
    (or as constants when ``prefix`` is None) and a :class:`Tensor` is returned; without one the plain array is
    returned.  ``batch`` may itself be a Tensor on the same tape, which is how
    a critic is chained after a generator.  In train mode batch-norm layers
    use batch statistics and (if ``update_stats``) fold them into the running
    estimates; eval mode reads the running estimates only.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    x_val = batch.value if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    if x_val.ndim != 2 or x_val.shape[1] != params.input_dim:
        raise ShapeError(f"batch shape {x_val.shape} does not match input dim {params.input_dim}")
    train = mode == "train"
    update = train and update_stats and x_val.shape[0] > 1
    if tape is None:
        return _forward_array(params, x_val, train, update)

    def leaf(value, name):
        return tape.constant(value) if prefix is None else tape.leaf(value, f"{prefix}{i}.{name}")

    x = batch if isinstance(batch, Tensor) else tape.constant(x_val)
    for i, layer in enumerate(params.layers):
        w = leaf(layer.weight, "weight")
        b = leaf(layer.bias, "bias")
        x = x @ w + b
        if layer.batch_norm:
            if update:
                _fold_stats(params, layer, x.value)
            gamma = leaf(layer.bn_scale, "bn_scale")
            beta = leaf(layer.bn_shift, "bn_shift")
            if train:
                x = batch_norm_train(x, gamma, beta, params.bn_eps)
            else:
                inv = 1.0 / np.sqrt(layer.running_var + params.bn_eps)
                x = (x - layer.running_mean) * inv * gamma + beta
        if layer.activation == "leaky_relu":
            x = x.leaky_relu(params.leaky_slope)
        elif layer.activation == "sigmoid":
            x = x.sigmoid()
    return x


def _forward_array(params: MlpParams, x: np.ndarray, train: bool, update: bool) -> np.ndarray:
    for layer in params.layers:
        x = x @ layer.weight + layer.bias
        if layer.batch_norm:
            if update:
                _fold_stats(params, layer, x)
            if train:
                mu, var = x.mean(axis=0), x.var(axis=0)
            else:
                mu, var = layer.running_mean, layer.running_var
            x = (x - mu) / np.sqrt(var + params.bn_eps) * layer.bn_scale + layer.bn_shift
        x = _activate(x, layer.activation, params.leaky_slope)
    return x


def _fold_stats(params: MlpParams, layer: Layer, x: np.ndarray) -> None:
    # running variance uses the unbiased estimate; callers guarantee B >= 2
    m = params.bn_momentum
    layer.running_mean *= m
    layer.running_mean += (1 - m) * x.mean(axis=0)
    layer.running_var *= m
    layer.running_var += (1 - m) * x.var(axis=0, ddof=1)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self) -> None:
        self.step = 0
        self.m.clear()
        self.v.clear()

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "m": {k: {"shape": list(a.shape), "data": a.ravel().tolist()} for k, a in self.m.items()},
            "v": {k: {"shape": list(a.shape), "data": a.ravel().tolist()} for k, a in self.v.items()},
        }

    @classmethod
    def from_state_dict(cls, state: Mapping) -> AdamState:
        def load(d):
            return {k: np.asarray(a["data"], dtype=np.float64).reshape(a["shape"]) for k, a in d.items()}

        return cls(state["lr"], state["beta1"], state["beta2"], state["eps"], state["step"], load(state["m"]), load(state["v"]))


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place to ``params``.

    Every gradient is checked before anything is written, so a NaN raises
    :class:`PoisonedStateError` with both params and state untouched.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g)
        if g.shape != p.shape and g.shape != ():
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise PoisonedStateError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
