"""Parametric classifiers and their optimizer.

Models are plain layer stacks (dense / relu / flatten / conv) with no
batch normalization, so logits are a deterministic function of the
input. Parameters live in a named, ordered store; the trainer's single
thread of control owns mutation, evaluation reads frozen snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from . import autodiff as ad

__all__ = [
    "Dense", "Relu", "Flatten", "Conv", "ModelSpec", "Parameters",
    "init", "forward", "AdamState", "adam_step", "LrSchedule", "lr_at",
]


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int
    padding: Optional[int] = None  # None -> kernel // 2 ("same" for stride 1)

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


Layer = Union[Dense, Relu, Flatten, Conv]


@dataclass(frozen=True)
class ModelSpec:
    """Layer topology mapping inputs of ``input_shape`` to ``classes`` logits.

    ``input_shape`` is per-example: (D,) for flat inputs or (C, H, W).
    Construction runs shape inference and rejects stacks that do not
    compose or do not end in exactly ``classes`` outputs.
    """

    layers: tuple
    input_shape: tuple
    classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = _infer(layer, shape, i)
        if shape != (self.classes,):
            raise ValueError(
                f"model ends with shape {shape}, expected ({self.classes},) logits")

    @staticmethod
    def mlp(input_dim: int, hidden: Iterable[int], classes: int) -> "ModelSpec":
        layers: list[Layer] = []
        prev = input_dim
        for width in hidden:
            layers += [Dense(prev, width), Relu()]
            prev = width
        layers.append(Dense(prev, classes))
        return ModelSpec(tuple(layers), (input_dim,), classes)

    @staticmethod
    def small_conv(input_shape: tuple, channels: Iterable[int], classes: int,
                   kernel: int = 3) -> "ModelSpec":
        c, h, w = input_shape
        layers: list[Layer] = []
        prev = c
        for ch in channels:
            layers += [Conv(prev, ch, kernel), Relu()]
            prev = ch
        layers.append(Flatten())
        layers.append(Dense(prev * h * w, classes))
        return ModelSpec(tuple(layers), tuple(input_shape), classes)

    def to_dict(self) -> dict:
        out = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                out.append({"kind": "dense", "in": layer.in_dim, "out": layer.out_dim})
            elif isinstance(layer, Relu):
                out.append({"kind": "relu"})
            elif isinstance(layer, Flatten):
                out.append({"kind": "flatten"})
            else:
                out.append({"kind": "conv", "in": layer.in_channels,
                            "out": layer.out_channels, "kernel": layer.kernel,
                            "padding": layer.padding})
        return {"layers": out, "input_shape": list(self.input_shape),
                "classes": self.classes}

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        layers: list[Layer] = []
        for entry in d["layers"]:
            kind = entry["kind"]
            if kind == "dense":
                layers.append(Dense(entry["in"], entry["out"]))
            elif kind == "relu":
                layers.append(Relu())
            elif kind == "flatten":
                layers.append(Flatten())
            elif kind == "conv":
                layers.append(Conv(entry["in"], entry["out"], entry["kernel"],
                                   entry.get("padding")))
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return ModelSpec(tuple(layers), tuple(d["input_shape"]), d["classes"])


def _infer(layer: Layer, shape: tuple, index: int) -> tuple:
    if isinstance(layer, Dense):
        if shape != (layer.in_dim,):
            raise ValueError(f"layer {index}: dense expects ({layer.in_dim},), got {shape}")
        return (layer.out_dim,)
    if isinstance(layer, Relu):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Conv):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ValueError(f"layer {index}: conv expects {layer.in_channels} channels, got {shape}")
        c, h, w = shape
        hp = h + 2 * layer.pad - layer.kernel + 1
        wp = w + 2 * layer.pad - layer.kernel + 1
        if hp <= 0 or wp <= 0:
            raise ValueError(f"layer {index}: kernel {layer.kernel} too large for {shape}")
        return (layer.out_channels, hp, wp)
    raise ValueError(f"unknown layer type {type(layer).__name__}")


class Parameters:
    """Ordered, named float64 parameter arrays matching a ModelSpec."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name!r} contains non-finite values")

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self.arrays.items()})

    def bind(self, tape: ad.Tape) -> dict[str, ad.Tensor]:
        """Register every array as a differentiable leaf on ``tape``."""
        return {name: tape.leaf(arr) for name, arr in self.arrays.items()}

    def names(self):
        return list(self.arrays)

    def __eq__(self, other):
        if not isinstance(other, Parameters):
            return NotImplemented
        return (self.names() == other.names()
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays))


def _param_names(spec: ModelSpec):
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            yield i, layer, f"layer{i}.w", f"layer{i}.b"
        elif isinstance(layer, Conv):
            yield i, layer, f"layer{i}.w", f"layer{i}.b"


def init(spec: ModelSpec, seed: int) -> Parameters:
    """He-scaled normal weights, zero biases, reproducible from seed."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for _, layer, wname, bname in _param_names(spec):
        if isinstance(layer, Dense):
            fan_in = layer.in_dim
            arrays[wname] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                       size=(layer.in_dim, layer.out_dim))
            arrays[bname] = np.zeros(layer.out_dim)
        else:
            fan_in = layer.in_channels * layer.kernel ** 2
            arrays[wname] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                       size=(layer.out_channels, layer.in_channels,
                                             layer.kernel, layer.kernel))
            arrays[bname] = np.zeros(layer.out_channels)
    return Parameters(arrays)


def forward(spec: ModelSpec, params, x) -> ad.Tensor:
    """Logits for a batch. ``params`` is a Parameters store (evaluation)
    or a bound name->Tensor mapping (training); ``x`` an array or Tensor."""
    if isinstance(params, Parameters):
        params = {k: ad.Tensor(v) for k, v in params.arrays.items()}
    h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    if h.ndim < 2 or h.shape[1:] != spec.input_shape:
        raise ad.ShapeError(
            f"forward: input shape {h.shape} does not match (batch,) + {spec.input_shape}")
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            h = ad.add(ad.matmul(h, params[f"layer{i}.w"]), params[f"layer{i}.b"])
        elif isinstance(layer, Relu):
            h = ad.relu(h)
        elif isinstance(layer, Flatten):
            h = ad.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
        else:
            h = ad.conv2d(h, params[f"layer{i}.w"], params[f"layer{i}.b"],
                          padding=layer.pad)
    return h


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    """First/second moment estimates plus step counter and hyperparameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params: Parameters, lr: float = 1e-4, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return AdamState(m={k: np.zeros_like(v) for k, v in params.arrays.items()},
                         v={k: np.zeros_like(v) for k, v in params.arrays.items()},
                         t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: Parameters,
              grads: Mapping[str, np.ndarray]) -> tuple[Parameters, AdamState]:
    """One bias-corrected Adam update, in place; returns (params, state)."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name in params.arrays:
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"adam_step: non-finite gradient for parameter {name!r}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * np.square(g)
        mhat = state.m[name] / (1 - b1 ** state.t)
        vhat = state.v[name] / (1 - b2 ** state.t)
        params.arrays[name] = params.arrays[name] - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# learning-rate schedule

@dataclass(frozen=True)
class LrSchedule:
    """Staircase decay: rate drops by ``factor`` at each milestone epoch
    (inclusive: the decay applies from the milestone epoch onward)."""

    base_rate: float
    milestones: tuple = ()
    factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if not (0.0 < self.factor <= 1.0):
            raise ValueError("decay factor must be in (0, 1]")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_rate * schedule.factor ** passed
