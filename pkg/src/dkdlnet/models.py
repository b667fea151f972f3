"""Network architectures: CNN teacher, single-layer student, adapter variant.

All three models map a 1 x 1024 spectral window to 10 logits:

  * teacher: six conv blocks (conv -> batchnorm -> relu -> maxpool) followed
    by three fully connected layers; 69,626 parameters
  * student: one conv block without batchnorm plus one fully connected
    layer; 2,830 parameters
  * dkdl-net: the student with its weights frozen and rank-r adapters on
    the conv and FC layers; 6,838 parameters of which 4,008 train

Builders return declarative ModelSpecs; Model binds a spec to weights.
Parameter counting and the layer-table rendering reproduce the published
per-row counts, with batchnorm folded into its conv row (the +2*C_out term).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import lora as lora_mod
from . import tensor as dt
from .tensor import Tensor

INPUT_CHANNELS = 1
INPUT_LENGTH = 1024
NUM_CLASSES = 10
DEFAULT_RANK = 12
DEFAULT_SIGMA = 0.01


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv1d | batchnorm1d | relu | maxpool1d | flatten | linear | lora-conv1d | lora-linear
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    in_features: int = 0
    out_features: int = 0
    kernel: int = 0
    stride: int = 0
    padding: int = 0
    rank: int = 0
    frozen: bool = False
    mode: str = "max"  # pooling only: max | avg


@dataclass(frozen=True)
class ModelSpec:
    name: str  # teacher | student | dkdl-net
    layers: tuple
    num_classes: int = NUM_CLASSES
    input_shape: tuple = (INPUT_CHANNELS, INPUT_LENGTH)


def _conv_block(idx: int, c_in: int, c_out: int, kernel: int, stride: int,
                padding: int, batchnorm: bool, pooling: str) -> list:
    layers = [LayerSpec("conv1d", f"conv{idx}", in_channels=c_in, out_channels=c_out,
                        kernel=kernel, stride=stride, padding=padding)]
    if batchnorm:
        layers.append(LayerSpec("batchnorm1d", f"bn{idx}", in_channels=c_out,
                                out_channels=c_out))
    layers.append(LayerSpec("relu", f"relu{idx}"))
    layers.append(LayerSpec("maxpool1d", f"pool{idx}", kernel=2, stride=2, mode=pooling))
    return layers


def build_teacher(pooling: str = "max") -> ModelSpec:
    convs = [  # (C_in, C_out, K, stride, padding); paddings solve the shape chain
        (1, 16, 64, 8, 28),
        (16, 32, 3, 1, 1),
        (32, 64, 3, 1, 1),
        (64, 64, 3, 1, 1),
        (64, 64, 3, 1, 1),
        (64, 128, 3, 1, 0),
    ]
    layers = []
    for i, (c_in, c_out, k, s, p) in enumerate(convs, start=1):
        layers += _conv_block(i, c_in, c_out, k, s, p, batchnorm=True, pooling=pooling)
    layers.append(LayerSpec("flatten", "flatten"))
    layers.append(LayerSpec("linear", "fc1", in_features=128, out_features=64))
    layers.append(LayerSpec("relu", "relu_fc1"))
    layers.append(LayerSpec("linear", "fc2", in_features=64, out_features=32))
    layers.append(LayerSpec("linear", "fc3", in_features=32, out_features=10))
    return ModelSpec(name="teacher", layers=tuple(layers))


def build_student(pooling: str = "max") -> ModelSpec:
    layers = [
        LayerSpec("conv1d", "conv", in_channels=1, out_channels=4,
                  kernel=64, stride=8, padding=28),
        LayerSpec("relu", "relu"),
        LayerSpec("maxpool1d", "pool", kernel=2, stride=2, mode=pooling),
        LayerSpec("flatten", "flatten"),
        LayerSpec("linear", "fc", in_features=256, out_features=10),
    ]
    return ModelSpec(name="student", layers=tuple(layers))


def build_dkdl_spec(rank: int = DEFAULT_RANK, pooling: str = "max") -> ModelSpec:
    """The student architecture with frozen base layers and adapters attached."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    layers = [
        LayerSpec("lora-conv1d", "conv", in_channels=1, out_channels=4,
                  kernel=64, stride=8, padding=28, rank=rank, frozen=True),
        LayerSpec("relu", "relu"),
        LayerSpec("maxpool1d", "pool", kernel=2, stride=2, mode=pooling),
        LayerSpec("flatten", "flatten"),
        LayerSpec("lora-linear", "fc", in_features=256, out_features=10,
                  rank=rank, frozen=True),
    ]
    return ModelSpec(name="dkdl-net", layers=tuple(layers))


def _layer_counts(layer: LayerSpec) -> tuple:
    """(trainable, frozen) parameter counts for one layer."""
    if layer.kind == "conv1d":
        n = layer.out_channels * layer.in_channels * layer.kernel + layer.out_channels
        return (0, n) if layer.frozen else (n, 0)
    if layer.kind == "batchnorm1d":
        n = 2 * layer.out_channels
        return (0, n) if layer.frozen else (n, 0)
    if layer.kind == "linear":
        n = layer.out_features * layer.in_features + layer.out_features
        return (0, n) if layer.frozen else (n, 0)
    if layer.kind == "lora-conv1d":
        base = layer.out_channels * layer.in_channels * layer.kernel + layer.out_channels
        fan_in = layer.in_channels * layer.kernel
        return (layer.rank * fan_in + layer.out_channels * layer.rank, base)
    if layer.kind == "lora-linear":
        base = layer.out_features * layer.in_features + layer.out_features
        return (layer.rank * layer.in_features + layer.out_features * layer.rank, base)
    return (0, 0)


def count_parameters(spec: ModelSpec, trainable_only: bool = False) -> int:
    total = 0
    for layer in spec.layers:
        trainable, frozen = _layer_counts(layer)
        total += trainable if trainable_only else trainable + frozen
    return total


def shape_chain(spec: ModelSpec) -> list:
    """Output shape after every layer, starting from the spec input shape."""
    shape = spec.input_shape
    out = []
    for layer in spec.layers:
        if layer.kind in ("conv1d", "lora-conv1d"):
            c, length = shape
            if c != layer.in_channels:
                raise ValueError(f"{layer.name}: expects {layer.in_channels} channels, chain has {c}")
            l_out = (length + 2 * layer.padding - layer.kernel) // layer.stride + 1
            shape = (layer.out_channels, l_out)
        elif layer.kind == "maxpool1d":
            c, length = shape
            shape = (c, (length - layer.kernel) // layer.stride + 1)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind in ("linear", "lora-linear"):
            if shape != (layer.in_features,):
                raise ValueError(f"{layer.name}: expects ({layer.in_features},), chain has {shape}")
            shape = (layer.out_features,)
        # relu and batchnorm preserve shape
        out.append(shape)
    return out


@dataclass
class TableRow:
    name: str
    kernel: str
    input: str
    output: str
    activation: str
    params: int


def _fmt_shape(shape: tuple) -> str:
    return " x ".join(str(d) for d in shape)


def table_rows(spec: ModelSpec) -> list:
    """Layer summary rows: conv rows absorb their batchnorm, one pooling
    row per block, adapter rows precede their base rows."""
    shapes = shape_chain(spec)
    inputs = [spec.input_shape] + shapes[:-1]
    layers = spec.layers
    rows = []
    for i, layer in enumerate(layers):
        if layer.kind in ("conv1d", "lora-conv1d"):
            params = layer.out_channels * layer.in_channels * layer.kernel + layer.out_channels
            if i + 1 < len(layers) and layers[i + 1].kind == "batchnorm1d":
                params += 2 * layers[i + 1].out_channels
            act = "ReLU" if any(l.kind == "relu" for l in layers[i + 1:i + 3]) else ""
            kern = f"({layer.kernel}, ) / {layer.stride}"
            if layer.kind == "lora-conv1d":
                adapter = layer.rank * (layer.in_channels * layer.kernel + layer.out_channels)
                rows.append(("Conv1D_LoRA", TableRow("", "", _fmt_shape(inputs[i]),
                                                     _fmt_shape(shapes[i]), "", adapter)))
            rows.append(("Conv1D", TableRow("", kern, _fmt_shape(inputs[i]),
                                            _fmt_shape(shapes[i]), act, params)))
        elif layer.kind == "maxpool1d":
            rows.append(("Pooling", TableRow("", f"{layer.kernel} / {layer.stride}",
                                             _fmt_shape(inputs[i]), _fmt_shape(shapes[i]),
                                             "", 0)))
        elif layer.kind in ("linear", "lora-linear"):
            params = layer.out_features * layer.in_features + layer.out_features
            act = "ReLU" if i + 1 < len(layers) and layers[i + 1].kind == "relu" else ""
            if layer.kind == "lora-linear":
                adapter = layer.rank * (layer.in_features + layer.out_features)
                rows.append(("FC_LoRA", TableRow("", "", str(layer.in_features),
                                                 str(layer.out_features), "", adapter)))
            rows.append(("FC", TableRow("", "", str(layer.in_features),
                                        str(layer.out_features), act, params)))
    counts = {}
    for family, _ in rows:
        counts[family] = counts.get(family, 0) + 1
    seen = {}
    final = []
    for family, row in rows:
        seen[family] = seen.get(family, 0) + 1
        row.name = family if counts[family] == 1 else f"{family}_{seen[family]}"
        final.append(row)
    return final


def describe_text(spec: ModelSpec, merged: bool = False) -> str:
    rows = table_rows(spec)
    header = ("Name", "Kernel/stride", "Input", "Output", "Activation", "#Parameters")
    cells = [header] + [(r.name, r.kernel, r.input, r.output, r.activation, str(r.params))
                        for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(6)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "-" * len(lines[0]))
    total = count_parameters(spec)
    trainable = count_parameters(spec, trainable_only=True)
    lines.append(f"Total of trainable parameters: {total}")
    if trainable != total:
        lines.append(f"  of which adapters (trained during fine-tuning): {trainable}")
    if merged:
        lines.append("Adapters merged into base weights.")
    return "\n".join(lines)


_BUILDERS = {"teacher": build_teacher, "student": build_student}


def spec_for(name: str, rank: int = DEFAULT_RANK, pooling: str = "max") -> ModelSpec:
    if name == "dkdl-net":
        return build_dkdl_spec(rank=rank, pooling=pooling)
    if name in _BUILDERS:
        return _BUILDERS[name](pooling=pooling)
    raise ValueError(f"unknown model name {name!r}; expected teacher, student or dkdl-net")


class Model:
    """A ModelSpec bound to weights, running statistics and adapters."""

    def __init__(self, spec: ModelSpec, seed: Optional[int] = 0,
                 dtype=np.float64, sigma: float = DEFAULT_SIGMA):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}
        self.adapters: dict[str, lora_mod.LoraAdapter] = {}
        self.training = False
        self.merged = False
        self.metadata: dict = {}
        if seed is not None:
            self._init_params(np.random.default_rng(np.random.SeedSequence(seed)), sigma)

    def _init_params(self, rng, sigma: float) -> None:
        # He-style init for weights, zero biases, unit batchnorm
        for layer in self.spec.layers:
            n = layer.name
            if layer.kind == "conv1d":
                fan_in = layer.in_channels * layer.kernel
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                               (layer.out_channels, layer.in_channels, layer.kernel))
                self.params[f"{n}.weight"] = Tensor(w, requires_grad=not layer.frozen)
                self.params[f"{n}.bias"] = Tensor(np.zeros(layer.out_channels),
                                                  requires_grad=not layer.frozen)
            elif layer.kind == "batchnorm1d":
                self.params[f"{n}.gamma"] = Tensor(np.ones(layer.out_channels),
                                                   requires_grad=not layer.frozen)
                self.params[f"{n}.beta"] = Tensor(np.zeros(layer.out_channels),
                                                  requires_grad=not layer.frozen)
                self.state[f"{n}.running_mean"] = np.zeros(layer.out_channels)
                self.state[f"{n}.running_var"] = np.ones(layer.out_channels)
            elif layer.kind == "linear":
                w = rng.normal(0.0, np.sqrt(2.0 / layer.in_features),
                               (layer.out_features, layer.in_features))
                self.params[f"{n}.weight"] = Tensor(w, requires_grad=not layer.frozen)
                self.params[f"{n}.bias"] = Tensor(np.zeros(layer.out_features),
                                                  requires_grad=not layer.frozen)
            elif layer.kind in ("lora-conv1d", "lora-linear"):
                if layer.kind == "lora-conv1d":
                    fan_in = layer.in_channels * layer.kernel
                    fan_out = layer.out_channels
                    w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                   (layer.out_channels, layer.in_channels, layer.kernel))
                    bias = np.zeros(layer.out_channels)
                else:
                    fan_in = layer.in_features
                    fan_out = layer.out_features
                    w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                   (layer.out_features, layer.in_features))
                    bias = np.zeros(layer.out_features)
                self.params[f"{n}.weight"] = Tensor(w, requires_grad=False)
                self.params[f"{n}.bias"] = Tensor(bias, requires_grad=False)
                self._attach_adapter(layer, fan_in, fan_out, sigma,
                                     int(rng.integers(0, 2 ** 31)))

    def _attach_adapter(self, layer: LayerSpec, fan_in: int, fan_out: int,
                        sigma: float, seed: int, scale: float = 1.0) -> None:
        adapter = lora_mod.init_adapter(fan_in, fan_out, layer.rank, sigma, seed, scale)
        self.adapters[layer.name] = adapter
        self.params[f"adapter.{layer.name}.A"] = adapter.A
        self.params[f"adapter.{layer.name}.B"] = adapter.B

    # --- bookkeeping ---------------------------------------------------------

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def cast(self, dtype) -> "Model":
        self.dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = np.ascontiguousarray(t.data.astype(self.dtype))
        for k in self.state:
            self.state[k] = self.state[k].astype(self.dtype)
        return self

    def trainable_parameters(self) -> list:
        return [t for t in self.params.values() if t.requires_grad]

    def named_tensors(self) -> list:
        """(name, array) pairs in a stable order: parameters, then state."""
        out = [(k, t.data) for k, t in self.params.items()]
        out += [(k, v) for k, v in self.state.items()]
        return out

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # --- forward -------------------------------------------------------------

    def _normalize_input(self, x) -> tuple:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        c, length = self.spec.input_shape
        if x.ndim == 1 and x.shape[0] == length and c == 1:
            return dt.reshape(x, (1, 1, length)), True
        if x.ndim == 2 and x.shape == (c, length):
            return dt.reshape(x, (1, c, length)), True
        if x.ndim == 3 and x.shape[1:] == (c, length):
            return x, False
        raise ValueError(
            f"model {self.spec.name!r} expects input shape ({c}, {length}) "
            f"or a batch of them, got {tuple(x.shape)}")

    def forward(self, x) -> Tensor:
        x, single = self._normalize_input(x)
        p = self.params
        for layer in self.spec.layers:
            n = layer.name
            if layer.kind == "conv1d":
                x = dt.conv1d(x, p[f"{n}.weight"], p[f"{n}.bias"],
                              layer.stride, layer.padding)
            elif layer.kind == "batchnorm1d":
                x = dt.batchnorm1d(x, p[f"{n}.gamma"], p[f"{n}.beta"],
                                   self.state[f"{n}.running_mean"],
                                   self.state[f"{n}.running_var"], train=self.training)
            elif layer.kind == "relu":
                x = dt.relu(x)
            elif layer.kind == "maxpool1d":
                pool = dt.avgpool1d if layer.mode == "avg" else dt.maxpool1d
                x = pool(x, layer.kernel, layer.stride)
            elif layer.kind == "flatten":
                x = dt.flatten(x, start_axis=1)
            elif layer.kind == "lora-conv1d":
                if self.merged:
                    x = dt.conv1d(x, p[f"{n}.weight"], p[f"{n}.bias"],
                                  layer.stride, layer.padding)
                else:
                    x = lora_mod.adapted_forward(p[f"{n}.weight"], p[f"{n}.bias"],
                                                 self.adapters[n], x,
                                                 layer.stride, layer.padding)
            elif layer.kind == "linear":
                x = dt.linear(x, p[f"{n}.weight"], p[f"{n}.bias"])
            elif layer.kind == "lora-linear":
                if self.merged:
                    x = dt.linear(x, p[f"{n}.weight"], p[f"{n}.bias"])
                else:
                    x = lora_mod.adapted_forward(p[f"{n}.weight"], p[f"{n}.bias"],
                                                 self.adapters[n], x)
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
        return dt.reshape(x, (self.spec.num_classes,)) if single else x

    __call__ = forward

    def merge_adapters(self) -> "Model":
        """Fold every adapter into its base weight; the model becomes plain."""
        if self.merged:
            raise RuntimeError("adapters already merged")
        if not self.adapters:
            raise RuntimeError(f"model {self.spec.name!r} has no adapters to merge")
        for name, adapter in self.adapters.items():
            self.params[f"{name}.weight"] = lora_mod.merge(self.params[f"{name}.weight"], adapter)
            del self.params[f"adapter.{name}.A"]
            del self.params[f"adapter.{name}.B"]
        self.merged = True
        return self


def build_dkdl_net(student: Union[Model, str], rank: int = DEFAULT_RANK,
                   sigma: float = DEFAULT_SIGMA, seed: int = 0,
                   scale: float = 1.0) -> Model:
    """Freeze a trained student's weights and attach fresh adapters."""
    if not isinstance(student, Model):
        from .checkpoint import load_checkpoint  # noqa: PLC0415 - avoids module cycle
        student = load_checkpoint(student, expect="student")
    if student.spec.name != "student":
        from .errors import ModelMismatchError
        raise ModelMismatchError(
            f"dkdl-net is built from a student checkpoint, got {student.spec.name!r}")
    pooling = next(l.mode for l in student.spec.layers if l.kind == "maxpool1d")
    spec = build_dkdl_spec(rank=rank, pooling=pooling)
    model = Model(spec, seed=None, dtype=student.dtype)
    rng = np.random.default_rng(np.random.SeedSequence([seed, rank]))
    for layer in spec.layers:
        n = layer.name
        if layer.kind in ("lora-conv1d", "lora-linear"):
            model.params[f"{n}.weight"] = Tensor(student.params[f"{n}.weight"].data.copy(),
                                                 requires_grad=False)
            model.params[f"{n}.bias"] = Tensor(student.params[f"{n}.bias"].data.copy(),
                                               requires_grad=False)
            if layer.kind == "lora-conv1d":
                fan_in, fan_out = layer.in_channels * layer.kernel, layer.out_channels
            else:
                fan_in, fan_out = layer.in_features, layer.out_features
            model._attach_adapter(layer, fan_in, fan_out, sigma,
                                  int(rng.integers(0, 2 ** 31)), scale)
    return model
