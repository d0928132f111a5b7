"""Declarative CNN architectures and the parameter container that runs them.

The three ensemble members:

* ``cnn1``: conv → avgpool → conv → avgpool → conv → flatten → dense
* ``cnn2``: conv → conv → avgpool → conv → [conv] → flatten → dense
* ``cnn3``: a pre-trainable stem (conv → dropout → conv → [avgpool]) that is
  either closed by flatten → dense (``cnn3-base``) or extended by
  conv → dropout → conv → avgpool → flatten → dense (``cnn3-full``).

Bracketed layers exist only in the Kanji variant. Every conv is 3x3,
stride 1, same padding and followed by ReLU.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

CONV_KINDS = ("conv", "avgpool", "dropout", "flatten", "dense")
DROPOUT_P = 0.25
INIT_STREAM = 0x1A17


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    filters: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    window: int = 2
    p: float = 0.0
    activation: str = ""

    def __post_init__(self):
        if self.kind not in CONV_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    def to_text(self):
        if self.kind == "conv":
            attrs = (f"filters={self.filters} kernel={self.kernel} stride={self.stride} "
                     f"padding={self.padding} activation={self.activation or 'none'}")
        elif self.kind == "avgpool":
            attrs = f"window={self.window} stride={self.stride}"
        elif self.kind == "dropout":
            attrs = f"p={self.p!r}"
        elif self.kind == "dense":
            attrs = f"units={self.filters} activation={self.activation or 'none'}"
        else:
            attrs = ""
        return f"layer {self.name} {self.kind} {attrs}".rstrip()

    @classmethod
    def from_text(cls, line):
        parts = line.split()
        if len(parts) < 3 or parts[0] != "layer":
            raise ConfigError(f"bad layer line {line!r}")
        kw = {}
        for item in parts[3:]:
            key, _, value = item.partition("=")
            if key == "units":
                key = "filters"
            if key == "activation":
                kw[key] = "" if value == "none" else value
            elif key == "p":
                kw[key] = float(value)
            elif key in ("filters", "kernel", "stride", "padding", "window"):
                kw[key] = int(value)
            else:
                raise ConfigError(f"unknown layer attribute {key!r} in {line!r}")
        return cls(name=parts[1], kind=parts[2], **kw)


def conv(name, filters):
    return LayerSpec(name, "conv", filters=filters, kernel=3, stride=1, padding=1, activation="relu")


def avgpool(name):
    return LayerSpec(name, "avgpool", window=2, stride=2)


def dropout(name, p=DROPOUT_P):
    return LayerSpec(name, "dropout", p=p)


def flatten(name="flatten"):
    return LayerSpec(name, "flatten")


def dense(name, units):
    return LayerSpec(name, "dense", filters=units)


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if not self.layers or self.layers[-1].kind != "dense" or self.layers[-1].filters != self.num_classes:
            raise ConfigError(f"{self.name}: last layer must be dense with {self.num_classes} outputs")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"{self.name}: duplicate layer names")
        self.shapes()

    @property
    def kinds(self):
        return [layer.kind for layer in self.layers]

    def shapes(self):
        """Symbolic output shape (without batch axis) of every layer."""
        shape = self.input_shape
        out = []
        for layer in self.layers:
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ConfigError(f"{layer.name}: conv needs a C,H,W input, got {shape}")
                c, h, w = shape
                h2 = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                w2 = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if h2 < 1 or w2 < 1:
                    raise ConfigError(f"{layer.name}: input {shape} too small for a {layer.kernel}x{layer.kernel} kernel")
                shape = (layer.filters, h2, w2)
            elif layer.kind == "avgpool":
                if len(shape) != 3:
                    raise ConfigError(f"{layer.name}: pool needs a C,H,W input, got {shape}")
                c, h, w = shape
                if h < layer.window or w < layer.window:
                    raise ConfigError(f"{layer.name}: input {shape} smaller than pool window {layer.window}")
                shape = (c, (h - layer.window) // layer.stride + 1, (w - layer.window) // layer.stride + 1)
            elif layer.kind == "flatten":
                if len(shape) != 3:
                    raise ConfigError(f"{layer.name}: flatten needs a C,H,W input, got {shape}")
                shape = (int(np.prod(shape)),)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise ConfigError(f"{layer.name}: dense needs a flat input, got {shape}")
                shape = (layer.filters,)
            out.append(shape)
        return out

    def param_shapes(self):
        """Ordered mapping parameter name -> shape."""
        shapes = {}
        prev = self.input_shape
        for layer, out in zip(self.layers, self.shapes()):
            if layer.kind == "conv":
                shapes[f"{layer.name}.kernel"] = (layer.filters, prev[0], layer.kernel, layer.kernel)
                shapes[f"{layer.name}.bias"] = (layer.filters,)
            elif layer.kind == "dense":
                shapes[f"{layer.name}.weights"] = (prev[0], layer.filters)
                shapes[f"{layer.name}.bias"] = (layer.filters,)
            prev = out
        return shapes

    def stem(self):
        """Layers before the first flatten: the part that transfers between datasets."""
        for i, layer in enumerate(self.layers):
            if layer.kind == "flatten":
                return self.layers[:i]
        return self.layers

    def to_text(self):
        lines = [f"arch {self.name}", "input " + " ".join(map(str, self.input_shape)),
                 f"classes {self.num_classes}"]
        lines += [layer.to_text() for layer in self.layers]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        name, input_shape, num_classes, layers = None, None, None, []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            head, _, rest = line.partition(" ")
            if head == "arch":
                name = rest.strip()
            elif head == "input":
                input_shape = tuple(int(v) for v in rest.split())
            elif head == "classes":
                num_classes = int(rest)
            elif head == "layer":
                layers.append(LayerSpec.from_text(line))
            else:
                raise ConfigError(f"unrecognised architecture line {line!r}")
        if name is None or input_shape is None or num_classes is None:
            raise ConfigError("architecture text missing arch/input/classes")
        return cls(name, tuple(layers), input_shape, num_classes)


# ---------------------------------------------------------------------------
# the three ensemble members
# ---------------------------------------------------------------------------

def _check_inputs(input_shape, num_classes):
    if num_classes < 1:
        raise ConfigError(f"num_classes must be positive, got {num_classes}")
    if len(input_shape) != 3:
        raise ConfigError(f"input_shape must be (C, H, W), got {input_shape}")
    if min(input_shape[1:]) < 8:
        raise ConfigError(f"input {input_shape} too small for two 2x2 pools; need H, W >= 8")


def arch_cnn1(input_shape, num_classes):
    _check_inputs(input_shape, num_classes)
    layers = [conv("conv1", 32), avgpool("pool1"), conv("conv2", 64), avgpool("pool2"),
              conv("conv3", 64), flatten(), dense("dense", num_classes)]
    return ArchSpec("cnn1", layers, input_shape, num_classes)


def arch_cnn2(input_shape, num_classes, kanji_variant=False):
    _check_inputs(input_shape, num_classes)
    layers = [conv("conv1", 32), conv("conv2", 64), avgpool("pool1"), conv("conv3", 64)]
    if kanji_variant:
        layers.append(conv("conv4", 64))
    layers += [flatten(), dense("dense", num_classes)]
    return ArchSpec("cnn2", layers, input_shape, num_classes)


def cnn3_stem(kanji_variant=False):
    layers = [conv("base.conv1", 32), dropout("base.dropout1"), conv("base.conv2", 64)]
    if kanji_variant:
        layers.append(avgpool("base.pool1"))
    return layers


def arch_cnn3(input_shape, num_classes, kanji_variant=False):
    """Return ``(base, full)``; ``full`` reuses the base stem and adds its own head."""
    _check_inputs(input_shape, num_classes)
    stem = cnn3_stem(kanji_variant)
    base = ArchSpec("cnn3-base", stem + [flatten("base.flatten"), dense("base.dense", num_classes)],
                    input_shape, num_classes)
    extra = [conv("head.conv1", 64), dropout("head.dropout1"), conv("head.conv2", 64),
             avgpool("head.pool1"), flatten("head.flatten"), dense("head.dense", num_classes)]
    full = ArchSpec("cnn3-full", stem + extra, input_shape, num_classes)
    return base, full


def build_arch(name, input_shape, num_classes, kanji_variant=False):
    """Look up one of ``cnn1``, ``cnn2``, ``cnn3-base``, ``cnn3-full`` (``cnn3`` = full)."""
    if name == "cnn1":
        return arch_cnn1(input_shape, num_classes)
    if name == "cnn2":
        return arch_cnn2(input_shape, num_classes, kanji_variant)
    if name in ("cnn3", "cnn3-full", "cnn3-base"):
        base, full = arch_cnn3(input_shape, num_classes, kanji_variant)
        return base if name == "cnn3-base" else full
    raise ConfigError(f"unknown architecture {name!r}")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def init_rng(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & (2**64 - 1), INIT_STREAM])))


def init_params(spec, rng, only=None):
    """Fan-in scaled uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            value = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            value = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        if only is None or name in only:
            params[name] = value
    return params


@dataclass
class Model:
    spec: ArchSpec
    params: dict[str, np.ndarray]
    trainable: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigError(f"parameter names disagree with spec (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != tuple(shape):
                raise ConfigError(f"{name}: shape {self.params[name].shape} != {shape}")
        self.params = {name: np.ascontiguousarray(self.params[name], dtype=np.float32) for name in expected}
        self.trainable = {name: bool(self.trainable.get(name, True)) for name in expected}

    def copy(self):
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()}, dict(self.trainable))

    def freeze(self, prefix):
        for name in self.params:
            if name.startswith(prefix):
                self.trainable[name] = False

    def forward(self, x, train=False, rng=None):
        logits, _ = self.forward_with_cache(x, train, rng)
        return logits

    def forward_with_cache(self, x, train=False, rng=None):
        x = np.asarray(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise DimensionError(f"batch shape {x.shape} does not match model input (N,) + {self.spec.input_shape}")
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(np.float32)
        cache = []
        for layer in self.spec.layers:
            x, saved = self._apply(layer, x, train, rng)
            cache.append(saved)
        return x, cache

    def _apply(self, layer, x, train, rng):
        p = self.params
        if layer.kind == "conv":
            z = T.conv2d(x, p[f"{layer.name}.kernel"], p[f"{layer.name}.bias"], layer.stride, layer.padding)
            return (T.relu(z) if layer.activation == "relu" else z), (x, z)
        if layer.kind == "avgpool":
            return T.avgpool2d(x, layer.window, layer.stride), x
        if layer.kind == "dropout":
            return T.dropout(x, layer.p, train, rng)
        if layer.kind == "flatten":
            return T.flatten(x), x.shape
        z = T.dense(x, p[f"{layer.name}.weights"], p[f"{layer.name}.bias"])
        return (T.relu(z) if layer.activation == "relu" else z), (x, z)

    def backward(self, cache, d_logits, wanted=None, input_grad=True):
        """Back-propagate ``d_logits``; returns ``(param_grads, d_input)``.

        ``wanted`` restricts which parameter gradients are produced (default:
        all). Propagation stops at the lowest layer that still owns a wanted
        parameter unless ``input_grad`` is set, in which case ``d_input`` is
        the gradient w.r.t. the batch; otherwise it is None.
        """
        wanted = set(self.params) if wanted is None else set(wanted)
        layers = self.spec.layers
        owners = [i for i, layer in enumerate(layers)
                  if any(name.startswith(layer.name + ".") for name in wanted)]
        lowest = 0 if input_grad else (min(owners) if owners else len(layers))
        grads = {}
        g = d_logits
        for i in range(len(layers) - 1, lowest - 1, -1):
            layer, saved = layers[i], cache[i]
            need_input = input_grad or i > lowest
            if layer.kind == "conv":
                x, z = saved
                if layer.activation == "relu":
                    g = T.relu_backward(g, z).d_input
                names = (f"{layer.name}.kernel", f"{layer.name}.bias")
                lg = T.conv2d_backward(g, x, self.params[names[0]], layer.stride, layer.padding,
                                       need_input=need_input, need_params=any(n in wanted for n in names))
                for n, key in zip(names, ("kernel", "bias")):
                    if n in wanted:
                        grads[n] = lg.d_params[key]
                g = lg.d_input
            elif layer.kind == "avgpool":
                g = T.avgpool2d_backward(g, saved, layer.window, layer.stride).d_input
            elif layer.kind == "dropout":
                g = T.dropout_backward(g, saved).d_input
            elif layer.kind == "flatten":
                g = T.flatten_backward(g, saved).d_input
            elif layer.kind == "dense":
                x, z = saved
                if layer.activation == "relu":
                    g = T.relu_backward(g, z).d_input
                lg = T.dense_backward(g, x, self.params[f"{layer.name}.weights"])
                for n, key in ((f"{layer.name}.weights", "weights"), (f"{layer.name}.bias", "bias")):
                    if n in wanted:
                        grads[n] = lg.d_params[key]
                g = lg.d_input
        return grads, (g if input_grad else None)

    def activation_shapes(self, x):
        """Realised per-layer output shapes (without batch axis) for an eval pass over ``x``."""
        x = np.asarray(x, dtype=np.float32)
        shapes = []
        for layer in self.spec.layers:
            x, _ = self._apply(layer, x, False, None)
            shapes.append(tuple(x.shape[1:]))
        return shapes


def build_model(spec: ArchSpec, seed: int) -> Model:
    return Model(spec, init_params(spec, init_rng(seed)))
