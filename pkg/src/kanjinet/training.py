"""Mini-batch training, optimisers, transfer initialisation and checkpoint files."""
from __future__ import annotations

import csv
import io
import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import CheckpointError, ConfigError, DivergenceError, SpecMismatchError, TransferError, VersionError
from .models import ArchSpec, Model, init_params, init_rng

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"KFCK"
CHECKPOINT_VERSION = 1

# stream identifiers for derive_rng; fixed so that runs are reproducible across releases
SHUFFLE_STREAM = 1
DROPOUT_STREAM = 2
TRANSFER_STREAM = 3


def derive_rng(seed, *keys):
    """Independent PCG64 stream for ``(seed, *keys)`` via numpy's SeedSequence."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & (2**64 - 1), *keys])))


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, lr=0.01, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, grads):
        for name, g in grads.items():
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            params[name] -= (self.lr * g).astype(params[name].dtype, copy=False)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] -= update.astype(params[name].dtype, copy=False)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    freeze_prefix: str | None = None
    divergence_threshold: float = 1e4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def make_optimizer(self):
        if self.optimizer == "adam":
            return Adam(self.learning_rate, self.beta1, self.beta2, self.eps)
        return SGD(self.learning_rate, self.momentum)


# epochs per dataset used by the reproduction runs
DEFAULT_EPOCHS = {"mnist": 10, "kmnist": 10, "k49": 15, "kkanji": 20}


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def steps_to_accuracy(self, target):
        """Optimiser steps until validation accuracy first reaches ``target``, or None."""
        for acc, steps in zip(self.val_acc, self.steps):
            if acc >= target:
                return steps
        return None

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "loss", "train_acc", "val_acc", "seconds"])
        for i in range(len(self)):
            writer.writerow([i + 1, f"{self.loss[i]:.6f}", f"{self.train_acc[i]:.6f}",
                             f"{self.val_acc[i]:.6f}", f"{self.seconds[i]:.3f}"])
        return buf.getvalue()


def accuracy(model, ds, batch_size=256):
    if not len(ds):
        return 0.0
    correct = 0
    for start in range(0, len(ds), batch_size):
        logits = model.forward(ds.images[start:start + batch_size])
        correct += int((logits.argmax(axis=1) == ds.labels[start:start + batch_size]).sum())
    return correct / len(ds)


def _check_compatible(model, ds, what):
    if tuple(ds.input_shape) != model.spec.input_shape:
        raise ConfigError(f"{what} images {ds.input_shape} do not match model input {model.spec.input_shape}")
    if len(ds) and int(ds.labels.max()) >= model.spec.num_classes:
        raise ConfigError(f"{what} has label {int(ds.labels.max())} but model has {model.spec.num_classes} classes")


def train(model: Model, train_ds: Dataset, val_ds: Dataset | None, cfg: TrainConfig):
    """Train a copy of ``model``; returns ``(trained_model, history)``.

    Parameters marked non-trainable (or matching ``cfg.freeze_prefix``) never
    enter the optimiser and keep their exact bytes.
    """
    _check_compatible(model, train_ds, "training set")
    if val_ds is not None:
        _check_compatible(model, val_ds, "validation set")
    model = model.copy()
    if cfg.freeze_prefix:
        model.freeze(cfg.freeze_prefix)
    trainable = [name for name, flag in model.trainable.items() if flag]
    opt = cfg.make_optimizer()
    history = History()
    n = len(train_ds)
    steps = 0

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        order = derive_rng(cfg.seed, SHUFFLE_STREAM, epoch).permutation(n)
        drop_rng = derive_rng(cfg.seed, DROPOUT_STREAM, epoch)
        total_loss, correct = 0.0, 0
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x, y = train_ds.images[idx], train_ds.labels[idx]
            logits, cache = model.forward_with_cache(x, train=True, rng=drop_rng)
            loss, d_logits, _ = T.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss) or loss > cfg.divergence_threshold:
                raise DivergenceError(epoch + 1, batch + 1, loss)
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
            if trainable:
                grads, _ = model.backward(cache, d_logits, wanted=trainable, input_grad=False)
                opt.step(model.params, grads)
            steps += 1
        history.loss.append(total_loss / max(n, 1))
        history.train_acc.append(correct / max(n, 1))
        history.val_acc.append(accuracy(model, val_ds) if val_ds is not None else float("nan"))
        history.seconds.append(time.perf_counter() - started)
        history.steps.append(steps)
        log.info("epoch %d/%d loss %.4f train %.4f val %.4f (%.1fs)", epoch + 1, cfg.epochs,
                 history.loss[-1], history.train_acc[-1], history.val_acc[-1], history.seconds[-1])
    return model, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    spec: ArchSpec
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def to_model(self, spec: ArchSpec | None = None) -> Model:
        if spec is not None and spec != self.spec:
            raise SpecMismatchError(
                f"checkpoint holds {self.spec.name} {self.spec.input_shape}->{self.spec.num_classes}, "
                f"requested {spec.name} {spec.input_shape}->{spec.num_classes}; use transfer_init"
            )
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})


def _pack_str(text, fmt="<I"):
    raw = text.encode("utf-8")
    return struct.pack(fmt, len(raw)) + raw


def checkpoint_bytes(model: Model, metadata=None) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION),
             _pack_str(model.spec.to_text()),
             _pack_str(json.dumps(metadata or {}, sort_keys=True)),
             struct.pack("<I", len(model.params))]
    for name, value in model.params.items():
        parts.append(_pack_str(name, "<H"))
        parts.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Model, metadata, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, metadata))


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint truncated")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, fmt="<I"):
        (length,) = self.unpack(fmt)
        return self.take(length).decode("utf-8")


def parse_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a KFCK checkpoint (bad magic)")
    if len(raw) < 10:
        raise CheckpointError("checkpoint truncated")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC-32 mismatch")
    r = _Reader(body)
    r.take(6)
    spec = ArchSpec.from_text(r.string())
    metadata = json.loads(r.string())
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        name = r.string("<H")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after parameter block")
    expected = spec.param_shapes()
    if {k: tuple(v.shape) for k, v in params.items()} != {k: tuple(v) for k, v in expected.items()}:
        raise CheckpointError("parameter block disagrees with the stored architecture")
    return Checkpoint(spec, params, metadata)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# transfer learning
# ---------------------------------------------------------------------------

def _layer_signature(spec, layer, shapes):
    if layer.kind == "conv":
        return ("conv", shapes[f"{layer.name}.kernel"], layer.stride, layer.padding, layer.activation)
    if layer.kind == "avgpool":
        return ("avgpool", layer.window, layer.stride)
    if layer.kind == "dropout":
        return ("dropout", layer.p)
    if layer.kind == "dense":
        return ("dense", shapes[f"{layer.name}.weights"], layer.activation)
    return (layer.kind,)


def transfer_init(base: Checkpoint, target_spec: ArchSpec, freeze: bool = True, seed: int = 0) -> Model:
    """Initialise ``target_spec`` with the feature stem of ``base``.

    The stem (all layers of the base before its flatten) must match the
    leading layers of ``target_spec`` kind by kind with equal parameter
    shapes. Everything after the stem, including the classifier head, is
    freshly initialised from ``seed``.
    """
    stem = base.spec.stem()
    base_shapes = base.spec.param_shapes()
    target_shapes = target_spec.param_shapes()
    if len(target_spec.layers) < len(stem):
        raise TransferError(f"target {target_spec.name} has fewer layers than the base stem")
    mapping = {}
    for i, (src, dst) in enumerate(zip(stem, target_spec.layers)):
        a = _layer_signature(base.spec, src, base_shapes)
        b = _layer_signature(target_spec, dst, target_shapes)
        if a != b:
            raise TransferError(f"layer {i} mismatch: base {src.name} {a} vs target {dst.name} {b}")
        if src.kind == "conv":
            for suffix in ("kernel", "bias"):
                mapping[f"{dst.name}.{suffix}"] = f"{src.name}.{suffix}"
        elif src.kind == "dense":
            for suffix in ("weights", "bias"):
                mapping[f"{dst.name}.{suffix}"] = f"{src.name}.{suffix}"
    fresh = init_params(target_spec, init_rng(seed))
    params = {name: (base.params[mapping[name]].copy() if name in mapping else fresh[name])
              for name in target_shapes}
    trainable = {name: not (freeze and name in mapping) for name in target_shapes}
    return Model(target_spec, params, trainable)
