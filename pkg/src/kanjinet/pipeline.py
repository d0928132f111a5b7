"""End-to-end runs: train the three members on one dataset and score the ensemble.

The transfer chain for CNN-3 is MNIST -> K-MNIST -> K-49 -> K-Kanji: the
stem of each dataset's CNN-3 comes from a ``cnn3-base`` trained on the
previous dataset. On MNIST itself CNN-3 is trained from scratch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .ensemble import evaluate_members
from .models import arch_cnn1, arch_cnn2, arch_cnn3, build_model
from .training import Checkpoint, History, TrainConfig, train, transfer_init

log = logging.getLogger(__name__)

# which dataset pre-trains the CNN-3 stem for each target
TRANSFER_SOURCE = {"mnist": None, "kmnist": "mnist", "k49": "kmnist", "kkanji": "k49"}


def is_kanji_input(input_shape):
    return input_shape[-1] >= 64


@dataclass
class EnsembleRun:
    models: dict = field(default_factory=dict)
    histories: dict[str, History] = field(default_factory=dict)
    report: dict = field(default_factory=dict)


def pretrain_base(train_ds, val_ds, cfg: TrainConfig, kanji_variant=False):
    """Train a ``cnn3-base`` model whose stem later seeds CNN-3 on another dataset."""
    base_spec, _ = arch_cnn3(train_ds.input_shape, train_ds.num_classes, kanji_variant)
    return train(build_model(base_spec, cfg.seed), train_ds, val_ds, cfg)


def base_checkpoint(model, dataset_name, history=None, seed=0):
    meta = {"dataset": dataset_name, "seed": seed}
    if history is not None and len(history):
        meta.update(epochs=len(history), val_accuracy=history.val_acc[-1])
    return Checkpoint(model.spec, {k: v.copy() for k, v in model.params.items()}, meta)


def train_ensemble(train_ds, test_ds, cfg: TrainConfig, base: Checkpoint | None = None,
                   freeze=True, kanji_variant=None, vote="soft"):
    """Train CNN-1, CNN-2 and CNN-3 on ``train_ds``, validate on ``test_ds``.

    ``base`` supplies the CNN-3 stem; with ``freeze`` its parameters stay
    fixed while the added layers train. Without ``base`` CNN-3 starts from
    random weights, as on MNIST.
    """
    shape, classes = train_ds.input_shape, train_ds.num_classes
    if kanji_variant is None:
        kanji_variant = is_kanji_input(shape)
    _, full = arch_cnn3(shape, classes, kanji_variant)
    if base is not None:
        cnn3 = transfer_init(base, full, freeze=freeze, seed=cfg.seed)
    else:
        cnn3 = build_model(full, cfg.seed)
    members = {
        "cnn1": build_model(arch_cnn1(shape, classes), cfg.seed),
        "cnn2": build_model(arch_cnn2(shape, classes, kanji_variant), cfg.seed),
        "cnn3": cnn3,
    }
    run = EnsembleRun()
    for name, model in members.items():
        log.info("training %s on %s (%d samples)", name, train_ds.name, len(train_ds))
        trained, history = train(model, train_ds, test_ds, cfg)
        run.models[name] = trained
        run.histories[name] = history
    run.report = evaluate_members(list(run.models.values()), test_ds, vote,
                                  train_counts=train_ds.class_counts(), names=list(run.models))
    return run
