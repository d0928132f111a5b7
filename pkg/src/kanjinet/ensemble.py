"""Maxsum voting over ensemble members and classification metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigError, DimensionError, IncompatibleError


def predict_proba(model, dataset, batch_size=256):
    """Row-stochastic class probabilities of an eval-phase pass over ``dataset``."""
    images = dataset.images if isinstance(dataset, Dataset) else np.asarray(dataset)
    if images.ndim != 4 or tuple(images.shape[1:]) != model.spec.input_shape:
        raise DimensionError(f"images {images.shape} do not match model input {model.spec.input_shape}")
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    out = np.empty((len(images), model.spec.num_classes), dtype=np.float64)
    for start in range(0, len(images), batch_size):
        logits = model.forward(images[start:start + batch_size])
        out[start:start + batch_size] = T.softmax(logits.astype(np.float64))
    return out


def maxsum_vote(members, mode="soft"):
    """Argmax of the summed member rows; ties go to the lowest class index.

    ``mode="hard"`` sums one-hot votes of each member's own argmax instead of
    its probabilities.
    """
    members = [np.asarray(m, dtype=np.float64) for m in members]
    if not members:
        raise ConfigError("maxsum_vote needs at least one member")
    shape = members[0].shape
    if len(shape) != 2:
        raise DimensionError(f"member matrices must be N x C, got {shape}")
    for i, m in enumerate(members[1:], start=1):
        if m.shape != shape:
            raise DimensionError(f"member {i} has shape {m.shape}, member 0 has {shape}")
    if mode == "soft":
        total = np.sum(members, axis=0)
    elif mode == "hard":
        total = np.zeros(shape)
        rows = np.arange(shape[0])
        for m in members:
            total[rows, m.argmax(axis=1)] += 1
    else:
        raise ConfigError(f"unknown vote mode {mode!r}")
    return total.argmax(axis=1)  # np.argmax returns the first maximum


def confusion(preds, labels, num_classes):
    """``cm[t, p]`` counts samples of true class ``t`` predicted as ``p``."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise DimensionError(f"{preds.shape} predictions vs {labels.shape} labels")
    for what, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise IndexError(f"{what} outside 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


@dataclass
class Metrics:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den != 0)


def metrics(cm) -> Metrics:
    """Accuracy and per-class precision/recall/F1 with 0/0 taken as 0."""
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    diag = np.diag(cm)
    predicted, actual = cm.sum(axis=0), cm.sum(axis=1)
    precision = _safe_div(diag, predicted)
    recall = _safe_div(diag, actual)
    # 2tp / (2tp + fp + fn): the harmonic mean of P and R with a single rounding
    f1 = _safe_div(2 * diag, predicted + actual)
    return Metrics(
        accuracy=float(diag.sum() / total) if total else 0.0,
        precision=precision,
        recall=recall,
        f1=f1,
        macro_f1=math.fsum(f1) / len(f1) if len(f1) else 0.0,
    )


def evaluate_members(models, dataset, mode="soft", train_counts=None, names=None, batch_size=256):
    """Score each member and their maxsum ensemble on ``dataset``.

    Returns a JSON-ready report with individual accuracies, their mean
    ("model average"), ensemble accuracy, and one record per class.
    """
    if not models:
        raise ConfigError("no ensemble members")
    for m in models:
        if m.spec.input_shape != tuple(dataset.input_shape) or m.spec.num_classes != dataset.num_classes:
            raise IncompatibleError(
                f"member {m.spec.name} ({m.spec.input_shape} -> {m.spec.num_classes}) incompatible with "
                f"{dataset.name} ({dataset.input_shape} -> {dataset.num_classes})"
            )
    names = names or [m.spec.name for m in models]
    probs = [predict_proba(m, dataset, batch_size) for m in models]
    individual = [float(np.mean(p.argmax(axis=1) == dataset.labels)) for p in probs]
    preds = maxsum_vote(probs, mode)
    cm = confusion(preds, dataset.labels, dataset.num_classes)
    met = metrics(cm)
    val_counts = cm.sum(axis=1)
    classes = []
    for c in range(dataset.num_classes):
        classes.append({
            "label": c,
            "character": dataset.label_map[c],
            "f1": float(met.f1[c]),
            "precision": float(met.precision[c]),
            "recall": float(met.recall[c]),
            "val_count": int(val_counts[c]),
            "train_count": int(train_counts[c]) if train_counts is not None else None,
        })
    classes.sort(key=lambda r: (-r["f1"], r["label"]))
    return {
        "dataset": dataset.name,
        "samples": len(dataset),
        "vote": mode,
        "members": [{"name": n, "accuracy": a} for n, a in zip(names, individual)],
        "model_average": float(np.mean(individual)),
        "ensemble_accuracy": met.accuracy,
        "macro_f1": met.macro_f1,
        "classes": classes,
    }


def evaluate_ensemble(checkpoints, dataset, mode="soft", train_counts=None, batch_size=256):
    """Load checkpoint files and run :func:`evaluate_members`."""
    from .training import load_checkpoint

    models = [load_checkpoint(p).to_model() for p in checkpoints]
    names = [str(p) for p in checkpoints]
    return evaluate_members(models, dataset, mode, train_counts, names, batch_size)


def report_json(report) -> str:
    return json.dumps(report, indent=2, ensure_ascii=False, sort_keys=True) + "\n"


def format_report(report) -> str:
    """Aligned plain-text rendering: member summary, then per-class F1 in descending order."""
    lines = [f"dataset {report['dataset']}  samples {report['samples']}  vote {report['vote']}"]
    width = max(len(m["name"]) for m in report["members"])
    for m in report["members"]:
        lines.append(f"  {m['name']:<{width}}  {100 * m['accuracy']:6.2f}%")
    lines.append(f"  {'model average':<{width}}  {100 * report['model_average']:6.2f}%")
    lines.append(f"  {'ensemble':<{width}}  {100 * report['ensemble_accuracy']:6.2f}%")
    lines.append(f"  {'macro F1':<{width}}  {report['macro_f1']:.3f}")
    lines.append("")
    cw = max([len("character")] + [len(r["character"]) for r in report["classes"]])
    lines.append(f"{'character':<{cw}}  {'F1':>5}  {'# val':>6}  {'# train':>7}")
    for r in report["classes"]:
        train = "" if r["train_count"] is None else str(r["train_count"])
        lines.append(f"{r['character']:<{cw}}  {r['f1']:5.3f}  {r['val_count']:>6}  {train:>7}")
    return "\n".join(lines) + "\n"
