"""
Reusing a frozen feature stem
=============================

A ``cnn3-base`` model learns digits 0-4. Its convolutional stem then seeds
a CNN-3 for digits 5-9, with the stem frozen so only the new head trains.
We compare optimiser steps to a fixed validation accuracy against a CNN-3
trained from scratch.
"""

import numpy as np
from sklearn.datasets import load_digits

from kanjinet import Dataset, SplitSpec, TrainConfig, train, transfer_init
from kanjinet.data import stratified_split
from kanjinet.models import arch_cnn3, build_model
from kanjinet.pipeline import base_checkpoint

digits = load_digits()
images = np.kron(digits.images / 16.0, np.ones((2, 2)))[:, None].astype(np.float32)


def subset(lo):
    keep = (digits.target >= lo) & (digits.target < lo + 5)
    ds = Dataset(images[keep], digits.target[keep] - lo, [str(d) for d in range(lo, lo + 5)], f"digits{lo}")
    return stratified_split(ds, SplitSpec(0.7, seed=1))


source_train, source_test = subset(0)
target_train, target_test = subset(5)
cfg = TrainConfig(epochs=5, batch_size=32, seed=0)

# %%
# Pre-train the base on the source task.
base_spec, _ = arch_cnn3(source_train.input_shape, 5)
base_model, base_hist = train(build_model(base_spec, 0), source_train, source_test, cfg)
print(f"base accuracy on digits 0-4: {base_hist.val_acc[-1]:.3f}")
base = base_checkpoint(base_model, "digits0", base_hist)

# %%
# Transfer: copied stem parameters are marked non-trainable and keep their
# exact bytes through training.
_, full = arch_cnn3(target_train.input_shape, 5)
frozen_model = transfer_init(base, full, freeze=True)
print("frozen:", sorted(k for k, v in frozen_model.trainable.items() if not v))

_, frozen_hist = train(frozen_model, target_train, target_test, cfg)
_, scratch_hist = train(build_model(full, 0), target_train, target_test, cfg)

target = 0.9
print(f"steps to {target:.0%}: frozen stem {frozen_hist.steps_to_accuracy(target)}, "
      f"scratch {scratch_hist.steps_to_accuracy(target)}")
print(f"final accuracy: frozen stem {frozen_hist.val_acc[-1]:.3f}, scratch {scratch_hist.val_acc[-1]:.3f}")
