"""
Three-member ensemble on small handwritten digits
==================================================

The 8x8 digits bundled with scikit-learn stand in for MNIST so the whole
script runs in a few minutes on one core. Each image is upsampled to
16x16 so both average-pooling stages have something to pool.
"""

import numpy as np
from sklearn.datasets import load_digits

from kanjinet import Dataset, SplitSpec, TrainConfig
from kanjinet.data import stratified_split
from kanjinet.ensemble import format_report
from kanjinet.pipeline import train_ensemble

# %%
# Build a dataset: pixels in [0, 1], shape (N, 1, 16, 16).
digits = load_digits()
images = np.kron(digits.images / 16.0, np.ones((2, 2)))[:, None].astype(np.float32)
ds = Dataset(images, digits.target, [str(d) for d in range(10)], "digits")
train_ds, test_ds = stratified_split(ds, SplitSpec(0.7, seed=0))
print(f"{len(train_ds)} train / {len(test_ds)} test samples, input {ds.input_shape}")

# %%
# Train CNN-1, CNN-2 and CNN-3. There is no earlier dataset to borrow a
# stem from, so CNN-3 starts from random weights here.
cfg = TrainConfig(epochs=4, batch_size=32, seed=0)
run = train_ensemble(train_ds, test_ds, cfg)

for name, hist in run.histories.items():
    print(f"{name}: loss {hist.loss[0]:.3f} -> {hist.loss[-1]:.3f}")

# %%
# The soft maxsum vote adds the members' probability rows and takes the
# argmax. Classes are listed by descending F1.
print(format_report(run.report))
