"""
Where does the model look?
==========================

Occlusion sensitivity greys out square patches and records how much the
true-class probability drops. Gradient x input multiplies each pixel by
the sensitivity of the class logit to it. Both maps are written side by side
into a single PGM grid.
"""

import numpy as np
from sklearn.datasets import load_digits

from kanjinet import Dataset, SplitSpec, TrainConfig, train
from kanjinet.data import stratified_split
from kanjinet.attribution import input_gradient_map, occlusion_map, render_grid
from kanjinet.models import arch_cnn1, build_model

digits = load_digits()
images = np.kron(digits.images / 16.0, np.ones((2, 2)))[:, None].astype(np.float32)
ds = Dataset(images, digits.target, [str(d) for d in range(10)], "digits")
train_ds, test_ds = stratified_split(ds, SplitSpec(0.7, seed=0))

model, hist = train(build_model(arch_cnn1(ds.input_shape, 10), 0), train_ds, test_ds,
                    TrainConfig(epochs=4, batch_size=32))
print(f"validation accuracy {hist.val_acc[-1]:.3f}")

# %%
# One row per sample: the image, then its occlusion map and gradient map.
# Mid-gray is zero; brighter pixels support the class, darker ones oppose it.
picks = [0, 1, 2, 3]
rows = []
for i in picks:
    img, label = test_ds.images[i], int(test_ds.labels[i])
    rows.append([occlusion_map(model, img, label, patch=4, stride=2),
                 input_gradient_map(model, img, label)])
canvas = render_grid(rows, [test_ds.images[i] for i in picks], "saliency_grid.pgm")
print(f"wrote saliency_grid.pgm ({canvas.shape[1]}x{canvas.shape[0]})")

# %%
# The occlusion maps are mostly positive: hiding ink lowers confidence.
for i, (occ, grad) in zip(picks, rows):
    print(f"sample {i}: occlusion mean {occ.mean():+.4f}, gradient x input sum {grad.sum():+.3f}")
