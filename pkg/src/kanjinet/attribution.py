"""Pixel attribution maps: occlusion sensitivity and gradient x input.

Positive values mark pixels that support the target class, negative values
pixels that argue against it.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

SEPARATOR = 2


def _as_chw(model, image):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    if tuple(image.shape) != model.spec.input_shape:
        raise DimensionError(f"image {image.shape} does not match model input {model.spec.input_shape}")
    return image


def default_patch(height):
    """(patch, stride) giving roughly a 13x13 response grid for 28px and 64px inputs."""
    return (4, 2) if height <= 32 else (8, 4)


def occlusion_map(model, image, target_class, patch=None, stride=None, baseline=0.0, batch_size=64):
    """Average drop in target probability over every patch covering each pixel.

    Pixels never covered by a patch (possible when ``stride > patch``) stay 0.
    """
    image = _as_chw(model, image)
    _, h, w = image.shape
    if patch is None:
        patch, default_stride = default_patch(h)
        stride = stride or default_stride
    stride = stride or patch
    if patch < 1 or stride < 1:
        raise ConfigError("patch and stride must be positive")
    if patch > h or patch > w:
        raise ConfigError(f"patch {patch} larger than image {h}x{w}")
    reference = T.softmax(model.forward(image[None]).astype(np.float64))[0, target_class]

    positions = [(i, j) for i in range(0, h - patch + 1, stride) for j in range(0, w - patch + 1, stride)]
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    for start in range(0, len(positions), batch_size):
        chunk = positions[start:start + batch_size]
        batch = np.repeat(image[None], len(chunk), axis=0)
        for k, (i, j) in enumerate(chunk):
            batch[k, :, i:i + patch, j:j + patch] = baseline
        probs = T.softmax(model.forward(batch).astype(np.float64))[:, target_class]
        for (i, j), p in zip(chunk, probs):
            total[i:i + patch, j:j + patch] += reference - p
            count[i:i + patch, j:j + patch] += 1
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def input_gradient(model, image, target_class):
    """d logit[target] / d image for a single (C, H, W) image, eval phase."""
    image = _as_chw(model, image)
    logits, cache = model.forward_with_cache(image[None], train=False)
    seed = np.zeros_like(logits)
    seed[0, target_class] = 1
    _, d_input = model.backward(cache, seed, wanted=(), input_grad=True)
    return d_input[0]


def input_gradient_map(model, image, target_class):
    """Gradient x input, summed over channels, as an H x W map."""
    image = _as_chw(model, image)
    grad = input_gradient(model, image, target_class)
    return (grad.astype(np.float64) * image).sum(axis=0)


def _map_to_gray(m):
    m = np.asarray(m, dtype=np.float64)
    scale = np.max(np.abs(m)) if m.size else 0.0
    if scale == 0 or not np.isfinite(scale):
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.clip(np.rint(128 + 127 * m / scale), 0, 255).astype(np.uint8)


def _image_to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def grid_size(rows, cols, height, width, sep=SEPARATOR):
    """Pixel (height, width) of a grid of ``rows`` x ``cols`` cells."""
    return rows * height + (rows - 1) * sep, cols * width + (cols - 1) * sep


def render_grid(maps, images, path, sep=SEPARATOR):
    """Write an 8-bit PGM: one row per image, original first, then its maps.

    ``maps[r]`` is either a single map or a list of maps for row ``r``.
    Each map is rescaled on its own so that 0 is mid-gray (128) and the
    largest magnitude reaches 1 or 255. Separators are white.
    """
    if not maps or not images:
        raise ConfigError("render_grid needs at least one image and map")
    if len(maps) != len(images):
        raise ConfigError(f"{len(maps)} map rows for {len(images)} images")
    rows = [[m] if np.asarray(m).ndim == 2 else list(m) for m in maps]
    cells = [[_image_to_gray(img)] + [_map_to_gray(m) for m in row] for img, row in zip(images, rows)]
    h, w = cells[0][0].shape
    ncols = len(cells[0])
    for row in cells:
        if len(row) != ncols or any(c.shape != (h, w) for c in row):
            raise DimensionError("every grid row needs the same number of cells of equal extents")
    height, width = grid_size(len(cells), ncols, h, w, sep)
    canvas = np.full((height, width), 255, dtype=np.uint8)
    for r, row in enumerate(cells):
        for c, cell in enumerate(row):
            y, x = r * (h + sep), c * (w + sep)
            canvas[y:y + h, x:x + w] = cell
    write_pgm(canvas, path)
    return canvas


def write_pgm(pixels, path):
    pixels = np.asarray(pixels, dtype=np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    width, height = int(fields[1]), int(fields[2])
    return np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos + 1).reshape(height, width)
