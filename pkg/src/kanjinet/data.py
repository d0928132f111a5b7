"""Dataset containers and readers for MNIST, Kuzushiji-MNIST, Kuzushiji-49 and Kuzushiji-Kanji.

MNIST ships as IDX files, K-MNIST and K-49 as NPZ archives of NPY members,
and K-Kanji as a directory of PNG files per character. All readers return
plain numpy arrays; :class:`Dataset` bundles normalised images with labels.
"""
from __future__ import annotations

import ast
import gzip
import io
import logging
import os
import struct
import zipfile
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IngestionError, TruncationError, UnsupportedLayoutError

log = logging.getLogger(__name__)

IDX_UBYTE_RANK1 = 0x00000801
IDX_UBYTE_RANK3 = 0x00000803
NPY_MAGIC = b"\x93NUMPY"
CACHE_MAGIC = b"KFDS"
CACHE_VERSION = 1
_UNSTRATIFIED_STREAM = 0xFFFFFFFF

_NPY_DTYPES = {
    "|u1": np.uint8,
    "<u1": np.uint8,
    "u1": np.uint8,
    "<f4": np.dtype("<f4"),
}


@dataclass
class Dataset:
    """Labelled image collection.

    ``images`` is float32 (N, 1, H, W) in [0, 1]; ``labels`` int64 (N,);
    ``label_map[i]`` is the character identifier of class ``i``.
    """

    images: np.ndarray
    labels: np.ndarray
    label_map: list[str]
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise FormatError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.label_map)):
            raise FormatError("label outside label_map")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return len(self.label_map)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], list(self.label_map),
                       name or self.name, dict(self.meta))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: Fraction
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        frac = self.train_fraction
        if not isinstance(frac, Fraction):
            frac = Fraction(str(frac)) if isinstance(frac, float) else Fraction(frac)
            object.__setattr__(self, "train_fraction", frac)
        if not 0 < frac < 1:
            raise ConfigError(f"train_fraction must lie strictly between 0 and 1, got {frac}")


def normalize(images):
    """Map byte pixels to [0, 1] as float32."""
    return np.asarray(images, dtype=np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def parse_idx(data: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX stream (rank 1 or rank 3)."""
    if len(data) < 4:
        raise TruncationError("IDX stream shorter than its magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_UBYTE_RANK1, IDX_UBYTE_RANK3):
        raise FormatError(f"unknown IDX magic 0x{magic:08x}")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(data) < header:
        raise TruncationError("IDX stream ends inside its dimension header")
    shape = struct.unpack(f">{rank}I", data[4:header])
    expected = int(np.prod(shape, dtype=np.int64))
    if len(data) - header != expected:
        raise TruncationError(f"IDX declares {expected} payload bytes, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(shape).copy()


def write_idx(array) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim not in (1, 3):
        raise FormatError("IDX writer supports uint8 arrays of rank 1 or 3")
    magic = IDX_UBYTE_RANK1 if array.ndim == 1 else IDX_UBYTE_RANK3
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + np.ascontiguousarray(array).tobytes()


def _read_maybe_gz(path):
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        return gzip.decompress(raw)
    return raw


def load_idx(path) -> np.ndarray:
    return parse_idx(_read_maybe_gz(path))


# ---------------------------------------------------------------------------
# NPY / NPZ
# ---------------------------------------------------------------------------

def parse_npy(data: bytes) -> np.ndarray:
    """Decode a version 1.0 NPY stream holding uint8 or little-endian float32."""
    if data[:6] != NPY_MAGIC:
        raise FormatError("missing NPY magic")
    if len(data) < 10:
        raise TruncationError("NPY stream ends inside its preamble")
    major, minor = data[6], data[7]
    if (major, minor) != (1, 0):
        raise FormatError(f"unsupported NPY version {major}.{minor}")
    (hlen,) = struct.unpack("<H", data[8:10])
    if len(data) < 10 + hlen:
        raise TruncationError("NPY stream ends inside its header")
    try:
        header = ast.literal_eval(data[10:10 + hlen].decode("latin1"))
        descr, fortran, shape = header["descr"], header["fortran_order"], tuple(header["shape"])
    except (ValueError, SyntaxError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed NPY header: {exc}") from None
    if fortran:
        raise UnsupportedLayoutError("column-major NPY arrays are not supported")
    if descr not in _NPY_DTYPES:
        raise FormatError(f"unsupported NPY element type {descr!r}")
    dtype = np.dtype(_NPY_DTYPES[descr])
    count = int(np.prod(shape, dtype=np.int64))
    payload = data[10 + hlen:]
    if len(payload) != count * dtype.itemsize:
        raise TruncationError(f"NPY declares {count * dtype.itemsize} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_npy(array) -> bytes:
    """Encode a uint8 or float32 array as NPY v1.0 (used for fixtures and caches)."""
    array = np.ascontiguousarray(array)
    if array.dtype == np.uint8:
        descr = "|u1"
    elif array.dtype == np.float32:
        descr = "<f4"
        array = array.astype("<f4")
    else:
        raise FormatError(f"unsupported dtype {array.dtype}")
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {tuple(array.shape)!r}, }}"
    pad = -(10 + len(header) + 1) % 64
    header = (header + " " * pad + "\n").encode("latin1")
    return NPY_MAGIC + bytes([1, 0]) + struct.pack("<H", len(header)) + header + array.tobytes()


def parse_npz(data: bytes) -> dict[str, np.ndarray]:
    """Decode every ``*.npy`` member of a zip archive; other members are ignored."""
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile as exc:
        raise FormatError(f"corrupt NPZ archive: {exc}") from None
    out = {}
    with zf:
        for name in zf.namelist():
            if not name.endswith(".npy"):
                continue
            try:
                member = zf.read(name)
            except (zipfile.BadZipFile, zlib.error, EOFError) as exc:
                raise FormatError(f"corrupt NPZ member {name!r}: {exc}") from None
            try:
                out[name[:-4]] = parse_npy(member)
            except FormatError as exc:
                raise type(exc)(f"NPZ member {name!r}: {exc}") from None
    return out


def load_npz(path) -> dict[str, np.ndarray]:
    return parse_npz(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# PNG tree (K-Kanji)
# ---------------------------------------------------------------------------

def _read_png(path):
    from PIL import Image

    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise IngestionError(f"{path}: not a PNG file")
            if img.mode != "L":
                raise IngestionError(f"{path}: expected 8-bit grayscale PNG, got mode {img.mode}")
            if img.info.get("interlace"):
                raise IngestionError(f"{path}: interlaced PNG not supported")
            return np.asarray(img, dtype=np.uint8).copy()
    except IngestionError:
        raise
    except Exception as exc:  # PIL raises a zoo of types for bad files
        raise IngestionError(f"cannot decode {path}: {exc}") from None


def ingest_png_tree(root, name="kkanji") -> Dataset:
    """Build a dataset from ``root/<character>/*.png``; classes ordered by directory name."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root} is not a directory")
    classes, images, labels = [], [], []
    shape = None
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f for f in class_dir.iterdir() if f.suffix.lower() == ".png")
        if not files:
            log.warning("skipping empty class directory %s", class_dir)
            continue
        label = len(classes)
        classes.append(class_dir.name)
        for f in files:
            img = _read_png(f)
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise FormatError(f"{f}: image size {img.shape} differs from {shape}")
            images.append(img)
            labels.append(label)
    if not images:
        raise IngestionError(f"no PNG images under {root}")
    pixels = np.stack(images)[:, None]
    return Dataset(normalize(pixels), np.array(labels), classes, name)


# ---------------------------------------------------------------------------
# class selection and splitting
# ---------------------------------------------------------------------------

def select_top_k_classes(ds: Dataset, k: int) -> Dataset:
    """Keep the ``k`` most populated classes, relabelled 0..k-1 by descending count.

    Equal counts are ordered by ascending character identifier.
    """
    counts = ds.class_counts()
    present = [c for c in range(ds.num_classes) if counts[c] > 0]
    if k < 1 or k > len(present):
        raise ConfigError(f"cannot keep {k} classes out of {len(present)}")
    order = sorted(present, key=lambda c: (-counts[c], ds.label_map[c]))[:k]
    remap = np.full(ds.num_classes, -1, dtype=np.int64)
    remap[order] = np.arange(k)
    keep = np.flatnonzero(remap[ds.labels] >= 0)
    meta = dict(ds.meta, source_classes=ds.num_classes)
    return Dataset(ds.images[keep], remap[ds.labels[keep]], [ds.label_map[c] for c in order], ds.name, meta)


def _split_rng(seed, label):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), int(label)])))


def _train_count(frac: Fraction, count: int) -> int:
    n = int(frac * count + Fraction(1, 2))  # round half up
    if count >= 2:
        n = min(max(n, 1), count - 1)
    else:
        n = count
    return n


def stratified_split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Seeded per-class split; each class sends ``round(fraction * count)`` samples to train.

    Classes with at least two samples always contribute to both sides. Sample
    order within each side follows the original dataset order.
    """
    train_idx, test_idx = [], []
    if spec.stratified:
        for label in range(ds.num_classes):
            members = np.flatnonzero(ds.labels == label)
            if not len(members):
                continue
            perm = _split_rng(spec.seed, label).permutation(len(members))
            n = _train_count(spec.train_fraction, len(members))
            train_idx.append(members[perm[:n]])
            test_idx.append(members[perm[n:]])
    else:
        perm = _split_rng(spec.seed, _UNSTRATIFIED_STREAM).permutation(len(ds))
        n = _train_count(spec.train_fraction, len(ds))
        train_idx, test_idx = [perm[:n]], [perm[n:]]
    train_idx = np.sort(np.concatenate(train_idx)) if train_idx else np.array([], dtype=np.int64)
    test_idx = np.sort(np.concatenate(test_idx)) if test_idx else np.array([], dtype=np.int64)
    return ds.subset(train_idx), ds.subset(test_idx)


# ---------------------------------------------------------------------------
# packed cache
# ---------------------------------------------------------------------------

def save_cache(ds: Dataset, path) -> None:
    """Write the ``KFDS`` packed cache (u8 pixels, u16 labels, little-endian)."""
    n, c, h, w = ds.images.shape
    if ds.num_classes > 0xFFFF:
        raise FormatError("KFDS stores labels as u16")
    pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<H4I", CACHE_VERSION, n, c, h, w))
        fh.write(pixels.tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())


def load_cache(path, label_map=None, name=None) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a KFDS cache")
    if len(raw) < 22:
        raise TruncationError(f"{path}: truncated KFDS header")
    version, n, c, h, w = struct.unpack("<H4I", raw[4:22])
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported KFDS version {version}")
    npix = n * c * h * w
    if len(raw) != 22 + npix + 2 * n:
        raise TruncationError(f"{path}: KFDS payload size mismatch")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=npix, offset=22).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=22 + npix).astype(np.int64)
    if label_map is None:
        label_map = [str(i) for i in range(int(labels.max()) + 1 if n else 0)]
    return Dataset(normalize(pixels), labels, list(label_map), name or Path(path).stem)


# ---------------------------------------------------------------------------
# official distributions
# ---------------------------------------------------------------------------

def _find(directory, *candidates):
    directory = Path(directory)
    for cand in candidates:
        for suffix in ("", ".gz"):
            p = directory / (cand + suffix)
            if p.exists():
                return p
    raise IngestionError(f"none of {candidates} found in {directory}")


def _read_classmap(path, count):
    """Read an ``index,codepoint,char`` CSV (last column wins); fall back to decimal indices."""
    if path is None or not Path(path).exists():
        return [str(i) for i in range(count)]
    import csv

    labels = [str(i) for i in range(count)]
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip().isdigit():
                continue
            idx = int(row[0])
            if idx < count:
                labels[idx] = row[-1] if len(row) > 1 else row[0]
    return labels


def _idx_pair(directory, prefix, name, label_map=None):
    imgs = load_idx(_find(directory, f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"))
    labs = load_idx(_find(directory, f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"))
    nclass = int(labs.max()) + 1
    return Dataset(normalize(imgs[:, None]), labs, label_map or [str(i) for i in range(nclass)], name)


def load_mnist(directory) -> tuple[Dataset, Dataset]:
    """Official MNIST IDX files (optionally gzipped) -> (train, test)."""
    return _idx_pair(directory, "train", "mnist"), _idx_pair(directory, "t10k", "mnist")


def _npz_array(path):
    arrays = load_npz(path)
    if not arrays:
        raise IngestionError(f"{path}: archive holds no arrays")
    return arrays.get("arr_0", next(iter(arrays.values())))


def _load_kuzushiji_npz(directory, prefix, name):
    directory = Path(directory)
    split = []
    for part in ("train", "test"):
        imgs = _npz_array(directory / f"{prefix}-{part}-imgs.npz")
        labs = _npz_array(directory / f"{prefix}-{part}-labels.npz")
        split.append((imgs, labs))
    nclass = int(max(split[0][1].max(), split[1][1].max())) + 1
    label_map = _read_classmap(directory / f"{prefix}_classmap.csv", nclass)
    return tuple(Dataset(normalize(i[:, None]), l, label_map, name) for i, l in split)


def load_kmnist(directory) -> tuple[Dataset, Dataset]:
    """Kuzushiji-MNIST from its NPZ release, or its IDX release as a fallback."""
    directory = Path(directory)
    if (directory / "kmnist-train-imgs.npz").exists():
        return _load_kuzushiji_npz(directory, "kmnist", "kmnist")
    label_map = _read_classmap(directory / "kmnist_classmap.csv", 10)
    return _idx_pair(directory, "train", "kmnist", label_map), _idx_pair(directory, "t10k", "kmnist", label_map)


def load_k49(directory) -> tuple[Dataset, Dataset]:
    return _load_kuzushiji_npz(directory, "k49", "k49")


def load_kkanji(root, top_classes=150, split=SplitSpec(Fraction(7, 10), seed=0)) -> tuple[Dataset, Dataset]:
    """K-Kanji PNG tree reduced to its most populated classes and split 7:3."""
    ds = ingest_png_tree(root, "kkanji")
    if top_classes:
        ds = select_top_k_classes(ds, top_classes)
    return stratified_split(ds, split)


LOADERS = {
    "mnist": load_mnist,
    "kmnist": load_kmnist,
    "k49": load_k49,
    "kkanji": load_kkanji,
}


def load_dataset(name, directory, **kwargs):
    try:
        loader = LOADERS[name]
    except KeyError:
        raise ConfigError(f"unknown dataset {name!r}; choose from {sorted(LOADERS)}") from None
    if not os.path.exists(directory):
        raise IngestionError(f"{directory} does not exist")
    return loader(directory, **kwargs)
