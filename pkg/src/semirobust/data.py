"""Dataset ingestion, labeled/unlabeled splitting and augmentation.

Sources:

* ``idx``: big-endian idx archives (the MNIST file format), optionally gzipped.
* ``imagedir``: ``root/<class index>/*.png`` trees read with Pillow.
* ``digits``: a synthetic digit-style set; sklearn's bundled 8x8 handwritten
  digits are upsampled to 16x16 and randomly warped, so arbitrarily many
  distinct samples can be drawn from a fixed set of writers.
* ``blobs``: 2-D Gaussian blobs stored as ``(1, 1, 2)`` images, for toy runs.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .exceptions import ContractError, DataError

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


@dataclass
class Dataset:
    """Images ``x`` in ``[0, 1]``, shape ``(N, C, H, W)``; ``y`` may be None.

    ``kind`` is ``"digits"`` or ``"natural"``; only natural images are
    augmented with crops and flips.
    """

    x: torch.Tensor
    y: torch.Tensor | None
    kind: str = "digits"
    num_classes: int = 10

    def __len__(self):
        return int(self.x.shape[0])

    def subset(self, idx) -> "Dataset":
        idx = torch.as_tensor(np.asarray(idx, dtype=np.int64))
        return Dataset(self.x[idx], None if self.y is None else self.y[idx], self.kind, self.num_classes)


@dataclass(frozen=True)
class SplitSpec:
    labeled_count: int
    unlabeled_count: int | None = None
    seed: int = 0
    strip_labels: bool = True


def read_idx(path: str | Path) -> np.ndarray:
    """Parse an idx archive into an array of its declared shape."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header at byte offset {len(raw)}")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0:
        raise DataError(f"{path}: bad magic at byte offset 0")
    if code not in _IDX_DTYPES:
        raise DataError(f"{path}: unknown element type 0x{code:02x} at byte offset 2")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = np.dtype(_IDX_DTYPES[code])
    expected = int(np.prod(dims)) * dtype.itemsize
    body = raw[header_end:]
    if len(body) != expected:
        raise DataError(
            f"{path}: expected {expected} data bytes after header, found {len(body)} "
            f"(byte offset {header_end + min(len(body), expected)})"
        )
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> Path:
    arr = np.ascontiguousarray(array)
    by_dtype = {np.dtype(v): k for k, v in _IDX_DTYPES.items()}
    be_dtype = arr.dtype.newbyteorder(">") if arr.dtype.itemsize > 1 else arr.dtype
    if be_dtype not in by_dtype:
        raise ContractError(f"dtype {arr.dtype} has no idx encoding")
    header = struct.pack(">HBB", 0, by_dtype[be_dtype], arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    path = Path(path)
    path.write_bytes(header + arr.astype(be_dtype).tobytes())
    return path


def _to_images(arr: np.ndarray) -> torch.Tensor:
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[:, None]
    elif arr.ndim != 4:
        raise DataError(f"image archive must have 3 or 4 dims, found {arr.ndim}")
    if arr.dtype.kind in "ui":
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32)
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise DataError("float pixel values must lie in [0, 1]")
    return torch.from_numpy(arr.copy())


def _check_labels(labels: np.ndarray, num_classes: int, n: int) -> torch.Tensor:
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if len(labels) != n:
        raise DataError(f"{len(labels)} labels for {n} images")
    bad = np.nonzero((labels < 0) | (labels >= num_classes))[0]
    if len(bad):
        raise DataError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {num_classes})")
    return torch.from_numpy(labels)


def load_dataset(
    path: str | Path | None,
    format: str,
    labels_path: str | Path | None = None,
    num_classes: int = 10,
    kind: str = "digits",
    **generator_kwargs,
) -> Dataset:
    """Load images normalized to ``[0, 1]`` with 0-based class labels."""
    if format == "idx":
        x = _to_images(read_idx(path))
        y = None if labels_path is None else _check_labels(read_idx(labels_path), num_classes, len(x))
        return Dataset(x, y, kind, num_classes)
    if format == "imagedir":
        return _load_imagedir(Path(path), num_classes, kind)
    if format == "digits":
        return make_digits(**generator_kwargs)
    if format == "blobs":
        return make_blobs(**generator_kwargs)
    raise ContractError(f"unknown dataset format {format!r}")


def _load_imagedir(root: Path, num_classes: int, kind: str) -> Dataset:
    from PIL import Image

    images, labels = [], []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            label = int(class_dir.name)
        except ValueError as exc:
            raise DataError(f"class directory {class_dir.name!r} is not an integer label") from exc
        for file in sorted(class_dir.iterdir()):
            if file.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp", ".pgm"):
                continue
            with Image.open(file) as im:
                arr = np.asarray(im.convert("L" if im.mode in ("L", "1", "P", "I") else "RGB"))
            images.append(arr[..., None] if arr.ndim == 2 else arr)
            labels.append(label)
    if not images:
        raise DataError(f"no images under {root}")
    shapes = {a.shape for a in images}
    if len(shapes) != 1:
        raise DataError(f"images under {root} have differing shapes {sorted(shapes)}")
    arr = np.stack(images).transpose(0, 3, 1, 2)
    return Dataset(_to_images(arr), _check_labels(np.array(labels), num_classes, len(arr)), kind, num_classes)


def _warp_digit(img8: np.ndarray, rng: np.random.Generator, size: int, strength: float) -> np.ndarray:
    # glyphs fill three quarters of the canvas, as handwritten digit scans do
    glyph = ndimage.zoom(img8 / 16.0, round(0.75 * size) / 8, order=1)
    canvas = np.zeros((size, size))
    off = (size - glyph.shape[0]) // 2
    canvas[off : off + glyph.shape[0], off : off + glyph.shape[1]] = glyph
    if strength <= 0:
        return np.clip(canvas, 0, 1)
    # small random affine about the center plus a smooth elastic field
    angle = np.deg2rad(rng.uniform(-5, 5) * strength)
    scale = 1 + rng.uniform(-0.08, 0.08) * strength
    shear = rng.uniform(-0.15, 0.15) * strength
    mat = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) @ np.array(
        [[1, shear], [0, 1]]
    ) / scale
    center = (size - 1) / 2
    offset = center - mat @ np.array([center, center])
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    coords = np.stack([rr, cc]).reshape(2, -1).astype(float)
    coords = mat @ coords + offset[:, None]
    field = rng.normal(size=(2, size, size))
    field = np.stack([ndimage.gaussian_filter(f, 2.0) for f in field])
    field *= 1.2 * strength / (np.abs(field).max() + 1e-12)
    coords += field.reshape(2, -1)
    out = ndimage.map_coordinates(canvas, coords, order=1, cval=0.0).reshape(size, size)
    if rng.random() < 0.3 * strength:
        out = ndimage.grey_dilation(out, size=(2, 2))
    out *= rng.uniform(0.8, 1.0) / max(out.max(), 1e-6)
    return np.clip(out, 0, 1)


def make_digits(
    n_train: int = 5000,
    n_test: int = 500,
    seed: int = 0,
    size: int = 28,
    strength: float = 1.0,
    test_writers: int = 500,
) -> tuple[Dataset, Dataset]:
    """Synthetic digit-style train/test sets with disjoint source glyphs.

    The 1797 sklearn glyphs are split once (seeded) into a test pool of
    ``test_writers`` glyphs and a training pool holding the rest; every
    sample is an independent random warp of a glyph from its pool.
    """
    from sklearn.datasets import load_digits

    bunch = load_digits()
    images, targets = bunch.images, bunch.target
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(images))
    test_pool, train_pool = perm[:test_writers], perm[test_writers:]

    def draw(pool, n):
        picks = pool[rng.permutation(np.arange(n) % len(pool))] if n else pool[:0]
        x = np.stack([_warp_digit(images[i], rng, size, strength) for i in picks]) if n else np.zeros((0, size, size))
        return Dataset(torch.from_numpy(x[:, None].astype(np.float32)), torch.from_numpy(targets[picks].astype(np.int64)))

    return draw(train_pool, n_train), draw(test_pool, n_test)


def make_blobs(n: int = 200, seed: int = 0, num_classes: int = 2, spread: float = 0.08) -> Dataset:
    """Gaussian blobs in the unit square, one per class, as ``(1, 1, 2)`` images."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centers = 0.5 + 0.3 * np.stack([np.cos(angles), np.sin(angles)], 1)
    y = np.arange(n) % num_classes
    pts = np.clip(centers[y] + rng.normal(0, spread, (n, 2)), 0, 1)
    return Dataset(
        torch.from_numpy(pts.astype(np.float32)).view(n, 1, 1, 2),
        torch.from_numpy(y.astype(np.int64)),
        kind="toy",
        num_classes=num_classes,
    )


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Seeded partition into a labeled and an unlabeled part."""
    n = len(dataset)
    unlabeled = n - spec.labeled_count if spec.unlabeled_count is None else spec.unlabeled_count
    if spec.labeled_count < 0 or unlabeled < 0 or spec.labeled_count + unlabeled > n:
        raise ContractError(f"cannot take {spec.labeled_count} labeled + {unlabeled} unlabeled from {n} samples")
    perm = np.random.default_rng(spec.seed).permutation(n)
    lab_idx = np.sort(perm[: spec.labeled_count])
    unl_idx = np.sort(perm[spec.labeled_count : spec.labeled_count + unlabeled])
    labeled = dataset.subset(lab_idx)
    unl = dataset.subset(unl_idx)
    if spec.strip_labels:
        unl.y = None
    return labeled, unl


def augment(x: torch.Tensor, rng: np.random.Generator, pad: int = 4, flip: bool | None = None) -> torch.Tensor:
    """Zero-pad, random-crop back to size, then flip left-right with p=0.5.

    Accepts one image ``(C, H, W)`` or a batch; each image draws its own
    crop offset. ``flip`` forces the flip decision when given.
    """
    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    n, _, h, w = xb.shape
    padded = torch.nn.functional.pad(xb, (pad, pad, pad, pad))
    out = torch.empty_like(xb)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5 if flip is None else np.full(n, flip)
    for i in range(n):
        oy, ox = offsets[i]
        crop = padded[i, :, oy : oy + h, ox : ox + w]
        out[i] = crop.flip(-1) if flips[i] else crop
    return out[0] if single else out


def crop(x: torch.Tensor, offset: tuple[int, int], pad: int = 4) -> torch.Tensor:
    """Deterministic pad-and-crop used to check the augmentation geometry."""
    h, w = x.shape[-2:]
    padded = torch.nn.functional.pad(x, (pad, pad, pad, pad))
    oy, ox = offset
    return padded[..., oy : oy + h, ox : ox + w]
