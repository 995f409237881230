"""Dataset I/O, synthetic phantom generation, and deterministic batching.

A dataset directory holds binary PGM files plus a split manifest:

    root/images/<id>.pgm   grayscale image, maxval 255
    root/masks/<id>.pgm    class indices stored as raw bytes
    root/split.txt         one "<split> <id>" line per sample

Images are normalized to [0, 1] on load; masks stay integer class maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .tensor import Rng

_SPLITS = ("train", "val", "test")
_SM_GOLDEN = 0x9E3779B97F4A7C15
_U64 = 0xFFFFFFFFFFFFFFFF


@dataclass
class Sample:
    id: str
    image: np.ndarray  # float64 [H, W] in [0, 1]
    mask: np.ndarray  # int64 [H, W] class indices


@dataclass
class DatasetSplit:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def ids(self, name: str) -> list[str]:
        if name not in _SPLITS:
            raise ConfigError(f"unknown split '{name}' (want train/val/test)")
        return getattr(self, name)


# --- PGM files ------------------------------------------------------------------


def write_pgm(values: np.ndarray, path):
    """Binary (P5) PGM with maxval 255."""
    a = np.asarray(values)
    if a.ndim != 2:
        raise FormatError(f"PGM payload must be 2-d, got shape {a.shape}")
    if a.min() < 0 or a.max() > 255:
        raise FormatError(f"PGM values must lie in [0, 255], got [{a.min()}, {a.max()}]")
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(a.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:2] != b"P5":
        raise FormatError(f"'{path}': not a binary P5 PGM (starts with {buf[:2]!r})")
    pos = 2

    def next_int(what: str) -> int:
        nonlocal pos
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tok = buf[start:pos]
        try:
            return int(tok)
        except ValueError:
            raise FormatError(f"'{path}': malformed PGM header token {tok!r} for {what}") from None

    w = next_int("width")
    h = next_int("height")
    maxval = next_int("maxval")
    if w < 1 or h < 1:
        raise FormatError(f"'{path}': bad PGM dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"'{path}': unsupported PGM maxval {maxval} (want 255)")
    pos += 1  # single whitespace byte separating header and payload
    payload = buf[pos:]
    if len(payload) < w * h:
        raise FormatError(f"'{path}': truncated PGM payload ({len(payload)} of {w * h} bytes)")
    if len(payload) > w * h:
        raise FormatError(f"'{path}': {len(payload) - w * h} trailing bytes after PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


# --- dataset loading --------------------------------------------------------------


def load_dataset(root, num_classes: int) -> tuple[list[Sample], DatasetSplit]:
    root = Path(root)
    manifest = root / "split.txt"
    if not manifest.is_file():
        raise DataError(f"missing split manifest '{manifest}'")
    split = DatasetSplit()
    samples: list[Sample] = []
    seen: set[str] = set()
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in _SPLITS:
            raise DataError(f"{manifest}:{lineno}: malformed split line {line!r}")
        split_name, sample_id = parts
        if sample_id in seen:
            raise DataError(f"{manifest}:{lineno}: duplicate sample id '{sample_id}'")
        seen.add(sample_id)
        img_path = root / "images" / f"{sample_id}.pgm"
        mask_path = root / "masks" / f"{sample_id}.pgm"
        if not img_path.is_file():
            raise DataError(f"missing image file '{img_path}'")
        if not mask_path.is_file():
            raise DataError(f"missing mask file '{mask_path}'")
        img = read_pgm(img_path)
        mask = read_pgm(mask_path)
        if img.shape != mask.shape:
            raise DataError(
                f"sample '{sample_id}': image {img.shape} and mask {mask.shape} shapes differ"
            )
        if mask.max() >= num_classes:
            raise DataError(
                f"sample '{sample_id}': mask value {int(mask.max())} outside [0, {num_classes})"
            )
        samples.append(Sample(id=sample_id, image=img / 255.0, mask=mask.astype(np.int64)))
        split.ids(split_name).append(sample_id)
    if not samples:
        raise DataError(f"'{manifest}' lists no samples")
    return samples, split


def select_samples(samples: list[Sample], ids: list[str]) -> list[Sample]:
    by_id = {s.id: s for s in samples}
    return [by_id[i] for i in ids]


# --- synthetic phantoms -------------------------------------------------------------


def generate_phantom(rng: Rng, size: int, num_classes: int = 4, sample_id: str = "") -> Sample:
    """Cardiac-like phantom: bright inner disk (class 3) inside a darker ring
    (class 2) with a crescent chamber (class 1) attached outside the ring."""
    if size < 64:
        raise ConfigError(f"phantom size must be >= 64, got {size}")
    if num_classes < 4:
        raise ConfigError(f"phantoms use 4 classes, got num_classes={num_classes}")
    cx = size * rng.uniform_in(0.42, 0.58)
    cy = size * rng.uniform_in(0.42, 0.58)
    r_inner = size * rng.uniform_in(0.06, 0.10)
    r_outer = r_inner + size * rng.uniform_in(0.03, 0.05)
    r_cres = size * rng.uniform_in(0.07, 0.11)
    angle = rng.uniform_in(0.0, 2.0 * math.pi)
    d = r_outer + r_cres * rng.uniform_in(0.2, 0.5)
    ax = cx + d * math.cos(angle)
    ay = cy + d * math.sin(angle)

    yy, xx = np.mgrid[0:size, 0:size]
    xx = xx + 0.5
    yy = yy + 0.5
    dist = np.hypot(xx - cx, yy - cy)
    dist_c = np.hypot(xx - ax, yy - ay)

    mask = np.zeros((size, size), dtype=np.int64)
    mask[(dist_c <= r_cres) & (dist > r_outer)] = 1
    mask[(dist <= r_outer) & (dist > r_inner)] = 2
    mask[dist <= r_inner] = 3

    base = np.array([0.20, 0.70, 0.40, 0.85])
    image = base[mask] + 0.05 * rng.normals(size * size).reshape(size, size)
    return Sample(id=sample_id, image=np.clip(image, 0.0, 1.0), mask=mask)


def split_counts(n: int, fracs: tuple[float, float, float]) -> tuple[int, int, int]:
    """Largest-remainder apportionment of n samples into train/val/test."""
    if any(f < 0.0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be >= 0 and sum to 1, got {fracs}")
    base = [int(math.floor(n * f)) for f in fracs]
    rema = [n * f - b for f, b in zip(fracs, base)]
    for _ in range(n - sum(base)):
        i = max(range(3), key=lambda j: (rema[j], -j))  # ties go to the earlier split
        base[i] += 1
        rema[i] = -1.0
    return tuple(base)


def generate_dataset(out_dir, n: int, size: int, seed: int, fracs=(0.6, 0.1, 0.3)) -> DatasetSplit:
    """Write n phantoms plus split.txt under out_dir; returns the split."""
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    n_train, n_val, _ = split_counts(n, tuple(fracs))
    rng = Rng(seed)
    split = DatasetSplit()
    lines = []
    for i in range(n):
        sample_id = f"ph{i:04d}"
        s = generate_phantom(rng, size, sample_id=sample_id)
        write_pgm(np.rint(s.image * 255.0), out / "images" / f"{sample_id}.pgm")
        write_pgm(s.mask, out / "masks" / f"{sample_id}.pgm")
        split_name = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        split.ids(split_name).append(sample_id)
        lines.append(f"{split_name} {sample_id}")
    (out / "split.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return split


# --- batching and resizing ------------------------------------------------------------


def batch_iter(samples: list[Sample], batch_size: int, seed: int, epoch: int):
    """Yield (images [B,1,S,S], masks [B,S,S]) batches in an order fully
    determined by (seed, epoch); the final short batch is kept."""
    if not samples:
        raise DataError("cannot batch an empty sample list")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(samples)
    order = list(range(n))
    shuffle_rng = Rng((seed + (epoch + 1) * _SM_GOLDEN) & _U64)
    for i in range(n - 1, 0, -1):  # Fisher-Yates
        j = shuffle_rng.randint(i + 1)
        order[i], order[j] = order[j], order[i]
    for start in range(0, n, batch_size):
        chunk = [samples[k] for k in order[start : start + batch_size]]
        images = np.stack([s.image for s in chunk])[:, None]
        masks = np.stack([s.mask for s in chunk])
        yield images, masks


def resize_nearest(sample: Sample, target: int) -> Sample:
    """Nearest-neighbor square resize: source index = floor(dst * src / target)."""
    if target < 32 or target % 32 != 0:
        raise ConfigError(f"resize target must be a positive multiple of 32, got {target}")
    src = sample.image.shape[0]
    if sample.image.shape != (src, src):
        raise DataError(f"resize expects square samples, got {sample.image.shape}")
    if src == target:
        return sample
    idx = (np.arange(target) * src) // target
    return Sample(
        id=sample.id,
        image=sample.image[np.ix_(idx, idx)].copy(),
        mask=sample.mask[np.ix_(idx, idx)].copy(),
    )
