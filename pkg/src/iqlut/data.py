"""Training data: directory ingestion, seeded crop batching, and a synthetic
texture generator for self-contained desk-scale runs."""

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .imaging import ImagePlane, load_image, luminance, save_image
from .resize import resize_batch

IMAGE_EXTS = (".png", ".bmp")


def list_images(directory) -> list[str]:
    try:
        names = sorted(os.listdir(directory))
    except OSError as exc:
        raise DataError(f"cannot list dataset directory: {directory}") from exc
    paths = [os.path.join(directory, n) for n in names
             if n.lower().endswith(IMAGE_EXTS)]
    if not paths:
        raise DataError(f"no images found under {directory}")
    return paths


def load_luminance_dir(directory) -> list[ImagePlane]:
    return [luminance(load_image(p)) for p in list_images(directory)]


@dataclass
class BatchStream:
    """Seeded stream of (lr, hr) crop batches from a set of HR planes.

    HR crops are axis-aligned at random offsets with random flip/rotation
    augmentation; LR counterparts come from antialiased bicubic downscaling
    of the crop itself. Identical seeds give identical batch sequences.
    """

    planes: list[np.ndarray]
    scale: int
    crop: int
    rng: np.random.Generator

    def __post_init__(self):
        if not self.planes:
            raise DataError("no HR planes to sample from")
        if self.crop % self.scale:
            raise DataError(f"crop {self.crop} not divisible by scale {self.scale}")
        for p in self.planes:
            if p.shape[0] < self.crop or p.shape[1] < self.crop:
                raise DataError(
                    f"crop {self.crop} exceeds image {p.shape[0]}x{p.shape[1]}"
                )

    def batch(self, size: int):
        """(lr, hr) arrays shaped (size, 1, crop/scale, crop/scale) and
        (size, crop, crop)."""
        hr = np.empty((size, self.crop, self.crop), dtype=np.float64)
        for n in range(size):
            img = self.planes[int(self.rng.integers(len(self.planes)))]
            y = int(self.rng.integers(img.shape[0] - self.crop + 1))
            x = int(self.rng.integers(img.shape[1] - self.crop + 1))
            patch = img[y:y + self.crop, x:x + self.crop]
            if self.rng.integers(2):
                patch = patch[:, ::-1]
            hr[n] = np.rot90(patch, k=int(self.rng.integers(4)))
        lr = resize_batch(hr, 1.0 / self.scale, "bicubic")[:, None]
        return lr, hr


def ingest_dataset(directory, scale: int, crop: int, seed: int,
                   batch_size: int = 16) -> "BatchIterator":
    """Endless seeded batch iterator over the HR images in a directory."""
    planes = [p.data for p in load_luminance_dir(directory)]
    stream = BatchStream(planes, scale, crop, np.random.default_rng(seed))
    return BatchIterator(stream, batch_size)


@dataclass
class BatchIterator:
    stream: BatchStream
    batch_size: int

    def __iter__(self):
        return self

    def __next__(self):
        return self.stream.batch(self.batch_size)


def fixed_eval_pairs(planes: list[np.ndarray], scale: int, crop: int,
                     seed: int, count: int):
    """Deterministic (lr, hr) crop pairs for held-out evaluation."""
    stream = BatchStream(planes, scale, crop, np.random.default_rng(seed))
    lr, hr = stream.batch(count)
    return [(lr[i], hr[i]) for i in range(count)]


def synthetic_plane(size: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic texture: gradient base, oriented gratings that survive
    downscaling, and sharp-edged shapes for high-frequency content."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    g = rng.random(2)
    img = 0.25 + 0.5 * (g[0] * yy + g[1] * xx) / max(g.sum(), 1e-6)
    for _ in range(int(rng.integers(2, 5))):
        theta = rng.random() * np.pi
        freq = rng.uniform(2.0, 0.11 * size)  # cycles across the image
        phase = rng.random() * 2 * np.pi
        amp = rng.uniform(0.05, 0.18)
        img += amp * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy)
                            + phase)
    for _ in range(int(rng.integers(2, 6))):
        h0, w0 = rng.integers(0, size - 8, size=2)
        h1 = h0 + int(rng.integers(4, size // 3))
        w1 = w0 + int(rng.integers(4, size // 3))
        val = rng.uniform(-0.3, 0.3)
        img[h0:min(h1, size), w0:min(w1, size)] += val
    return np.clip(img, 0.02, 0.98)


def write_synthetic_dataset(directory, count: int, size: int, seed: int) -> list[str]:
    """Write `count` synthetic grayscale HR images; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        path = os.path.join(directory, f"synth_{i:03d}.png")
        save_image(path, [ImagePlane(synthetic_plane(size, rng))])
        paths.append(path)
    return paths
