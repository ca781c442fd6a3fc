"""Image ingestion, synthetic datasets, batch streams and flip/crop augmentation."""

from __future__ import annotations

import queue
import threading
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError

NORMALIZATIONS = ("[-1,1]", "[0,1]")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class DatasetSpec:
    """Where images come from and how they are presented to the networks.

    ``source`` is either a directory of PNG/JPEG files or a builtin synthetic
    id such as ``"colored-shapes"`` or ``"two-gaussians-32"``.
    """

    source: str = "colored-shapes"
    resolution: int = 32
    channels: int = 3
    normalization: str = "[-1,1]"
    shuffle_seed: int = 0
    size: int = 2000

    def __post_init__(self):
        r = int(self.resolution)
        if r < 8 or r > 256 or r & (r - 1):
            raise ConfigError(f"resolution must be a power of two in [8, 256], got {r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")


@dataclass
class ImageSet:
    """Materialized images as uint8 ``[N, H, W, C]`` plus optional labels."""

    images: np.ndarray
    labels: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)


def normalize(images: np.ndarray, convention="[-1,1]") -> torch.Tensor:
    """uint8 ``[N, H, W, C]`` -> float32 ``[N, C, H, W]`` in the given range."""
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float() / 255.0
    if convention == "[-1,1]":
        return x * 2 - 1
    if convention == "[0,1]":
        return x
    raise ConfigError(f"unknown normalization {convention!r}")


def denormalize(x: torch.Tensor, convention="[-1,1]") -> np.ndarray:
    """Inverse of :func:`normalize`, with clipping and rounding to uint8."""
    x = x.detach().float().cpu()
    if convention == "[-1,1]":
        x = (x + 1) / 2
    x = (x.clamp(0, 1) * 255).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).numpy()


# -- synthetic sets -----------------------------------------------------------

SHAPES = ("circle", "square", "triangle", "cross")

# (background, foreground) RGB pairs and texture amplitude
PALETTES = (
    ((20, 20, 60), (250, 200, 40), 10),
    ((230, 230, 220), (180, 30, 30), 25),
    ((10, 90, 40), (240, 240, 250), 5),
    ((120, 20, 120), (60, 220, 200), 30),
    ((200, 120, 40), (20, 40, 120), 15),
    ((60, 60, 60), (250, 120, 180), 20),
    ((170, 210, 250), (90, 50, 10), 8),
    ((250, 90, 20), (30, 30, 30), 35),
)


def _shape_mask(kind, res, cx, cy, radius):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx ** 2 + dy ** 2 <= radius ** 2
    if kind == "square":
        return (np.abs(dx) <= radius * 0.85) & (np.abs(dy) <= radius * 0.85)
    if kind == "triangle":
        inside = (dy <= radius * 0.8) & (dy >= -radius)
        return inside & (np.abs(dx) <= (dy + radius) * 0.6)
    if kind == "cross":
        arm = radius * 0.35
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= radius))
    raise ValueError(kind)


def colored_shapes(n, seed=0, resolution=32):
    """Shapes (content) painted with palettes (style).

    Item ``i`` gets shape ``i % 4`` and palette ``(i // 4) % 8``, so every
    shape appears equally often under every palette; position, size and the
    texture noise are random.
    """
    rng = np.random.default_rng(seed)
    res = resolution
    images = np.empty((n, res, res, 3), dtype=np.uint8)
    shape_ids = np.arange(n) % len(SHAPES)
    palette_ids = (np.arange(n) // len(SHAPES)) % len(PALETTES)
    for i in range(n):
        bg, fg, amp = PALETTES[palette_ids[i]]
        radius = res * rng.uniform(0.22, 0.34)
        cx, cy = rng.uniform(radius, res - radius, size=2)
        mask = _shape_mask(SHAPES[shape_ids[i]], res, cx, cy, radius)[..., None]
        img = np.where(mask, np.array(fg, float), np.array(bg, float))
        img = img + amp * rng.standard_normal((res, res, 1))
        images[i] = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return ImageSet(images, {"shape": shape_ids, "palette": palette_ids})


def two_gaussians(n, seed=0, resolution=32):
    """Soft blobs centred on one of two fixed locations, random tint."""
    rng = np.random.default_rng(seed)
    res = resolution
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    centres = ((res * 0.3, res * 0.3), (res * 0.7, res * 0.7))
    mode = rng.integers(0, 2, size=n)
    images = np.empty((n, res, res, 3), dtype=np.uint8)
    for i in range(n):
        cx, cy = np.array(centres[mode[i]]) + rng.normal(0, res * 0.03, size=2)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * (res * 0.12) ** 2))
        tint = rng.uniform(0.4, 1.0, size=3)
        img = 255 * blob[..., None] * tint
        images[i] = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return ImageSet(images, {"mode": mode})


SYNTHETIC = {"colored-shapes": colored_shapes, "two-gaussians": two_gaussians}


def parse_synthetic_id(ident):
    """``"name"`` or ``"name-RES"`` -> ``(name, resolution or None)``."""
    if ident in SYNTHETIC:
        return ident, None
    head, _, tail = ident.rpartition("-")
    if head in SYNTHETIC and tail.isdigit():
        return head, int(tail)
    raise ConfigError(f"unknown synthetic dataset {ident!r}; known: {sorted(SYNTHETIC)}")


def synthetic_dataset(ident, n, seed=0, resolution=32) -> ImageSet:
    name, res = parse_synthetic_id(ident)
    if n < 1:
        raise ConfigError("n must be >= 1")
    return SYNTHETIC[name](n, seed=seed, resolution=res or resolution)


def style_pack(n=16, seed=0, resolution=32) -> ImageSet:
    """Procedural style images: color gradients, blotchy noise and stripes."""
    rng = np.random.default_rng(seed)
    res = resolution
    yy, xx = np.mgrid[0:res, 0:res] / res
    images = np.empty((n, res, res, 3), dtype=np.uint8)
    for i in range(n):
        c0, c1 = rng.uniform(0, 255, size=(2, 3))
        kind = i % 3
        if kind == 0:
            theta = rng.uniform(0, 2 * np.pi)
            t = (np.cos(theta) * xx + np.sin(theta) * yy)
            t = (t - t.min()) / (np.ptp(t) + 1e-9)
        elif kind == 1:
            coarse = rng.uniform(0, 1, size=(4, 4))
            t = np.kron(coarse, np.ones((res // 4, res // 4)))
        else:
            freq = rng.integers(2, 6)
            t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx + rng.uniform() * yy))
        img = c0 * (1 - t[..., None]) + c1 * t[..., None]
        img = img + rng.uniform(5, 30) * rng.standard_normal((res, res, 3))
        images[i] = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return ImageSet(images, {"kind": np.arange(n) % 3})


# -- files --------------------------------------------------------------------

def load_image_dir(path, resolution=32, channels=3) -> ImageSet:
    """Read every PNG/JPEG in ``path`` (sorted by name), resized square."""
    from PIL import Image

    path = Path(path)
    if not path.is_dir():
        raise ConfigError(f"image directory {path} does not exist")
    mode = "RGB" if channels == 3 else "L"
    images, names = [], []
    for f in sorted(path.iterdir()):
        if f.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            with Image.open(f) as im:
                im = im.convert(mode).resize((resolution, resolution), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.uint8)
        except Exception as exc:  # noqa: BLE001 - any decoder failure skips the file
            warnings.warn(f"skipping unreadable image {f}: {exc}")
            continue
        images.append(arr.reshape(resolution, resolution, channels))
        names.append(f.name)
    if not images:
        raise ConfigError(f"no readable images in {path}")
    return ImageSet(np.stack(images), {"name": np.array(names)})


def save_image_dir(image_set: ImageSet, path, prefix="img"):
    from PIL import Image

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(image_set.images):
        Image.fromarray(img.squeeze(-1) if img.shape[-1] == 1 else img).save(
            path / f"{prefix}{i:05d}.png")
    return path


def save_grid(images: torch.Tensor, path, nrow, convention="[-1,1]"):
    """Tile a ``[N, C, H, W]`` batch row-major into one PNG."""
    from PIL import Image

    arr = denormalize(images, convention)
    n, h, w, c = arr.shape
    ncol = nrow
    nrows = -(-n // ncol)
    grid = np.zeros((nrows * h, ncol * w, c), dtype=np.uint8)
    for i in range(n):
        r, q = divmod(i, ncol)
        grid[r * h:(r + 1) * h, q * w:(q + 1) * w] = arr[i]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid.squeeze(-1) if c == 1 else grid).save(path)
    return grid


def materialize(spec: DatasetSpec) -> ImageSet:
    if Path(spec.source).is_dir():
        return load_image_dir(spec.source, spec.resolution, spec.channels)
    image_set = synthetic_dataset(spec.source, spec.size, seed=spec.shuffle_seed,
                                  resolution=spec.resolution)
    if image_set.images.shape[1] != spec.resolution:
        raise ConfigError(f"dataset id {spec.source!r} conflicts with resolution {spec.resolution}")
    return image_set


# -- streaming ----------------------------------------------------------------

class BatchStream:
    """Infinite stream of shuffled batches.

    The stream is the concatenation of epochs, each a fresh permutation of
    the whole set, so any ``len(set)`` consecutive items (aligned to an epoch)
    contain every image exactly once. ``state_dict`` captures the position
    for bit-exact resumption. With ``prefetch > 0`` a background thread
    prepares batches ahead; the order is unchanged but resumption from a
    saved state is only exact in synchronous mode.
    """

    def __init__(self, images: torch.Tensor, batch_size: int, seed=0, prefetch=0):
        if len(images) == 0:
            raise ConfigError("empty dataset")
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.images = images
        self.batch_size = int(batch_size)
        self.prefetch = int(prefetch)
        self._rng = np.random.default_rng(seed)
        self._perm = self._rng.permutation(len(images))
        self._pos = 0
        self.epoch = 0
        self._queue = None

    def _next_indices(self):
        out = []
        need = self.batch_size
        while need:
            take = min(need, len(self._perm) - self._pos)
            out.append(self._perm[self._pos:self._pos + take])
            self._pos += take
            need -= take
            if self._pos == len(self._perm):
                self._perm = self._rng.permutation(len(self.images))
                self._pos = 0
                self.epoch += 1
        return np.concatenate(out)

    def _next_sync(self):
        return self.images[torch.from_numpy(self._next_indices())]

    def _worker(self, q, stop):
        while not stop.is_set():
            batch = self._next_sync()
            while not stop.is_set():
                try:
                    q.put(batch, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def __iter__(self):
        return self

    def __next__(self):
        if not self.prefetch:
            return self._next_sync()
        if self._queue is None:
            self._queue = queue.Queue(maxsize=self.prefetch)
            self._stop = threading.Event()
            self._thread = threading.Thread(target=self._worker, args=(self._queue, self._stop),
                                            daemon=True)
            self._thread.start()
        return self._queue.get()

    def close(self):
        if self._queue is not None:
            self._stop.set()
            self._thread.join()
            self._queue = None

    def state_dict(self):
        if self.prefetch:
            raise ConfigError("stream state is only well defined with prefetch disabled")
        return {"rng": self._rng.bit_generator.state, "perm": self._perm.tolist(),
                "pos": self._pos, "epoch": self.epoch}

    def load_state_dict(self, state):
        self._rng.bit_generator.state = state["rng"]
        self._perm = np.asarray(state["perm"], dtype=np.int64)
        self._pos = int(state["pos"])
        self.epoch = int(state["epoch"])


def load_dataset(spec: DatasetSpec, batch_size=32, prefetch=0) -> BatchStream:
    image_set = materialize(spec)
    return BatchStream(normalize(image_set.images, spec.normalization), batch_size,
                       seed=spec.shuffle_seed, prefetch=prefetch)


# -- augmentation -------------------------------------------------------------

def augment_flip_crop(batch: torch.Tensor, rng: torch.Generator, pad=4, flip=True):
    """Random horizontal flip (p = 0.5) and reflect-pad + random crop, per image."""
    b, _, h, w = batch.shape
    if pad < 0 or pad >= min(h, w):
        raise ConfigError(f"pad must lie in [0, {min(h, w)}), got {pad}")
    out = batch
    if flip:
        flips = torch.rand(b, generator=rng) < 0.5
        out = torch.where(flips.view(-1, 1, 1, 1), out.flip(-1), out)
    if pad:
        padded = F.pad(out, (pad, pad, pad, pad), mode="reflect")
        offsets = torch.randint(0, 2 * pad + 1, (b, 2), generator=rng)
        out = torch.stack([padded[i, :, oy:oy + h, ox:ox + w]
                           for i, (oy, ox) in enumerate(offsets.tolist())])
    return out
