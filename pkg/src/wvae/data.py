"""Dataset ingestion, synthetic corpora, and batch iteration.

On-disk formats are deliberately minimal: binary PGM (P5) and PPM (P6) with
maxval 255 for individual images, and a packed raw tensor file plus a text
manifest for whole datasets.  All in-memory images are float32 [N,C,H,W] in
[0, 1].
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError
from .rng import Rng
from .tensor import Tensor, load_tensor, save_tensor


# -- PGM / PPM -------------------------------------------------------------------------


def _read_pnm_tokens(data: bytes, count: int):
    """Yield the first ``count`` whitespace-separated header tokens, honoring
    '#' comments, and return them with the payload offset."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise FormatError("truncated PNM header")
        ch = data[i : i + 1]
        if ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            start = i
            while i < len(data) and not data[i : i + 1].isspace():
                i += 1
            tokens.append(data[start:i])
    return tokens, i + 1  # single whitespace after maxval precedes the payload


def read_pnm(path) -> np.ndarray:
    """Binary PGM/PPM file -> float32 [C,H,W] in [0,1]; maxval must be 255."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _read_pnm_tokens(data, 4)
    magic = tokens[0]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise FormatError(f"unsupported PNM magic {magic!r} in {path}")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} in {path} (need 255)")
    expected = width * height * channels
    payload = data[offset : offset + expected]
    if len(payload) != expected:
        raise FormatError(f"truncated pixel payload in {path}")
    raster = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return (raster.transpose(2, 0, 1).astype(np.float32)) / 255.0


def write_pnm(path, image: np.ndarray) -> None:
    """float [C,H,W] (or [H,W]) in [0,1] -> binary PGM/PPM; rounds to 8 bits."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    if c not in (1, 3):
        raise ShapeError(f"can only write 1- or 3-channel images, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(quantized.transpose(1, 2, 0).tobytes())


# -- datasets --------------------------------------------------------------------------------


@dataclass
class ImageDataset:
    """Uniform image stack, float32 [N,C,H,W], values in [0,1]."""

    images: np.ndarray
    source: str = ""

    def __post_init__(self):
        arr = np.asarray(self.images, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"dataset needs [N,C,H,W], got {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise FormatError("dataset values must lie in [0, 1]")
        self.images = arr

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def extent(self) -> int:
        return self.images.shape[2]

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(str(self.images.shape).encode())
        digest.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        return digest.hexdigest()[:16]


def load_folder(path) -> ImageDataset:
    """All PGM/PPM files under ``path``, in lexicographic filename order."""
    names = sorted(
        f for f in os.listdir(path) if f.lower().endswith((".pgm", ".ppm"))
    )
    if not names:
        raise FormatError(f"no PGM/PPM files in {path}")
    images = [read_pnm(os.path.join(path, name)) for name in names]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise FormatError(f"mixed image shapes in {path}: {sorted(shapes)}")
    return ImageDataset(np.stack(images), source=str(path))


def save_folder(path, images: np.ndarray, prefix: str = "img") -> list:
    """Write an [N,C,H,W] stack as individual PGM/PPM files; returns paths."""
    os.makedirs(path, exist_ok=True)
    ext = ".pgm" if images.shape[1] == 1 else ".ppm"
    out = []
    for i, image in enumerate(images):
        name = os.path.join(path, f"{prefix}_{i:05d}{ext}")
        write_pnm(name, image)
        out.append(name)
    return out


def save_packed(path, ds: ImageDataset) -> None:
    """Raw tensor file plus a text manifest next to it."""
    save_tensor(path, ds.images)
    n, c, h, w = ds.images.shape
    with open(str(path) + ".manifest", "w") as fh:
        fh.write(f"count={n}\nshape={c}x{h}x{w}\nsha256={ds.fingerprint()}\n")


def load_packed(path) -> ImageDataset:
    ds = ImageDataset(load_tensor(path).data, source=str(path))
    manifest = str(path) + ".manifest"
    if os.path.exists(manifest):
        fields = dict(
            line.strip().split("=", 1)
            for line in open(manifest)
            if "=" in line
        )
        if int(fields.get("count", len(ds))) != len(ds):
            raise FormatError(f"manifest count mismatch for {path}")
        recorded = fields.get("sha256")
        if recorded and recorded != ds.fingerprint():
            raise FormatError(f"manifest hash mismatch for {path}")
    return ds


def load_dataset(path) -> ImageDataset:
    """Folder of PGM/PPM files, or a packed tensor file."""
    if os.path.isdir(path):
        return load_folder(path)
    return load_packed(path)


# -- synthetic corpus --------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Recipe for a reproducible procedural corpus.

    ``mix`` weights choose per image among oriented sinusoid fields
    ("gratings", frequency content centered on ``freq`` cycles per image),
    smooth Gaussian blobs, and piecewise-constant mosaics.  ``noise`` adds
    uniform pixel noise to every image.
    """

    count: int = 256
    extent: int = 32
    channels: int = 1
    seed: int = 0
    mix: tuple = (0.5, 0.25, 0.25)  # gratings, blobs, mosaics
    freq: float = 6.0
    freq_jitter: float = 0.35
    noise: float = 0.02


def _grating(rng: Rng, n: int, freq: float) -> np.ndarray:
    """Superposition of sinusoids near radius ``freq`` in the spectrum.

    The number of component waves grows with frequency, so the occupied
    spectral support (and hence the sharpness score) rises with ``freq``.
    """
    waves = max(3, int(round(math.pi * freq / 2.0)))
    yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    img = np.zeros((n, n))
    base_theta = rng.uniform(1, 0.0, math.pi)[0]
    amp = 0.75 / math.sqrt(waves)
    for _ in range(waves):
        theta = base_theta + rng.uniform(1, -math.pi / 3, math.pi / 3)[0]
        f = freq * (1.0 + rng.uniform(1, -0.12, 0.12)[0])
        phase = rng.uniform(1, 0.0, 2.0 * math.pi)[0]
        img += amp * np.sin(
            2.0 * math.pi * f / n * (xx * math.cos(theta) + yy * math.sin(theta))
            + phase
        )
    return 0.5 + 0.5 * img / max(1.0, np.abs(img).max() + 1e-9)


def _blobs(rng: Rng, n: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    img = np.zeros((n, n))
    for _ in range(int(rng.uniform(1, 3, 7)[0])):
        cy, cx = rng.uniform(2, 0, n)
        sigma = rng.uniform(1, n / 10.0, n / 4.0)[0]
        height = rng.uniform(1, -1.0, 1.0)[0]
        img += height * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    peak = np.abs(img).max()
    return 0.5 + 0.45 * img / (peak + 1e-9)


def _mosaic(rng: Rng, n: int) -> np.ndarray:
    img = np.full((n, n), rng.uniform(1, 0.2, 0.8)[0])
    for _ in range(int(rng.uniform(1, 5, 11)[0])):
        y0, x0 = (int(v) for v in rng.uniform(2, 0, n - 2))
        hgt = int(rng.uniform(1, 2, n / 2)[0])
        wid = int(rng.uniform(1, 2, n / 2)[0])
        img[y0 : y0 + hgt, x0 : x0 + wid] = rng.uniform(1)[0]
    return img


def synth(spec: SynthSpec) -> ImageDataset:
    """Procedural corpus, reproducible from (spec, seed)."""
    rng = Rng(spec.seed)
    weights = np.asarray(spec.mix, dtype=np.float64)
    if weights.sum() <= 0:
        raise ShapeError("synth mix weights must not all be zero")
    cdf = np.cumsum(weights / weights.sum())
    images = np.empty((spec.count, spec.channels, spec.extent, spec.extent), np.float32)
    for i in range(spec.count):
        for c in range(spec.channels):
            u = rng.uniform(1)[0]
            if u <= cdf[0]:
                freq = spec.freq * (1.0 + rng.uniform(1, -spec.freq_jitter, spec.freq_jitter)[0])
                img = _grating(rng, spec.extent, freq)
            elif u <= cdf[1]:
                img = _blobs(rng, spec.extent)
            else:
                img = _mosaic(rng, spec.extent)
            if spec.noise > 0:
                img = img + rng.uniform(img.size, -spec.noise, spec.noise).reshape(
                    img.shape
                )
            images[i, c] = img
    np.clip(images, 0.0, 1.0, out=images)
    return ImageDataset(images, source=f"synth(seed={spec.seed})")


# -- batching and simple filters ----------------------------------------------------------------


def batches(ds: ImageDataset, batch_size: int, rng: Rng = None, shuffle: bool = False,
            flip: bool = False):
    """Yield [B,C,H,W] tensors; exactly len(ds)//B batches, short tail dropped."""
    if batch_size < 1:
        raise ShapeError("batch size must be positive")
    order = np.arange(len(ds))
    if shuffle:
        if rng is None:
            raise ShapeError("shuffling requires an rng")
        order = rng.permutation(len(ds))
    for start in range(0, (len(ds) // batch_size) * batch_size, batch_size):
        batch = ds.images[order[start : start + batch_size]]
        if flip:
            mask = rng.uniform(batch.shape[0]) < 0.5
            batch = batch.copy()
            batch[mask] = batch[mask][:, :, :, ::-1]
        yield Tensor(batch)


def tile_grid(images: np.ndarray, cols: int = 0) -> np.ndarray:
    """Pack [N,C,H,W] into one [C, rows*H, cols*W] image, row-major order."""
    images = np.asarray(images, dtype=np.float32)
    n, c, h, w = images.shape
    if cols < 1:
        cols = max(1, int(math.ceil(math.sqrt(n))))
    rows = (n + cols - 1) // cols
    grid = np.zeros((c, rows * h, cols * w), np.float32)
    for i in range(n):
        r, k = divmod(i, cols)
        grid[:, r * h : (r + 1) * h, k * w : (k + 1) * w] = images[i]
    return grid


def gaussian_blur(images: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge padding; sigma 0 is the identity."""
    if sigma <= 0:
        return np.asarray(images, dtype=np.float32).copy()
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    arr = np.asarray(images, dtype=np.float64)

    def blur_axis(a, axis):
        a = np.moveaxis(a, axis, -1)
        padded = np.concatenate(
            [np.repeat(a[..., :1], radius, axis=-1), a,
             np.repeat(a[..., -1:], radius, axis=-1)], axis=-1
        )
        windows = np.lib.stride_tricks.sliding_window_view(padded, kernel.size, axis=-1)
        return np.moveaxis(windows @ kernel, -1, axis)

    return blur_axis(blur_axis(arr, -1), -2).astype(np.float32)
