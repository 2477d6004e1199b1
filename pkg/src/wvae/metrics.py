"""Quantitative evaluation of image sets.

Three families:

* ``iqm`` — frequency-domain sharpness: the fraction of centered Fourier
  magnitudes strictly above 1% of the spectral peak, averaged over images
  (higher = sharper).  Includes the radix-2 FFT it needs.
* ``fid`` / ``frechet_distance`` — Fréchet distance between Gaussian fits of
  feature embeddings (lower = closer to the reference set).  The feature
  extractor is pluggable; the default is a fixed-seed random convolutional
  projection, so values are comparable only within this package.
* ``index_code_mi`` — how informative latent codes are about sample identity,
  estimated from posterior log-densities over the whole evaluation set.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .conv_kernels import conv_forward
from .errors import NumericsError, ShapeError
from .rng import Rng

# Complex grids are numpy complex128 arrays: paired 64-bit real/imag parts.
ComplexGrid = np.ndarray

_LUMA = np.asarray([0.299, 0.587, 0.114], dtype=np.float64)


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def _fft_rows(a: np.ndarray) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey over the last axis of [M, N] complex."""
    m, n = a.shape
    a = a[:, _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp((-2j * math.pi / size) * np.arange(half))
        a = a.reshape(m, n // size, size)
        even = a[:, :, :half].copy()
        odd = a[:, :, half:] * twiddle
        a[:, :, :half] = even + odd
        a[:, :, half:] = even - odd
        a = a.reshape(m, n)
        size *= 2
    return a


def fft2_batch(grids: np.ndarray) -> ComplexGrid:
    """Unnormalized forward DFT of a stack [K, N, N] via row/column FFTs."""
    k, n, n2 = grids.shape
    if n != n2 or not _is_pow2(n):
        raise ShapeError(f"fft2 needs square power-of-two grids, got {n}x{n2}")
    a = np.ascontiguousarray(grids, dtype=np.complex128)
    a = _fft_rows(a.reshape(k * n, n)).reshape(k, n, n)
    a = a.transpose(0, 2, 1)
    a = _fft_rows(np.ascontiguousarray(a.reshape(k * n, n))).reshape(k, n, n)
    return a.transpose(0, 2, 1)


def fft2(grid: np.ndarray) -> ComplexGrid:
    """Forward DFT of one real or complex N x N grid (N a power of two)."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ShapeError(f"fft2 expects a 2-D grid, got shape {grid.shape}")
    return fft2_batch(grid[None])[0]


def fftshift(grid: ComplexGrid) -> ComplexGrid:
    """Move the zero-frequency bin to the center (quadrant swap for even N)."""
    half_r = grid.shape[-2] // 2
    half_c = grid.shape[-1] // 2
    return np.roll(np.roll(grid, half_r, axis=-2), half_c, axis=-1)


def to_luminance(images: np.ndarray) -> np.ndarray:
    """[K,C,H,W] -> [K,H,W]; 3-channel input uses the Rec.601 weights."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        return images
    if images.ndim != 4:
        raise ShapeError(f"expected [K,C,H,W] or [K,H,W], got {images.shape}")
    c = images.shape[1]
    if c == 1:
        return images[:, 0]
    if c == 3:
        return np.einsum("kchw,c->khw", images, _LUMA)
    raise ShapeError(f"cannot convert {c}-channel images to luminance")


def center_crop_pow2(images: np.ndarray) -> np.ndarray:
    """Center-crop [..., H, W] to the largest power-of-two square that fits."""
    h, w = images.shape[-2:]
    side = 1 << int(math.log2(min(h, w)))
    top = (h - side) // 2
    left = (w - side) // 2
    return images[..., top : top + side, left : left + side]


def iqm(images, threshold_divisor: float = 100.0) -> float:
    """Mean fraction of spectrum bins strictly above peak/divisor per image.

    Accepts a [K,H,W] or [K,C,H,W] array (or a list of 2-D grids); color is
    reduced to luminance first.  Grids must be square with power-of-two
    extent.  Result lies in (0, 1]: at least the peak bin itself counts.
    """
    if isinstance(images, (list, tuple)):
        if len(images) == 0:
            raise ShapeError("iqm of an empty image list")
        images = np.stack([np.asarray(im) for im in images])
    images = np.asarray(images)
    if images.size == 0:
        raise ShapeError("iqm of an empty image set")
    if images.ndim == 2:
        images = images[None]
    grids = to_luminance(images)
    n = grids.shape[-1]
    if grids.shape[-2] != n:
        raise ShapeError(f"iqm needs square images, got {grids.shape[-2:]}")
    spectra = np.abs(fftshift(fft2_batch(grids)))
    peak = spectra.max(axis=(1, 2), keepdims=True)
    counts = (spectra > peak / threshold_divisor).sum(axis=(1, 2))
    return float(np.mean(counts / float(n * n)))


# -- Frechet distance -----------------------------------------------------------------


@dataclass
class GaussianStats:
    """Sample mean and unbiased covariance of a feature cloud."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"expected [n, D] features, got {features.shape}")
    n = features.shape[0]
    if n < 2:
        raise ShapeError(f"need at least 2 samples for covariance, got {n}")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = (centered.T @ centered) / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(mean, cov)


def matrix_sqrt_psd(a: np.ndarray, asym_tol: float = 1e-8) -> np.ndarray:
    """Square root of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues are clamped at zero, so slightly indefinite inputs (from
    finite-sample covariances) still yield a valid root.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"matrix square root needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if float(np.abs(a - a.T).max()) > asym_tol * scale:
        raise NumericsError("matrix square root input is not symmetric")
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (root + root.T)


def frechet_distance(r: GaussianStats, g: GaussianStats) -> float:
    """||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r^0.5 S_g S_r^0.5)^0.5).

    The symmetrized product has the same trace as the usual (S_r S_g)^0.5
    form but keeps the inner matrix symmetric PSD.
    """
    if r.dim != g.dim:
        raise ShapeError(f"stat dimensions disagree: {r.dim} vs {g.dim}")
    diff = r.mean - g.mean
    sr = matrix_sqrt_psd(r.cov)
    cross = matrix_sqrt_psd(sr @ g.cov @ sr)
    value = float(diff @ diff + np.trace(r.cov) + np.trace(g.cov) - 2.0 * np.trace(cross))
    if value < 0.0:
        if value < -1e-6:
            warnings.warn(f"negative Frechet distance {value:.3e} clamped to 0")
        value = 0.0
    return value


# -- feature extractors --------------------------------------------------------------------


class PixelExtractor:
    """Average-pool to 8x8 and flatten; the crudest possible embedding."""

    def __init__(self):
        self.name = "pixels8x8-v1"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        k, c, h, w = images.shape
        if h % 8 or w % 8:
            raise ShapeError(f"pixel extractor needs extents divisible by 8, got {h}x{w}")
        pooled = images.reshape(k, c, 8, h // 8, 8, w // 8).mean(axis=(3, 5))
        return pooled.reshape(k, -1).astype(np.float64)


class RandomConvExtractor:
    """Fixed-seed random convolutional projection to a feature vector.

    Three stride-2 convolutions with leaky-relu, then global average pooling
    over ``dim`` channels.  Weights are a pure function of (seed, input
    channels), so the embedding is a stable measurement instrument; it is
    versioned through ``name`` and never trained.
    """

    def __init__(self, seed: int = 0, dim: int = 256):
        self.seed = seed
        self.dim = dim
        self.name = f"randconv-v1-s{seed}-d{dim}"
        self._weights: dict = {}

    def _kernels(self, cin: int):
        if cin not in self._weights:
            rng = Rng(self.seed).spawn(cin)
            plan = [(cin, self.dim // 8), (self.dim // 8, self.dim // 4), (self.dim // 4, self.dim)]
            kernels = []
            for c_in, c_out in plan:
                scale = math.sqrt(2.0 / (c_in * 16))
                k = rng.normal((c_out, c_in, 4, 4)).astype(np.float32) * scale
                kernels.append(k)
            self._weights[cin] = kernels
        return self._weights[cin]

    def __call__(self, images: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(images, dtype=np.float32)
        if x.ndim != 4:
            raise ShapeError(f"extractor expects [K,C,H,W], got {x.shape}")
        for k in self._kernels(x.shape[1]):
            x = conv_forward(x, k, stride=2, pad=1)
            x = np.where(x > 0, x, 0.2 * x)
        return x.mean(axis=(2, 3), dtype=np.float64)


@dataclass
class MetricReport:
    """One named scalar measurement with its provenance."""

    name: str
    value: float
    n_real: int = 0
    n_gen: int = 0
    extractor: str = "-"
    config_hash: str = "-"
    std: float = field(default=float("nan"))

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NumericsError(f"metric {self.name} is not finite: {self.value}")

    def tsv_line(self) -> str:
        std = "" if math.isnan(self.std) else f"{self.std:.6g}"
        return (
            f"{self.name}\t{self.value:.6g}\t{std}\t{self.n_real}\t{self.n_gen}\t"
            f"{self.extractor}\t{self.config_hash}"
        )

    @staticmethod
    def tsv_header() -> str:
        return "metric\tvalue\tstd\tn_real\tn_gen\textractor\tconfig"

    def text_block(self) -> str:
        spread = "" if math.isnan(self.std) else f" +- {self.std:.6g}"
        return (
            f"{self.name}: {self.value:.6g}{spread}"
            f"  (n_real={self.n_real}, n_gen={self.n_gen}, extractor={self.extractor})"
        )


def fid(
    real: np.ndarray,
    generated: np.ndarray,
    extractor=None,
    config_hash: str = "-",
) -> MetricReport:
    """Frechet distance between feature Gaussians of two image sets."""
    if extractor is None:
        extractor = RandomConvExtractor()
    feats_r = np.asarray(extractor(real))
    feats_g = np.asarray(extractor(generated))
    dim = feats_r.shape[1]
    for label, feats in (("real", feats_r), ("generated", feats_g)):
        if feats.shape[0] < 2:
            raise ShapeError(f"fid needs at least 2 {label} samples")
        if feats.shape[0] < dim // 4:
            warnings.warn(
                f"fid: only {feats.shape[0]} {label} samples for {dim}-d features; "
                "covariance is ill-conditioned"
            )
    value = frechet_distance(gaussian_stats(feats_r), gaussian_stats(feats_g))
    return MetricReport(
        "fid", value, len(feats_r), len(feats_g), extractor.name, config_hash
    )


# -- index-code mutual information ------------------------------------------------------------


def index_code_mi(encode_fn, images: np.ndarray, rng: Rng, subsample: int = 0) -> float:
    """Mutual information (nats) between sample identity and latent code.

    ``encode_fn`` maps an image batch to (mean, logvar) numpy arrays.  One
    latent is drawn per image; the aggregate term is a log-sum-exp over the
    posteriors of the full evaluation set (optionally subsampled for large n).
    The estimate is bounded above by log n.
    """
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise ShapeError("index_code_mi on an empty dataset")
    if subsample and images.shape[0] > subsample:
        pick = rng.permutation(images.shape[0])[:subsample]
        images = images[np.sort(pick)]
    n = images.shape[0]
    means, logvars = [], []
    for start in range(0, n, 256):
        mu, lv = encode_fn(images[start : start + 256])
        means.append(np.asarray(mu, dtype=np.float64))
        logvars.append(np.asarray(lv, dtype=np.float64))
    mu = np.concatenate(means)
    logvar = np.concatenate(logvars)
    z = mu + np.exp(0.5 * logvar) * rng.normal(mu.shape)

    log2pi = math.log(2.0 * math.pi)
    var = np.exp(logvar)
    # log q(z_i | x_j) for all pairs, blockwise over i.
    diag = np.empty(n)
    agg = np.empty(n)
    block = max(1, 2**22 // (n * mu.shape[1] + 1))
    for start in range(0, n, block):
        zi = z[start : start + block]
        diff = zi[:, None, :] - mu[None, :, :]
        logq = -0.5 * (diff * diff / var[None] + logvar[None] + log2pi).sum(axis=2)
        idx = np.arange(start, min(start + block, n))
        diag[idx] = logq[np.arange(len(idx)), idx]
        peak = logq.max(axis=1, keepdims=True)
        agg[idx] = (
            np.log(np.exp(logq - peak).sum(axis=1)) + peak[:, 0] - math.log(n)
        )
    return float(np.mean(diag - agg))
