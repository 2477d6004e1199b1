"""Orthonormal 2-D Haar transform, its exact inverse, and multi-level pyramids.

Subband convention, fixed throughout the package: for each non-overlapping
2x2 block [[a, b], [c, d]] of the input,

    ll = (a + b + c + d) / 2      approximation
    lh = (a + b - c - d) / 2      vertical-frequency detail (horizontal edges)
    hl = (a - b + c - d) / 2      horizontal-frequency detail (vertical edges)
    hh = (a - b - c + d) / 2      diagonal detail

The 1/2 normalization makes the analysis orthonormal, so energy is preserved
per level and the synthesis map is the transpose of the analysis map.  Both
directions are linear and differentiable; the backward pass of each is the
other applied to the incoming gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError
from .tensor import Tensor, as_tensor, concat, custom_op, narrow, read_tensor, write_tensor

SUBBAND_ORDER = ("ll", "lh", "hl", "hh")


def _require_even(shape) -> None:
    if shape[-2] % 2 or shape[-1] % 2:
        raise ShapeError(f"Haar analysis needs even trailing extents, got {shape}")


def haar_analysis(x: np.ndarray):
    """Raw single-level analysis on [..., H, W] arrays; returns (ll, lh, hl, hh)."""
    _require_even(x.shape)
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    lh = (a + b - c - d) * 0.5
    hl = (a - b + c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return ll, lh, hl, hh


def haar_synthesis(ll, lh, hl, hh) -> np.ndarray:
    """Raw single-level synthesis; exact inverse of ``haar_analysis``."""
    shape = list(ll.shape)
    shape[-2] *= 2
    shape[-1] *= 2
    out = np.empty(shape, dtype=np.result_type(ll, np.float32))
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) * 0.5
    out[..., 0::2, 1::2] = (ll + lh - hl - hh) * 0.5
    out[..., 1::2, 0::2] = (ll - lh + hl - hh) * 0.5
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) * 0.5
    return out


@dataclass
class SubbandSet:
    """One decomposition level: four equally shaped [B,C,H/2,W/2] tensors."""

    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    def __post_init__(self):
        shapes = {t.shape for t in self.bands()}
        if len(shapes) != 1:
            raise ShapeError(f"subbands disagree in shape: {sorted(shapes)}")

    def bands(self):
        return (self.ll, self.lh, self.hl, self.hh)

    @property
    def shape(self):
        return self.ll.shape


@dataclass
class WaveletPyramid:
    """Recursive decomposition; ``levels[j+1]`` transforms ``levels[j].ll``.

    ``approx`` is the deepest approximation band (the original input when the
    pyramid is empty), which is all ``reconstruct`` needs besides the detail
    bands.
    """

    levels: list
    approx: Tensor

    @property
    def depth(self) -> int:
        return len(self.levels)


def dwt2(x: Tensor) -> SubbandSet:
    """Single-level orthonormal Haar analysis of [B,C,H,W]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"dwt2 expects [B,C,H,W], got {x.shape}")
    ll, lh, hl, hh = haar_analysis(x.data)

    def _band(data, pick):
        def backward():
            if x.requires_grad:
                zero = np.zeros_like(data)
                grads = [zero, zero, zero, zero]
                grads[pick] = out.grad
                x._accumulate(haar_synthesis(*grads), owned=True)

        out = custom_op("dwt2", data, (x,), backward)
        return out

    # One op per band keeps each band an independent tensor; gradient for a
    # band is synthesis with the other three bands zeroed (linearity).
    return SubbandSet(*[_band(d, i) for i, d in enumerate((ll, lh, hl, hh))])


def idwt2(bands: SubbandSet) -> Tensor:
    """Exact inverse of ``dwt2``; differentiable in all four subbands."""
    tensors = bands.bands()
    data = haar_synthesis(*[t.data for t in tensors])

    def backward():
        parts = haar_analysis(out.grad)
        for t, g in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(g, owned=True)

    out = custom_op("idwt2", data, tensors, backward)
    return out


def decompose(x: Tensor, depth: int) -> WaveletPyramid:
    """Multi-level pyramid; level j+1 re-analyzes level j's approximation."""
    x = as_tensor(x)
    if depth < 0:
        raise ShapeError("pyramid depth must be non-negative")
    if depth and (x.shape[-2] % (1 << depth) or x.shape[-1] % (1 << depth)):
        raise ShapeError(
            f"extents {x.shape[-2:]} not divisible by 2^{depth} for depth-{depth} pyramid"
        )
    levels = []
    current = x
    for _ in range(depth):
        bands = dwt2(current)
        levels.append(bands)
        current = bands.ll
    return WaveletPyramid(levels, current)


def reconstruct(pyramid: WaveletPyramid) -> Tensor:
    """Fold the pyramid back to an image; inverse of ``decompose``."""
    current = pyramid.approx
    for bands in reversed(pyramid.levels):
        if bands.lh.shape != current.shape:
            raise ShapeError(
                f"pyramid level shape {bands.lh.shape} does not match {current.shape}"
            )
        current = idwt2(SubbandSet(current, bands.lh, bands.hl, bands.hh))
    return current


def stack_channels(bands: SubbandSet) -> Tensor:
    """[B,C,h,w] x 4 -> [B,4C,h,w] in the fixed order ll|lh|hl|hh."""
    return concat(bands.bands(), axis=1)


def unstack_channels(stacked: Tensor) -> SubbandSet:
    stacked = as_tensor(stacked)
    channels = stacked.shape[1]
    if channels % 4:
        raise ShapeError(f"stacked subband tensor needs 4k channels, got {channels}")
    c = channels // 4
    return SubbandSet(*[narrow(stacked, 1, i * c, c) for i in range(4)])


# -- pyramid file format -------------------------------------------------------------


def save_pyramid(path, pyramid: WaveletPyramid) -> None:
    """One-line text manifest, then the subband tensors as raw WGT1 blocks."""
    shapes = ";".join(
        "x".join(str(e) for e in bands.shape) for bands in pyramid.levels
    )
    approx_shape = "x".join(str(e) for e in pyramid.approx.shape)
    manifest = (
        f"WVP1 depth={pyramid.depth} order={','.join(SUBBAND_ORDER)} "
        f"levels={shapes} approx={approx_shape}\n"
    )
    with open(path, "wb") as fh:
        fh.write(manifest.encode("ascii"))
        for bands in pyramid.levels:
            for band in bands.bands():
                write_tensor(fh, band.data)
        write_tensor(fh, pyramid.approx.data)


def load_pyramid(path) -> WaveletPyramid:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        if not header.startswith("WVP1 "):
            raise FormatError(f"bad pyramid manifest: {header[:40]!r}")
        fields = dict(part.split("=", 1) for part in header.split()[1:])
        depth = int(fields["depth"])
        if fields.get("order") != ",".join(SUBBAND_ORDER):
            raise FormatError(f"unexpected subband order {fields.get('order')!r}")
        levels = []
        for _ in range(depth):
            levels.append(SubbandSet(*[Tensor(read_tensor(fh)) for _ in range(4)]))
        approx = Tensor(read_tensor(fh))
    return WaveletPyramid(levels, approx)


# -- rendering --------------------------------------------------------------------------


def tile_pyramid(pyramid: WaveletPyramid) -> np.ndarray:
    """Standard coefficient layout: approximation in the top-left patch,
    horizontal-frequency detail top-right, vertical-frequency detail
    bottom-left, diagonal bottom-right, recursing into the top-left.

    Takes a single image's pyramid ([1,C,...] or [C,...]) and returns a
    [C,H,W] grid in [0,1]: the approximation tile is scaled back to image
    range, detail tiles are contrast-stretched symmetrically about zero.
    """
    if not pyramid.levels:
        raise ShapeError("tile_pyramid needs at least one level")

    def _img(t: Tensor) -> np.ndarray:
        arr = t.data
        if arr.ndim == 4:
            if arr.shape[0] != 1:
                raise ShapeError("tile_pyramid renders one image at a time")
            arr = arr[0]
        return arr

    depth = pyramid.depth
    approx = _img(pyramid.approx) / float(1 << depth)
    tile = np.clip(approx, 0.0, 1.0)
    for bands in reversed(pyramid.levels):
        rendered = []
        for band in (bands.lh, bands.hl, bands.hh):
            arr = _img(band)
            peak = float(np.abs(arr).max())
            scale = peak if peak > 0 else 1.0
            rendered.append(0.5 + 0.5 * arr / scale)
        lh_t, hl_t, hh_t = rendered
        top = np.concatenate([tile, hl_t], axis=-1)
        bottom = np.concatenate([lh_t, hh_t], axis=-1)
        tile = np.concatenate([top, bottom], axis=-2)
    return np.clip(tile, 0.0, 1.0).astype(np.float32)
