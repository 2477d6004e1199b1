"""Generative models: Gaussian encoder, image-space VAE baselines, and the
wavelet-coefficient decoder with single- and multi-resolution heads.

All models share one encoder architecture.  The image decoders map latents
straight to pixels; the wavelet decoder maps latents to channel-stacked
subband coefficients at one or more pyramid levels, and images are produced
by inverting the top level.  Loss reduction convention everywhere: sum over
elements within a sample, mean over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import wavelet
from .errors import ConfigError, ShapeError
from .nn import (
    Activation,
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Flatten,
    PointwiseConv,
    Reshape,
    Sequential,
)
from .rng import Rng
from .tensor import Tensor, as_tensor, narrow, no_grad, sample_normal

TRUNK_BASE = 4  # spatial extent of the first decoder feature map
LOGVAR_LIMIT = 12.0
LOGIT_LIMIT = 15.0  # keeps float32 sigmoid strictly inside (0, 1)


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian q(z|x): per-sample mean and log-variance, [B, d]."""

    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ShapeError(
                f"posterior mean {self.mean.shape} vs logvar {self.logvar.shape}"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class WaveletPrediction:
    """Predicted channel-stacked coefficients per pyramid level."""

    by_level: dict

    def levels(self):
        return tuple(sorted(self.by_level))

    def top(self) -> Tensor:
        return self.by_level[1]


@dataclass
class ElboBreakdown:
    """Scalar loss terms of one step; ``total`` carries the live graph."""

    ll_recon: Tensor
    detail_recon: Tensor
    kl: Tensor
    beta: float
    total: Tensor

    def scalars(self) -> dict:
        return {
            "ll_recon": self.ll_recon.item(),
            "detail_recon": self.detail_recon.item(),
            "kl": self.kl.item(),
            "total": self.total.item(),
        }


# -- loss terms ----------------------------------------------------------------------


def reparameterize(q: GaussianPosterior, rng: Rng, eps: Optional[Tensor] = None) -> Tensor:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I)."""
    if eps is None:
        eps = sample_normal(rng, q.mean.shape)
    return q.mean + (q.logvar * 0.5).exp() * eps


def kl_to_standard_normal(q: GaussianPosterior) -> Tensor:
    """Closed-form KL(q || N(0, I)): 0.5 * sum(mu^2 + var - 1 - logvar), batch mean."""
    var = q.logvar.exp()
    per_sample = (q.mean * q.mean + var - 1.0 - q.logvar).sum(axis=1)
    return per_sample.mean() * 0.5


def gaussian_nll(x: Tensor, xhat: Tensor) -> Tensor:
    """Unit-variance Gaussian reconstruction: 0.5 * ||x - xhat||^2 per sample."""
    diff = as_tensor(x) - as_tensor(xhat)
    return (diff * diff).flatten_batch().sum(axis=1).mean() * 0.5


def laplacian_nll(w: Tensor, what: Tensor) -> Tensor:
    """Unit-scale Laplacian reconstruction: sum |w - what| per sample.

    The per-element log-normalizer log 2 is constant and dropped; the
    subgradient at exact ties is 0.
    """
    return (as_tensor(w) - as_tensor(what)).abs().flatten_batch().sum(axis=1).mean()


def bernoulli_nll(logits: Tensor, targets: Tensor) -> Tensor:
    """Elementwise cross-entropy against sigmoid(logits), per sample, batch mean.

    Computed in the stable softplus form: softplus(l) - l * t.
    """
    per_elem = logits.softplus() - logits * targets
    return per_elem.flatten_batch().sum(axis=1).mean()


def wavelet_elbo(
    x: Tensor, prediction: WaveletPrediction, q: GaussianPosterior, beta: float
) -> ElboBreakdown:
    """Negative multi-level coefficient ELBO, to be minimized.

    Targets are the Haar pyramid of ``x`` computed on the fly; the
    approximation band is scored with the Gaussian term, the three detail
    bands with the beta-weighted Laplacian term, plus the latent KL.
    """
    levels = prediction.levels()
    if not levels or levels[0] != 1:
        raise ConfigError(f"prediction must include level 1, got {levels}")
    pyramid = wavelet.decompose(as_tensor(x), max(levels))
    ll_total = Tensor(0.0)
    detail_total = Tensor(0.0)
    for j in levels:
        target = pyramid.levels[j - 1]
        pred = wavelet.unstack_channels(prediction.by_level[j])
        if pred.ll.shape != target.ll.shape:
            raise ShapeError(
                f"level {j}: prediction {pred.ll.shape} vs target {target.ll.shape}"
            )
        ll_total = ll_total + gaussian_nll(target.ll, pred.ll)
        for band in ("lh", "hl", "hh"):
            detail_total = detail_total + laplacian_nll(
                getattr(target, band), getattr(pred, band)
            )
    kl = kl_to_standard_normal(q)
    total = ll_total + detail_total * beta + kl
    return ElboBreakdown(ll_total, detail_total, kl, beta, total)


# -- architecture ---------------------------------------------------------------------


@dataclass
class ModelSpec:
    """Resolved architecture description shared by all model kinds."""

    kind: str = "wavelet_vae"
    channels: int = 1
    image_size: int = 32
    latent: int = 64
    enc_channels: tuple = (64, 128)
    dec_channels: tuple = (128, 64, 32)
    hidden: int = 1024
    batchnorm: bool = True
    beta: float = 1.0
    levels: tuple = (1,)

    def validate(self) -> None:
        n = self.image_size
        if n < 16 or n & (n - 1):
            raise ConfigError(f"image size must be a power of two >= 16, got {n}")
        depth = int(math.log2(n))
        if len(self.enc_channels) != depth - 3:
            raise ConfigError(
                f"need {depth - 3} encoder channel entries for {n}x{n} images "
                f"(downsampling to 8x8), got {len(self.enc_channels)}"
            )
        if len(self.dec_channels) != depth - 2:
            raise ConfigError(
                f"need {depth - 2} decoder channel entries for {n}x{n} images "
                f"(trunk from {TRUNK_BASE}x{TRUNK_BASE} to {n // 2}x{n // 2}), "
                f"got {len(self.dec_channels)}"
            )
        for j in self.levels:
            if j < 1 or j > depth - 2:
                raise ConfigError(
                    f"pyramid level {j} unsupported for {n}x{n} images"
                )
        if sorted(self.levels)[0] != 1:
            raise ConfigError("decoder levels must include level 1")


class Encoder:
    """Shared convolutional encoder producing the Gaussian posterior."""

    def __init__(self, spec: ModelSpec, rng: Rng):
        layers = []
        cin = spec.channels
        for i, cout in enumerate(spec.enc_channels):
            layers.append(Conv2d(cin, cout, 4, 2, 1, rng))
            if spec.batchnorm and i > 0:
                layers.append(BatchNorm(cout))
            layers.append(Activation("leaky_relu", 0.2))
            cin = cout
        layers.append(Flatten())
        flat = spec.enc_channels[-1] * 8 * 8
        layers.append(Dense(flat, spec.hidden, rng))
        if spec.batchnorm:
            layers.append(BatchNorm(spec.hidden))
        layers.append(Activation("leaky_relu", 0.2))
        self.net = Sequential(layers)
        self.head = Dense(spec.hidden, 2 * spec.latent, rng)
        self.latent = spec.latent

    def encode(self, x: Tensor) -> GaussianPosterior:
        h = self.head(self.net(x))
        mean = narrow(h, 1, 0, self.latent)
        logvar = narrow(h, 1, self.latent, self.latent).clamp(
            -LOGVAR_LIMIT, LOGVAR_LIMIT
        )
        return GaussianPosterior(mean, logvar)

    def params(self):
        out = {f"net.{k}": v for k, v in self.net.params().items()}
        out.update({f"head.{k}": v for k, v in self.head.params().items()})
        return out

    def buffers(self):
        return {f"net.{k}": v for k, v in self.net.buffers().items()}

    def set_training(self, flag: bool):
        self.net.set_training(flag)


class _DecoderTrunk:
    """Dense stem to a 4x4 map, then stride-2 upsampling blocks.

    ``features(z)`` returns the map at every resolution so heads can tap the
    one matching their pyramid level.
    """

    def __init__(self, spec: ModelSpec, rng: Rng):
        c = spec.dec_channels
        stem = [Dense(spec.latent, spec.hidden, rng)]
        if spec.batchnorm:
            stem.append(BatchNorm(spec.hidden))
        stem.append(Activation("relu"))
        stem.append(Dense(spec.hidden, c[0] * TRUNK_BASE * TRUNK_BASE, rng))
        if spec.batchnorm:
            stem.append(BatchNorm(c[0] * TRUNK_BASE * TRUNK_BASE))
        stem.append(Activation("relu"))
        stem.append(Reshape(c[0], TRUNK_BASE, TRUNK_BASE))
        self.stem = Sequential(stem)
        self.blocks = []
        for cin, cout in zip(c[:-1], c[1:]):
            block = [ConvTranspose2d(cin, cout, 4, 2, 1, rng)]
            if spec.batchnorm:
                block.append(BatchNorm(cout))
            block.append(Activation("relu"))
            self.blocks.append(Sequential(block))

    def features(self, z: Tensor) -> list:
        feats = [self.stem(z)]
        for block in self.blocks:
            feats.append(block(feats[-1]))
        return feats

    def params(self):
        out = {f"stem.{k}": v for k, v in self.stem.params().items()}
        for i, block in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in block.params().items()})
        return out

    def buffers(self):
        out = {f"stem.{k}": v for k, v in self.stem.buffers().items()}
        for i, block in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in block.buffers().items()})
        return out

    def set_training(self, flag: bool):
        self.stem.set_training(flag)
        for block in self.blocks:
            block.set_training(flag)


class WaveletDecoder:
    """Trunk plus one pointwise head per decoded pyramid level.

    The head for level j reads the trunk feature map whose resolution equals
    the level-j coefficient grid and emits 4*C stacked subband channels.
    Heads are independent (trunk widths differ per resolution).
    """

    def __init__(self, spec: ModelSpec, rng: Rng):
        self.trunk = _DecoderTrunk(spec, rng)
        n_feats = len(spec.dec_channels)
        self.heads = {}
        for j in sorted(spec.levels):
            tap = n_feats - j
            self.heads[j] = PointwiseConv(spec.dec_channels[tap], 4 * spec.channels, rng)
        self.levels = tuple(sorted(spec.levels))
        self._n_feats = n_feats

    def forward(self, z: Tensor) -> WaveletPrediction:
        feats = self.trunk.features(z)
        return WaveletPrediction(
            {j: head(feats[self._n_feats - j]) for j, head in self.heads.items()}
        )

    def params(self):
        out = {f"trunk.{k}": v for k, v in self.trunk.params().items()}
        for j, head in self.heads.items():
            out.update({f"head{j}.{k}": v for k, v in head.params().items()})
        return out

    def buffers(self):
        return {f"trunk.{k}": v for k, v in self.trunk.buffers().items()}

    def set_training(self, flag: bool):
        self.trunk.set_training(flag)


class ImageDecoder:
    """Trunk plus a final upsampling block straight to pixel space."""

    def __init__(self, spec: ModelSpec, rng: Rng):
        self.trunk = _DecoderTrunk(spec, rng)
        self.final = ConvTranspose2d(spec.dec_channels[-1], spec.channels, 4, 2, 1, rng)

    def forward(self, z: Tensor) -> Tensor:
        return self.final(self.trunk.features(z)[-1])

    def params(self):
        out = {f"trunk.{k}": v for k, v in self.trunk.params().items()}
        out.update({f"final.{k}": v for k, v in self.final.params().items()})
        return out

    def buffers(self):
        return {f"trunk.{k}": v for k, v in self.trunk.buffers().items()}

    def set_training(self, flag: bool):
        self.trunk.set_training(flag)


# -- full models ------------------------------------------------------------------------


class _VaeBase:
    spec: ModelSpec
    encoder: Encoder
    training = True

    def encode(self, x: Tensor) -> GaussianPosterior:
        return self.encoder.encode(as_tensor(x))

    def set_training(self, flag: bool):
        self.training = flag
        self.encoder.set_training(flag)
        self.decoder.set_training(flag)

    def params(self):
        out = {f"enc.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.params().items()})
        return out

    def buffers(self):
        out = {f"enc.{k}": v for k, v in self.encoder.buffers().items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.buffers().items()})
        return out

    def traverse(
        self,
        x: Optional[Tensor],
        dim: int,
        rng: Rng,
        low: float = -3.0,
        high: float = 3.0,
        steps: int = 10,
    ) -> np.ndarray:
        """Sweep one latent coordinate, others pinned at the posterior mean
        (or at a prior draw when no input image is given)."""
        was_training = self.training
        with no_grad():
            self.set_training(False)
            if x is not None:
                base = self.encode(as_tensor(x)).mean.data[0]
            else:
                base = rng.normal(self.spec.latent).astype(np.float32)
            sweep = np.linspace(low, high, steps, dtype=np.float32)
            zs = np.tile(base, (steps, 1))
            zs[:, dim] = sweep
            out = self._decode_images(Tensor(zs))
            self.set_training(was_training)
            return out

    def generate(self, rng: Rng, n: int) -> np.ndarray:
        """Draw z ~ N(0, I) and decode; raw values, clamping is the caller's."""
        was_training = self.training
        with no_grad():
            self.set_training(False)
            z = sample_normal(rng, (n, self.spec.latent))
            out = self._decode_images(z)
            self.set_training(was_training)
            return out

    def reconstruct(self, x: Tensor, rng: Rng) -> np.ndarray:
        """encode -> reparameterize -> decode, in eval mode."""
        was_training = self.training
        with no_grad():
            self.set_training(False)
            z = reparameterize(self.encode(as_tensor(x)), rng)
            out = self._decode_images(z)
            self.set_training(was_training)
            return out

    def posterior_fn(self):
        """Batch-encoding closure for the mutual-information estimator."""

        def fn(images):
            was_training = self.training
            with no_grad():
                self.set_training(False)
                q = self.encode(Tensor(np.asarray(images, np.float32)))
                self.set_training(was_training)
                return (
                    q.mean.data.astype(np.float64),
                    q.logvar.data.astype(np.float64),
                )

        return fn


class ImageVae(_VaeBase):
    """Pixel-space VAE; ``vae`` scores with MSE, ``vae_c`` with cross-entropy."""

    def __init__(self, spec: ModelSpec, rng: Rng):
        spec.validate()
        if spec.kind not in ("vae", "vae_c"):
            raise ConfigError(f"ImageVae cannot be kind {spec.kind!r}")
        self.spec = spec
        self.encoder = Encoder(spec, rng.spawn(1))
        self.decoder = ImageDecoder(spec, rng.spawn(2))

    def decode_image(self, z: Tensor) -> Tensor:
        """Decoded image batch; strictly inside (0,1) for the vae_c kind."""
        raw = self.decoder.forward(z)
        if self.spec.kind == "vae_c":
            return raw.clamp(-LOGIT_LIMIT, LOGIT_LIMIT).sigmoid()
        return raw

    def loss_terms(self, x: Tensor, rng: Rng) -> ElboBreakdown:
        x = as_tensor(x)
        q = self.encode(x)
        z = reparameterize(q, rng)
        raw = self.decoder.forward(z)
        if self.spec.kind == "vae_c":
            recon = bernoulli_nll(raw, x)
        else:
            recon = gaussian_nll(x, raw)
        kl = kl_to_standard_normal(q)
        zero = Tensor(0.0)
        return ElboBreakdown(recon, zero, kl, 0.0, recon + kl)

    def _decode_images(self, z: Tensor) -> np.ndarray:
        return self.decode_image(z).data


class WaveletVae(_VaeBase):
    """Latents decode to Haar coefficients; images come from the inverse
    transform of the top-level prediction."""

    def __init__(self, spec: ModelSpec, rng: Rng):
        spec.validate()
        if spec.kind not in ("wavelet_vae", "wavelet_vae_mr"):
            raise ConfigError(f"WaveletVae cannot be kind {spec.kind!r}")
        self.spec = spec
        self.encoder = Encoder(spec, rng.spawn(1))
        self.decoder = WaveletDecoder(spec, rng.spawn(2))

    def decode_wavelets(self, z: Tensor) -> WaveletPrediction:
        return self.decoder.forward(z)

    def loss_terms(self, x: Tensor, rng: Rng) -> ElboBreakdown:
        x = as_tensor(x)
        q = self.encode(x)
        z = reparameterize(q, rng)
        return wavelet_elbo(x, self.decode_wavelets(z), q, self.spec.beta)

    def coefficients_to_image(self, stacked: Tensor) -> Tensor:
        """Invert a channel-stacked level-1 prediction back to pixels."""
        return wavelet.idwt2(wavelet.unstack_channels(stacked))

    def _decode_images(self, z: Tensor) -> np.ndarray:
        return self.coefficients_to_image(self.decode_wavelets(z).top()).data


MODEL_KINDS = ("vae", "vae_c", "wavelet_vae", "wavelet_vae_mr")


def build_model(spec: ModelSpec, rng: Rng):
    """Instantiate the model for ``spec.kind``; encoders are seed-matched
    across kinds (same rng stream regardless of the attached decoder)."""
    if spec.kind in ("vae", "vae_c"):
        return ImageVae(spec, rng)
    if spec.kind == "wavelet_vae":
        if tuple(spec.levels) != (1,):
            raise ConfigError("wavelet_vae decodes level 1 only")
        return WaveletVae(spec, rng)
    if spec.kind == "wavelet_vae_mr":
        return WaveletVae(spec, rng)
    raise ConfigError(f"unknown model kind {spec.kind!r}")
