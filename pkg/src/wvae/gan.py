"""Adversarial training with a wavelet-space generator.

The generator is the same coefficient decoder the VAE uses: latents decode to
level-1 subband stacks, which the exact inverse transform turns into images,
so the discriminator always scores pixel space and its gradient reaches the
coefficients through a linear map.  Three classic objectives are supported:
non-saturating, least-squares, and weight-clipped Wasserstein.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import wavelet
from .data import ImageDataset, batches
from .errors import ConfigError, NumericsError
from .metrics import PixelExtractor, fid
from .models import ModelSpec, WaveletDecoder
from .nn import Activation, Adam, BatchNorm, Conv2d, Dense, Flatten, Sequential
from .rng import Rng
from .tensor import Tensor, no_grad, sample_normal

GAN_KINDS = ("non_saturating", "least_squares", "wasserstein_clip")


@dataclass
class GanConfig:
    kind: str = "non_saturating"
    clip: float = 0.01
    critic_steps: int = 0  # 0 = kind default (5 for wasserstein, else 1)
    lr_g: float = 1e-4
    lr_d: float = 1e-4

    def __post_init__(self):
        if self.kind not in GAN_KINDS:
            raise ConfigError(f"unknown gan kind {self.kind!r}")
        if self.kind == "wasserstein_clip" and self.clip <= 0:
            raise ConfigError("wasserstein clip bound must be positive")
        if self.critic_steps == 0:
            self.critic_steps = 5 if self.kind == "wasserstein_clip" else 1
        if self.critic_steps < 1:
            raise ConfigError("critic steps must be >= 1")


class Discriminator:
    """DCGAN-style conv stack to a scalar score; no norm on the first block."""

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
        layers.append(Dense(spec.enc_channels[-1] * 8 * 8, 1, rng))
        self.net = Sequential(layers)

    def forward(self, x: Tensor) -> Tensor:
        """Scores [B]; a logit for the saturating losses, raw for Wasserstein."""
        return self.net(x).reshape(-1)

    __call__ = forward

    def params(self):
        return self.net.params()

    def buffers(self):
        return self.net.buffers()

    def set_training(self, flag):
        self.net.set_training(flag)


def gan_losses(kind: str, d_real: Tensor, d_fake: Tensor):
    """(discriminator loss, generator loss) for the given objective."""
    if kind == "non_saturating":
        d_loss = (-d_real).softplus().mean() + d_fake.softplus().mean()
        g_loss = (-d_fake).softplus().mean()
    elif kind == "least_squares":
        d_loss = ((d_real - 1.0) * (d_real - 1.0)).mean() * 0.5 + (
            d_fake * d_fake
        ).mean() * 0.5
        g_loss = ((d_fake - 1.0) * (d_fake - 1.0)).mean() * 0.5
    elif kind == "wasserstein_clip":
        d_loss = d_fake.mean() - d_real.mean()
        g_loss = -d_fake.mean()
    else:
        raise ConfigError(f"unknown gan kind {kind!r}")
    return d_loss, g_loss


def clip_weights(disc: Discriminator, bound: float) -> None:
    """Project every discriminator parameter onto [-bound, bound]."""
    for p in disc.params().values():
        np.clip(p.data, -bound, bound, out=p.data)


class WaveletGan:
    """Generator (coefficient decoder + inverse transform) and discriminator.

    The decoder is the one parameter store: its tensors appear unchanged in
    the checkpoint under ``dec.*``, interchangeable with a wavelet VAE's
    decoder entries.
    """

    def __init__(self, spec: ModelSpec, config: GanConfig, rng: Rng):
        spec.validate()
        self.spec = spec
        self.config = config
        self.decoder = WaveletDecoder(spec, rng.spawn(2))
        self.disc = Discriminator(spec, rng.spawn(3))
        self.training = True

    def generator_forward(self, z: Tensor) -> Tensor:
        """z -> level-1 coefficients -> image, on the tape."""
        stacked = self.decoder.forward(z).by_level[1]
        return wavelet.idwt2(wavelet.unstack_channels(stacked))

    def generate(self, rng: Rng, n: int) -> np.ndarray:
        was_training = self.training
        with no_grad():
            self.set_training(False)
            images = self.generator_forward(
                sample_normal(rng, (n, self.spec.latent))
            ).data
            self.set_training(was_training)
            return images

    def traverse(self, x, dim: int, rng: Rng, low: float = -3.0, high: float = 3.0,
                 steps: int = 10) -> np.ndarray:
        """Latent sweep around a prior draw; there is no encoder to pin to."""
        if x is not None:
            raise ConfigError("a GAN generator has no encoder; traverse without --image")
        was_training = self.training
        with no_grad():
            self.set_training(False)
            base = rng.normal(self.spec.latent).astype(np.float32)
            zs = np.tile(base, (steps, 1))
            zs[:, dim] = np.linspace(low, high, steps, dtype=np.float32)
            images = self.generator_forward(Tensor(zs)).data
            self.set_training(was_training)
            return images

    def params(self):
        out = {f"dec.{k}": v for k, v in self.decoder.params().items()}
        out.update({f"disc.{k}": v for k, v in self.disc.params().items()})
        return out

    def buffers(self):
        out = {f"dec.{k}": v for k, v in self.decoder.buffers().items()}
        out.update({f"disc.{k}": v for k, v in self.disc.buffers().items()})
        return out

    def set_training(self, flag):
        self.training = flag
        self.decoder.set_training(flag)
        self.disc.set_training(flag)


@dataclass
class GanStepLog:
    step: int
    d_loss: float
    g_loss: float
    fid: float = float("nan")


def _endless_batches(ds: ImageDataset, batch_size: int, rng: Rng):
    while True:
        yield from batches(ds, batch_size, rng=rng, shuffle=True)


def gan_step(model: WaveletGan, config: GanConfig, opt_g: Adam, opt_d: Adam,
             stream, noise_rng: Rng, batch_size: int):
    """One generator update preceded by ``critic_steps`` discriminator updates.

    Critic updates each consume a fresh real batch and score detached fakes;
    Wasserstein mode re-clips the discriminator after every critic step.
    Returns (d_loss, g_loss) scalars from the final passes.
    """
    for _ in range(config.critic_steps):
        real = next(stream)
        with no_grad():
            fake = Tensor(
                model.generator_forward(
                    sample_normal(noise_rng, (batch_size, model.spec.latent))
                ).data
            )
        d_loss, _ = gan_losses(config.kind, model.disc(real), model.disc(fake))
        opt_d.zero_grad()
        opt_g.zero_grad()
        d_loss.backward()
        opt_d.step()
        if config.kind == "wasserstein_clip":
            clip_weights(model.disc, config.clip)
    fake = model.generator_forward(
        sample_normal(noise_rng, (batch_size, model.spec.latent))
    )
    fake_scores = model.disc(fake)
    _, g_loss = gan_losses(config.kind, fake_scores, fake_scores)
    opt_d.zero_grad()
    opt_g.zero_grad()
    g_loss.backward()
    opt_g.step()
    return d_loss.item(), g_loss.item()


def train_gan(
    model: WaveletGan,
    dataset: ImageDataset,
    rng: Rng,
    steps: int,
    batch_size: int = 64,
    log_every: int = 10,
    eval_every: int = 0,
    sample_hook=None,
) -> list:
    """Alternating optimization for ``steps`` generator updates.

    Returns per-logged-step records; any non-finite loss aborts with a
    diagnostic.  ``eval_every > 0`` adds a coarse FID against a dataset
    slice; ``sample_hook(step, images)`` receives periodic sample batches.
    """
    config = model.config
    opt_g = Adam(model.decoder.params(), lr=config.lr_g, beta1=0.5)
    opt_d = Adam(model.disc.params(), lr=config.lr_d, beta1=0.5)
    stream = _endless_batches(dataset, batch_size, rng.spawn(11))
    noise = rng.spawn(12)
    eval_rng = rng.spawn(13)
    history = []
    fid_ref = dataset.images[: min(len(dataset), 256)]
    extractor = PixelExtractor()

    for step in range(1, steps + 1):
        try:
            d_val, g_val = gan_step(
                model, config, opt_g, opt_d, stream, noise, batch_size
            )
        except NumericsError as exc:
            raise NumericsError(f"gan training diverged at step {step}: {exc}") from exc

        if step % log_every == 0 or step == steps:
            record = GanStepLog(step, d_val, g_val)
            if eval_every and (step % eval_every == 0 or step == steps):
                samples = np.clip(model.generate(eval_rng, len(fid_ref)), 0.0, 1.0)
                record.fid = fid(fid_ref, samples, extractor).value
                if sample_hook is not None:
                    sample_hook(step, samples)
            history.append(record)
    return history
