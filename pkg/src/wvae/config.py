"""Run configuration: flat key=value text files, CLI overrides, validation.

The file format is one ``key=value`` per line with ``#`` comments.  Values
are coerced by the declared field type; tuples are comma-separated.  The
resolved configuration is echoed into every output directory and hashed so
checkpoints can be matched to the settings that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .errors import ConfigError

MODEL_KINDS = ("vae", "vae_c", "wavelet_vae", "wavelet_vae_mr", "gan_ns", "gan_ls", "gan_wclip")
GAN_KIND_MAP = {
    "gan_ns": "non_saturating",
    "gan_ls": "least_squares",
    "gan_wclip": "wasserstein_clip",
}


@dataclass
class RunConfig:
    model: str = "wavelet_vae"
    data: str = ""
    out: str = "run"
    epochs: int = 1000
    batch_size: int = 100
    latent: int = 64
    beta: float = 5.0
    lr: float = 1e-4
    lr_halve_every: int = 300
    seed: int = 0
    levels: tuple = ()  # empty = kind default: (1,) plain, (1,2,3) multi-resolution
    enc_channels: tuple = (64, 128)
    dec_channels: tuple = (128, 64, 32)
    hidden: int = 1024
    batchnorm: bool = True
    channels: int = 0  # 0 = take from the dataset
    image_size: int = 0  # 0 = take from the dataset
    checkpoint_every: int = 100
    augment_flip: bool = False
    critic_steps: int = 0  # gan: 0 = kind default
    clip: float = 0.01  # gan: weight-clip bound
    lr_d: float = 0.0  # gan: 0 = same as lr
    iqm_divisor: float = 100.0

    # -- construction -----------------------------------------------------------

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in dataclasses.fields(cls)}

    @classmethod
    def from_sources(cls, file_text: str = "", overrides: dict = None) -> "RunConfig":
        values = {}
        values.update(_parse_text(file_text))
        values.update(overrides or {})
        cfg = cls()
        for key, raw in values.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, raw, getattr(cfg, key)))
        cfg.validate()
        return cfg

    # -- validation --------------------------------------------------------------

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        for name in ("epochs", "batch_size", "latent", "lr_halve_every", "hidden",
                     "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.model == "wavelet_vae" and self.levels not in ((), (1,)):
            raise ConfigError("wavelet_vae decodes level 1 only; use wavelet_vae_mr")
        if self.model == "gan_wclip" and self.clip <= 0:
            raise ConfigError("clip must be positive for gan_wclip")
        if self.critic_steps < 0:
            raise ConfigError("critic_steps must be >= 0 (0 = default)")

    # -- derived views -------------------------------------------------------------

    def resolved_levels(self) -> tuple:
        if self.levels:
            return tuple(sorted(self.levels))
        return (1, 2, 3) if self.model == "wavelet_vae_mr" else (1,)

    def is_gan(self) -> bool:
        return self.model.startswith("gan_")

    def model_spec(self, channels: int = 0, image_size: int = 0):
        from .models import ModelSpec

        channels = channels or self.channels
        image_size = image_size or self.image_size
        if channels <= 0 or image_size <= 0:
            raise ConfigError("channels/image_size unresolved (no dataset bound)")
        kind = "wavelet_vae" if self.is_gan() else self.model
        spec = ModelSpec(
            kind=kind,
            channels=channels,
            image_size=image_size,
            latent=self.latent,
            enc_channels=tuple(self.enc_channels),
            dec_channels=tuple(self.dec_channels),
            hidden=self.hidden,
            batchnorm=self.batchnorm,
            beta=self.beta,
            levels=(1,) if self.is_gan() else self.resolved_levels(),
        )
        spec.validate()
        return spec

    def gan_config(self):
        from .gan import GanConfig

        if not self.is_gan():
            raise ConfigError(f"{self.model} is not a GAN kind")
        return GanConfig(
            kind=GAN_KIND_MAP[self.model],
            clip=self.clip,
            critic_steps=self.critic_steps,
            lr_g=self.lr,
            lr_d=self.lr_d or self.lr,
        )

    # -- serialization ----------------------------------------------------------------

    def to_text(self) -> str:
        """Canonical key=value form.  ``out`` names the run location rather
        than the computation, so it is excluded: checkpoints from identical
        runs in different directories stay byte-identical."""
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "out":
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def echo_text(self) -> str:
        """Full echo for the output directory, including the out path."""
        return self.to_text() + f"out={self.out}\n"

    def config_hash(self) -> str:
        """Digest of the trajectory-defining fields.

        ``epochs`` and ``checkpoint_every`` only decide where a run stops and
        how often it persists, so extending a run keeps the same hash and
        resume stays legal without --force.
        """
        lines = [
            line
            for line in self.to_text().splitlines()
            if not line.startswith(("epochs=", "checkpoint_every="))
        ]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:12]


def _parse_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            return tuple(int(part) for part in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from exc
