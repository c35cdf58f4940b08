"""Flat key=value run configuration shared by the CLI and trainer."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .adversary import EnsembleConfig
from .heads import TargetConfig
from .losses import MrstftConfig
from .nn import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every tunable of the toy pipeline, with minutes-scale defaults."""

    seed: int = 0
    # data
    sample_rate: int = 8000
    channels: int = 2
    segment_samples: int = 1024
    batch_size: int = 2
    data_pool: int = 16
    # model (toy preset: P=8, S=4, dim=32, D=4, d=16)
    patch: int = 8
    stride: int = 4
    dim: int = 32
    depth: int = 4
    heads: int = 2
    latent_dim: int = 16
    ksin: int = 2
    attention: str = "sliding_window"
    window: int = 8
    chunk: int = 16
    differential: bool = True
    bottleneck: str = "softnorm"
    ema_decay: float = 0.999
    noise_train: float = 5e-2
    noise_infer: float = 1e-3
    # losses
    mrstft_ffts: tuple = (64, 256, 1024)
    use_mid_side: bool = True
    use_left_right: bool = True
    k_weighting: bool = True
    w_mrstft: float = 1.0
    w_kl: float = 1.0
    w_vae_kl: float = 1e-4
    w_adv: float = 1.0
    lambda_fm: float = 2.0
    w_diff: float = 1.0
    w_sem: float = 1.0
    w_con: float = 1.0
    contrast_margin: float = 1.0
    # schedule
    stage1_steps: int = 500
    stage2_steps: int = 100
    stage3_steps: int = 100
    aux_warmup_frac: float = 0.1
    lr: float = 5e-3
    warmup_steps: int = 100
    ae_beta1: float = 0.9
    ae_beta2: float = 0.95
    ae_weight_decay: float = 1e-4
    disc_beta1: float = 0.8
    disc_beta2: float = 0.99
    disc_weight_decay: float = 0.0
    cautious: bool = True
    ema_weights_decay: float = 0.999
    grad_clip: float = 1.0
    # discriminators
    disc_width: int = 8
    trb_disc_dim: int = 16
    trb_disc_depth: int = 2
    pqmf_bands: int = 16
    conv_disc_ffts: tuple = (128, 256, 512, 1024, 2048)
    trb_disc_ffts: tuple = (128, 1024, 2048)
    patch_primes: tuple = (29, 443, 953)
    # aux heads / targets
    target_chroma_fft: int = 1024
    target_chroma_bins: int = 128
    ild_bands: int = 32
    ild_fft: int = 512
    text_dim: int = 32
    velocity_dim: int = 32
    velocity_depth: int = 2
    critic_dim: int = 32
    critic_depth: int = 2
    wavelet_levels: int = 8

    # -- derived component configs -------------------------------------------
    def model_config(self) -> ModelConfig:
        return ModelConfig(
            sample_rate=self.sample_rate, channels=self.channels, patch=self.patch,
            stride=self.stride, dim=self.dim, depth=self.depth, heads=self.heads,
            latent_dim=self.latent_dim, ksin=self.ksin, attention=self.attention,
            window=self.window, chunk=self.chunk, differential=self.differential,
            bottleneck=self.bottleneck, ema_decay=self.ema_decay,
            noise_train=self.noise_train, noise_infer=self.noise_infer,
        )

    def mrstft_config(self) -> MrstftConfig:
        return MrstftConfig(
            fft_sizes=tuple(self.mrstft_ffts), use_mid_side=self.use_mid_side,
            use_left_right=self.use_left_right, k_weighting=self.k_weighting,
            sample_rate=self.sample_rate,
        )

    def ensemble_config(self, kind: str) -> EnsembleConfig:
        return EnsembleConfig(
            kind=kind, channels=self.channels, sample_rate=self.sample_rate,
            width=self.disc_width, trb_dim=self.trb_disc_dim, trb_depth=self.trb_disc_depth,
            conv_ffts=tuple(self.conv_disc_ffts), trb_ffts=tuple(self.trb_disc_ffts),
            patch_primes=tuple(self.patch_primes), pqmf_bands=self.pqmf_bands,
        )

    def target_config(self) -> TargetConfig:
        return TargetConfig(
            sample_rate=self.sample_rate, chroma_bins=self.target_chroma_bins,
            chroma_fft=self.target_chroma_fft, ild_bands=self.ild_bands,
            ild_fft=self.ild_fft,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in _BOOL_WORDS:
            raise ConfigError(f"expected boolean, got {raw!r}")
        return _BOOL_WORDS[raw.lower()]
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        if not raw:
            return ()
        return tuple(int(x.strip()) for x in raw.split(","))
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse `key = value` lines over defaults; unknown keys are errors."""
    cfg = base or RunConfig()
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = body.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")
        try:
            updates[key] = _parse_value(raw, known[key])
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {raw.strip()!r}") from e
    return replace(cfg, **updates)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config_text(text, base)
