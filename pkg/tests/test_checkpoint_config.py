"""Checkpoint container and flat-text config parsing."""

import numpy as np
import pytest

import nacodec.nn as nn
from nacodec.checkpoint import (
    CheckpointError,
    load_checkpoint,
    params_digest,
    restore,
    save_checkpoint,
)
from nacodec.config import ConfigError, RunConfig, load_config, parse_config_text


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path, rng):
        model = nn.Autoencoder(rng, nn.ModelConfig(dim=16, depth=2))
        path = tmp_path / "m.nac"
        meta = {"step": 7, "noise_train": 0.05}
        save_checkpoint(path, model, meta, ema={"ema.x": np.arange(4, dtype=np.float32)})
        ckpt = load_checkpoint(path)
        assert ckpt.meta["step"] == 7
        for name, p in model.named_params():
            assert np.array_equal(ckpt.params[name], p.data)
            assert ckpt.params[name].dtype == p.data.dtype
        for name, a in model.named_state():
            assert np.array_equal(ckpt.state[name], a)
        assert np.array_equal(ckpt.ema["ema.x"], np.arange(4, dtype=np.float32))

    def test_restore_into_fresh_model(self, tmp_path):
        m1 = nn.Autoencoder(np.random.default_rng(0), nn.ModelConfig(dim=16, depth=2))
        # give ema_std a non-default value so state restoration is visible
        m1.bottleneck._state["ema_std"] = np.full(16, 2.5, dtype=np.float32)
        path = tmp_path / "m.nac"
        save_checkpoint(path, m1, {})
        m2 = nn.Autoencoder(np.random.default_rng(99), nn.ModelConfig(dim=16, depth=2))
        assert params_digest(m1) != params_digest(m2)
        restore(m2, load_checkpoint(path))
        assert params_digest(m1) == params_digest(m2)
        assert np.array_equal(m2.bottleneck.ema_std, m1.bottleneck.ema_std)

    def test_missing_param_rejected(self, tmp_path):
        m1 = nn.Autoencoder(np.random.default_rng(0), nn.ModelConfig(dim=16, depth=2))
        path = tmp_path / "m.nac"
        save_checkpoint(path, None, {}, params={"just_one": np.zeros(3)})
        with pytest.raises(CheckpointError):
            restore(m1, load_checkpoint(path))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.nac"
        path.write_bytes(b"NOPE" * 10)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_file_is_byte_stable(self, tmp_path):
        m = nn.Autoencoder(np.random.default_rng(0), nn.ModelConfig(dim=16, depth=2))
        p1, p2 = tmp_path / "a.nac", tmp_path / "b.nac"
        save_checkpoint(p1, m, {"k": 1})
        save_checkpoint(p2, m, {"k": 1})
        assert p1.read_bytes() == p2.read_bytes()


class TestConfig:
    def test_defaults_round_trip_through_text(self):
        cfg = RunConfig()
        back = parse_config_text(cfg.to_text())
        assert back == cfg

    def test_overrides_and_comments(self):
        cfg = parse_config_text(
            """
            # toy run
            seed = 42
            lr = 0.01
            mrstft_ffts = 64,256
            differential = false
            """
        )
        assert cfg.seed == 42
        assert cfg.lr == 0.01
        assert cfg.mrstft_ffts == (64, 256)
        assert cfg.differential is False

    def test_unknown_key_named_in_error(self):
        with pytest.raises(ConfigError, match="unknown config key: warp_drive"):
            parse_config_text("warp_drive = 9")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value for seed"):
            parse_config_text("seed = banana")

    def test_missing_file_mentions_path(self, tmp_path):
        with pytest.raises(ConfigError, match="no_such_file"):
            load_config(tmp_path / "no_such_file.txt")

    def test_derived_component_configs(self):
        cfg = RunConfig(sample_rate=16000, latent_dim=8, bottleneck="vae")
        mc = cfg.model_config()
        assert mc.sample_rate == 16000 and mc.bottleneck == "vae"
        assert cfg.mrstft_config().sample_rate == 16000
        assert cfg.ensemble_config("convolutional").kind == "convolutional"
        assert cfg.target_config().sample_rate == 16000
