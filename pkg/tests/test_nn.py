"""Architecture: patching, interleaving, masks, layers, bottleneck, model."""

import numpy as np
import pytest

import nacodec.nn as nn
import nacodec.tensor as tc
from nacodec.tensor import Tape, Tensor

from conftest import read_golden_mask


class TestPatch:
    def test_layout_example(self):
        left = np.arange(8.0)
        right = np.arange(10.0, 18.0)
        e = nn.patch(Tensor(np.stack([left, right])), 4)
        assert e.shape == (8, 2)
        assert np.array_equal(e.data[:, 0], [0, 1, 2, 3, 10, 11, 12, 13])

    def test_round_trip_bit_exact(self, rng):
        x = Tensor(rng.standard_normal((2, 96)).astype(np.float32))
        back = nn.unpatch(nn.patch(x, 8), 8, 2)
        assert np.array_equal(back.data, x.data)

    def test_big_run_shape_math(self):
        e_cols = 196608 // 256
        assert e_cols == 768
        cfg = nn.ModelConfig(patch=256, stride=16)
        assert cfg.latent_frames(196608) == 48

    def test_indivisible_rejected(self, rng):
        with pytest.raises(nn.ModelError):
            nn.patch(Tensor(rng.standard_normal((2, 10))), 4)

    def test_gradient_transparent(self, rng):
        x = Tensor(rng.standard_normal((2, 32)), requires_grad=True, dtype=np.float64)
        tape = Tape()
        with tape:
            loss = (nn.patch(x, 4) * 2.0).sum()
        g = tape.backward(loss).get(x)
        assert np.allclose(g, 2.0)


class TestInterleave:
    def test_encoder_plan_example(self):
        n_seg, order, extract, pos = nn.encoder_interleave_plan(8, 2)
        assert n_seg == 4
        assert len(order) == 12
        assert list(extract) == [2, 5, 8, 11]

    def test_decoder_plan_example(self):
        order, extract, pos = nn.decoder_interleave_plan(3, 4)
        assert len(order) == 15
        assert len(extract) == 12

    def test_encoder_query_positions_at_segment_midpoints(self):
        _, _, extract, pos = nn.encoder_interleave_plan(8, 4)
        assert pos[extract[0]] == 1.5
        assert pos[extract[1]] == 5.5

    def test_zero_noise_makes_query_slots_identical(self, rng):
        trb = nn.Trb(rng, nn.TrbConfig("encoder", 2, 1, 8, heads=2,
                                       attention=nn.MaskSpec("sliding_window", window=4),
                                       query_noise_std=0.0))
        # fresh stack is the identity, so query slots return the raw query
        x = Tensor(rng.standard_normal((6, 8)).astype(np.float32))
        out = trb(x, rng=None).data
        assert np.allclose(out, out[0])

    def test_extraction_recovers_query_slots(self, rng):
        n, s = 6, 2
        n_seg, order, extract, _ = nn.encoder_interleave_plan(n, s)
        x = np.arange(n)[:, None] * np.ones((1, 3))
        q = 100 + np.arange(n_seg)[:, None] * np.ones((1, 3))
        seq = np.concatenate([x, q])[order]
        assert np.array_equal(seq[extract], q)

    def test_decoder_output_rate(self, rng):
        trb = nn.Trb(rng, nn.TrbConfig("decoder", 4, 1, 8, heads=2,
                                       attention=nn.MaskSpec("sliding_window", window=4)))
        z = Tensor(rng.standard_normal((5, 8)).astype(np.float32))
        assert trb(z, rng=None).shape == (20, 8)

    def test_decoder_queries_receive_gradient_and_order_is_stable(self, rng):
        trb = nn.Trb(rng, nn.TrbConfig("decoder", 3, 1, 8, heads=2,
                                       attention=nn.MaskSpec("sliding_window", window=4)))
        z = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
        out1 = trb(z, rng=None).data
        out2 = trb(z, rng=None).data
        assert np.array_equal(out1, out2)
        tape = Tape()
        with tape:
            loss = tc.sum_(tc.abs_(trb(z, rng=None)))
        assert tape.backward(loss).get(trb.queries) is not None

    def test_encoder_ksin_rejected(self):
        with pytest.raises(nn.ModelError):
            nn.TrbConfig("encoder", 2, 2, 8, ksin=1)


class TestMasks:
    def test_sliding_matches_golden_and_brute_force(self):
        golden = read_golden_mask("mask_sliding_L12_w3.txt")
        mask = nn.build_mask(nn.MaskSpec("sliding_window", window=3), 12)
        got = (mask == 0).astype(int)
        assert np.array_equal(got, golden)
        i = np.arange(12)
        brute = (np.abs(i[:, None] - i[None, :]) <= 3).astype(int)
        assert np.array_equal(got, brute)

    @pytest.mark.parametrize("layer,golden_name", [
        (1, "mask_chunked_std_L12_c6.txt"),
        (4, "mask_chunked_std_L12_c6.txt"),
        (5, "mask_chunked_shifted_L12_c6.txt"),
        (8, "mask_chunked_shifted_L12_c6.txt"),
    ])
    def test_chunked_matches_golden(self, layer, golden_name):
        golden = read_golden_mask(golden_name)
        mask = nn.build_mask(nn.MaskSpec("chunked_midpoint_shift", chunk=6), 12, layer, 8)
        assert np.array_equal((mask == 0).astype(int), golden)

    def test_single_position_mask(self):
        mask = nn.build_mask(nn.MaskSpec("sliding_window", window=3), 1)
        assert mask.shape == (1, 1) and mask[0, 0] == 0

    def test_every_position_attends_to_itself_every_layer(self):
        spec = nn.MaskSpec("chunked_midpoint_shift", chunk=6)
        for layer in range(1, 9):
            mask = nn.build_mask(spec, 24, layer, 8)
            assert np.all(np.diag(mask) == 0)

    def test_layer_union_covers_half_chunk_neighbourhoods(self):
        spec = nn.MaskSpec("chunked_midpoint_shift", chunk=6)
        length = 24
        union = np.zeros((length, length), dtype=bool)
        for layer in (1, 8):
            union |= nn.build_mask(spec, length, layer, 8) == 0
        i = np.arange(length)
        near = np.abs(i[:, None] - i[None, :]) <= 3
        assert np.all(union[near])

    def test_invalid_specs_rejected(self):
        with pytest.raises(nn.ModelError):
            nn.MaskSpec("sliding_window", window=0)
        with pytest.raises(nn.ModelError):
            nn.MaskSpec("chunked_midpoint_shift", chunk=0)


class TestTransformerLayer:
    def test_identity_at_init_bit_exact(self, rng):
        for act in ("silu", "sinpi"):
            layer = nn.TransformerLayer(rng, 16, 2, 1, activation=act)
            x = Tensor(rng.standard_normal((9, 16)).astype(np.float32))
            mask = nn.build_mask(nn.MaskSpec("sliding_window", window=4), 9)
            y = layer(x, mask, np.arange(9))
            assert np.array_equal(y.data, x.data)

    def test_rope_preserves_per_head_norms(self, rng):
        cos, sin = nn.rope_tables(np.arange(7) * 1.3, 8, 10000.0, "float32")
        x = Tensor(rng.standard_normal((3, 7, 8)).astype(np.float32))
        y = nn.apply_rope(x, cos, sin)
        assert np.allclose(np.linalg.norm(x.data, axis=-1),
                           np.linalg.norm(y.data, axis=-1), atol=1e-5)

    def test_masked_positions_contribute_nothing(self, rng):
        layer = nn.TransformerLayer(rng, 16, 2, 1)
        # make the attention branch matter
        g = np.random.default_rng(5)
        for _, p in layer.named_params():
            if p.data.size and not np.any(p.data):
                p.assign(g.standard_normal(p.data.shape).astype(np.float32) * 0.3)
        x = rng.standard_normal((6, 16)).astype(np.float32)
        mask = nn.build_mask(nn.MaskSpec("chunked_midpoint_shift", chunk=3), 6, 1, 2)
        y1 = layer(Tensor(x), mask, np.arange(6)).data
        x2 = x.copy()
        x2[5] += 100.0  # outside the first chunk
        y2 = layer(Tensor(x2), mask, np.arange(6)).data
        assert np.allclose(y1[:3], y2[:3], atol=1e-5)

    def test_differential_lambda_init_schedule(self):
        assert abs(nn.lambda_init_for_layer(1) - 0.2) < 1e-12
        assert nn.lambda_init_for_layer(2) > nn.lambda_init_for_layer(1)


class TestBottleneck:
    def test_ema_converges_to_true_std(self):
        bn = nn.SoftNormBottleneck(4, ema_decay=0.995)
        g = np.random.default_rng(0)
        for _ in range(3000):
            h = Tensor((g.standard_normal((4, 128)) * 3.0).astype(np.float32))
            bn.encode(h, "train", None)
        assert np.all(np.abs(bn.ema_std - 3.0) / 3.0 < 0.02)
        z = bn.encode(Tensor((g.standard_normal((4, 4096)) * 3.0).astype(np.float32)), "train", None)
        assert abs(z.latent.data.std() - 1.0) < 0.02

    def test_infer_mode_never_mutates_state(self, rng):
        bn = nn.SoftNormBottleneck(4)
        before = bn.ema_std.copy()
        bn.encode(Tensor(rng.standard_normal((4, 32)).astype(np.float32)), "infer",
                  np.random.default_rng(0))
        assert np.array_equal(before, bn.ema_std)

    def test_zero_noise_round_trip_exact(self, rng):
        bn = nn.SoftNormBottleneck(4)
        bn.encode(Tensor(rng.standard_normal((4, 64)).astype(np.float32) * 2.0), "train", None)
        h = Tensor(rng.standard_normal((4, 16)).astype(np.float32))
        z = bn.encode(h, "infer", None)  # rng None -> zero noise
        rec = bn.decode_scale(z).data
        affine = h.data * bn.scale.data[:, None] + bn.bias.data[:, None]
        assert np.abs(rec - affine).max() < 1e-6

    def test_noise_scale_defaults(self):
        bn = nn.SoftNormBottleneck(4)
        assert bn.noise_train == 5e-2
        assert bn.noise_infer == 1e-3

    def test_latent_snapshot_carries_state(self, rng):
        bn = nn.SoftNormBottleneck(4)
        z = bn.encode(Tensor(rng.standard_normal((4, 16)).astype(np.float32)), "train", None)
        assert z.ema_std is not None and z.ema_std.shape == (4,)


class TestVaeBottleneck:
    def test_emits_mean_logvar_and_samples(self, rng):
        bn = nn.VaeBottleneck(4)
        h = Tensor(rng.standard_normal((8, 16)).astype(np.float32))
        z = bn.encode(h, "train", np.random.default_rng(0))
        assert z.shape == (4, 16)
        kl = bn.reg_loss(z)
        assert kl.item() >= 0.0

    def test_infer_returns_mean(self, rng):
        bn = nn.VaeBottleneck(4)
        h = rng.standard_normal((8, 16)).astype(np.float32)
        z = bn.encode(Tensor(h), "infer", np.random.default_rng(0))
        assert np.array_equal(z.latent.data, h[:4])


class TestAutoencoder:
    def test_toy_shape_example(self, rng):
        model = nn.Autoencoder(rng, nn.ModelConfig())
        z, n = model.encode(np.zeros((2, 8000), dtype=np.float32))
        assert z.shape == (16, nn.ModelConfig().latent_frames(8000))

    def test_latent_count_formula_over_random_lengths(self, rng):
        cfg = nn.ModelConfig()
        model = nn.Autoencoder(np.random.default_rng(1), cfg)
        for _ in range(20):
            n = int(rng.integers(33, 5000))
            z, _ = model.encode(rng.standard_normal((2, n)).astype(np.float32))
            assert z.shape[1] == -(-n // (cfg.patch * cfg.stride))

    def test_decode_restores_length(self, rng):
        model = nn.Autoencoder(rng, nn.ModelConfig())
        x = rng.standard_normal((2, 3001)).astype(np.float32)
        xh, z = model.forward(x, np.random.default_rng(0), "train")
        assert xh.shape == (2, 3001)

    def test_chunked_attention_variant_runs(self, rng):
        cfg = nn.ModelConfig(attention="chunked_midpoint_shift", chunk=10, differential=False)
        model = nn.Autoencoder(rng, cfg)
        xh, _ = model.forward(rng.standard_normal((2, 1024)).astype(np.float32),
                              np.random.default_rng(0))
        assert xh.shape == (2, 1024)

    def test_length_generalisation_sliding_window(self, rng):
        cfg = nn.ModelConfig()
        model = nn.Autoencoder(np.random.default_rng(9), cfg)
        g = np.random.default_rng(11)
        for name, p in model.named_params():
            if p.data.size and "queries" not in name:
                p.assign(p.data + 0.05 * g.standard_normal(p.data.shape).astype(np.float32))
        base = g.standard_normal((2, 2048)).astype(np.float32)
        ext = np.concatenate([base, g.standard_normal((2, 2048)).astype(np.float32)], axis=1)
        z1, _ = model.encode(base, None, "infer")
        z2, _ = model.encode(ext, None, "infer")
        margin = int(np.ceil(cfg.depth * cfg.window / (cfg.stride + 1))) + 2
        keep = z1.shape[1] - margin
        assert np.array_equal(z1.latent.data[:, :keep], z2.latent.data[:, :keep])

    def test_gradient_reaches_every_parameter_after_one_step(self, rng):
        from nacodec import losses as lo

        model = nn.Autoencoder(np.random.default_rng(5), nn.ModelConfig(depth=2))
        x = rng.standard_normal((2, 1024)).astype(np.float32) * 0.3
        cfg = lo.MrstftConfig(fft_sizes=(64,), sample_rate=8000)

        def one_pass():
            tape = Tape()
            with tape:
                xh, z = model.forward(x, np.random.default_rng(7), "train")
                loss = lo.mrstft(xh, Tensor(x), cfg)["mrstft_total"] + lo.kl_dual_axis(z.latent)
            return tape.backward(loss)

        grads = one_pass()
        for name, p in model.named_params():
            g = grads.get(p)
            if g is not None:
                p.assign(p.data - 1e-3 * g)
        grads = one_pass()
        dead = [name for name, p in model.named_params()
                if grads.get(p) is None or not np.any(grads.get(p))]
        assert dead == []

    def test_wrong_channel_count_rejected(self, rng):
        model = nn.Autoencoder(rng, nn.ModelConfig())
        with pytest.raises(nn.ModelError):
            model.encode(np.zeros((1, 100), dtype=np.float32))


class TestWeightNorm:
    def test_initial_weight_equals_raw_direction(self, rng):
        lin = nn.WeightNormLinear(rng, 6, 4)
        x = Tensor(np.eye(6, dtype=np.float32))
        out = lin(x).data - lin.b.data[None, :]
        assert np.allclose(out, lin.v.data, atol=1e-6)

    def test_gain_controls_column_scale(self, rng):
        lin = nn.WeightNormLinear(rng, 6, 4)
        lin.g.assign(lin.g.data * 2.0)
        x = Tensor(np.eye(6, dtype=np.float32))
        out = lin(x).data - lin.b.data[None, :]
        assert np.allclose(out, 2.0 * lin.v.data, atol=1e-5)
