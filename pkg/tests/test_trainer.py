"""Optimizer, schedule, EMA, stages and the ablation protocol."""

import numpy as np
import pytest

from nacodec.checkpoint import params_digest
from nacodec.config import RunConfig
from nacodec.tensor import Param, Tape, Tensor
from nacodec.train import (
    AdamW,
    EmaWeights,
    OptimConfig,
    StageSpec,
    Trainer,
    clip_gradients,
    default_stages,
    lr_at,
    run_ablation_config,
    table_grid,
)

TINY = RunConfig(stage1_steps=3, stage2_steps=2, stage3_steps=2,
                 segment_samples=1024, data_pool=8)


def grads_for(loss_fn, params):
    tape = Tape()
    with tape:
        loss = loss_fn()
    return tape.backward(loss)


class TestLrSchedule:
    def test_at_warmup_is_base(self):
        assert lr_at(100, 100, 3e-4) == pytest.approx(3e-4)

    def test_inverse_sqrt_after_warmup(self):
        assert lr_at(400, 100, 1.0) == pytest.approx(0.5)

    def test_linear_during_warmup(self):
        assert lr_at(50, 100, 1.0) == pytest.approx(0.5)

    def test_step_zero_is_zero(self):
        assert lr_at(0, 100, 1.0) == 0.0


class TestAdamW:
    def test_zero_gradient_zero_decay_keeps_params(self):
        p = Param(np.array([1.0, -2.0], dtype=np.float32), name="p")
        opt = AdamW([("p", p)], OptimConfig(weight_decay=0.0))
        before = p.data.copy()
        loss_fn = lambda: (p * 0.0).sum()
        g = grads_for(loss_fn, [p])
        opt.step(g)
        assert np.array_equal(p.data, before)

    def test_cautious_identical_when_aligned(self):
        def run(cautious):
            p = Param(np.array([1.0, 2.0], dtype=np.float64), name="p")
            opt = AdamW([("p", p)], OptimConfig(lr=1e-2, warmup=1, cautious=cautious,
                                                weight_decay=0.0))
            for _ in range(5):
                g = grads_for(lambda: (p * p).sum(), [p])
                opt.step(g)
            return p.data

        assert np.allclose(run(True), run(False))

    def test_quadratic_bowl_converges(self):
        p = Param(np.full(4, 3.0), name="w")
        opt = AdamW([("w", p)], OptimConfig(lr=5e-2, warmup=20, weight_decay=0.0))
        norms = []
        for _ in range(200):
            g = grads_for(lambda: (p * p).sum(), [p])
            opt.step(g)
            norms.append(float(np.linalg.norm(p.data)))
        after_warmup = norms[20:]
        assert all(b <= a + 1e-9 for a, b in zip(after_warmup, after_warmup[1:]))
        assert norms[-1] < 0.2

    def test_nan_gradient_skips_step(self):
        p = Param(np.array([1.0]), name="p")
        opt = AdamW([("p", p)], OptimConfig())
        before = p.data.copy()

        class FakeGrads:
            def get(self, q):
                return np.array([np.nan])

        assert opt.step(FakeGrads()) is False
        assert opt.skipped == 1
        assert np.array_equal(p.data, before)

    def test_cautious_mask_property(self, rng):
        # every retained update component agrees in sign with its gradient
        p = Param(rng.standard_normal(64), name="p")
        opt = AdamW([("p", p)], OptimConfig(lr=1e-2, warmup=1, cautious=True, weight_decay=0.0))
        sign_flip = Tensor(np.sign(rng.standard_normal(64)))
        for _ in range(8):
            before = p.data.copy()
            g = grads_for(lambda: (p * sign_flip).sum(), [p])
            opt.step(g)
            delta = p.data - before  # = -lr * masked update
            grad = sign_flip.data
            assert np.all(delta * grad <= 1e-12)


class TestEma:
    def test_converges_to_constant_params(self):
        p = Param(np.array([2.0]), name="p")
        ema = EmaWeights([("p", p)], decay=0.9)
        ema.shadow["p"] = np.array([0.0])
        for _ in range(200):
            ema.update()
        assert abs(ema.shadow["p"][0] - 2.0) < 1e-8

    def test_swap_in_out_restores(self):
        p = Param(np.array([1.0]), name="p")
        ema = EmaWeights([("p", p)], decay=0.5)
        p.assign(np.array([5.0]))
        ema.update()
        ema.swap_in()
        assert p.data[0] != 5.0
        ema.swap_out()
        assert p.data[0] == 5.0


class TestClipping:
    def test_norm_clipped_to_bound(self, rng):
        p = Param(rng.standard_normal(16), name="p")
        g = grads_for(lambda: (p * 100.0).sum(), [p])
        clipped = clip_gradients(g, [("p", p)], max_norm=1.0)
        total = np.sqrt(sum(float((v**2).sum()) for v in clipped.values()))
        assert total <= 1.0 + 1e-6

    def test_small_gradients_untouched(self, rng):
        p = Param(rng.standard_normal(4), name="p")
        g = grads_for(lambda: (p * 1e-4).sum(), [p])
        clipped = clip_gradients(g, [("p", p)], max_norm=1.0)
        assert np.array_equal(clipped["p"], g.get(p))


class TestStages:
    def test_stage_specs_follow_schedule_rules(self):
        stages = default_stages(TINY)
        assert [s.stage for s in stages] == [1, 2, 3]
        assert stages[0].frozen == ()
        for s in stages[1:]:
            assert "encoder" in s.frozen
        assert stages[2].discriminator == "transformer"
        assert stages[2].chirp_augment
        assert not stages[0].chirp_augment

    def test_stage23_must_freeze(self):
        with pytest.raises(ValueError):
            StageSpec(2, 5, frozen=())

    def test_encoder_frozen_through_stage2(self):
        import hashlib

        cfg = RunConfig(stage1_steps=2, stage2_steps=2, stage3_steps=0,
                        segment_samples=1024, data_pool=8)
        tr = Trainer(cfg)
        stages = default_stages(cfg)
        tr.run_stage(stages[0])

        def enc_hash():
            h = hashlib.sha256()
            for n, p in tr.model.named_params():
                if n.startswith(("in_proj", "encoder", "latent_proj", "bottleneck")):
                    h.update(p.data.tobytes())
            h.update(tr.model.bottleneck.ema_std.tobytes())
            return h.hexdigest()

        before = enc_hash()
        tr.run_stage(stages[1])
        assert enc_hash() == before

    def test_stage2_resets_discriminator(self):
        cfg = TINY
        tr = Trainer(cfg)
        d1 = tr._build_disc("convolutional", 1)
        d2 = tr._build_disc("convolutional", 2)
        v1 = next(iter(d1.named_params()))[1].data
        v2 = next(iter(d2.named_params()))[1].data
        assert not np.array_equal(v1, v2)

    def test_stage3_batch_contains_chirp(self, monkeypatch):
        cfg = RunConfig(stage1_steps=0, stage2_steps=0, stage3_steps=1,
                        segment_samples=1024, data_pool=8)
        tr = Trainer(cfg)
        seen = {}
        orig = tr._chirp_item

        def spy():
            item = orig()
            seen["chirp"] = item
            return item

        monkeypatch.setattr(tr, "_chirp_item", spy)
        tr.run_stage(default_stages(cfg)[2])
        assert "chirp" in seen
        audio, text = seen["chirp"]
        assert text.startswith("chirp-aug")
        assert audio.shape == (2, 1024)

    def test_loss_log_written(self, tmp_path):
        cfg = RunConfig(stage1_steps=2, stage2_steps=0, stage3_steps=0,
                        segment_samples=1024, data_pool=8)
        tr = Trainer(cfg, out_dir=tmp_path)
        tr.run()
        log = (tmp_path / "loss_log.txt").read_text().strip().splitlines()
        assert len(log) == 2
        assert log[0].startswith("step=1 ")
        assert "mrstft_total=" in log[0]
        assert "noise_train=0.05" in log[0]
        assert (tmp_path / "config.txt").exists()
        assert (tmp_path / "checkpoint.nac").exists()

    @pytest.mark.slow
    def test_full_schedule_deterministic(self):
        t1 = Trainer(TINY)
        t1.run()
        t2 = Trainer(TINY)
        t2.run()
        assert t1.digest() == t2.digest()
        assert [h["total"] for h in t1.history] == [h["total"] for h in t2.history]


class TestAuxWarmup:
    def test_encoder_untouched_by_aux_during_warmup(self):
        # with only diff/con active and warmup on, the encoder gets no update
        cfg = RunConfig(stage1_steps=2, stage2_steps=0, stage3_steps=0,
                        segment_samples=1024, data_pool=8)
        tr = Trainer(cfg)
        spec = StageSpec(1, 2, frozen=(), active_losses=frozenset({"diff", "con"}),
                         discriminator=None, chirp_augment=False, aux_warmup=2)
        before = params_digest(tr.model)
        tr.run_stage(spec)
        after = params_digest(tr.model)
        # bottleneck affine may still drift through ema updates? it must not:
        assert before == after

    def test_aux_flow_reaches_encoder_after_warmup(self):
        cfg = RunConfig(stage1_steps=1, stage2_steps=0, stage3_steps=0,
                        segment_samples=1024, data_pool=8)
        tr = Trainer(cfg)
        spec = StageSpec(1, 1, frozen=(), active_losses=frozenset({"diff"}),
                         discriminator=None, chirp_augment=False, aux_warmup=0)
        before = params_digest(tr.model)
        # velocity head starts as identity-ish; give it signal so gradients
        # reach the encoder through the latent
        g = np.random.default_rng(3)
        for _, p in tr.aux.velocity.named_params():
            if p.data.size and not np.any(p.data):
                p.assign(g.standard_normal(p.data.shape).astype(np.float32) * 0.1)
        tr.run_stage(spec)
        assert params_digest(tr.model) != before


class TestAblation:
    def test_grid_matches_table_flags(self):
        specs = table_grid(RunConfig())
        names = [s.name for s in specs]
        assert names == ["A", "B", "C", "D", "E"]
        byname = {s.name: s for s in specs}
        assert byname["A"].bottleneck == "vae" and byname["A"].aux == frozenset()
        assert byname["B"].bottleneck == "softnorm" and byname["B"].aux == frozenset()
        assert byname["C"].aux == {"diff"}
        assert byname["D"].aux == {"diff", "sem", "con"}
        assert byname["E"].bottleneck == "vae"
        assert byname["E"].stride < byname["A"].stride
        assert byname["E"].latent_dim < byname["A"].latent_dim

    def test_vae_config_samples_and_regularises(self, rng):
        import nacodec.nn as nn

        cfg = RunConfig(bottleneck="vae").model_config()
        model = nn.Autoencoder(rng, cfg)
        x = rng.standard_normal((2, 1024)).astype(np.float32) * 0.3
        tape = Tape()
        with tape:
            xh, z = model.forward(x, np.random.default_rng(0), "train")
            kl = model.bottleneck.reg_loss(z)
        assert kl.item() >= 0.0
        assert z.shape[0] == cfg.latent_dim

    @pytest.mark.slow
    def test_identical_seed_identical_curves(self):
        cfg = RunConfig(segment_samples=512, data_pool=8, dim=16, depth=2,
                        latent_dim=8, mrstft_ffts=(64, 256),
                        velocity_dim=16, velocity_depth=1)
        spec = table_grid(cfg)[1]  # B: softnorm, no aux
        r1 = run_ablation_config(cfg, spec, seed=5, steps=6)
        r2 = run_ablation_config(cfg, spec, seed=5, steps=6)
        assert r1["digest"] == r2["digest"]
        assert r1["mel_log1p"] == r2["mel_log1p"]
        assert r1["flow_val"] == r2["flow_val"]


class TestDistillationTraining:
    @pytest.mark.slow
    def test_student_distills_from_frozen_teacher(self, rng):
        import nacodec.losses as lo
        import nacodec.nn as nn
        from nacodec.train import AdamW, OptimConfig

        mc = nn.ModelConfig(dim=16, depth=2, ksin=1)
        teacher = nn.Autoencoder(np.random.default_rng(0), mc)
        student = nn.Autoencoder(np.random.default_rng(1), mc)
        # wake the zero-init branches so the two encoders genuinely differ
        g = np.random.default_rng(7)
        for net in (teacher, student):
            for _, p in net.named_params():
                if p.data.size and not np.any(p.data):
                    p.assign(g.standard_normal(p.data.shape).astype(np.float32) * 0.1)
        # freeze the teacher: plain tensors, not trainable params
        for _, p in teacher.named_params():
            p.requires_grad = False
        opt = AdamW(list(student.named_params()), OptimConfig(lr=3e-3, warmup=3))
        cfg = lo.MrstftConfig(fft_sizes=(64,), sample_rate=8000)
        x = rng.standard_normal((2, 1024)).astype(np.float32) * 0.3
        vals = []
        for step in range(10):
            tape = Tape()
            with tape:
                # rng None: deterministic encode, no latent noise
                z_s, _ = student.encode(x, None, "train")
                z_t, _ = teacher.encode(x, None, "train")
                rep = lo.distillation_suite(
                    z_s.latent, z_t.latent,
                    lambda z: student.decode(nn.LatentSeq(z, z_s.ema_std), None, "train"),
                    lambda z: teacher.decode(nn.LatentSeq(z, z_t.ema_std), None, "train"),
                    x, cfg,
                )
            grads = tape.backward(rep["distill_total"])
            for _, p in teacher.named_params():
                assert grads.get(p) is None
            opt.step(grads)
            vals.append(rep.value("distill"))
        assert vals[-1] < vals[0]
