"""Optimisation loop: staged schedule, optimizer, EMA, ablation harness.

Everything is seeded; two runs with the same config in the same process
produce bit-identical parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dsp
from . import losses as lo
from . import tensor as tc
from .adversary import DiscEnsemble
from .checkpoint import params_digest, save_checkpoint
from .config import RunConfig
from .data import HashTextEmbedder, ToyDataSource
from .heads import AuxHeads, VelocityNet, regression_targets, wavelet_features
from .losses import GanPair, LossReport
from .metrics import mel_log1p
from .nn import Autoencoder, Param
from .tensor import GradMap, Tensor

ENCODER_GROUPS = ("in_proj", "encoder", "latent_proj", "bottleneck")

# fixed per-purpose rng lanes under the master seed
_LANE_MODEL_INIT = 1
_LANE_AUX_INIT = 2
_LANE_TRAIN = 3
_LANE_DISC_INIT = 4
_LANE_EVAL = 5
_LANE_POSTHOC = 6


def _rng(seed: int, *lane: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(x) for x in lane]]))


def lr_at(step: int, warmup: int, base_lr: float) -> float:
    """Linear warmup into inverse-square-root decay."""
    if step <= 0:
        return 0.0
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class OptimConfig:
    lr: float = 2e-3
    warmup: int = 50
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 1e-4
    cautious: bool = True
    eps: float = 1e-8


class AdamW:
    """Adam with decoupled weight decay and optional cautious masking.

    The cautious mask zeroes update components whose sign disagrees with
    the raw gradient and rescales the rest to keep the update magnitude.
    Steps with non-finite gradients are skipped and counted.
    """

    def __init__(self, named_params: list[tuple[str, Param]], cfg: OptimConfig):
        self.cfg = cfg
        self.items = list(named_params)
        self.m = {n: np.zeros_like(p.data) for n, p in self.items}
        self.v = {n: np.zeros_like(p.data) for n, p in self.items}
        self.t = 0
        self.skipped = 0

    def step(self, grads: GradMap, lr: float | None = None) -> bool:
        got = [(n, p, grads.get(p)) for n, p in self.items]
        live = [(n, p, g) for n, p, g in got if g is not None]
        if not live:
            return False
        if any(not np.all(np.isfinite(g)) for _, _, g in live):
            self.skipped += 1
            return False
        self.t += 1
        if lr is None:
            lr = lr_at(self.t, self.cfg.warmup, self.cfg.lr)
        b1, b2 = self.cfg.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p, g in live:
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)
            if self.cfg.cautious:
                mask = (upd * g) > 0
                scale = mask.size / max(float(mask.sum()), 1.0)
                upd = upd * mask * scale
            p.assign(p.data - lr * upd - lr * self.cfg.weight_decay * p.data)
        return True


class EmaWeights:
    """Shadow copy of parameters updated every step; used for evaluation."""

    def __init__(self, named_params: list[tuple[str, Param]], decay: float = 0.999):
        self.decay = decay
        self.items = list(named_params)
        self.shadow = {n: p.data.copy() for n, p in self.items}
        self._backup: dict[str, np.ndarray] | None = None

    def update(self) -> None:
        d = self.decay
        for n, p in self.items:
            self.shadow[n] = d * self.shadow[n] + (1.0 - d) * p.data

    def swap_in(self) -> None:
        self._backup = {n: p.data for n, p in self.items}
        for n, p in self.items:
            p.assign(self.shadow[n])

    def swap_out(self) -> None:
        if self._backup is None:
            raise RuntimeError("swap_out without swap_in")
        for n, p in self.items:
            p.assign(self._backup[n])
        self._backup = None


def clip_gradients(grads: GradMap, named_params, max_norm: float) -> dict:
    """Global-norm clipping; returns {param_name: clipped_grad}."""
    got = {n: grads.get(p) for n, p in named_params}
    got = {n: g for n, g in got.items() if g is not None}
    if max_norm <= 0 or not got:
        return got
    total = math.sqrt(sum(float((g * g).sum()) for g in got.values()))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        got = {n: g * factor for n, g in got.items()}
    return got


class _ClippedGrads:
    """GradMap-like view over pre-clipped arrays keyed by param name."""

    def __init__(self, by_name: dict, named_params):
        self._by_id = {id(p): by_name[n] for n, p in named_params if n in by_name}

    def get(self, p):
        return self._by_id.get(id(p))


@dataclass
class StageSpec:
    stage: int
    steps: int
    frozen: tuple = ()
    active_losses: frozenset = frozenset({"mrstft", "kl"})
    discriminator: str | None = None
    chirp_augment: bool = False
    aux_warmup: int = 0

    def __post_init__(self):
        if self.stage in (2, 3) and not self.frozen:
            raise ValueError(f"stage {self.stage} must freeze the encoder groups")


def default_stages(cfg: RunConfig) -> list[StageSpec]:
    warm = int(round(cfg.aux_warmup_frac * cfg.stage1_steps))
    s1 = StageSpec(
        1, cfg.stage1_steps, frozen=(),
        active_losses=frozenset({"mrstft", "kl", "adv", "diff", "sem", "con"}),
        discriminator="convolutional", chirp_augment=False, aux_warmup=warm,
    )
    s2 = StageSpec(
        2, cfg.stage2_steps, frozen=ENCODER_GROUPS,
        active_losses=frozenset({"mrstft", "adv"}),
        discriminator="convolutional", chirp_augment=False,
    )
    s3 = StageSpec(
        3, cfg.stage3_steps, frozen=ENCODER_GROUPS,
        active_losses=frozenset({"mrstft", "adv"}),
        discriminator="transformer", chirp_augment=True,
    )
    return [s1, s2, s3]


def _batch_scores(per_item: list[list[Tensor]], k: int) -> Tensor:
    return tc.concat([tc.reshape(item[k], (1,)) for item in per_item])


def _batch_features(per_item: list[list[list[Tensor]]], k: int) -> list[Tensor]:
    n_layers = len(per_item[0][k])
    return [
        tc.concat([tc.reshape(item[k][l], (1,) + item[k][l].shape) for item in per_item])
        for l in range(n_layers)
    ]


class Trainer:
    """Owns the model, aux heads, data and optimizer state for one run."""

    def __init__(self, cfg: RunConfig, out_dir=None):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        self.model = Autoencoder(_rng(cfg.seed, _LANE_MODEL_INIT), cfg.model_config())
        self.aux = AuxHeads(
            _rng(cfg.seed, _LANE_AUX_INIT), cfg.latent_dim, cfg.target_config(),
            text_dim=cfg.text_dim, velocity_dim=cfg.velocity_dim,
            velocity_depth=cfg.velocity_depth, critic_dim=cfg.critic_dim,
            critic_depth=cfg.critic_depth, wavelet_levels=cfg.wavelet_levels,
        )
        self.data = ToyDataSource(cfg.seed, cfg.segment_samples, cfg.sample_rate, cfg.data_pool)
        self.embedder = HashTextEmbedder(cfg.text_dim)
        self.mrstft_cfg = cfg.mrstft_config()
        self.ema = EmaWeights(list(self.model.named_params()), cfg.ema_weights_decay)
        self.g_train = _rng(cfg.seed, _LANE_TRAIN)
        self.history: list[dict] = []
        self.global_step = 0
        self._log_fh = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.txt").write_text(cfg.to_text())
            self._log_fh = open(self.out_dir / "loss_log.txt", "a")

    # -- helpers ------------------------------------------------------------
    def _trainable(self, frozen: tuple) -> list[tuple[str, Param]]:
        items = list(self.model.named_params())
        items = [(n, p) for n, p in items if not any(n.startswith(f + ".") or n == f for f in frozen)]
        items += [("aux." + n, p) for n, p in self.aux.named_params()]
        return items

    def _build_disc(self, kind: str, stage: int) -> DiscEnsemble:
        return DiscEnsemble(_rng(self.cfg.seed, _LANE_DISC_INIT, stage), self.cfg.ensemble_config(kind))

    def _reg_weight(self) -> float:
        return self.cfg.w_vae_kl if self.cfg.bottleneck == "vae" else self.cfg.w_kl

    def _log(self, report: LossReport) -> None:
        line = report.log_line(self.global_step)
        if self._log_fh:
            self._log_fh.write(line + "\n")
            self._log_fh.flush()
        self.history.append(report.floats() | {"step": self.global_step})

    def _chirp_item(self):
        cfg = self.cfg
        nyq = cfg.sample_rate / 2.0
        f0 = float(np.exp(self.g_train.uniform(np.log(100.0), np.log(min(22000.0, 0.2 * cfg.sample_rate)))))
        octaves = float(min(self.g_train.uniform(2.0, 6.5), np.log2(0.9 * nyq / f0)))
        amp_db = float(self.g_train.uniform(-24.0, -6.0))
        buf = dsp.chirp(cfg.segment_samples / cfg.sample_rate, cfg.sample_rate, f0, octaves, amp_db)
        mono = buf.samples[0][: cfg.segment_samples].astype(np.float32)
        return np.stack([mono, mono]), f"chirp-aug {f0:.0f}Hz"

    # -- one optimisation step ------------------------------------------------
    def train_step(self, stage: StageSpec, disc, opt_ae: AdamW, opt_disc: AdamW | None,
                   stage_step: int) -> LossReport:
        cfg = self.cfg
        items = self.data.batch(self.global_step, cfg.batch_size)
        if stage.chirp_augment:
            items = items + [self._chirp_item()]
        active = stage.active_losses
        update_stats = "bottleneck" not in stage.frozen
        n_items = len(items)

        tape_g = tc.Tape()
        with tape_g:
            fakes, zs = [], []
            for audio, _ in items:
                xh, z = self.model.forward(audio, self.g_train, "train", update_stats=update_stats)
                fakes.append(xh)
                zs.append(z)

        report = LossReport()
        # discriminator update on detached reconstructions
        if "adv" in active and disc is not None:
            k_members = len(disc)
            tape_d = tc.Tape()
            with tape_d:
                real_out = [disc.forward(Tensor(audio)) for audio, _ in items]
                fake_out = [disc.forward(xh.detach()) for xh in fakes]
                pair_d = GanPair(
                    [_batch_scores([o[0] for o in real_out], k) for k in range(k_members)],
                    [_batch_scores([o[0] for o in fake_out], k) for k in range(k_members)],
                )
                l_d, _ = lo.rp_gan(pair_d)
            grads_d = tape_d.backward(l_d)
            named_d = list(disc.named_params())
            clipped = clip_gradients(grads_d, named_d, cfg.grad_clip)
            opt_disc.step(_ClippedGrads(clipped, named_d))
            report["adv_d"] = l_d.item()

        terms: list[Tensor] = []
        with tape_g:
            recon = [lo.mrstft(xh, Tensor(audio), self.mrstft_cfg)["mrstft_total"]
                     for xh, (audio, _) in zip(fakes, items)]
            mr_mean = lo._ordered_sum(recon) / float(n_items)
            report["mrstft_total"] = mr_mean
            if "mrstft" in active:
                terms.append(cfg.w_mrstft * mr_mean)
            if "kl" in active:
                regs = [self.model.bottleneck.reg_loss(z) for z in zs]
                kl_mean = lo._ordered_sum(regs) / float(n_items)
                report["kl"] = kl_mean
                terms.append(self._reg_weight() * kl_mean)
            if "adv" in active and disc is not None:
                k_members = len(disc)
                real_out = [disc.forward(Tensor(audio)) for audio, _ in items]
                fake_out = [disc.forward(xh) for xh in fakes]
                pair_g = GanPair(
                    [_batch_scores([o[0] for o in real_out], k) for k in range(k_members)],
                    [_batch_scores([o[0] for o in fake_out], k) for k in range(k_members)],
                    [_batch_features([o[1] for o in real_out], k) for k in range(k_members)],
                    [_batch_features([o[1] for o in fake_out], k) for k in range(k_members)],
                )
                _, l_g = lo.rp_gan(pair_g)
                fm_raw, fm_weighted = lo.feature_matching(pair_g, cfg.lambda_fm)
                report["adv_g"] = l_g
                report["fm"] = fm_raw
                terms.append(cfg.w_adv * (l_g + fm_weighted))
            warming = stage_step < stage.aux_warmup
            if "diff" in active:
                diffs = [
                    lo.flow_matching(z.latent.detach() if warming else z.latent,
                                     self.aux.velocity, self.g_train)
                    for z in zs
                ]
                diff_mean = lo._ordered_sum(diffs) / float(n_items)
                report["diff"] = diff_mean
                terms.append(cfg.w_diff * diff_mean)
            if "sem" in active:
                sems = []
                for (audio, _), z in zip(items, zs):
                    targets = regression_targets(audio, self.aux.targets)
                    sems.append(lo.semantic_regression(z.latent, self.aux.regressors, targets))
                sem_mean = lo._ordered_sum(sems) / float(n_items)
                report["sem"] = sem_mean
                terms.append(cfg.w_sem * sem_mean)
            if "con" in active and n_items >= 2:
                feats = [Tensor(wavelet_features(audio, z.shape[1], cfg.wavelet_levels).astype(np.float32))
                         for (audio, _), z in zip(items, zs)]
                embs = [Tensor(self.embedder(text)) for _, text in items]
                con = lo.contrastive_critic_loss(
                    self.aux.critic, [z.latent for z in zs], feats, embs,
                    margin=cfg.contrast_margin, rng=self.g_train, detach_latents=warming,
                )
                report["con"] = con
                terms.append(cfg.w_con * con)
            total = lo._ordered_sum(terms) if terms else Tensor(0.0)
            report["total"] = total

        grads = tape_g.backward(total)
        named = self._trainable(stage.frozen)
        clipped = clip_gradients(grads, named, cfg.grad_clip)
        opt_ae.step(_ClippedGrads(clipped, named))
        self.ema.update()
        report["lr"] = lr_at(opt_ae.t, cfg.warmup_steps, cfg.lr)
        report["noise_train"] = cfg.noise_train
        report["noise_infer"] = cfg.noise_infer
        return report

    # -- stages ----------------------------------------------------------------
    def run_stage(self, stage: StageSpec) -> list[dict]:
        cfg = self.cfg
        opt_ae = AdamW(
            self._trainable(stage.frozen),
            OptimConfig(cfg.lr, cfg.warmup_steps, (cfg.ae_beta1, cfg.ae_beta2),
                        cfg.ae_weight_decay, cfg.cautious),
        )
        disc = opt_disc = None
        if stage.discriminator and "adv" in stage.active_losses:
            disc = self._build_disc(stage.discriminator, stage.stage)
            opt_disc = AdamW(
                list(disc.named_params()),
                OptimConfig(cfg.lr, cfg.warmup_steps, (cfg.disc_beta1, cfg.disc_beta2),
                            cfg.disc_weight_decay, cfg.cautious),
            )
        start = len(self.history)
        for step in range(stage.steps):
            self.global_step += 1
            report = self.train_step(stage, disc, opt_ae, opt_disc, step)
            report["stage"] = stage.stage
            self._log(report)
        return self.history[start:]

    def run(self, stages: list[StageSpec] | None = None):
        stages = stages if stages is not None else default_stages(self.cfg)
        for spec in stages:
            if spec.steps > 0:
                self.run_stage(spec)
        if self.out_dir:
            self.save(self.out_dir / "checkpoint.nac")
        if self._log_fh:
            self._log_fh.close()
            self._log_fh = None
        return self.history

    def save(self, path) -> None:
        meta = {
            "config": self.cfg.to_text(),
            "step": self.global_step,
            "noise_train": self.cfg.noise_train,
            "noise_infer": self.cfg.noise_infer,
            "ema_std": [float(x) for x in np.atleast_1d(getattr(self.model.bottleneck, "ema_std", np.ones(1)))],
        }
        save_checkpoint(path, self.model, meta, ema={("ema." + n): a for n, a in self.ema.shadow.items()})

    def digest(self) -> str:
        return params_digest(self.model)

    # -- evaluation helpers ------------------------------------------------------
    def reconstruct(self, audio: np.ndarray, use_ema: bool = True) -> np.ndarray:
        rng = _rng(self.cfg.seed, _LANE_EVAL)
        if use_ema:
            self.ema.swap_in()
        try:
            z, n = self.model.encode(audio, rng, "infer")
            out = self.model.decode(z, rng, "infer", length=n)
        finally:
            if use_ema:
                self.ema.swap_out()
        return out.data

    def val_mel(self, n_items: int = 6, item_len: int = 8192, use_ema: bool = True) -> float:
        vals = []
        for audio, _ in self.data.val_items(n_items, item_len):
            rec = self.reconstruct(audio, use_ema)
            vals.append(mel_log1p(audio, rec, sample_rate=self.cfg.sample_rate))
        return float(np.mean(vals))


# ---------------------------------------------------------------------------
# ablation harness


@dataclass(frozen=True)
class AblationSpec:
    name: str
    bottleneck: str
    stride: int
    latent_dim: int
    aux: frozenset = frozenset()


def table_grid(cfg: RunConfig) -> list[AblationSpec]:
    """Five-config grid: VAE/soft-norm at full downsampling with growing
    auxiliary sets, plus a low-downsampling VAE reference."""
    s, d = cfg.stride, cfg.latent_dim
    return [
        AblationSpec("A", "vae", s, d),
        AblationSpec("B", "softnorm", s, d),
        AblationSpec("C", "softnorm", s, d, frozenset({"diff"})),
        AblationSpec("D", "softnorm", s, d, frozenset({"diff", "sem", "con"})),
        AblationSpec("E", "vae", max(1, s // 4), max(2, d // 2)),
    ]


def posthoc_flow_val(model: Autoencoder, cfg: RunConfig, n_train: int = 12, n_val: int = 6,
                     steps: int = 300, item_len: int = 2048) -> float:
    """Train a fresh velocity net on frozen latents; deterministic val loss."""
    data = ToyDataSource(cfg.seed, item_len, cfg.sample_rate)
    enc_rng = _rng(cfg.seed, _LANE_POSTHOC, 1)
    train_z, val_z = [], []
    for i, (audio, _) in enumerate(data.val_items(n_train + n_val, item_len)):
        z, _ = model.encode(audio, enc_rng, "infer")
        (train_z if i < n_train else val_z).append(z.latent.detach())
    vel = VelocityNet(_rng(cfg.seed, _LANE_POSTHOC, 2), cfg.latent_dim,
                      cfg.velocity_dim, cfg.velocity_depth)
    opt = AdamW(list(vel.named_params()), OptimConfig(lr=2e-3, warmup=20))
    g = _rng(cfg.seed, _LANE_POSTHOC, 3)
    for step in range(steps):
        z = train_z[step % len(train_z)]
        tape = tc.Tape()
        with tape:
            loss = lo.flow_matching(z, vel, g)
        opt.step(tape.backward(loss))
    vals = []
    for i, z in enumerate(val_z):
        for j, t in enumerate((0.1, 0.3, 0.5, 0.7, 0.9)):
            gv = _rng(cfg.seed, _LANE_POSTHOC, 4, i, j)
            vals.append(lo.flow_matching(z, vel, gv, t=t).item())
    return float(np.mean(vals))


def run_ablation_config(cfg: RunConfig, spec: AblationSpec, seed: int, steps: int) -> dict:
    rcfg = replace(cfg, seed=seed, bottleneck=spec.bottleneck, stride=spec.stride,
                   latent_dim=spec.latent_dim, stage1_steps=steps)
    tr = Trainer(rcfg)
    warm = int(round(rcfg.aux_warmup_frac * steps))
    stage = StageSpec(
        1, steps, frozen=(),
        active_losses=frozenset({"mrstft", "kl"} | set(spec.aux)),
        discriminator=None, chirp_augment=False, aux_warmup=warm,
    )
    tr.run_stage(stage)
    return {
        "config": spec.name,
        "seed": seed,
        "mel_log1p": tr.val_mel(),
        "flow_val": posthoc_flow_val(tr.model, rcfg),
        "final_total": tr.history[-1]["total"],
        "digest": tr.digest(),
    }


def ablation_harness(cfg: RunConfig, specs: list[AblationSpec] | None = None,
                     seeds=(0, 1, 2), steps: int = 2000, progress=None) -> list[dict]:
    """Seed-matched comparison rows for every ablation configuration."""
    specs = specs if specs is not None else table_grid(cfg)
    rows = []
    for spec in specs:
        for seed in seeds:
            row = run_ablation_config(cfg, spec, seed, steps)
            rows.append(row)
            if progress:
                progress(row)
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    header = f"{'config':>6} {'seed':>4} {'mel_log1p':>10} {'flow_val':>10} {'final_total':>12}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['config']:>6} {r['seed']:>4} {r['mel_log1p']:>10.5f} "
            f"{r['flow_val']:>10.5f} {r['final_total']:>12.4f}"
        )
    return "\n".join(lines)
