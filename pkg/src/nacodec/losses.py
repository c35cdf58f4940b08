"""Training objectives: spectral, adversarial, and latent-space losses.

Every loss is a differentiable scalar built from tensor ops.  Expectations
are arithmetic means over all elements of the reduced tensor; multi-
resolution terms are summed, not averaged.  All losses take RNG state
explicitly where they are stochastic, so parallel evaluation and reruns
are deterministic.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dsp
from . import tensor as tc
from .audio import AudioBuffer
from .dsp import ComplexSpec, StftConfig, eps_for
from .tensor import Tensor


class LossError(ValueError):
    pass


_STATS = threading.local()


class StatFreeze:
    """Capture the gradient-detached statistics of a loss evaluation and
    replay them verbatim on later evaluations.

    Finite-difference checks need this: the analytic gradient holds the
    detached normalisers fixed, so the numeric probe must too.
    """

    def __init__(self):
        self.values: list = []
        self._mode: str | None = None
        self._idx = 0

    class _Ctx:
        def __init__(self, owner, mode):
            self.owner, self.mode = owner, mode

        def __enter__(self):
            if getattr(_STATS, "ctx", None) is not None:
                raise LossError("nested stat-freeze contexts")
            self.owner._mode = self.mode
            self.owner._idx = 0
            _STATS.ctx = self.owner
            return self.owner

        def __exit__(self, *exc):
            _STATS.ctx = None
            self.owner._mode = None
            return False

    def capture(self):
        self.values = []
        return StatFreeze._Ctx(self, "capture")

    def replay(self):
        return StatFreeze._Ctx(self, "replay")


def _detached_stat(compute: Callable[[], object]):
    ctx = getattr(_STATS, "ctx", None)
    if ctx is None:
        return compute()
    if ctx._mode == "capture":
        v = compute()
        ctx.values.append(v)
        return v
    if ctx._idx >= len(ctx.values):
        raise LossError("stat replay exhausted; call order changed")
    v = ctx.values[ctx._idx]
    ctx._idx += 1
    return v


class LossReport(dict):
    """Named scalars (tensors during training, floats once logged)."""

    def value(self, key: str) -> float:
        v = self[key]
        return v.item() if isinstance(v, Tensor) else float(v)

    def floats(self) -> dict[str, float]:
        return {k: self.value(k) for k in self}

    def log_line(self, step: int) -> str:
        parts = [f"step={step}"] + [f"{k}={self.value(k):.10g}" for k in self]
        return " ".join(parts)


def _signal_tensor(x) -> Tensor:
    if isinstance(x, AudioBuffer):
        return x.tensor()
    if isinstance(x, Tensor):
        return x
    return Tensor(np.atleast_2d(np.asarray(x)))


# ---------------------------------------------------------------------------
# spectral losses


def spectral_contrast(pred_mag: Tensor, ref_mag: Tensor) -> Tensor:
    """||ref - pred||_F / (||pred + ref||_F + eps): bounded, symmetric,
    scale-invariant replacement for spectral convergence.

    The clamp floor keeps sqrt differentiable at exact zeros (silent
    views) without lifting the value: a silence/silence pair scores ~0.
    """
    if pred_mag.shape != ref_mag.shape:
        raise LossError(f"shape mismatch {pred_mag.shape} vs {ref_mag.shape}")
    eps = eps_for(pred_mag.dtype)
    floor = eps**4
    d = ref_mag - pred_mag
    s = pred_mag + ref_mag
    num = tc.sqrt(tc.clamp_min(tc.sum_(d * d), floor))
    den = tc.sqrt(tc.clamp_min(tc.sum_(s * s), floor))
    return num / (den + eps)


def adaptive_log_mag(pred_mag: Tensor, ref_mag: Tensor) -> Tensor:
    """L1 between log(mag/sigma + 1) maps; sigma pools both spectrograms'
    detached stds so the knee tracks the signal scale."""
    if pred_mag.shape != ref_mag.shape:
        raise LossError(f"shape mismatch {pred_mag.shape} vs {ref_mag.shape}")
    eps = eps_for(pred_mag.dtype)
    sigma = _detached_stat(
        lambda: float(np.sqrt(pred_mag.data.std() ** 2 + ref_mag.data.std() ** 2)) + eps
    )
    return tc.mean(tc.abs_(tc.log1p(pred_mag * (1.0 / sigma)) - tc.log1p(ref_mag * (1.0 / sigma))))


def _phasor_products(spec: ComplexSpec, axis: int):
    """Adjacent-bin complex products Z(t) * conj(Z(t-1)) along an axis."""
    re, im = spec.real, spec.imag
    if axis == 1:
        cur = (re[:, 1:], im[:, 1:])
        prv = (re[:, :-1], im[:, :-1])
    else:
        cur = (re[1:, :], im[1:, :])
        prv = (re[:-1, :], im[:-1, :])
    pr = cur[0] * prv[0] + cur[1] * prv[1]
    pi = cur[1] * prv[0] - cur[0] * prv[1]
    return pr, pi


def _mag_pair(spec: ComplexSpec, axis: int):
    m = spec.magnitude()
    if axis == 1:
        return m[:, 1:], m[:, :-1]
    return m[1:, :], m[:-1, :]


def _phase_derivative_loss(pred: ComplexSpec, ref: ComplexSpec, axis: int) -> Tensor:
    eps = eps_for(pred.real.dtype)
    xr, xi = _phasor_products(pred, axis)
    yr, yi = _phasor_products(ref, axis)
    mx_c, mx_p = _mag_pair(pred, axis)
    my_c, my_p = _mag_pair(ref, axis)
    ux_den = mx_c * mx_p + eps
    uy_den = my_c * my_p + eps
    # Re(U_pred * conj(U_ref)); clamp shields float round-off above 1
    cosd = (xr * yr + xi * yi) / (ux_den * uy_den)
    dist = tc.clamp_min(1.0 - cosd, 0.0)

    # detached geometric-mean magnitude weight, normalised to mean 1;
    # an all-silent view carries no phase information and gets weight 0
    def weight():
        w = np.sqrt(mx_c.data * mx_p.data * my_c.data * my_p.data)
        eps = eps_for(dist.dtype)
        wm = w.mean()
        return w / wm if wm > 4.0 * eps * eps else np.zeros_like(w)

    w = _detached_stat(weight)
    return tc.mean(Tensor(w.astype(dist.dtype.name)) * dist)


def ifgd_losses(pred: ComplexSpec, ref: ComplexSpec):
    """Phase-derivative losses on unit phasors plus a normalised complex
    distance: (along-time, along-frequency, complex-distance)."""
    if pred.shape != ref.shape:
        raise LossError(f"shape mismatch {pred.shape} vs {ref.shape}")
    if pred.shape[0] < 2 or pred.shape[1] < 2:
        raise LossError("phase losses need at least 2 bins and 2 frames")
    l_if = _phase_derivative_loss(pred, ref, axis=1)
    l_gd = _phase_derivative_loss(pred, ref, axis=0)

    dr = pred.real - ref.real
    di = pred.imag - ref.imag
    d2 = dr * dr + di * di
    eps = eps_for(pred.real.dtype)
    sigma = _detached_stat(lambda: float(d2.data.std()) + eps)
    l_cd = tc.mean(tc.log1p(d2 * (1.0 / sigma)))
    return l_if, l_gd, l_cd


@dataclass(frozen=True)
class MrstftConfig:
    """Multi-resolution loss settings; every resolution uses 75% overlap."""

    fft_sizes: tuple = (32, 64, 128, 256, 512, 1024, 2048)
    use_mid_side: bool = True
    use_left_right: bool = True
    k_weighting: bool = True
    sample_rate: int = 48000

    def resolutions(self) -> tuple[StftConfig, ...]:
        return tuple(StftConfig(n) for n in self.fft_sizes)


def _stereo_views(sig: Tensor, cfg: MrstftConfig) -> list[Tensor]:
    if sig.shape[0] == 1:
        return [sig[0]]
    views: list[Tensor] = []
    if cfg.use_mid_side:
        m, s = dsp.mid_side(sig)
        views += [m, s]
    if cfg.use_left_right:
        views += [sig[0], sig[1]]
    if not views:
        raise LossError("MrstftConfig selects no stereo view")
    return views


def mrstft(pred, ref, cfg: MrstftConfig | None = None) -> LossReport:
    """Full multi-resolution spectral loss over stereo views.

    Returns per-component sums and ``mrstft_total``; the total is the
    fixed-order sum sc + lm + if + gd + cd so the decomposition is exact.
    """
    cfg = cfg or MrstftConfig()
    x = _signal_tensor(pred)
    y = _signal_tensor(ref)
    if x.shape != y.shape:
        raise LossError(f"waveform shape mismatch {x.shape} vs {y.shape}")
    if cfg.k_weighting:
        both = dsp.k_weight(tc.concat([x, y], axis=0), cfg.sample_rate)
        x, y = both[: x.shape[0]], both[x.shape[0] :]
    views_x = _stereo_views(x, cfg)
    views_y = _stereo_views(y, cfg)

    comp: dict[str, list[Tensor]] = {"sc": [], "lm": [], "if": [], "gd": [], "cd": []}
    per_res: dict[str, Tensor] = {}
    for res in cfg.resolutions():
        here: list[Tensor] = []
        for vx, vy in zip(views_x, views_y):
            sx = dsp.stft(vx, res)
            sy = dsp.stft(vy, res)
            mx, my = sx.magnitude(), sy.magnitude()
            sc = spectral_contrast(mx, my)
            lm = adaptive_log_mag(mx, my)
            l_if, l_gd, l_cd = ifgd_losses(sx, sy)
            comp["sc"].append(sc)
            comp["lm"].append(lm)
            comp["if"].append(l_if)
            comp["gd"].append(l_gd)
            comp["cd"].append(l_cd)
            here += [sc, lm, l_if, l_gd, l_cd]
        per_res[f"mrstft_fft{res.fft_size}"] = _ordered_sum(here)

    report = LossReport()
    sums = {k: _ordered_sum(v) for k, v in comp.items()}
    total = sums["sc"] + sums["lm"] + sums["if"] + sums["gd"] + sums["cd"]
    report.update(sums)
    report.update(per_res)
    report["mrstft_total"] = total
    return report


def _ordered_sum(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# ---------------------------------------------------------------------------
# latent regularisation


def kl_dual_axis_terms(z) -> tuple[Tensor, Tensor]:
    """Moment-matching penalties along time and channel axes of (d, n)."""
    lat = z if isinstance(z, Tensor) else z.latent
    if lat.ndim != 2 or lat.shape[0] < 2 or lat.shape[1] < 2:
        raise LossError(f"latent must be (d>=2, n>=2), got {lat.shape}")

    def term(axis: int) -> Tensor:
        mu = tc.mean(lat, axis=axis)
        v = tc.clamp_min(tc.var(lat, axis=axis), 1e-8)
        return tc.mean(mu * mu + v - tc.log(v) - 1.0)

    return term(1), term(0)


def kl_dual_axis(z) -> Tensor:
    """Dual-axis moment penalty; the channel-axis term is downweighted 0.4."""
    t_time, t_chan = kl_dual_axis_terms(z)
    return t_time + 0.4 * t_chan


def vae_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """Standard diagonal-Gaussian KL against N(0, I), mean over elements."""
    return tc.mean(0.5 * (mu * mu + tc.exp(logvar) - logvar - 1.0))


# ---------------------------------------------------------------------------
# adversarial losses


@dataclass
class GanPair:
    """Per-discriminator scores and layer features for both signals."""

    real_scores: list[Tensor]
    fake_scores: list[Tensor]
    real_features: list[list[Tensor]] = field(default_factory=list)
    fake_features: list[list[Tensor]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.real_scores) != len(self.fake_scores):
            raise LossError("score lists must align per discriminator")
        if self.real_features or self.fake_features:
            if len(self.real_features) != len(self.fake_features):
                raise LossError("feature lists must align per discriminator")
            for fr, ff in zip(self.real_features, self.fake_features):
                if len(fr) != len(ff):
                    raise LossError("feature lists must align per layer")
                for a, b in zip(fr, ff):
                    if a.shape != b.shape:
                        raise LossError(f"feature shape mismatch {a.shape} vs {b.shape}")


def rp_gan(pair: GanPair) -> tuple[Tensor, Tensor]:
    """Relativistic paired losses (discriminator, generator), averaged
    over the ensemble: softplus of the paired score difference."""
    if not pair.real_scores:
        raise LossError("empty discriminator ensemble")
    l_d: list[Tensor] = []
    l_g: list[Tensor] = []
    for r, f in zip(pair.real_scores, pair.fake_scores):
        if r.shape != f.shape:
            raise LossError(f"score shape mismatch {r.shape} vs {f.shape}")
        diff = r - f
        l_d.append(tc.mean(tc.softplus(-diff)))
        l_g.append(tc.mean(tc.softplus(diff)))
    k = float(len(l_d))
    return _ordered_sum(l_d) / k, _ordered_sum(l_g) / k


def feature_matching(pair: GanPair, lambda_fm: float = 2.0) -> tuple[Tensor, Tensor]:
    """Double-average L1 over discriminator layers; returns (raw, weighted)."""
    if not pair.real_features:
        raise LossError("no features recorded")
    per_disc: list[Tensor] = []
    for fr, ff in zip(pair.real_features, pair.fake_features):
        if not fr:
            raise LossError("discriminator with no feature layers")
        layers = [tc.mean(tc.abs_(a - b)) for a, b in zip(fr, ff)]
        per_disc.append(_ordered_sum(layers) / float(len(layers)))
    raw = _ordered_sum(per_disc) / float(len(per_disc))
    return raw, raw * float(lambda_fm)


def adversarial_generator_total(pair: GanPair, lambda_fm: float = 2.0) -> LossReport:
    """Generator-side adversarial objective: mean GAN term + weighted FM."""
    _, l_g = rp_gan(pair)
    fm_raw, fm_w = feature_matching(pair, lambda_fm)
    rep = LossReport(adv_g=l_g, fm=fm_raw)
    rep["adv_total"] = l_g + fm_w
    return rep


# ---------------------------------------------------------------------------
# auxiliary losses


def sample_flow_time(rng: np.random.Generator, lo: float = 0.001, hi: float = 0.999) -> float:
    """Logistic-normal timestep, rejection-truncated to [lo, hi]."""
    while True:
        t = 1.0 / (1.0 + np.exp(-rng.standard_normal()))
        if lo <= t <= hi:
            return float(t)


def flow_matching(
    z,
    model: Callable[[Tensor, float], Tensor],
    rng: np.random.Generator,
    t: float | None = None,
) -> Tensor:
    """Velocity-prediction objective on a noised latent.

    The latent is interpolated toward Gaussian noise, z_t = (1-t) z + t e,
    and the model must predict e - z; mean squared error over elements.
    """
    lat = z if isinstance(z, Tensor) else z.latent
    if t is None:
        t = sample_flow_time(rng)
    noise = Tensor(rng.standard_normal(lat.shape).astype(lat.dtype.name))
    z_t = (1.0 - t) * lat + t * noise
    target = noise - lat
    v = model(z_t, t)
    if v.shape != lat.shape:
        raise LossError(f"velocity shape {v.shape} != latent shape {lat.shape}")
    d = v - target
    return tc.mean(d * d)


def semantic_regression(
    z,
    regressors: Sequence[Callable[[Tensor], Tensor]],
    targets: Sequence[np.ndarray],
    weights: Sequence[float] | None = None,
) -> Tensor:
    """Weighted L1 between linear probes of the latent and DSP targets.

    Targets are resampled (nearest frame) to the latent frame count.
    """
    lat = z if isinstance(z, Tensor) else z.latent
    if len(regressors) != len(targets):
        raise LossError("regressor/target count mismatch")
    if weights is None:
        weights = [1.0] * len(regressors)
    terms: list[Tensor] = []
    for g, y, w in zip(regressors, targets, weights):
        out = g(lat)
        y = np.asarray(y.data if isinstance(y, Tensor) else y)
        if y.ndim != 2:
            raise LossError(f"target must be (bins, frames), got {y.shape}")
        y = dsp.resample_nearest(y, out.shape[1])
        if out.shape != y.shape:
            raise LossError(f"regressor output {out.shape} vs target {y.shape}")
        terms.append(float(w) * tc.mean(tc.abs_(out - Tensor(y.astype(out.dtype.name)))))
    return _ordered_sum(terms)


def contrastive_critic_loss(
    critic: Callable[[Tensor, Tensor, Tensor], Tensor],
    latents: Sequence,
    audio_feats: Sequence[Tensor],
    text_embs: Sequence[Tensor],
    margin: float = 1.0,
    rng: np.random.Generator | None = None,
    seq_drop: float = 0.4,
    feat_drop: float = 0.35,
    detach_latents: bool = False,
) -> Tensor:
    """Margin loss separating matched triplets from in-batch rotations.

    Audio and text components rotate independently to form negatives;
    sequence positions and feature dims are randomly dropped before
    scoring so the critic cannot rely on trivial cues.
    """
    b = len(latents)
    if b < 2:
        raise LossError("contrastive loss needs batch >= 2 for rotations")
    if rng is None:
        rng = np.random.default_rng(0)
    lats = [(z if isinstance(z, Tensor) else z.latent) for z in latents]
    if detach_latents:
        lats = [z.detach() for z in lats]

    def seq_mask(t: Tensor) -> Tensor:
        keep = (rng.random(t.shape[1]) >= seq_drop).astype(t.dtype.name)
        if keep.sum() == 0:
            keep[rng.integers(0, t.shape[1])] = 1.0
        return t * Tensor(keep[None, :])

    def feat_mask(t: Tensor) -> Tensor:
        keep = (rng.random(t.shape[0]) >= feat_drop).astype(t.dtype.name)
        if keep.sum() == 0:
            keep[rng.integers(0, t.shape[0])] = 1.0
        return t * Tensor(keep[:, None])

    masked_z = [feat_mask(seq_mask(z)) for z in lats]
    masked_a = [feat_mask(seq_mask(a)) for a in audio_feats]
    rot_a = int(rng.integers(1, b))
    rot_t = int(rng.integers(1, b))
    terms: list[Tensor] = []
    for i in range(b):
        pos = critic(masked_z[i], masked_a[i], text_embs[i])
        neg = critic(masked_z[i], masked_a[(i + rot_a) % b], text_embs[(i + rot_t) % b])
        terms.append(tc.softplus(float(margin) - (pos - neg)))
    return _ordered_sum(terms) / float(b)


def distillation_suite(
    z_student,
    z_teacher,
    decode_student: Callable[[Tensor], Tensor],
    decode_teacher: Callable[[Tensor], Tensor],
    x,
    cfg: MrstftConfig | None = None,
) -> LossReport:
    """Latent alignment plus cross-decoded reconstructions.

    The teacher latent is detached here; the teacher decoder must be built
    from frozen (non-trainable) parameters by the caller.  Cross terms are
    weighted 0.25x the main reconstruction.
    """
    zs = z_student if isinstance(z_student, Tensor) else z_student.latent
    zt = z_teacher if isinstance(z_teacher, Tensor) else z_teacher.latent
    if zs.shape != zt.shape:
        raise LossError(f"latent shape mismatch {zs.shape} vs {zt.shape}")
    zt = zt.detach()
    cfg = cfg or MrstftConfig()
    ref = _signal_tensor(x)

    distill = tc.mean(tc.abs_(zs - zt))
    dec_ss = decode_student(zs)
    dec_ts = decode_teacher(zs)
    dec_st = decode_student(zt)
    dec_tt = decode_teacher(zt).detach()

    rep = LossReport()
    rep["distill"] = distill
    rep["recon_main"] = mrstft(dec_ss, ref, cfg)["mrstft_total"]
    rep["recon_cross_teacher_dec"] = mrstft(dec_ts, ref, cfg)["mrstft_total"]
    rep["recon_cross_teacher_latent"] = mrstft(dec_st, ref, cfg)["mrstft_total"]
    rep["recon_cross_pair"] = mrstft(dec_ss, dec_tt, cfg)["mrstft_total"]
    rep["w_main"] = 1.0
    rep["w_cross"] = 0.25
    rep["distill_total"] = (
        distill
        + rep["recon_main"]
        + 0.25 * rep["recon_cross_teacher_dec"]
        + 0.25 * rep["recon_cross_teacher_latent"]
        + 0.25 * rep["recon_cross_pair"]
    )
    return rep
