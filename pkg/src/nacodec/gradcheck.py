"""Seeded finite-difference checks for every registered loss and transform.

Each case packs a scalar-valued function of one float64 tensor; the
runner compares analytic gradients against central differences.  Cases
are small enough that the whole table runs in well under two minutes.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import dsp
from . import losses as lo
from . import tensor as tc
from .dsp import ComplexSpec, StftConfig
from .heads import Critic, Regressor, VelocityNet
from .tensor import Tensor, finite_diff_check

DEFAULT_TOL = 1e-4


def _rng(k: int) -> np.random.Generator:
    return np.random.default_rng(1000 + k)


def _f64(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64))


def _wake_zero_init(net, rng, scale=0.1) -> None:
    # zero-init branch outputs make a fresh net independent of parts of its
    # input; perturb them so the checked function is non-degenerate
    for _, p in net.named_params():
        if p.data.size and not np.any(p.data):
            p.assign(rng.standard_normal(p.data.shape) * scale)


def _with_frozen_stats(f):
    """First call captures detached statistics; later calls replay them."""
    frz = lo.StatFreeze()
    first = [True]

    def g(x):
        if first[0]:
            first[0] = False
            with frz.capture():
                return f(x)
        with frz.replay():
            return f(x)

    return g


def _magnitudes(rng, shape):
    return np.abs(rng.standard_normal(shape)) + 0.05


def _pack_spec(x: Tensor) -> ComplexSpec:
    return ComplexSpec(x[0], x[1])


def registry() -> dict[str, Callable[[], tuple[Callable, Tensor, float]]]:
    """name -> builder returning (f, x, fd_step)."""
    cases: dict[str, Callable] = {}

    def case(name, step=1e-5):
        def deco(fn):
            cases[name] = lambda: (*fn(), step)
            return fn

        return deco

    # -- spectral losses -------------------------------------------------------
    @case("spectral_contrast")
    def _sc():
        rng = _rng(1)
        ref = _f64(_magnitudes(rng, (6, 5)))
        return lambda x: lo.spectral_contrast(tc.abs_(x), ref), _f64(_magnitudes(rng, (6, 5)))

    @case("adaptive_log_mag")
    def _lm():
        rng = _rng(2)
        ref = _f64(_magnitudes(rng, (6, 5)))
        return lambda x: lo.adaptive_log_mag(tc.abs_(x), ref), _f64(_magnitudes(rng, (6, 5)))

    def _phase_case(k, which):
        rng = _rng(3 + k)
        ref = _pack_spec(_f64(rng.standard_normal((2, 6, 5))))

        def f(x):
            l_if, l_gd, l_cd = lo.ifgd_losses(_pack_spec(x), ref)
            return {"if": l_if, "gd": l_gd, "cd": l_cd}[which]

        return f, _f64(rng.standard_normal((2, 6, 5)))

    cases["phase_if"] = lambda: (*_phase_case(0, "if"), 1e-5)
    cases["phase_gd"] = lambda: (*_phase_case(1, "gd"), 1e-5)
    cases["phase_cd"] = lambda: (*_phase_case(2, "cd"), 1e-5)

    @case("mrstft")
    def _mr():
        rng = _rng(6)
        cfg = lo.MrstftConfig(fft_sizes=(32,), sample_rate=8000)
        ref = _f64(rng.standard_normal((2, 96)) * 0.3)
        return lambda x: lo.mrstft(x, ref, cfg)["mrstft_total"], _f64(rng.standard_normal((2, 96)) * 0.3)

    # -- latent losses -------------------------------------------------------
    @case("kl_dual_axis")
    def _kl():
        rng = _rng(7)
        return lambda x: lo.kl_dual_axis(x), _f64(rng.standard_normal((4, 8)))

    @case("vae_kl")
    def _vkl():
        rng = _rng(8)

        def f(x):
            return lo.vae_kl(x[0], x[1])

        return f, _f64(rng.standard_normal((2, 4, 6)))

    # -- adversarial -----------------------------------------------------------
    @case("rp_gan_d")
    def _rpd():
        rng = _rng(9)

        def f(x):
            l_d, _ = lo.rp_gan(lo.GanPair([x[0]], [x[1]]))
            return l_d

        return f, _f64(rng.standard_normal((2, 5)))

    @case("rp_gan_g")
    def _rpg():
        rng = _rng(10)

        def f(x):
            _, l_g = lo.rp_gan(lo.GanPair([x[0]], [x[1]]))
            return l_g

        return f, _f64(rng.standard_normal((2, 5)))

    @case("feature_matching")
    def _fm():
        rng = _rng(11)
        ref = [[_f64(rng.standard_normal((3, 4)))], [_f64(rng.standard_normal(6))]]

        def f(x):
            feats = [[tc.reshape(x[:12], (3, 4))], [x[12:18]]]
            scores = [Tensor(np.zeros(1))] * 2
            pair = lo.GanPair(scores, scores, ref, feats)
            raw, _ = lo.feature_matching(pair)
            return raw

        return f, _f64(rng.standard_normal(18))

    # -- auxiliary -------------------------------------------------------------
    @case("flow_matching")
    def _flow():
        rng = _rng(12)
        vel = VelocityNet(rng, 4, dim=8, depth=1, heads=2, dtype=np.float64)
        _wake_zero_init(vel, rng)
        return (
            lambda x: lo.flow_matching(x, vel, np.random.default_rng(77)),
            _f64(rng.standard_normal((4, 6))),
        )

    @case("semantic_regression")
    def _sem():
        rng = _rng(13)
        regs = [Regressor(rng, 4, 3, dtype=np.float64), Regressor(rng, 4, 2, dtype=np.float64)]
        targets = [rng.standard_normal((3, 11)), rng.standard_normal((2, 6))]
        return (
            lambda x: lo.semantic_regression(x, regs, targets, weights=(1.0, 2.0)),
            _f64(rng.standard_normal((4, 6))),
        )

    @case("contrastive")
    def _con():
        rng = _rng(14)
        critic = Critic(rng, 4, 3, 5, dim=8, depth=1, heads=2, dtype=np.float64)
        _wake_zero_init(critic, rng)
        feats = [_f64(rng.standard_normal((3, 6))), _f64(rng.standard_normal((3, 6)))]
        embs = [_f64(rng.standard_normal(5)), _f64(rng.standard_normal(5))]

        def f(x):
            return lo.contrastive_critic_loss(
                critic, [x[0], x[1]], feats, embs, rng=np.random.default_rng(55)
            )

        return f, _f64(rng.standard_normal((2, 4, 6)))

    @case("distillation")
    def _dist():
        rng = _rng(15)
        d, n = 3, 8
        w_s = _f64(rng.standard_normal((d, 2 * 12)) * 0.3)
        w_t = _f64(rng.standard_normal((d, 2 * 12)) * 0.3)
        z_t = _f64(rng.standard_normal((d, n)))
        x_ref = _f64(rng.standard_normal((2, n * 12)) * 0.3)
        cfg = lo.MrstftConfig(fft_sizes=(32,), sample_rate=8000)

        def dec(w):
            def run(z):
                out = tc.matmul(tc.transpose(z, (1, 0)), w)  # (n, 2*12)
                return tc.transpose(tc.reshape(out, (n, 2, 12)), (1, 0, 2)).reshape(2, n * 12)

            return run

        def f(x):
            return lo.distillation_suite(x, z_t, dec(w_s), dec(w_t), x_ref, cfg)["distill_total"]

        return f, _f64(rng.standard_normal((d, n)))

    # -- dsp transforms ---------------------------------------------------------
    @case("stft")
    def _stft():
        rng = _rng(16)
        cfg = StftConfig(32)
        return lambda x: tc.mean(dsp.stft(x, cfg).magnitude()), _f64(rng.standard_normal(80))

    @case("k_weight")
    def _kw():
        rng = _rng(17)
        return lambda x: tc.mean(tc.abs_(dsp.k_weight(x, 8000))), _f64(rng.standard_normal(64))

    @case("mel_projection")
    def _mel():
        rng = _rng(18)
        bank = Tensor(dsp.mel_bank(17, 6, 8000))
        return lambda x: tc.mean(tc.matmul(bank, tc.abs_(x))), _f64(rng.standard_normal((17, 5)))

    @case("chroma")
    def _chroma():
        rng = _rng(19)

        def f(x):
            ch = dsp.chroma(tc.abs_(x), 12, 4.0, 2.0, sample_rate=8000, fft_size=64)
            return tc.mean(ch)

        return f, _f64(rng.standard_normal((33, 4)))

    @case("pqmf")
    def _pq():
        rng = _rng(20)
        return lambda x: tc.mean(tc.abs_(dsp.pqmf(x, 4))), _f64(rng.standard_normal(64))

    @case("cdf97")
    def _wav():
        rng = _rng(21)

        def f(x):
            bands = dsp.cdf97_wavelet(x, 3)
            return tc.mean(tc.concat([tc.abs_(b) for b in bands]))

        return f, _f64(rng.standard_normal(48))

    return cases


def run_gradcheck(names=None, tol: float = DEFAULT_TOL) -> list[tuple[str, float, bool]]:
    """Run registered checks; returns (name, max_rel_error, passed) rows."""
    reg = registry()
    if names is None:
        names = sorted(reg)
    rows = []
    for name in names:
        if name not in reg:
            raise KeyError(f"unknown gradcheck case {name!r}")
        f, x, step = reg[name]()
        err = finite_diff_check(_with_frozen_stats(f), x, h=step)
        rows.append((name, err, bool(err < tol)))
    return rows
