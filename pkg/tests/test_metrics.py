"""Evaluation metrics against constructions with known values."""

import time

import numpy as np
import pytest

import nacodec.metrics as M

from oracles import log1p_l1_scalar, quadrature_pair


@pytest.fixture
def stereo(rng):
    return rng.standard_normal((2, 16000)) * 0.3


class TestSiSdr:
    def test_identical_capped_at_100(self, stereo):
        assert M.si_sdr(stereo, stereo) == 100.0

    def test_scale_invariance(self, stereo):
        assert M.si_sdr(stereo, 2.0 * stereo) == 100.0
        assert M.si_sdr(stereo, 0.1 * stereo) == 100.0

    def test_orthogonal_noise_at_ratio_100_gives_20db(self, rng):
        ref = rng.standard_normal(16000)
        n = rng.standard_normal(16000)
        n -= (n @ ref) / (ref @ ref) * ref  # Gram-Schmidt
        n *= np.sqrt((ref @ ref) / 100.0 / (n @ n))
        got = M.si_sdr(ref[None, :], (ref + n)[None, :])
        assert abs(got - 20.0) < 0.01

    def test_zero_reference_rejected(self, rng):
        with pytest.raises(M.MetricError):
            M.si_sdr(np.zeros((1, 100)), rng.standard_normal((1, 100)))

    def test_stereo_averages_channels(self, rng):
        ref = rng.standard_normal((2, 4000))
        est = ref.copy()
        est[1] += 0.1 * rng.standard_normal(4000)
        per0 = M.si_sdr(ref[0:1], est[0:1])
        per1 = M.si_sdr(ref[1:2], est[1:2])
        assert abs(M.si_sdr(ref, est) - 0.5 * (per0 + per1)) < 1e-9


class TestStftLog1p:
    def test_identical_is_zero(self, stereo):
        assert M.stft_log1p(stereo, stereo) == 0.0

    def test_matches_scalar_oracle_single_resolution(self, rng):
        from nacodec import dsp
        from nacodec.tensor import Tensor

        r = rng.standard_normal(4000) * 0.3
        e = rng.standard_normal(4000) * 0.3
        got = M.stft_log1p(r[None, :], e[None, :], fft_sizes=(256,))
        sr_ = dsp.stft(Tensor(r), dsp.StftConfig(256))
        se_ = dsp.stft(Tensor(e), dsp.StftConfig(256))
        mr = np.hypot(sr_.real.data, sr_.imag.data)
        me = np.hypot(se_.real.data, se_.imag.data)
        assert abs(got - log1p_l1_scalar(mr, me)) < 1e-12

    def test_symmetry(self, rng):
        r = rng.standard_normal((2, 8000)) * 0.3
        e = rng.standard_normal((2, 8000)) * 0.3
        assert abs(M.stft_log1p(r, e) - M.stft_log1p(e, r)) < 1e-12


class TestMelLog1p:
    def test_identical_is_zero(self, stereo):
        assert M.mel_log1p(stereo, stereo, sample_rate=8000) == 0.0

    def test_rescale_factor_value(self):
        assert abs(64 / (2048 // 2 + 1) - 64 / 1025) < 1e-15

    def test_matches_scalar_oracle(self, rng):
        from nacodec import dsp
        from nacodec.tensor import Tensor

        r = rng.standard_normal(6000) * 0.3
        e = rng.standard_normal(6000) * 0.3
        got = M.mel_log1p(r[None, :], e[None, :], fft_sizes=(1024,), n_mel=64, sample_rate=8000)
        bank = dsp.mel_bank(513, 64, 8000)
        s_r = dsp.stft(Tensor(r), dsp.StftConfig(1024))
        s_e = dsp.stft(Tensor(e), dsp.StftConfig(1024))
        scale = 64 / 513
        mr = scale * (bank @ np.hypot(s_r.real.data, s_r.imag.data))
        me = scale * (bank @ np.hypot(s_e.real.data, s_e.imag.data))
        assert abs(got - log1p_l1_scalar(mr, me)) < 1e-12


class TestCcpc:
    def test_identical_stereo_is_100(self, stereo):
        assert abs(M.ccpc(stereo, stereo) - 100.0) < 1e-6

    def test_channel_swap_on_quadrature_pair_negates(self, rng):
        st = quadrature_pair(rng, 80000)
        swapped = st[::-1].copy()
        assert M.ccpc(st, swapped) < -97.0

    def test_phase_randomised_pair_near_zero(self, rng):
        n = 80000  # 10 s at 8 kHz
        ref = rng.standard_normal((2, n)) * 0.3

        def scramble(x, g):
            spec = np.fft.rfft(x)
            ph = np.exp(1j * g.uniform(0, 2 * np.pi, spec.size))
            ph[0] = 1.0
            ph[-1] = 1.0
            return np.fft.irfft(spec * ph, n=n)

        g = np.random.default_rng(7)
        est = np.stack([scramble(ref[0], g), scramble(ref[1], g)])
        assert abs(M.ccpc(ref, est)) < 3.0

    def test_global_offset_invariance_amplitude_panned(self, rng):
        base = rng.standard_normal(80000) * 0.3
        st = np.stack([base, 0.5 * base])
        shifted = np.roll(st, 128, axis=1)
        assert abs(M.ccpc(st, st) - M.ccpc(st, shifted)) < 1e-3

    def test_mono_rejected(self, rng):
        with pytest.raises(M.MetricError):
            M.ccpc(rng.standard_normal((1, 1000)), rng.standard_normal((1, 1000)))


class TestRtf:
    def test_identity_definition(self):
        result = M.rtf_bench(lambda audio: audio, duration=1.0, sample_rate=8000, repeats=3)
        assert result["rtf"] > 100.0
        assert len(result["timings"]) == 3

    def test_sleep_stub_measures_wall_clock(self):
        def slow(audio):
            time.sleep(0.01)
            return audio

        result = M.rtf_bench(slow, duration=1.0, sample_rate=8000, repeats=3)
        assert 50.0 < result["rtf"] < 120.0

    def test_deeper_model_is_slower(self):
        import nacodec.nn as nn

        def run(depth):
            model = nn.Autoencoder(np.random.default_rng(0), nn.ModelConfig(depth=depth, ksin=0))

            def proc(audio):
                z, n = model.encode(audio)
                return model.decode(z, length=n)

            return M.rtf_bench(proc, duration=0.25, sample_rate=8000, repeats=3)["rtf"]

        shallow, deep = run(1), run(4)
        assert deep < shallow * 3.0  # deeper must not be faster (3x slack)


class TestCsv:
    def test_rows_plus_aggregate(self, tmp_path, rng):
        rows = [
            ("a.wav", M.MetricReport(10.0, 0.1, 0.05, 90.0)),
            ("b.wav", M.MetricReport(20.0, 0.2, 0.15, 80.0)),
            ("mono.wav", M.MetricReport(5.0, 0.3, 0.25, None)),
        ]
        path = tmp_path / "report.csv"
        M.write_metric_csv(path, rows)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 5  # header + 3 rows + aggregate
        assert lines[0] == "file,si_sdr,stft_log1p,mel_log1p,ccpc"
        agg = lines[-1].split(",")
        assert agg[0] == "aggregate"
        assert abs(float(agg[1]) - np.mean([10, 20, 5])) < 1e-9
        assert abs(float(agg[4]) - 85.0) < 1e-9  # mono skipped in ccpc mean
        assert lines[3].endswith(",")  # mono row has empty ccpc
