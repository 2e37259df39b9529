import struct

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from gtasc import dsp
from gtasc.dsp import AudioClip, FeatureMatrix, FrontendConfig

CFG = FrontendConfig()


def tone(freq, seconds=1.0, sr=44100, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)


# -- ERB spacing ------------------------------------------------------------------

def mp_erb_space(n, f_low, f_high, i):
    mpmath.mp.dps = 50
    c = mpmath.mpf("9.26449") * mpmath.mpf("24.7")
    step = (mpmath.log(f_low + c) - mpmath.log(f_high + c)) / n
    return -c + mpmath.exp(i * step) * (f_high + c)


def test_erb_endpoint_exact():
    cf = dsp.erb_space(64, 20.0, 22050.0)
    assert cf[-1] == 20.0
    assert dsp.erb_space(1, 100.0, 200.0).tolist() == [100.0]


def test_erb_matches_high_precision_closed_form():
    cf = dsp.erb_space(64, 20.0, 22050.0)
    for i in (1, 2, 17, 32, 63):
        ref = float(mp_erb_space(64, 20, 22050, i))
        assert cf[i - 1] == pytest.approx(ref, rel=1e-12)


@given(n=st.integers(1, 128), f_low=st.floats(1.0, 2000.0), span=st.floats(1.5, 20.0))
def test_erb_strictly_decreasing_and_bounded(n, f_low, span):
    f_high = f_low * span
    cf = dsp.erb_space(n, f_low, f_high)
    assert cf[-1] == f_low
    assert np.all(np.diff(cf) < 0)
    assert np.all(cf < f_high) and np.all(cf >= f_low)


def test_erb_rejects_bad_range():
    with pytest.raises(dsp.ConfigError):
        dsp.erb_space(64, 100.0, 50.0)
    with pytest.raises(dsp.ConfigError):
        FrontendConfig(f_high=30000.0)


# -- weights ------------------------------------------------------------------------

def test_weights_peak_at_nearest_bin():
    w = dsp.gammatone_weights(CFG)
    cf = dsp.erb_space(64, CFG.f_low, CFG.f_high)
    f = dsp.fft_frequencies(CFG)
    assert w.shape == (64, 1025)
    assert np.all(w >= 0)
    assert_allclose(w.max(axis=1), 1.0)
    assert_array_equal(w.argmax(axis=1), np.abs(f[None, :] - cf[:, None]).argmin(axis=1))


def test_weight_at_one_bandwidth_is_a_sixteenth():
    b = 1.019 * dsp.erb_bandwidth(1000.0)
    raw = lambda f: (1 + ((f - 1000.0) / b) ** 2) ** -4
    assert raw(1000.0 + b) == pytest.approx(0.0625, rel=1e-15)
    assert raw(1000.0 - b) == pytest.approx(0.0625, rel=1e-15)


def test_weights_rows_unimodal():
    w = dsp.gammatone_weights(CFG)
    for row in w:
        k = row.argmax()
        assert np.all(np.diff(row[:k + 1]) >= 0)
        assert np.all(np.diff(row[k:]) <= 0)


def test_weight_row_sums_against_loop_reimplementation():
    # scalar-loop evaluation of the same closed form, independent of the vectorized code
    w = dsp.gammatone_weights(CFG)
    sr, nfft = 44100, 2048
    c = 9.26449 * 24.7
    for r in (0, 10, 40, 63):
        i = r + 1
        cf = -c + np.exp(i * (np.log(20.0 + c) - np.log(22050.0 + c)) / 64) * (22050.0 + c)
        if r == 63:
            cf = 20.0
        b = 1.019 * 24.7 * (4.37 * cf / 1000 + 1)
        vals = [(1 + ((k * sr / nfft - cf) / b) ** 2) ** -4 for k in range(nfft // 2 + 1)]
        assert w[r].sum() == pytest.approx(sum(vals) / max(vals), rel=1e-10)


# -- framing and spectra --------------------------------------------------------------

def test_tau_clip_frame_count():
    assert dsp.num_frames(441000, 1764, 882) == 499
    clip = AudioClip(np.zeros(441000), 44100)
    assert dsp.frame_signal(clip, CFG).shape == (499, 1764)


def test_frame_edge_cases():
    assert dsp.frame_signal(AudioClip(np.zeros(1764), 44100), CFG).shape == (1, 1764)
    with pytest.raises(dsp.InputError):
        dsp.frame_signal(AudioClip(np.zeros(1763), 44100), CFG)
    with pytest.raises(dsp.InputError):
        dsp.frame_signal(AudioClip(np.zeros(5000), 48000), CFG)
    with pytest.raises(dsp.InputError):
        dsp.frame_signal(AudioClip(np.zeros((5000, 2)), 44100), CFG)


@given(n=st.integers(1, 5000), win=st.integers(1, 400), hop_frac=st.floats(0.01, 1.0))
def test_frame_count_formula(n, win, hop_frac):
    hop = max(1, int(win * hop_frac))
    if n < win:
        with pytest.raises(dsp.InputError):
            dsp.num_frames(n, win, hop)
        return
    t = dsp.num_frames(n, win, hop)
    assert (t - 1) * hop + win <= n < t * hop + win


def test_frames_start_at_hop_multiples():
    x = np.arange(10000, dtype=float)
    fr = dsp.frame_signal(AudioClip(x, 44100), CFG)
    assert_array_equal(fr[:, 0], np.arange(len(fr)) * 882)
    assert_array_equal(fr[3], x[3 * 882:3 * 882 + 1764])


def test_power_spectrum_zero_and_tone_bin():
    assert not dsp.power_spectrum(np.zeros(1764), CFG).any()
    k = 93
    n = np.arange(1764)
    p = dsp.power_spectrum(np.cos(2 * np.pi * k * n / 2048), CFG)
    assert p.argmax() == k


@settings(max_examples=25)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_parseval(seed):
    frame = np.random.default_rng(seed).normal(size=1764)
    p = dsp.power_spectrum(frame, CFG)
    energy = np.sum((frame * dsp.analysis_window(1764)) ** 2)
    assert dsp.one_sided_energy(p, 2048) == pytest.approx(energy, rel=1e-6)


def test_periodic_hann():
    w = dsp.analysis_window(8)
    assert w[0] == 0.0 and w[4] == pytest.approx(1.0)
    assert_allclose(w[1:], w[1:][::-1])


# -- gammatonegram ---------------------------------------------------------------

def test_silence_sits_on_floor():
    g = dsp.gammatonegram(AudioClip(np.zeros(10000), 44100)).values
    assert g.dtype == np.float32
    assert_array_equal(g, np.float32(10 * np.log10(1e-10)))


def test_noise_above_floor():
    x = np.random.default_rng(0).normal(size=20000)
    g = dsp.gammatonegram(AudioClip(x, 44100)).values
    assert np.all(g > np.float32(-100.0))


def test_tone_peaks_in_nearest_band():
    cf = dsp.erb_space(64, CFG.f_low, CFG.f_high)
    g = dsp.gammatonegram(tone(1000.0)).values
    expect = np.abs(cf - 1000.0).argmin()
    assert np.all(g.argmax(axis=0) == expect)
    # brute-force band energies for one frame
    frame = tone(1000.0).samples[882 * 5:882 * 5 + 1764] * dsp.analysis_window(1764)
    spec = np.abs(np.fft.fft(frame, 2048))[:1025] ** 2
    energy = dsp.gammatone_weights(CFG) @ spec
    assert energy.argmax() == expect
    assert_allclose(g[:, 5], 10 * np.log10(energy + 1e-10), rtol=1e-5)


def test_gammatonegram_deterministic_and_shape():
    x = np.random.default_rng(3).normal(size=441000) * 0.1
    a = dsp.gammatonegram(AudioClip(x, 44100)).values
    b = dsp.gammatonegram(AudioClip(x.copy(), 44100)).values
    assert a.shape == (64, 499)
    assert a.tobytes() == b.tobytes()


def test_linear_mode_skips_log():
    cfg = FrontendConfig(log_compress=False)
    g = dsp.gammatonegram(AudioClip(np.zeros(3000), 44100), cfg).values
    assert not g.any()


# -- statistics ------------------------------------------------------------------

def test_stats_hand_cases():
    s = dsp.accumulate_stats([np.array([[0.0, 2.0]])])
    assert s.mean.tolist() == [1.0] and s.std.tolist() == [1.0]
    c = dsp.accumulate_stats([np.full((3, 10), 4.5)])
    assert_array_equal(c.mean, 4.5)
    assert_array_equal(c.std, dsp.STD_FLOOR)
    with pytest.raises(dsp.InputError):
        dsp.accumulate_stats([])
    with pytest.raises(dsp.InputError):
        dsp.accumulate_stats([np.zeros((4, 1))])


@settings(max_examples=30)
@given(sizes=st.lists(st.integers(1, 40), min_size=1, max_size=8), seed=st.integers(0, 10 ** 6))
def test_stats_match_two_pass(sizes, seed):
    rng = np.random.default_rng(seed)
    mats = [rng.normal(3.0, 2.0, size=(5, n)) for n in sizes]
    cat = np.concatenate(mats, axis=1)
    if cat.shape[1] < 2:
        return
    s = dsp.accumulate_stats(mats)
    mean = cat.sum(axis=1) / cat.shape[1]
    std = np.sqrt(((cat - mean[:, None]) ** 2).sum(axis=1) / cat.shape[1])
    assert s.count == cat.shape[1]
    assert_allclose(s.mean, mean, rtol=1e-9)
    assert_allclose(s.std, std, rtol=1e-9)


@settings(max_examples=30)
@given(split=st.integers(1, 19), seed=st.integers(0, 10 ** 6))
def test_stats_merge_equals_single_pass(split, seed):
    rng = np.random.default_rng(seed)
    mats = [rng.normal(size=(4, 7)) for _ in range(20)]
    a = dsp.StatsAccumulator()
    b = dsp.StatsAccumulator()
    for m in mats[:split]:
        a.update(m)
    for m in mats[split:]:
        b.update(m)
    merged = a.merge(b).finalize()
    single = dsp.accumulate_stats(mats)
    assert_allclose(merged.mean, single.mean, rtol=1e-12, atol=1e-15)
    assert_allclose(merged.std, single.std, rtol=1e-12)


def test_normalization_round_trip():
    rng = np.random.default_rng(11)
    mats = [FeatureMatrix((rng.normal(-40, 8, size=(64, 50)) * rng.uniform(0.5, 2, (64, 1)))
                          .astype(np.float32)) for _ in range(12)]
    stats = dsp.accumulate_stats(mats)
    again = dsp.accumulate_stats([dsp.apply_normalization(m, stats) for m in mats])
    assert np.all(np.abs(again.mean) < 1e-6)
    assert np.all(np.abs(again.std - 1) < 1e-6)


def test_normalization_identities():
    m = FeatureMatrix(np.random.default_rng(0).normal(size=(3, 4)))
    ident = dsp.NormStats(np.zeros(3), np.ones(3), 10)
    assert_array_equal(dsp.apply_normalization(m, ident).values, m.values)
    stats = dsp.NormStats(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 0.5]), 10)
    flat = FeatureMatrix(np.repeat(stats.mean[:, None], 6, axis=1))
    assert not dsp.apply_normalization(flat, stats).values.any()


def test_normstats_invariants():
    with pytest.raises(dsp.InputError):
        dsp.NormStats(np.zeros(2), np.array([1.0, 0.0]), 5)
    with pytest.raises(dsp.InputError):
        dsp.NormStats(np.zeros(2), np.ones(2), 1)


# -- binary formats --------------------------------------------------------------

@settings(max_examples=30)
@given(bands=st.integers(1, 70), frames=st.integers(0, 40), seed=st.integers(0, 10 ** 6))
def test_feature_cache_round_trip(bands, frames, seed):
    v = np.random.default_rng(seed).normal(size=(bands, frames)).astype(np.float32)
    out = dsp.decode_features(dsp.encode_features(FeatureMatrix(v))).values
    assert out.dtype == np.float32 and out.tobytes() == v.tobytes()


def test_feature_cache_layout():
    v = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = dsp.encode_features(FeatureMatrix(v))
    assert buf[:4] == b"GTFC"
    assert struct.unpack_from("<HHI", buf, 4) == (1, 2, 3)
    assert np.frombuffer(buf[12:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_feature_cache_corruption_is_named(tmp_path):
    buf = dsp.encode_features(FeatureMatrix(np.ones((4, 5), np.float32)))
    with pytest.raises(dsp.CacheFormatError, match="magic.*offset 0"):
        dsp.decode_features(b"XXXX" + buf[4:])
    with pytest.raises(dsp.CacheFormatError, match="version"):
        dsp.decode_features(buf[:4] + struct.pack("<H", 9) + buf[6:])
    for cut in (3, 11, len(buf) - 1):
        with pytest.raises(dsp.CacheFormatError, match="offset"):
            dsp.decode_features(buf[:cut])
    p = tmp_path / "x.gtf"
    p.write_bytes(buf + b"\0")
    with pytest.raises(dsp.CacheFormatError, match=str(p)):
        dsp.load_features(p)


def test_stats_file_round_trip(tmp_path):
    s = dsp.NormStats(np.random.default_rng(1).normal(size=64), np.random.default_rng(2).uniform(1, 2, 64), 12345)
    dsp.save_stats(s, tmp_path / "s.bin")
    t = dsp.load_stats(tmp_path / "s.bin")
    assert t.count == 12345
    assert t.mean.tobytes() == s.mean.tobytes() and t.std.tobytes() == s.std.tobytes()
    raw = (tmp_path / "s.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-3])
    with pytest.raises(dsp.CacheFormatError, match="truncated"):
        dsp.load_stats(tmp_path / "bad.bin")
