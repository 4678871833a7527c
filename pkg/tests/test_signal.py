import numpy as np
import pytest
import scipy.signal

from advkit import diffcore as dc
from advkit.signal import (EmaStandardize, P300Scale, SignalError, ZScore, average_epochs, bandpass,
                           csp_apply, csp_fit, design_bandpass, downsample, morlet_map, normalize,
                           stft)
from conftest import make_set


def tone(freq, fs, n, amp=1.0, channels=1, epochs=1):
    t = np.arange(n) / fs
    return np.broadcast_to(amp * np.sin(2 * np.pi * freq * t), (epochs, channels, n)).copy()


def mid(x, frac=0.25):
    k = int(x.shape[-1] * frac)
    return x[..., k:-k]


# ---- bandpass ---------------------------------------------------------------


def test_bandpass_removes_dc():
    ep = make_set(np.full((1, 2, 512), 3.0), fs=256)
    out = bandpass(ep, 1, 40).data.astype(np.float64)
    ratio = np.sum(out ** 2) / np.sum(ep.data.astype(np.float64) ** 2)
    assert 10 * np.log10(ratio) <= -40


def test_bandpass_passes_10hz_like_the_designed_response():
    fs, n = 256.0, 2048
    out = bandpass(make_set(tone(10, fs, n), fs=fs), 1, 40).data[0, 0].astype(np.float64)
    # oracle: forward-backward filtering applies |H(f)|^2
    _, h = scipy.signal.sosfreqz(design_bandpass(1, 40, fs), worN=[10.0], fs=fs)
    expected = np.abs(h[0]) ** 2
    amp = np.sqrt(2) * np.std(mid(out))
    assert amp == pytest.approx(expected, rel=0.01)
    assert amp == pytest.approx(1.0, rel=0.05)


def test_bandpass_attenuates_100hz():
    fs, n = 256.0, 2048
    out = bandpass(make_set(tone(100, fs, n), fs=fs), 1, 40).data[0, 0].astype(np.float64)
    gain_db = 20 * np.log10(np.sqrt(2) * np.std(mid(out)))
    assert gain_db <= -20


def test_bandpass_rejects_band_above_nyquist():
    with pytest.raises(SignalError):
        bandpass(make_set(np.zeros((1, 1, 64)), fs=64), 1, 40)


# ---- downsample -------------------------------------------------------------


def test_downsample_factor_one_is_identity(rng):
    ep = make_set(rng.standard_normal((2, 3, 50)).astype(np.float32))
    out = downsample(ep, 1)
    np.testing.assert_array_equal(out.data, ep.data)
    assert out.fs == ep.fs


def test_downsample_length_and_rate():
    out = downsample(make_set(np.zeros((1, 2, 2048)), fs=2048), 8)
    assert out.n_samples == 256 and out.fs == 256


def test_downsample_preserves_tone_frequency():
    out = downsample(make_set(tone(10, 2048, 2048), fs=2048), 8)
    spec = np.abs(np.fft.rfft(out.data[0, 0].astype(np.float64)))
    freqs = np.fft.rfftfreq(out.n_samples, 1 / out.fs)
    assert freqs[np.argmax(spec)] == pytest.approx(10.0)


def test_filters_commute_with_concatenation(rng):
    a = make_set(rng.standard_normal((3, 2, 256)), fs=256)
    b = make_set(rng.standard_normal((2, 2, 256)), fs=256)
    both = type(a).concat([a, b])
    np.testing.assert_array_equal(
        bandpass(both, 1, 40).data, np.concatenate([bandpass(a, 1, 40).data, bandpass(b, 1, 40).data]))
    np.testing.assert_array_equal(
        downsample(both, 4).data, np.concatenate([downsample(a, 4).data, downsample(b, 4).data]))


# ---- normalization -----------------------------------------------------------


def test_p300_scale_of_constant_epoch_is_zero():
    out = normalize(make_set(np.full((1, 2, 10), 7.5)), P300Scale())
    np.testing.assert_array_equal(out.data, 0.0)


def test_p300_scale_clips_large_values():
    x = np.zeros((1, 1, 12))
    x[0, 0, 0], x[0, 0, 1] = 60.0, -60.0  # channel mean stays 0
    out = normalize(make_set(x), P300Scale())
    assert out.data[0, 0, 0] == 5.0 and out.data[0, 0, 1] == -5.0


def test_zscore_of_two_samples():
    out = normalize(make_set(np.array([[[1.0, 3.0]]])), ZScore())
    np.testing.assert_array_equal(out.data, [[[-1.0, 1.0]]])


def test_zscore_twice_stays_standardized(rng):
    ep = make_set(rng.standard_normal((3, 4, 40)) * 5 + 2)
    for _ in range(2):
        ep = normalize(ep, ZScore())
        np.testing.assert_allclose(ep.data.mean(axis=2), 0, atol=1e-12)
        np.testing.assert_allclose(ep.data.std(axis=2), 1, rtol=1e-12)


def test_zscore_names_zero_variance_channel():
    x = np.ones((1, 2, 5))
    x[0, 0] = [1, 2, 3, 4, 5]
    with pytest.raises(SignalError, match="ch1"):
        normalize(make_set(x), ZScore())


def test_ema_standardize_matches_scalar_recursion(rng):
    x = rng.standard_normal((1, 1, 30)) * 2 + 1
    d = 0.9
    out = normalize(make_set(x), EmaStandardize(d)).data[0, 0]
    m, v = x[0, 0, 0], 1.0
    expected = [0.0]
    for xt in x[0, 0, 1:]:
        m = d * m + (1 - d) * xt
        v = d * v + (1 - d) * (xt - m) ** 2
        expected.append((xt - m) / np.sqrt(v + 1e-5))
    np.testing.assert_allclose(out, expected, rtol=1e-12)


# ---- averaging ----------------------------------------------------------------


def test_average_of_identical_epochs_is_that_epoch(rng):
    one = rng.standard_normal((1, 3, 16))
    ep = make_set(np.repeat(one, 10, axis=0), labels=np.ones(10, int))
    out = average_epochs(ep, 10, np.zeros(10))
    np.testing.assert_allclose(out.data, one, rtol=1e-12)
    assert out.labels.tolist() == [1]


def test_average_rejects_mixed_labels():
    ep = make_set(np.zeros((10, 1, 4)), labels=[0] * 5 + [1] * 5)
    with pytest.raises(SignalError):
        average_epochs(ep, 10, np.zeros(10))


def test_average_rejects_wrong_group_size():
    with pytest.raises(SignalError):
        average_epochs(make_set(np.zeros((9, 1, 4))), 10, np.zeros(9))


def test_average_matches_summation_oracle(rng):
    x = rng.standard_normal((20, 2, 8))
    keys = np.repeat([5, 2], 10)
    out = average_epochs(make_set(x), 10, keys)
    for g, key in enumerate([5, 2]):
        acc = np.zeros((2, 8))
        for i in np.flatnonzero(keys == key):
            acc += x[i]
        np.testing.assert_allclose(out.data[g], acc / 10, atol=1e-6)


# ---- CSP ----------------------------------------------------------------------


def _mc_set(rng, n_classes, c, per_class=30, t=64):
    data, labels = [], []
    for k in range(n_classes):
        scale = np.ones(c)
        scale[k % c] = 3.0
        data.append(rng.standard_normal((per_class, c, t)) * scale[None, :, None])
        labels += [k] * per_class
    return make_set(np.concatenate(data), labels=labels)


def test_csp_four_classes_two_filters_on_22_channels(rng):
    proj = csp_fit(_mc_set(rng, 4, 22), 2)
    assert proj.W.shape == (8, 22)


def test_csp_diagonal_covariances_pick_the_dominant_channel(rng):
    t = 4000
    a = rng.standard_normal((1, 2, t)) * np.sqrt([4.0, 1.0])[None, :, None]
    b = rng.standard_normal((1, 2, t)) * np.sqrt([1.0, 4.0])[None, :, None]
    ep = make_set(np.concatenate([a, a[:, :, ::-1], b, b[:, :, ::-1]]), labels=[0, 0, 1, 1])
    w0 = csp_fit(ep, 1).W[0]
    assert abs(w0[0]) > 5 * abs(w0[1])


def test_csp_identical_covariances_tie_deterministically():
    x = np.zeros((4, 3, 6))
    base = np.array([[1, -1, 1, -1, 1, -1], [1, 1, -1, -1, 1, 1], [1, 0, -1, 0, 1, 0]], float)
    x[:] = base
    ep = make_set(x, labels=[0, 0, 1, 1])
    p1, p2 = csp_fit(ep, 1), csp_fit(ep, 1)
    assert np.ptp(p1.eigenvalues) <= 1e-6
    np.testing.assert_array_equal(p1.W, p2.W)


def test_csp_apply_identity_is_noop(rng):
    ep = make_set(rng.standard_normal((2, 3, 10)))
    proj = csp_fit(_mc_set(rng, 3, 3), 1)
    proj.W = np.eye(3)
    np.testing.assert_allclose(csp_apply(proj, ep).data, ep.data, rtol=0, atol=0)


def test_csp_apply_matches_matmul(rng):
    ep = make_set(rng.standard_normal((2, 4, 10)))
    proj = csp_fit(_mc_set(rng, 2, 4), 2)
    out = csp_apply(proj, ep).data
    for i in range(2):
        np.testing.assert_allclose(out[i], proj.W @ ep.data[i], atol=1e-6)


def test_csp_layer_backward_is_transpose(rng):
    W = rng.standard_normal((3, 5))
    g = dc.Graph((5, 7), [dc.ChannelMix(W)], dtype=np.float64)
    dc.forward(g, rng.standard_normal((2, 5, 7)))
    dy = rng.standard_normal((2, 3, 7))
    np.testing.assert_allclose(dc.backward(g, dy).input, np.einsum("oc,not->nct", W, dy), rtol=1e-12)


def test_gradients_flow_through_csp_and_stft(rng):
    proj = csp_fit(_mc_set(rng, 2, 4, t=64), 1)
    g = dc.Graph((4, 64), [proj.as_layer(), dc.STFTMagnitude(32, 8), dc.Flatten(), dc.Dense(2)],
                 dtype=np.float64)
    rep = dc.finite_diff_check(g, rng.standard_normal((2, 4, 64)), tol=1e-4)
    assert rep.passed, rep


# ---- STFT and Morlet ----------------------------------------------------------------


def test_stft_shape():
    tf = stft(make_set(np.zeros((1, 2, 128))), 64, 32)
    assert tf.values.shape == (1, 2, 33, 3)


def test_stft_of_constant_is_dc_plus_hann_mainlobe():
    v = stft(make_set(np.full((1, 1, 128), 2.0)), 64, 16).values[0, 0]
    # oracle: DFT of a periodic Hann window is L/2 at bin 0, L/4 at bins +-1, zero elsewhere
    np.testing.assert_allclose(v[0], 2.0 * 32, rtol=1e-9)
    np.testing.assert_allclose(v[1], 2.0 * 16, rtol=1e-9)
    assert np.all(v[2:] <= 1e-6 * v[0])


def test_stft_tone_at_exact_bin():
    fs, L = 128.0, 64
    f = 10 * fs / L
    v = stft(make_set(tone(f, fs, 256), fs=fs), L, 16).values[0, 0]
    assert np.all(np.argmax(v, axis=0) == 10)


def test_morlet_tone_peaks_at_its_frequency():
    fs = 128.0
    tf = morlet_map(make_set(tone(10, fs, 512), fs=fs), [5, 10, 20])
    assert tf.values.shape == (1, 1, 3, 512)
    assert np.all(np.argmax(mid(tf.values[0, 0]), axis=0) == 1)


def test_morlet_is_homogeneous(rng):
    ep = make_set(rng.standard_normal((2, 2, 128)))
    a = morlet_map(ep, [4, 8]).values
    b = morlet_map(ep.with_data(3.5 * ep.data), [4, 8]).values
    np.testing.assert_allclose(b, 3.5 * a, rtol=1e-10)


def test_time_frequency_maps_are_nonnegative(rng):
    ep = make_set(rng.standard_normal((3, 2, 128)))
    assert stft(ep, 32, 8).values.min() >= 0
    assert morlet_map(ep, [3, 6, 12]).values.min() >= 0
