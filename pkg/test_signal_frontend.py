# -*- coding: utf-8 -*-
"""
signal_frontend 测试：STFT/ISTFT 精确重构、幅度压缩、峰值归一化与文件读写
"""

import numpy as np
import pytest

from meanflowse.errors import FrontendError
from meanflowse.models import FrontendConfig
from meanflowse.tools.signal_frontend import (
    Waveform,
    analyze,
    compress,
    decompress,
    denormalize,
    from_frames,
    istft,
    load_spectrogram,
    peak_normalize,
    read_wav,
    save_spectrogram,
    stft,
    synthesize,
    to_frames,
    write_wav,
)


def _noise(n: int, seed: int = 0, scale: float = 0.3) -> Waveform:
    return Waveform(np.random.default_rng(seed).normal(0.0, scale, n))


# 测试用例 1：STFT 往返相对误差 < 1e-6（长度不是 hop 的整数倍）
@pytest.mark.parametrize("n", [16000, 12345])
def test_stft_round_trip(n):
    w = _noise(n)
    spec = stft(w)
    assert spec.n_frames == 1 + n // 128
    assert spec.n_bins == 257
    back = istft(spec)
    assert len(back) == n
    err = np.linalg.norm(back.samples - w.samples) / np.linalg.norm(w.samples)
    assert err < 1e-6


# 测试用例 2：窗平方和为零时拒绝合成
def test_istft_rejects_non_cola_hop():
    cfg = FrontendConfig(fft_size=64, hop=64)
    with pytest.raises(FrontendError):
        istft(stft(_noise(1000), cfg))


# 测试用例 3：幅度压缩精确可逆，且 compress(0) = 0
def test_compression_round_trip():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(257, 40)) + 1j * rng.normal(size=(257, 40))
    z[0, 0] = 0.0
    c = compress(z)
    np.testing.assert_allclose(decompress(c), z, rtol=1e-10, atol=0.0)
    assert c[0, 0] == 0
    np.testing.assert_allclose(np.abs(c[1, 1]), 0.15 * np.abs(z[1, 1]) ** 0.5, rtol=1e-12)
    assert compress(0j) == 0


# 测试用例 4：峰值归一化往返误差 < 1e-12
def test_peak_normalization_round_trip():
    noisy = _noise(4000, seed=3, scale=0.7)
    clean = _noise(4000, seed=4, scale=0.2)
    noisy_n, clean_n, scale = peak_normalize(noisy, clean)
    assert noisy_n.peak == pytest.approx(1.0, abs=1e-15)
    assert scale == noisy.peak
    np.testing.assert_allclose(denormalize(noisy_n, scale).samples, noisy.samples, atol=1e-12, rtol=0)
    np.testing.assert_allclose(denormalize(clean_n, scale).samples, clean.samples, atol=1e-12, rtol=0)


def test_peak_normalization_rejects_silence():
    with pytest.raises(FrontendError):
        peak_normalize(Waveform(np.zeros(100)))


# 测试用例 5：analyze / synthesize 组合与网络行布局
def test_analyze_synthesize_and_row_layout():
    w = _noise(8000, seed=5)
    spec = analyze(w)
    assert spec.compressed
    rows = to_frames(spec)
    assert rows.shape == (spec.n_frames, 2 * spec.n_bins)
    np.testing.assert_array_equal(rows[:, : spec.n_bins], spec.frames.real.T)

    rebuilt = from_frames(rows, spec)
    back = synthesize(rebuilt)
    assert np.linalg.norm(back.samples - w.samples) / np.linalg.norm(w.samples) < 1e-6

    with pytest.raises(FrontendError):
        from_frames(rows[:, :-1], spec)


# 测试用例 6：波形校验
def test_waveform_validation():
    with pytest.raises(FrontendError):
        Waveform(np.zeros(10), sample_rate=8000)
    with pytest.raises(FrontendError):
        Waveform(np.zeros((2, 10)))
    with pytest.raises(FrontendError):
        Waveform(np.array([0.0, np.nan]))
    assert Waveform(np.zeros(16000)).duration_s == 1.0


# 测试用例 7：WAV 读写（FLOAT 无损，PCM_16 截断越界采样）
def test_wav_io(tmp_path):
    w = _noise(1600, seed=6, scale=0.2)
    path = write_wav(tmp_path / "a.wav", w, "FLOAT")
    np.testing.assert_allclose(read_wav(path).samples, w.samples, atol=1e-7)

    loud = Waveform(np.array([0.5, 1.5, -2.0, 0.0]))
    back = read_wav(write_wav(tmp_path / "b.wav", loud, "PCM_16"))
    assert np.max(np.abs(back.samples)) <= 1.0

    with pytest.raises(FrontendError):
        read_wav(tmp_path / "missing.wav")


# 测试用例 8：频谱转储读回
def test_spectrogram_dump(tmp_path):
    spec = stft(_noise(2000, seed=7))
    loaded = load_spectrogram(save_spectrogram(tmp_path / "s.mfse", spec))
    assert loaded.frames.shape == spec.frames.shape
    assert loaded.length == (spec.n_frames - 1) * spec.hop
    np.testing.assert_allclose(loaded.frames, spec.frames, rtol=1e-6, atol=1e-6)

    (tmp_path / "bad.mfse").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(FrontendError):
        load_spectrogram(tmp_path / "bad.mfse")
