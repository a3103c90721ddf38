"""
signal_frontend - 波形与压缩复数谱之间的转换

- 居中分帧（reflect 填充）+ 周期 Hann 窗的 STFT / 重叠相加 ISTFT
- 以带噪信号峰值做归一化，增强后按同一尺度还原
- 幅度压缩 0.15·|z|^0.5·e^{j∠z} 及其精确逆
- 16 kHz 单声道 WAV 读写（soundfile）与 "MFSE" 频谱转储格式
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import soundfile as sf
from scipy.signal import get_window

from meanflowse.errors import FrontendError
from meanflowse.models import FrontendConfig

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
WINDOW_SUM_FLOOR = 1e-8

_DUMP_MAGIC = b"MFSE"
_DUMP_VERSION = 1
_DUMP_HEADER = struct.Struct("<4sIIIII")


# ==================== 数据类型 ====================


@dataclass
class Waveform:
    """16 kHz 单声道实数波形"""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise FrontendError(f"采样率必须为 {SAMPLE_RATE} Hz，实际 {self.sample_rate}")
        if self.samples.ndim != 1:
            raise FrontendError(f"波形必须是一维数组，实际形状 {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise FrontendError("波形包含 NaN/Inf")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if len(self.samples) else 0.0


@dataclass
class ComplexSpectrogram:
    """
    F×T 复数谱

    Attributes:
        frames: 复数数组 (F, T)，F = fft_size/2 + 1
        length: 源波形采样点数，ISTFT 用它截取输出
        norm_scale: 源波形的峰值归一化系数
        compressed: frames 是否已经过幅度压缩
    """

    frames: np.ndarray
    fft_size: int
    hop: int
    length: int
    window: str = "hann"
    norm_scale: float = 1.0
    compressed: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.complex128)
        if self.frames.ndim != 2 or self.frames.shape[0] != self.fft_size // 2 + 1:
            raise FrontendError(
                f"频谱形状 {self.frames.shape} 与 fft_size={self.fft_size} 不一致"
            )

    @property
    def n_bins(self) -> int:
        return self.frames.shape[0]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]


# ==================== STFT ====================


def hann_window(n: int) -> np.ndarray:
    """周期 Hann 窗"""
    return get_window("hann", n, fftbins=True).astype(np.float64)


def stft(w: Waveform, cfg: Optional[FrontendConfig] = None) -> ComplexSpectrogram:
    """
    居中分帧 STFT（不含压缩）

    帧数为 1 + len // hop，第 k 帧以第 k·hop 个采样点为中心。
    """
    cfg = cfg or FrontendConfig()
    x = w.samples
    if len(x) < 1:
        raise FrontendError("空波形无法做 STFT")

    n_fft, hop = cfg.fft_size, cfg.hop
    pad = n_fft // 2
    padded = np.pad(x, pad, mode=cfg.pad_mode)
    n_frames = 1 + len(x) // hop
    need = (n_frames - 1) * hop + n_fft
    if len(padded) < need:
        padded = np.pad(padded, (0, need - len(padded)))

    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    spec = np.fft.rfft(frames * hann_window(n_fft), axis=-1).T
    return ComplexSpectrogram(frames=spec, fft_size=n_fft, hop=hop, length=len(x))


def istft(s: ComplexSpectrogram, length: Optional[int] = None) -> Waveform:
    """
    重叠相加合成，按窗平方和归一化

    Raises:
        FrontendError: 输出范围内任一点的窗平方和低于 1e-8（不满足 COLA）
    """
    n_fft, hop = s.fft_size, s.hop
    length = s.length if length is None else length
    pad = n_fft // 2
    window = hann_window(n_fft)

    frames = np.fft.irfft(s.frames.T, n=n_fft, axis=-1) * window
    total = (s.n_frames - 1) * hop + n_fft
    total = max(total, pad + length)
    out = np.zeros(total)
    wsum = np.zeros(total)
    for k, frame in enumerate(frames):
        start = k * hop
        out[start:start + n_fft] += frame
        wsum[start:start + n_fft] += window * window

    span = slice(pad, pad + length)
    if length and np.min(wsum[span]) < WINDOW_SUM_FLOOR:
        bad = pad + int(np.argmin(wsum[span]))
        raise FrontendError(
            f"窗平方和在采样点 {bad - pad} 处低于 {WINDOW_SUM_FLOOR}（hop={hop} 不满足 COLA）"
        )
    return Waveform(out[span] / np.where(wsum[span] > 0, wsum[span], 1.0))


# ==================== 归一化 ====================


def peak_normalize(
    noisy: Waveform, clean: Optional[Waveform] = None
) -> Tuple[Waveform, Optional[Waveform], float]:
    """
    以带噪信号的峰值归一化

    Returns:
        (归一化带噪, 归一化纯净或 None, norm_scale)
    """
    scale = noisy.peak
    if scale <= 0:
        raise FrontendError("带噪输入为静音，无法做峰值归一化")
    noisy_n = Waveform(noisy.samples / scale, noisy.sample_rate)
    clean_n = Waveform(clean.samples / scale, clean.sample_rate) if clean is not None else None
    return noisy_n, clean_n, scale


def denormalize(w: Waveform, norm_scale: float) -> Waveform:
    return Waveform(w.samples * norm_scale, w.sample_rate)


# ==================== 幅度压缩 ====================


def compress(
    z: Union[complex, np.ndarray], exponent: float = 0.5, scale: float = 0.15
) -> Union[complex, np.ndarray]:
    """scale·|z|^exponent·e^{j∠z}，compress(0) = 0"""
    z = np.asarray(z, dtype=np.complex128)
    mag = np.abs(z)
    nonzero = mag > 0
    safe = np.where(nonzero, mag, 1.0)
    out = np.where(nonzero, scale * safe ** exponent * (z / safe), 0.0)
    return out[()]


def decompress(
    z: Union[complex, np.ndarray], exponent: float = 0.5, scale: float = 0.15
) -> Union[complex, np.ndarray]:
    """compress 的精确逆：|z/scale|^(1/exponent)·e^{j∠z}"""
    z = np.asarray(z, dtype=np.complex128)
    mag = np.abs(z)
    nonzero = mag > 0
    safe = np.where(nonzero, mag, 1.0)
    out = np.where(nonzero, (safe / scale) ** (1.0 / exponent) * (z / safe), 0.0)
    return out[()]


def analyze(w: Waveform, cfg: Optional[FrontendConfig] = None, norm_scale: float = 1.0) -> ComplexSpectrogram:
    """stft + compress"""
    cfg = cfg or FrontendConfig()
    spec = stft(w, cfg)
    return replace(
        spec,
        frames=compress(spec.frames, cfg.compress_exponent, cfg.compress_scale),
        norm_scale=norm_scale,
        compressed=True,
    )


def synthesize(spec: ComplexSpectrogram, cfg: Optional[FrontendConfig] = None) -> Waveform:
    """decompress + istft"""
    cfg = cfg or FrontendConfig()
    if spec.compressed:
        spec = replace(
            spec,
            frames=decompress(spec.frames, cfg.compress_exponent, cfg.compress_scale),
            compressed=False,
        )
    return istft(spec)


# ==================== 网络行布局 ====================


def to_frames(spec: ComplexSpectrogram) -> np.ndarray:
    """(F, T) 复数谱 → (T, 2F) 实数行，布局 [Re(0..F-1), Im(0..F-1)]"""
    return np.concatenate([spec.frames.real.T, spec.frames.imag.T], axis=1)


def from_frames(rows: np.ndarray, like: ComplexSpectrogram) -> ComplexSpectrogram:
    """to_frames 的逆，元数据取自 like"""
    rows = np.asarray(rows)
    n_bins = like.n_bins
    if rows.ndim != 2 or rows.shape[1] != 2 * n_bins:
        raise FrontendError(f"帧行形状 {rows.shape} 与 {n_bins} 个频点不一致")
    frames = (rows[:, :n_bins] + 1j * rows[:, n_bins:]).T
    return replace(like, frames=frames)


# ==================== 文件 I/O ====================


def read_wav(path: Union[str, Path]) -> Waveform:
    """读取 16 kHz 单声道 WAV（PCM_16 或 FLOAT）"""
    path = Path(path)
    if not path.exists():
        raise FrontendError(f"WAV 文件不存在: {path}")
    data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    if data.shape[1] != 1:
        raise FrontendError(f"{path}: 仅支持单声道，实际 {data.shape[1]} 声道")
    if rate != SAMPLE_RATE:
        raise FrontendError(f"{path}: 采样率 {rate} Hz，需为 {SAMPLE_RATE} Hz（不做重采样）")
    return Waveform(data[:, 0], rate)


def write_wav(path: Union[str, Path], w: Waveform, subtype: str = "FLOAT") -> Path:
    """写出 WAV；PCM_16 会把超出 [-1, 1] 的采样截断"""
    if subtype not in ("PCM_16", "FLOAT"):
        raise FrontendError(f"不支持的 WAV 子类型: {subtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples = w.samples
    if subtype == "PCM_16":
        clipped = np.clip(samples, -1.0, 1.0)
        if np.any(clipped != samples):
            logger.warning(f"{path.name}: {int(np.sum(clipped != samples))} 个采样超出 [-1, 1]，已截断")
        samples = clipped
    sf.write(str(path), samples, w.sample_rate, subtype=subtype)
    return path


def save_spectrogram(path: Union[str, Path], spec: ComplexSpectrogram) -> Path:
    """
    "MFSE" 转储：magic、version、F、T、fft_size、hop（u32 小端），
    随后是行主序 f32 交错 (re, im)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _DUMP_HEADER.pack(
        _DUMP_MAGIC, _DUMP_VERSION, spec.n_bins, spec.n_frames, spec.fft_size, spec.hop
    )
    payload = np.stack([spec.frames.real, spec.frames.imag], axis=-1).astype("<f4")
    path.write_bytes(header + payload.tobytes(order="C"))
    return path


def load_spectrogram(path: Union[str, Path]) -> ComplexSpectrogram:
    """读取 "MFSE" 转储；length 取居中分帧下的最短对应长度 (T-1)·hop"""
    raw = Path(path).read_bytes()
    if len(raw) < _DUMP_HEADER.size:
        raise FrontendError(f"{path}: 文件过短")
    magic, version, n_bins, n_frames, n_fft, hop = _DUMP_HEADER.unpack_from(raw)
    if magic != _DUMP_MAGIC:
        raise FrontendError(f"{path}: magic 错误 {magic!r}")
    if version != _DUMP_VERSION:
        raise FrontendError(f"{path}: 不支持的版本 {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=_DUMP_HEADER.size)
    if body.size != n_bins * n_frames * 2:
        raise FrontendError(f"{path}: 数据长度 {body.size} 与头部 {n_bins}×{n_frames} 不符")
    body = body.reshape(n_bins, n_frames, 2).astype(np.float64)
    return ComplexSpectrogram(
        frames=body[..., 0] + 1j * body[..., 1],
        fft_size=n_fft,
        hop=hop,
        length=(n_frames - 1) * hop,
    )
