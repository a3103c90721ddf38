"""
toy_data - 确定性合成语料

纯净信号为带平滑包络的随机谐波叠加，带噪信号叠加白噪声、粉红噪声或
类 babble 的 AR(2) 噪声并精确控制 SNR。每条语句完全由 (seed, split, index)
决定，各划分使用互不重叠的随机流。

另提供外部 WAV 清单加载、训练用帧语料构建，以及单元测试用的小型仿射问题。
"""

from __future__ import annotations

import logging
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from pydantic import ValidationError
from scipy.signal import lfilter

from meanflowse.errors import CorpusError
from meanflowse.models import CorpusSpec, FrontendConfig, ManifestEntry
from meanflowse.tools.field_network import AnalyticAverageField, analytic_average_field
from meanflowse.tools.signal_frontend import (
    SAMPLE_RATE,
    Waveform,
    analyze,
    peak_normalize,
    read_wav,
    to_frames,
    write_wav,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
_PEAK_LIMIT = 0.99
_NOISE_WARMUP = 512

# 粉红噪声 1/f 近似滤波器系数
_PINK_B = np.array([0.049922035, -0.095993537, 0.050612699, -0.004408786])
_PINK_A = np.array([1.0, -2.494956002, 2.017265875, -0.522189400])


@dataclass
class PairedUtterance:
    """一对纯净 / 带噪语句"""

    id: str
    clean: Waveform
    noisy: Waveform
    snr_db: float
    split: str = "external"
    noise_color: Optional[str] = None


@dataclass
class FrameCorpus:
    """
    训练用帧语料：每条语句的峰值归一化、压缩后帧行 (T, 2F)
    """

    ids: List[str]
    clean: List[np.ndarray]
    noisy: List[np.ndarray]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.clean[0].shape[1]

    @property
    def min_frames(self) -> int:
        return min(c.shape[0] for c in self.clean)


# ==================== 信号合成 ====================


def split_size(spec: CorpusSpec, split: str) -> int:
    if split not in _SPLIT_CODES:
        raise CorpusError(f"未知的数据划分: {split}，可选 {list(SPLITS)}")
    return {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}[split]


def _colored_noise(color: str, n: int, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n + _NOISE_WARMUP)
    if color == "white":
        noise = white
    elif color == "pink":
        noise = lfilter(_PINK_B, _PINK_A, white)
    elif color == "babble":
        radius = rng.uniform(0.9, 0.99)
        theta = 2.0 * math.pi * rng.uniform(200.0, 2000.0) / SAMPLE_RATE
        noise = lfilter([1.0], [1.0, -2.0 * radius * math.cos(theta), radius * radius], white)
    else:
        raise CorpusError(f"未知的噪声颜色: {color}")
    noise = noise[_NOISE_WARMUP:]
    return noise / np.sqrt(np.mean(noise * noise))


def _harmonic_stack(spec: CorpusSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    f0 = rng.uniform(spec.f0_min, spec.f0_max)
    n_harmonics = int(rng.integers(spec.harmonics_min, spec.harmonics_max + 1))
    signal = np.zeros(n)
    for k in range(1, n_harmonics + 1):
        if k * f0 >= SAMPLE_RATE / 2:
            break
        amp = rng.uniform(0.3, 1.0) / k
        signal += amp * np.sin(2.0 * math.pi * k * f0 * t + rng.uniform(0.0, 2.0 * math.pi))

    env_rate = rng.uniform(0.5, 3.0)
    envelope = 0.55 + 0.45 * np.sin(2.0 * math.pi * env_rate * t + rng.uniform(0.0, 2.0 * math.pi))
    ramp = min(n // 2, int(0.02 * SAMPLE_RATE))
    if ramp > 0:
        fade = 0.5 - 0.5 * np.cos(np.linspace(0.0, math.pi, ramp))
        envelope[:ramp] *= fade
        envelope[-ramp:] *= fade[::-1]
    signal *= envelope

    peak = np.max(np.abs(signal))
    if peak > 0:
        signal *= rng.uniform(0.3, 0.6) / peak
    return signal


def generate_pair(spec: CorpusSpec, index: int, split: str = "train") -> PairedUtterance:
    """
    生成第 index 条语句对

    SNR 从 snr_db（train/val）或 test_snr_db（test）中抽取；snr 为 inf 时 noisy == clean。
    """
    size = split_size(spec, split)
    if not 0 <= index < size:
        raise CorpusError(f"{split} 索引越界: {index} ∉ [0, {size})")

    rng = np.random.default_rng([spec.seed, _SPLIT_CODES[split], index])
    n = int(round(spec.duration_s * SAMPLE_RATE))
    clean = _harmonic_stack(spec, n, rng)
    levels = spec.test_snr_db if split == "test" else spec.snr_db
    snr = float(levels[int(rng.integers(len(levels)))])
    color = spec.noise_colors[int(rng.integers(len(spec.noise_colors)))]
    uid = f"{split}_{index:05d}"

    if math.isinf(snr) and snr > 0:
        return PairedUtterance(uid, Waveform(clean), Waveform(clean.copy()), snr, split, None)

    noise = _colored_noise(color, n, rng)
    gain = math.sqrt(np.sum(clean * clean) / (np.sum(noise * noise) * 10.0 ** (snr / 10.0)))
    noise *= gain
    noisy = clean + noise
    peak = np.max(np.abs(noisy))
    if peak > _PEAK_LIMIT:
        clean = clean * (_PEAK_LIMIT / peak)
        noisy = clean + noise * (_PEAK_LIMIT / peak)
    return PairedUtterance(uid, Waveform(clean), Waveform(noisy), snr, split, color)


def generate_split(spec: CorpusSpec, split: str, workers: int = 1) -> List[PairedUtterance]:
    size = split_size(spec, split)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda i: generate_pair(spec, i, split), range(size)))


# ==================== 落盘与清单 ====================


def write_corpus(
    spec: CorpusSpec,
    out_dir: Union[str, Path],
    frontend: Optional[FrontendConfig] = None,
    force: bool = False,
    workers: int = 1,
) -> Path:
    """
    生成全部划分，写出 WAV 与 JSON-lines 清单 manifest.jsonl

    Raises:
        CorpusError: 输出目录已存在且非空，且未指定 force
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise CorpusError(f"输出目录已存在且非空: {out_dir}（使用 --force 覆盖）")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lines: List[str] = []
    counts: Dict[str, int] = {}
    for split in SPLITS:
        pairs = generate_split(spec, split, workers)
        counts[split] = len(pairs)
        for pair in pairs:
            clean_rel = Path(split) / "clean" / f"{pair.id}.wav"
            noisy_rel = Path(split) / "noisy" / f"{pair.id}.wav"
            write_wav(out_dir / clean_rel, pair.clean, spec.wav_subtype)
            write_wav(out_dir / noisy_rel, pair.noisy, spec.wav_subtype)
            entry = ManifestEntry(
                id=pair.id,
                clean_path=clean_rel.as_posix(),
                noisy_path=noisy_rel.as_posix(),
                snr_db=pair.snr_db,
                split=split,
            )
            lines.append(entry.model_dump_json())

    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    logger.info(f"语料已生成: {out_dir} ({', '.join(f'{k}={v}' for k, v in counts.items())})")
    return manifest


def load_manifest(path: Union[str, Path], split: Optional[str] = None) -> List[ManifestEntry]:
    """读取 JSON-lines 清单，可按划分过滤"""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"清单不存在: {path}")
    entries: List[ManifestEntry] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = ManifestEntry.model_validate_json(line)
        except ValidationError as e:
            raise CorpusError(f"{path}:{lineno} 清单行格式错误: {e}") from e
        if split is None or entry.split == split:
            entries.append(entry)
    return entries


def load_pair(entry: ManifestEntry, root: Union[str, Path]) -> PairedUtterance:
    """按清单条目读取 WAV 对；相对路径以 root 为基准"""
    root = Path(root)
    clean_path = root / entry.clean_path
    noisy_path = root / entry.noisy_path
    missing = [str(p) for p in (clean_path, noisy_path) if not p.exists()]
    if missing:
        raise CorpusError(f"语句 {entry.id} 缺少文件: {', '.join(missing)}")
    clean = read_wav(clean_path)
    noisy = read_wav(noisy_path)
    if len(clean) != len(noisy):
        raise CorpusError(f"语句 {entry.id} 纯净/带噪长度不一致: {len(clean)} vs {len(noisy)}")
    return PairedUtterance(entry.id, clean, noisy, entry.snr_db, entry.split)


def build_frame_corpus(
    pairs: List[PairedUtterance], frontend: Optional[FrontendConfig] = None
) -> FrameCorpus:
    """峰值归一化 → STFT → 压缩 → 帧行"""
    if not pairs:
        raise CorpusError("语料为空")
    frontend = frontend or FrontendConfig()
    ids, clean_rows, noisy_rows = [], [], []
    for pair in pairs:
        noisy_n, clean_n, scale = peak_normalize(pair.noisy, pair.clean)
        ids.append(pair.id)
        clean_rows.append(to_frames(analyze(clean_n, frontend, scale)))
        noisy_rows.append(to_frames(analyze(noisy_n, frontend, scale)))
    return FrameCorpus(ids=ids, clean=clean_rows, noisy=noisy_rows)


# ==================== 小型解析问题 ====================


@dataclass
class AffineProblem:
    """仿射动力学上的精确路径测试问题"""

    field: AnalyticAverageField
    x: np.ndarray
    y: np.ndarray


def make_affine_problem(dim: int = 2, seed: int = 0, n: int = 16) -> AffineProblem:
    """
    随机对角 a（|a| ∈ [0.5, 1.5]，符号随机）与二次 b(τ) 的仿射场，外加 n 个状态
    """
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 1.5, dim) * rng.choice([-1.0, 1.0], dim)
    b = rng.normal(0.0, 1.0, (3, dim))
    field = analytic_average_field(a, list(b))
    return AffineProblem(field=field, x=rng.normal(0.0, 1.0, (n, dim)), y=np.zeros((n, dim)))
