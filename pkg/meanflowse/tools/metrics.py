"""
metrics - 无需外部模型的客观指标

SI-SDR（不做去均值，+∞ 截断为 100 dB）、SNR、谱对数 MSE，以及语料级评测。
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from meanflowse.errors import CorpusError, MetricError
from meanflowse.models import FrontendConfig, ManifestEntry, MetricsReport, UtteranceMetrics
from meanflowse.tools.sampler import EnhanceResult
from meanflowse.tools.signal_frontend import Waveform, stft
from meanflowse.tools.toy_data import load_pair

logger = logging.getLogger(__name__)

DB_CAP = 100.0

SignalLike = Union[Waveform, np.ndarray]


def _samples(w: SignalLike) -> np.ndarray:
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def _ratio_db(num: float, den: float, cap: float) -> float:
    if num <= 0.0:
        return -cap
    if den <= 0.0:
        return cap
    return float(max(-cap, min(cap, 10.0 * math.log10(num / den))))


def si_sdr(estimate: SignalLike, reference: SignalLike, cap: float = DB_CAP) -> float:
    """
    尺度不变 SDR

    α = ⟨est, ref⟩ / ⟨ref, ref⟩，返回 10·log10(‖α·ref‖² / ‖est - α·ref‖²)，上限 cap

    Raises:
        MetricError: 长度不一致或参考信号能量为零
    """
    est, ref = _samples(estimate), _samples(reference)
    if est.shape != ref.shape:
        raise MetricError(f"长度不一致: {est.shape} vs {ref.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise MetricError("参考信号能量为零")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    residual = est - target
    return _ratio_db(float(np.dot(target, target)), float(np.dot(residual, residual)), cap)


def snr_db(clean: SignalLike, noisy: SignalLike, cap: float = DB_CAP) -> float:
    """10·log10(‖clean‖² / ‖noisy - clean‖²)，无噪声时为 cap"""
    c, n = _samples(clean), _samples(noisy)
    if c.shape != n.shape:
        raise MetricError(f"长度不一致: {c.shape} vs {n.shape}")
    noise = n - c
    return _ratio_db(float(np.dot(c, c)), float(np.dot(noise, noise)), cap)


def spectral_log_mse(
    estimate: SignalLike,
    reference: SignalLike,
    cfg: Optional[FrontendConfig] = None,
    floor: float = 1e-8,
) -> float:
    """未压缩 STFT 功率谱的 log10 均方误差"""
    est, ref = _samples(estimate), _samples(reference)
    if est.shape != ref.shape:
        raise MetricError(f"长度不一致: {est.shape} vs {ref.shape}")
    cfg = cfg or FrontendConfig()
    p_est = np.abs(stft(Waveform(est), cfg).frames) ** 2
    p_ref = np.abs(stft(Waveform(ref), cfg).frames) ** 2
    diff = np.log10(p_est + floor) - np.log10(p_ref + floor)
    return float(np.mean(diff * diff))


def evaluate_utterance(
    uid: str,
    enhanced: Waveform,
    clean: Waveform,
    noisy: Waveform,
    cfg: Optional[FrontendConfig] = None,
    nfe: int = 0,
    rtf: Optional[float] = None,
) -> UtteranceMetrics:
    return UtteranceMetrics(
        id=uid,
        si_sdr_db=si_sdr(enhanced, clean),
        spectral_log_mse=spectral_log_mse(enhanced, clean, cfg),
        snr_db=snr_db(clean, enhanced),
        noisy_si_sdr_db=si_sdr(noisy, clean),
        nfe=nfe,
        rtf=rtf,
    )


def evaluate_corpus(
    manifest: Sequence[ManifestEntry],
    pipeline: Callable[[Waveform], EnhanceResult],
    root: Union[str, Path],
    cfg: Optional[FrontendConfig] = None,
    system: str = "MeanFlowSE",
    mode: str = "mf",
    nfe: int = 1,
    workers: int = 1,
) -> MetricsReport:
    """
    对清单中每条语句运行 pipeline 并汇总指标

    pipeline 接收带噪波形，返回带 waveform 字段的 EnhanceResult。

    Raises:
        MetricError: 清单为空，或有语句缺少文件（列出全部缺失的 id）
    """
    if not manifest:
        raise MetricError("评测清单为空")
    root = Path(root)
    missing = [
        e.id for e in manifest
        if not (root / e.clean_path).exists() or not (root / e.noisy_path).exists()
    ]
    if missing:
        raise MetricError(f"以下语句缺少文件: {', '.join(missing)}")

    def _one(entry: ManifestEntry) -> UtteranceMetrics:
        try:
            pair = load_pair(entry, root)
        except CorpusError as e:
            raise MetricError(str(e)) from e
        result = pipeline(pair.noisy)
        if result.waveform is None:
            raise MetricError(f"语句 {entry.id}: pipeline 未返回波形")
        return evaluate_utterance(
            entry.id, result.waveform, pair.clean, pair.noisy, cfg, result.nfe, result.rtf
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows: List[UtteranceMetrics] = list(pool.map(_one, manifest))

    report = MetricsReport(system=system, mode=mode, nfe=nfe, utterances=rows)
    logger.info(
        f"{system} (NFE={nfe}): SI-SDR {report.mean_si_sdr_db:.3f} dB，"
        f"Noisy {report.mean_noisy_si_sdr_db:.3f} dB，共 {len(rows)} 条"
    )
    return report
