# -*- coding: utf-8 -*-
"""
metrics 测试：SI-SDR、SNR、谱对数误差与语料级评测报告
"""

import json
import math

import numpy as np
import pytest

from meanflowse.errors import MetricError
from meanflowse.models import CorpusSpec, MetricsReport
from meanflowse.tools.metrics import DB_CAP, evaluate_corpus, si_sdr, snr_db, spectral_log_mse
from meanflowse.tools.sampler import EnhanceResult
from meanflowse.tools.signal_frontend import Waveform
from meanflowse.tools.toy_data import load_manifest, write_corpus


def _identity(noisy: Waveform) -> EnhanceResult:
    return EnhanceResult(enhanced=np.zeros(1), nfe=1, wall_seconds=0.5, rtf=0.5, waveform=noisy)


# ==================== 单条指标 ====================


# 测试用例 1：正交误差下 SI-SDR 等于能量比
def test_si_sdr_with_orthogonal_error():
    t = np.arange(16000) / 16000
    ref = np.sin(2 * np.pi * 440 * t)
    err = np.sin(2 * np.pi * 1000 * t)
    est = 2.0 * ref + 0.1 * err
    expected = 10 * math.log10(np.dot(2 * ref, 2 * ref) / np.dot(0.1 * err, 0.1 * err))
    assert si_sdr(est, ref) == pytest.approx(expected, abs=1e-6)
    assert si_sdr(Waveform(est), Waveform(ref)) == pytest.approx(expected, abs=1e-6)


# 测试用例 2：上限与退化情况
def test_metric_caps_and_errors():
    ref = np.random.default_rng(0).normal(size=1000)
    assert si_sdr(3.0 * ref, ref) == DB_CAP
    assert si_sdr(np.zeros(1000), ref) == -DB_CAP
    assert snr_db(ref, ref) == DB_CAP
    assert snr_db(ref, 2.0 * ref) == pytest.approx(0.0, abs=1e-12)

    with pytest.raises(MetricError):
        si_sdr(ref[:10], ref)
    with pytest.raises(MetricError):
        si_sdr(ref, np.zeros(1000))
    with pytest.raises(MetricError):
        snr_db(ref, ref[:-1])


# 测试用例 3：谱对数误差
def test_spectral_log_mse():
    rng = np.random.default_rng(1)
    x = rng.normal(size=4000)
    assert spectral_log_mse(x, x) == 0.0
    assert spectral_log_mse(x, 10.0 * x) == pytest.approx(4.0, rel=1e-3)
    with pytest.raises(MetricError):
        spectral_log_mse(x, x[:-1])


# ==================== 语料级评测 ====================


@pytest.fixture
def tiny_corpus(tmp_path):
    root = tmp_path / "corpus"
    manifest = write_corpus(CorpusSpec(n_train=0, n_val=0, n_test=2, duration_s=0.25), root)
    return root, load_manifest(manifest, "test")


# 测试用例 4：恒等增强时 SI-SDR 等于带噪基线
def test_evaluate_corpus_identity(tiny_corpus):
    root, entries = tiny_corpus
    report = evaluate_corpus(entries, _identity, root, system="Identity", nfe=1, workers=2)
    assert [u.id for u in report.utterances] == ["test_00000", "test_00001"]
    assert report.mean_si_sdr_db == pytest.approx(report.mean_noisy_si_sdr_db)
    assert report.mean_spectral_log_mse > 0.0
    assert report.mean_rtf == pytest.approx(0.5)
    for u in report.utterances:
        entry = next(e for e in entries if e.id == u.id)
        assert entry.snr_db in (2.5, 7.5, 12.5, 17.5)
        assert u.snr_db == pytest.approx(entry.snr_db, abs=1e-3)


# 测试用例 5：空清单与缺失文件
def test_evaluate_corpus_errors(tiny_corpus):
    root, entries = tiny_corpus
    with pytest.raises(MetricError):
        evaluate_corpus([], _identity, root)

    (root / entries[1].clean_path).unlink()
    with pytest.raises(MetricError) as info:
        evaluate_corpus(entries, _identity, root)
    assert entries[1].id in str(info.value)

    def no_wave(noisy):
        return EnhanceResult(enhanced=np.zeros(1), nfe=1, wall_seconds=0.1)

    with pytest.raises(MetricError):
        evaluate_corpus(entries[:1], no_wave, root)


# 测试用例 6：报告表格与落盘
def test_report_table_and_save(tiny_corpus, tmp_path):
    root, entries = tiny_corpus
    report = evaluate_corpus(entries, _identity, root, system="MeanFlowSE", nfe=1)
    table = report.to_table()
    assert "Noisy" in table and "MeanFlowSE" in table
    assert len(report.to_frame()) == 2

    paths = report.save(tmp_path / "out")
    payload = json.loads(paths["json"].read_text(encoding="utf-8"))
    assert payload["system"] == "MeanFlowSE"
    assert payload["summary"]["si_sdr_db"] == pytest.approx(report.mean_si_sdr_db)
    assert paths["txt"].read_text(encoding="utf-8").strip() == table.strip()

    empty = MetricsReport(system="X")
    assert math.isnan(empty.mean_si_sdr_db)
