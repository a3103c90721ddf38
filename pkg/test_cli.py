# -*- coding: utf-8 -*-
"""
命令行端到端测试：gen-corpus → train → enhance → bench，以及 verify
"""

import json
from pathlib import Path

import pytest

from main import main
from meanflowse.models import RunConfig
from meanflowse.tools.signal_frontend import read_wav

TINY = [
    "corpus.n_train=2", "corpus.n_val=1", "corpus.n_test=2", "corpus.duration_s=0.25",
    "field.width=16", "field.n_blocks=1", "field.embed_dim=8",
    "train.batch_size=2", "train.segment_frames=4", "train.prefetch=0", "train.log_every=1",
    "sampler.bench_nfe=[1,2]", "sampler.bench_euler_nfe=[2]",
]


def _args(command, workdir, *extra, steps=0):
    sets = []
    for item in TINY + [f"train.steps={steps}"]:
        sets += ["--set", item]
    return [command, "--workdir", str(workdir), *sets, *extra]


@pytest.fixture(autouse=True)
def single_thread(monkeypatch):
    monkeypatch.setenv("MFSE_THREADS", "1")


# ==================== verify ====================


# 测试用例 1：quick 子集全部通过
def test_verify_quick_passes(tmp_path):
    assert main(["verify", "--quick", "--workdir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "verify" / "verify.json").read_text(encoding="utf-8"))
    assert report["passed"] is True
    assert {c["name"] for c in report["checks"]} >= {"identity_residual", "diagonal_reduction"}


# 测试用例 2：JVP 符号变异被检出
def test_verify_detects_sign_mutation(tmp_path):
    assert main(["verify", "--quick", "--mutation", "sign", "--workdir", str(tmp_path)]) == 1


def test_verify_full_passes(tmp_path):
    assert main(["verify", "--workdir", str(tmp_path)]) == 0


# ==================== 配置错误 ====================


# 测试用例 3：未知配置键与非法取值返回 2
def test_config_errors_exit_with_usage(tmp_path):
    assert main(["gen-corpus", "--workdir", str(tmp_path), "--set", "train.bogus=1"]) == 2
    assert main(["gen-corpus", "--workdir", str(tmp_path), "--config", "missing.yaml"]) == 2
    wav = tmp_path / "x.wav"
    assert main(["enhance", "--workdir", str(tmp_path), "--input", str(wav), "--nfe", "0"]) == 2


def test_bad_thread_count_fails_cleanly(tmp_path, monkeypatch):
    monkeypatch.setenv("MFSE_THREADS", "many")
    assert main(_args("gen-corpus", tmp_path)) == 2


# ==================== 端到端流程 ====================


# 测试用例 4：完整流程 gen-corpus → train → enhance → bench
def test_full_workflow(tmp_path):
    assert main(_args("gen-corpus", tmp_path)) == 0
    manifest = tmp_path / "corpus" / "manifest.jsonl"
    assert len(manifest.read_text(encoding="utf-8").strip().splitlines()) == 5
    assert (tmp_path / "corpus" / "resolved_config.yaml").exists()

    # 已存在的语料目录需要 --force
    assert main(_args("gen-corpus", tmp_path)) == 2
    assert main(_args("gen-corpus", tmp_path, "--force")) == 0

    assert main(_args("train", tmp_path, steps=2)) == 0
    checkpoint = tmp_path / "train" / "checkpoints" / "final.mfnn"
    assert checkpoint.exists()
    assert len((tmp_path / "train" / "train_log.jsonl").read_text(encoding="utf-8").strip().splitlines()) == 2

    source = "corpus/test/noisy/test_00000.wav"
    for mode, nfe in (("mf", "1"), ("mf", "3"), ("euler", "2")):
        assert main(_args("enhance", tmp_path, "--input", source, "--output", f"out/{mode}{nfe}.wav",
                          "--mode", mode, "--nfe", nfe)) == 0
        assert len(read_wav(tmp_path / "out" / f"{mode}{nfe}.wav")) == len(read_wav(tmp_path / source))
    records = [json.loads(line) for line in (tmp_path / "out" / "enhance_runs.jsonl").read_text().splitlines()]
    assert [r["nfe"] for r in records] == [1, 3, 2]
    assert all(r["rtf"] > 0 for r in records)

    assert main(_args("bench", tmp_path)) == 0
    bench = json.loads((tmp_path / "bench" / "bench.json").read_text(encoding="utf-8"))
    assert [(r["system"], r["nfe"]) for r in bench["rows"]] == [("MeanFlowSE", 1), ("MeanFlowSE", 2), ("Euler", 2)]
    table = (tmp_path / "bench" / "bench.txt").read_text(encoding="utf-8")
    assert "Noisy" in table and "Euler" in table
    assert (tmp_path / "bench" / "meanflowse_nfe1" / "report.json").exists()


# 测试用例 5：缺少检查点时增强失败
def test_enhance_without_checkpoint_fails(tmp_path):
    assert main(_args("gen-corpus", tmp_path)) == 0
    assert main(_args("enhance", tmp_path, "--input", "corpus/test/noisy/test_00001.wav")) == 2


# 测试用例 6：仓库自带的默认配置可以直接加载
def test_default_config_file_loads():
    config = RunConfig.load(Path(__file__).parent / "configs" / "default.yaml")
    assert config == RunConfig()
