"""
MeanFlowSE 数据模型定义
使用 Pydantic 确保配置与报告的类型安全和数据验证

所有配置段都禁止未知字段（extra="forbid"），拼写错误的键会被直接拒绝。
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, computed_field, field_validator, model_validator

from meanflowse.errors import ConfigError


_STRICT = ConfigDict(extra="forbid", validate_assignment=True)


# ==================== 配置段 ====================


class FrontendConfig(BaseModel):
    """STFT 前端配置"""

    model_config = _STRICT

    sample_rate: int = Field(16000, description="采样率 (Hz)，固定 16 kHz")
    fft_size: int = Field(512, description="FFT 点数")
    hop: int = Field(128, description="帧移")
    window: Literal["hann"] = Field("hann", description="周期 Hann 窗")
    pad_mode: Literal["reflect", "constant"] = Field("reflect", description="居中分帧的填充方式")
    compress_exponent: float = Field(0.5, gt=0, le=1, description="幅度压缩指数 |z|^e")
    compress_scale: float = Field(0.15, gt=0, description="压缩后的缩放系数")

    @field_validator("sample_rate")
    @classmethod
    def validate_rate(cls, v: int) -> int:
        if v != 16000:
            raise ValueError("sample_rate 必须为 16000")
        return v

    @field_validator("fft_size")
    @classmethod
    def validate_fft(cls, v: int) -> int:
        if v < 16 or v & (v - 1):
            raise ValueError("fft_size 必须是不小于 16 的 2 的幂")
        return v

    @model_validator(mode="after")
    def validate_hop(self) -> "FrontendConfig":
        if not 0 < self.hop <= self.fft_size:
            raise ValueError("hop 必须在 (0, fft_size] 之间")
        return self

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


class PathConfig(BaseModel):
    """条件插值路径配置"""

    model_config = _STRICT

    convention: Literal["flowse", "meanflowse"] = Field(
        "meanflowse", description="flowse: t=0 带噪/t=1 纯净；meanflowse: t=0 纯净/t=1 带噪"
    )
    sigma: float = Field(0.5, gt=0, description="FlowSE 路径噪声尺度 σ")
    sigma_min: float = Field(1e-4, ge=0, description="MeanFlowSE 纯净端标准差")
    sigma_max: float = Field(0.5, ge=0, description="MeanFlowSE 带噪端标准差")
    delta: float = Field(0.03, gt=0, lt=1, description="FlowSE 时间采样上限保护 t ≤ 1-δ")
    t_rev: float = Field(1.0, gt=0, le=1, description="反向初始时间 T_rev")
    t_eps: float = Field(0.0, ge=0, lt=1, description="终止时间 t_ε")

    @model_validator(mode="after")
    def validate_ranges(self) -> "PathConfig":
        if self.sigma_min > self.sigma_max:
            raise ValueError("sigma_min 不能大于 sigma_max")
        if self.t_eps >= self.t_rev:
            raise ValueError("t_eps 必须小于 t_rev")
        return self


class FieldConfig(BaseModel):
    """平均速度场网络结构"""

    model_config = _STRICT

    width: int = Field(256, gt=0, description="残差主干宽度")
    n_blocks: int = Field(4, ge=0, description="残差块数量")
    embed_dim: int = Field(64, gt=0, description="t 与 Δ 各自的傅里叶嵌入维度")
    embed_scale: float = Field(16.0, gt=0, description="高斯傅里叶频率标准差")
    seed: int = Field(0, description="参数初始化种子")

    @field_validator("embed_dim")
    @classmethod
    def validate_embed(cls, v: int) -> int:
        if v % 2:
            raise ValueError("embed_dim 必须为偶数（sin/cos 各一半）")
        return v


class ObjectiveConfig(BaseModel):
    """训练目标与课程配置"""

    model_config = _STRICT

    c: float = Field(0.5, gt=0, le=1, description="一阶修正系数 c")
    mean_branch_weight_max: float = Field(0.25, ge=0, description="均值分支权重上限")
    span_exponent_start: float = Field(8.0, gt=0, description="跨度采样指数起点")
    span_exponent_end: float = Field(1.0, gt=0, description="跨度采样指数终点")
    diagonal_fraction: float = Field(0.1, ge=0, le=1, description="注入 r=t 的比例")
    jacobian_clip: float = Field(10.0, gt=0, description="JVP 项逐样本 ℓ2 上限（可为 inf）")
    warmup_steps: int = Field(5000, ge=0, description="课程长度（步）")
    derivative: Literal["jvp", "finite_difference"] = Field("jvp", description="全导数计算方式")
    fd_step: float = Field(1e-3, gt=0, description="中心差分步长 h")
    fallback_to_finite_difference: bool = Field(
        False, description="JVP 出现非有限值时是否改用中心差分"
    )


class TrainConfig(BaseModel):
    """优化器与训练循环配置"""

    model_config = _STRICT

    lr: float = Field(1e-4, gt=0, description="Adam 学习率")
    ema_decay: float = Field(0.999, gt=0, lt=1, description="EMA 衰减")
    grad_clip_norm: float = Field(1.0, gt=0, description="全局梯度范数裁剪")
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    batch_size: int = Field(32, gt=0, description="每步路径样本数")
    segment_frames: int = Field(8, gt=0, description="每个路径样本包含的连续帧数")
    steps: int = Field(20000, ge=0, description="训练步数")
    seed: int = Field(0, description="训练随机种子")
    checkpoint_every: int = Field(1000, ge=0, description="检查点间隔（0 表示只在结束时保存）")
    log_every: int = Field(100, gt=0, description="日志间隔")
    validate_every: int = Field(0, ge=0, description="验证间隔（0 表示只在结束时验证）")
    val_utterances: int = Field(8, ge=0, description="验证使用的语句数")
    prefetch: int = Field(2, ge=0, description="预取队列长度（0 关闭后台线程）")
    precision: Literal["float64", "float32"] = Field("float64", description="训练精度")


class SamplerConfig(BaseModel):
    """推理采样配置"""

    model_config = _STRICT

    mode: Literal["mf", "euler"] = Field("mf", description="mf: 位移采样；euler: FlowSE 欧拉基线")
    nfe: int = Field(1, ge=1, description="网络前向次数")
    warmup_runs: int = Field(3, ge=3, description="RTF 测量的预热次数（至少 3）")
    timed_runs: int = Field(10, ge=10, description="RTF 计时次数（取中位数，至少 10）")
    bench_nfe: List[int] = Field(default_factory=lambda: [1, 5, 10, 20])
    bench_euler_nfe: List[int] = Field(default_factory=lambda: [5, 10, 20])


class CorpusSpec(BaseModel):
    """合成语料规格"""

    model_config = _STRICT

    n_train: int = Field(200, ge=0)
    n_val: int = Field(16, ge=0)
    n_test: int = Field(32, ge=0)
    duration_s: float = Field(2.0, gt=0, description="每条语句时长 (秒)")
    f0_min: float = Field(100.0, gt=0)
    f0_max: float = Field(300.0, gt=0)
    harmonics_min: int = Field(1, ge=1)
    harmonics_max: int = Field(8, ge=1, le=8)
    noise_colors: List[Literal["white", "pink", "babble"]] = Field(
        default_factory=lambda: ["white", "pink", "babble"]
    )
    snr_db: List[float] = Field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0])
    test_snr_db: List[float] = Field(
        default_factory=lambda: [2.5, 7.5, 12.5, 17.5], description="测试集信噪比（训练未见）"
    )
    seed: int = Field(1234)
    wav_subtype: Literal["PCM_16", "FLOAT"] = Field("FLOAT")

    @model_validator(mode="after")
    def validate_ranges(self) -> "CorpusSpec":
        if self.f0_min >= self.f0_max:
            raise ValueError("f0_min 必须小于 f0_max")
        if self.harmonics_min > self.harmonics_max:
            raise ValueError("harmonics_min 不能大于 harmonics_max")
        if not self.noise_colors:
            raise ValueError("noise_colors 不能为空")
        if not self.snr_db or not self.test_snr_db:
            raise ValueError("snr_db / test_snr_db 不能为空")
        return self


class RunConfig(BaseModel):
    """
    完整运行配置

    YAML 文件按段组织，命令行 --set section.key=value 覆盖文件值。
    """

    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {
                "path": {"sigma_min": 1e-4, "sigma_max": 0.5},
                "train": {"steps": 20000, "lr": 1e-4},
                "sampler": {"mode": "mf", "nfe": 1},
            }
        },
    )

    frontend: FrontendConfig = Field(default_factory=FrontendConfig)
    path: PathConfig = Field(default_factory=PathConfig)
    field: FieldConfig = Field(default_factory=FieldConfig)
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    corpus: CorpusSpec = Field(default_factory=CorpusSpec)

    @classmethod
    def load(cls, path: Optional[Path] = None, overrides: Sequence[str] = ()) -> "RunConfig":
        """
        读取 YAML 配置并应用覆盖项

        Args:
            path: YAML 文件路径（None 时使用默认配置）
            overrides: "section.key=value" 形式的覆盖列表，value 按 YAML 语法解析

        Raises:
            ConfigError: 文件不存在、格式错误、未知键或取值非法
        """
        data: Dict[str, Any] = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"配置文件不存在: {path}")
            try:
                loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
            except yaml.YAMLError as e:
                raise ConfigError(f"配置文件解析失败: {e}") from e
            if loaded is not None and not isinstance(loaded, dict):
                raise ConfigError("配置文件顶层必须是按段组织的映射")
            data = loaded or {}

        for item in overrides:
            key, sep, raw = item.partition("=")
            parts = key.strip().split(".")
            if not sep or len(parts) != 2 or not all(parts):
                raise ConfigError(f"覆盖项格式应为 section.key=value: {item!r}")
            section, name = parts
            value = yaml.safe_load(raw) if raw.strip() else None
            block = data.setdefault(section, {})
            if not isinstance(block, dict):
                raise ConfigError(f"配置段 {section} 必须是映射")
            block[name] = value

        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"配置校验失败:\n{e}") from e

    def dump(self, path: Path) -> Path:
        """写出完整解析后的配置（YAML）"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = self.model_dump(mode="json")
        path.write_text(yaml.safe_dump(payload, sort_keys=False, allow_unicode=True), encoding="utf-8")
        return path


# ==================== 报告结构 ====================


class LossReport(BaseModel):
    """单步训练损失报告"""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    step: int = Field(..., ge=0)
    cfm_loss: float = Field(..., description="瞬时分支（对角样本）损失")
    mfse_loss: float = Field(..., description="均值分支（非对角样本）损失")
    total: float = Field(..., description="cfm_loss + w_mean · mfse_loss")
    mean_weight: float = Field(..., ge=0, description="当前课程下的均值分支权重 w_mean")
    span_exponent: float = Field(..., gt=0, description="当前跨度采样指数")
    fraction_clipped: float = Field(0.0, ge=0, le=1, description="JVP 项被裁剪的样本比例")
    mean_span: float = Field(0.0, ge=0, description="批内平均 Δ=t-r")
    grad_norm: Optional[float] = Field(None, description="裁剪前的全局梯度范数")

    @field_validator("cfm_loss", "mfse_loss", "total")
    @classmethod
    def validate_finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("损失必须为有限值")
        return v


class ManifestEntry(BaseModel):
    """语料清单条目（JSON-lines 一行）"""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    id: str
    clean_path: str
    noisy_path: str
    snr_db: float = Field(..., description="请求的信噪比；inf 表示无噪声")
    split: Literal["train", "val", "test", "external"] = "external"


class UtteranceMetrics(BaseModel):
    """单条语句的评测结果"""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    id: str
    si_sdr_db: float
    spectral_log_mse: float
    snr_db: float
    noisy_si_sdr_db: float = Field(..., description="带噪输入的 SI-SDR（Noisy 基线）")
    nfe: int = Field(0, ge=0)
    rtf: Optional[float] = Field(None, gt=0)


class MetricsReport(BaseModel):
    """语料级评测报告"""

    system: str = Field(..., description="系统名称，如 MeanFlowSE / FlowSE")
    mode: str = "mf"
    nfe: int = Field(0, ge=0)
    utterances: List[UtteranceMetrics] = Field(default_factory=list)

    def _mean(self, name: str) -> float:
        values = [getattr(u, name) for u in self.utterances if getattr(u, name) is not None]
        return float(sum(values) / len(values)) if values else float("nan")

    @property
    def mean_si_sdr_db(self) -> float:
        return self._mean("si_sdr_db")

    @property
    def mean_noisy_si_sdr_db(self) -> float:
        return self._mean("noisy_si_sdr_db")

    @property
    def mean_spectral_log_mse(self) -> float:
        return self._mean("spectral_log_mse")

    @property
    def mean_snr_db(self) -> float:
        return self._mean("snr_db")

    @property
    def mean_rtf(self) -> float:
        return self._mean("rtf")

    def summary(self) -> Dict[str, float]:
        return {
            "si_sdr_db": self.mean_si_sdr_db,
            "noisy_si_sdr_db": self.mean_noisy_si_sdr_db,
            "spectral_log_mse": self.mean_spectral_log_mse,
            "snr_db": self.mean_snr_db,
            "rtf": self.mean_rtf,
        }

    def to_frame(self) -> pd.DataFrame:
        """逐语句指标表"""
        return pd.DataFrame([u.model_dump() for u in self.utterances])

    def to_table(self) -> str:
        """
        对齐的纯文本汇总表：Noisy 基线行 + 系统行
        """
        rows = [
            {"System": "Noisy", "NFE": "-", "SI-SDR": f"{self.mean_noisy_si_sdr_db:.3f}", "RTF": "-"},
            {
                "System": self.system,
                "NFE": str(self.nfe),
                "SI-SDR": f"{self.mean_si_sdr_db:.3f}",
                "RTF": "-" if math.isnan(self.mean_rtf) else f"{self.mean_rtf:.4f}",
            },
        ]
        return pd.DataFrame(rows).to_string(index=False)

    def save(self, out_dir: Path) -> Dict[str, Path]:
        """写出 report.json 与 report.txt"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = self.model_dump(mode="json")
        payload["summary"] = self.summary()
        json_path = out_dir / "report.json"
        txt_path = out_dir / "report.txt"
        json_path.write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")
        txt_path.write_text(self.to_table() + "\n", encoding="utf-8")
        return {"json": json_path, "txt": txt_path}


class RunRecord(BaseModel):
    """单次增强运行记录（JSON-lines）"""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    utterance_id: str
    mode: str
    nfe: int = Field(..., ge=1)
    rtf: float = Field(..., gt=0)
    metrics: Dict[str, float] = Field(default_factory=dict)


class BenchRow(BaseModel):
    """NFE/RTF 基准表的一行"""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    system: str
    nfe: int = Field(..., ge=1)
    si_sdr_db: float
    rtf: float = Field(..., gt=0)


class VerifyCheck(BaseModel):
    """解析预言机检查结果"""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    name: str
    passed: bool
    value: float = Field(..., description="实测误差或统计量")
    threshold: float = Field(..., description="通过阈值")
    seconds: float = Field(..., ge=0)
    detail: str = ""


class VerifyReport(BaseModel):
    """verify 子命令的汇总报告"""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    checks: List[VerifyCheck] = Field(default_factory=list)
    quick: bool = False
    mutation: Optional[str] = None

    @computed_field
    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)
