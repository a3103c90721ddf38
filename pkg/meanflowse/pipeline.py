"""
MeanFlowSE 编排层

把 tools/ 下的计算模块串成命令级流程：
- generate_corpus: 合成语料并回读校验 SNR
- train_model:     读取语料、训练、写检查点
- enhance_file:    单文件增强（单步 / 多步位移 / 欧拉基线）
- run_bench:       NFE / RTF 基准表
- verify:          解析预言机检查集

公共函数遵循 {"success": bool, ...} 的结果字典约定，失败时带 "error"。
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from meanflowse.errors import ConfigError, MeanFlowError
from meanflowse.models import (
    BenchRow,
    FieldConfig,
    ObjectiveConfig,
    PathConfig,
    RunConfig,
    RunRecord,
    SamplerConfig,
    VerifyCheck,
    VerifyReport,
)
from meanflowse.tools.conditional_path import PathSample, reverse_init
from meanflowse.tools.field_network import (
    AnalyticAverageField,
    AverageField,
    FieldQuery,
    MeanFlowNet,
    init_params,
    load_checkpoint,
)
from meanflowse.tools.metrics import evaluate_corpus, snr_db
from meanflowse.tools.objective import PathBatch, cfm_loss, make_batch, mfse_loss, mfse_target
from meanflowse.tools.sampler import (
    EnhanceResult,
    SamplerSchedule,
    enhance_multi_step,
    enhance_waveform,
    euler_fm,
    measure_rtf,
)
from meanflowse.tools.signal_frontend import Waveform, read_wav, write_wav
from meanflowse.tools.tensor_core import GradTape, Tensor, default_dtype
from meanflowse.tools.toy_data import build_frame_corpus, load_manifest, load_pair, make_affine_problem, write_corpus
from meanflowse.tools.trainer import fit, load_state

load_dotenv()

logger = logging.getLogger(__name__)

CORPUS_DIR = "corpus"
TRAIN_DIR = "train"
BENCH_DIR = "bench"
VERIFY_DIR = "verify"
RESOLVED_CONFIG = "resolved_config.yaml"
SNR_TOLERANCE_DB = 0.1


def worker_count() -> int:
    """MFSE_THREADS 限定的并发度（默认 CPU 核数）"""
    raw = os.getenv("MFSE_THREADS")
    if raw is None or not raw.strip():
        return max(1, os.cpu_count() or 1)
    try:
        value = int(raw)
    except ValueError as e:
        raise ConfigError(f"MFSE_THREADS 必须是正整数，实际 {raw!r}") from e
    if value < 1:
        raise ConfigError(f"MFSE_THREADS 必须是正整数，实际 {raw!r}")
    return value


def default_checkpoint(workdir: Union[str, Path]) -> Path:
    return Path(workdir) / TRAIN_DIR / "checkpoints" / "final.mfnn"


def load_field(checkpoint: Union[str, Path], use_raw: bool = False) -> MeanFlowNet:
    """
    从检查点构造网络；默认使用 EMA 权重

    Raises:
        MeanFlowError: 检查点不存在或要求 EMA 但未保存
    """
    path = Path(checkpoint)
    if not path.exists():
        raise MeanFlowError(f"检查点不存在: {path}")
    ckpt = load_checkpoint(path)
    if use_raw:
        return MeanFlowNet(ckpt.params)
    if ckpt.ema is None:
        raise MeanFlowError(f"{path} 不含 EMA 参数（可使用 --use-raw）")
    return MeanFlowNet(ckpt.ema)


class EnhancementPipeline:
    """
    端到端增强管道：波形 → 增强波形

    每次调用使用同一随机子流，同一输入的输出可复现。
    """

    def __init__(
        self,
        field: AverageField,
        config: RunConfig,
        sampler: Optional[SamplerConfig] = None,
        seed: Optional[int] = None,
    ):
        self.field = field
        self.config = config
        self.sampler = sampler or config.sampler
        self.seed = config.train.seed if seed is None else seed

    @property
    def system(self) -> str:
        return "MeanFlowSE" if self.sampler.mode == "mf" else "Euler"

    def __call__(self, noisy: Waveform) -> EnhanceResult:
        rng = np.random.default_rng([self.seed, self.sampler.nfe])
        return enhance_waveform(
            noisy, self.field, self.sampler, self.config.path, self.config.frontend, rng
        )


# ==================== gen-corpus ====================


def generate_corpus(config: RunConfig, workdir: Union[str, Path], force: bool = False) -> Dict[str, Any]:
    """
    生成合成语料并回读校验每条语句的实际 SNR

    Returns:
        {"success", "manifest", "counts", "max_snr_error_db"} 或 {"success": False, "error"}
    """
    try:
        out_dir = Path(workdir) / CORPUS_DIR
        manifest = write_corpus(config.corpus, out_dir, config.frontend, force=force, workers=worker_count())
        entries = load_manifest(manifest)

        worst = 0.0
        for entry in entries:
            if math.isinf(entry.snr_db):
                continue
            pair = load_pair(entry, out_dir)
            worst = max(worst, abs(snr_db(pair.clean, pair.noisy) - entry.snr_db))
        config.dump(out_dir / RESOLVED_CONFIG)

        counts = {split: sum(e.split == split for e in entries) for split in ("train", "val", "test")}
        if worst > SNR_TOLERANCE_DB:
            return {
                "success": False,
                "error": f"生成语料的 SNR 偏差 {worst:.4f} dB 超过 {SNR_TOLERANCE_DB} dB",
            }
        return {
            "success": True,
            "manifest": str(manifest),
            "counts": counts,
            "max_snr_error_db": round(worst, 6),
        }
    except MeanFlowError as e:
        return {"success": False, "error": str(e)}


# ==================== train ====================


def train_model(
    config: RunConfig,
    workdir: Union[str, Path],
    resume: Optional[Union[str, Path]] = None,
    progress: bool = True,
) -> Dict[str, Any]:
    """
    在 workdir/corpus 的训练划分上训练

    Returns:
        {"success", "checkpoint", "steps", "final_loss", "log"}
    """
    try:
        workdir = Path(workdir)
        corpus_dir = workdir / CORPUS_DIR
        manifest = corpus_dir / "manifest.jsonl"
        train_pairs = [load_pair(e, corpus_dir) for e in load_manifest(manifest, "train")]
        val_pairs = [load_pair(e, corpus_dir) for e in load_manifest(manifest, "val")]
        corpus = build_frame_corpus(train_pairs, config.frontend)

        out_dir = workdir / TRAIN_DIR
        out_dir.mkdir(parents=True, exist_ok=True)
        config.dump(out_dir / RESOLVED_CONFIG)

        state = None
        if resume is not None:
            state = load_state(resume)
            logger.info(f"从 {resume} 续训 (step={state.step})")
        state = fit(config, corpus, out_dir, state=state, val_pairs=val_pairs, progress=progress)

        final_loss = state.history[-1].total if state.history else None
        return {
            "success": True,
            "checkpoint": str(out_dir / "checkpoints" / "final.mfnn"),
            "steps": state.step,
            "final_loss": final_loss,
            "log": str(out_dir / "train_log.jsonl"),
        }
    except MeanFlowError as e:
        return {"success": False, "error": str(e)}


# ==================== enhance ====================


def enhance_file(
    config: RunConfig,
    checkpoint: Union[str, Path],
    input_path: Union[str, Path],
    output_path: Union[str, Path],
    use_raw: bool = False,
) -> Dict[str, Any]:
    """
    增强单个 WAV 文件，并在输出目录追加一条 RunRecord（enhance_runs.jsonl）

    Returns:
        {"success", "output", "record", "report"}
    """
    try:
        field = load_field(checkpoint, use_raw)
        noisy = read_wav(input_path)
        pipeline = EnhancementPipeline(field, config)
        result = pipeline(noisy)

        output_path = Path(output_path)
        write_wav(output_path, result.waveform, config.corpus.wav_subtype)
        config.dump(output_path.parent / RESOLVED_CONFIG)

        record = RunRecord(
            utterance_id=Path(input_path).stem,
            mode=config.sampler.mode,
            nfe=result.nfe,
            rtf=result.rtf,
            metrics={
                "duration_s": noisy.duration_s,
                "wall_seconds": result.wall_seconds,
                "output_peak": result.waveform.peak,
            },
        )
        report = output_path.parent / "enhance_runs.jsonl"
        with open(report, "a", encoding="utf-8") as f:
            f.write(record.model_dump_json() + "\n")
        logger.info(f"增强完成: {output_path} (NFE={result.nfe}, RTF={result.rtf:.4f})")
        return {"success": True, "output": str(output_path), "record": record, "report": str(report)}
    except MeanFlowError as e:
        return {"success": False, "error": str(e)}


# ==================== bench ====================


def bench_table(rows: Sequence[BenchRow], noisy_si_sdr_db: float) -> str:
    """Noisy 基线 + 各系统行的对齐文本表"""
    records = [{"System": "Noisy", "NFE": "-", "SI-SDR": f"{noisy_si_sdr_db:.3f}", "RTF": "-"}]
    records += [
        {"System": r.system, "NFE": str(r.nfe), "SI-SDR": f"{r.si_sdr_db:.3f}", "RTF": f"{r.rtf:.4f}"}
        for r in rows
    ]
    return pd.DataFrame(records).to_string(index=False)


def _bench_one(
    field: AverageField, config: RunConfig, sampler: SamplerConfig, entries, corpus_dir: Path, out_dir: Path
) -> Tuple[BenchRow, float]:
    pipeline = EnhancementPipeline(field, config, sampler)
    report = evaluate_corpus(
        entries, pipeline, corpus_dir, config.frontend, pipeline.system, sampler.mode, sampler.nfe, worker_count()
    )
    report.save(out_dir / f"{pipeline.system.lower()}_nfe{sampler.nfe}")
    sample_wave = load_pair(entries[0], corpus_dir).noisy
    timed = measure_rtf(sample_wave, pipeline, sampler.warmup_runs, sampler.timed_runs)
    row = BenchRow(system=pipeline.system, nfe=timed.nfe, si_sdr_db=report.mean_si_sdr_db, rtf=timed.rtf)
    return row, report.mean_noisy_si_sdr_db


def run_bench(
    config: RunConfig,
    workdir: Union[str, Path],
    checkpoint: Optional[Union[str, Path]] = None,
    use_raw: bool = False,
) -> Dict[str, Any]:
    """
    测试集上的质量 / 效率基准

    MeanFlowSE 位移采样按 sampler.bench_nfe，欧拉基线按 sampler.bench_euler_nfe
    （同一网络经瞬时视图驱动）。写出 bench.json 与 bench.txt。

    Returns:
        {"success", "rows", "table", "rtf_monotone", "json", "txt"}
    """
    try:
        workdir = Path(workdir)
        field = load_field(checkpoint or default_checkpoint(workdir), use_raw)
        corpus_dir = workdir / CORPUS_DIR
        entries = load_manifest(corpus_dir / "manifest.jsonl", "test")
        if not entries:
            return {"success": False, "error": "测试划分为空，无法运行基准"}
        out_dir = workdir / BENCH_DIR
        out_dir.mkdir(parents=True, exist_ok=True)
        config.dump(out_dir / RESOLVED_CONFIG)

        rows: List[BenchRow] = []
        noisy = float("nan")
        plan = [SamplerConfig(**{**config.sampler.model_dump(), "mode": "mf", "nfe": n}) for n in config.sampler.bench_nfe]
        plan += [
            SamplerConfig(**{**config.sampler.model_dump(), "mode": "euler", "nfe": n})
            for n in config.sampler.bench_euler_nfe
        ]
        for sampler in plan:
            row, noisy = _bench_one(field, config, sampler, entries, corpus_dir, out_dir)
            rows.append(row)
            logger.info(f"{row.system} NFE={row.nfe}: SI-SDR {row.si_sdr_db:.3f} dB, RTF {row.rtf:.4f}")

        mf_rtf = [r.rtf for r in sorted((r for r in rows if r.system == "MeanFlowSE"), key=lambda r: r.nfe)]
        monotone = all(a <= b for a, b in zip(mf_rtf, mf_rtf[1:]))
        if not monotone:
            logger.warning(f"RTF 未随 NFE 单调增加: {mf_rtf}")

        table = bench_table(rows, noisy)
        json_path = out_dir / "bench.json"
        txt_path = out_dir / "bench.txt"
        payload = {
            "noisy_si_sdr_db": noisy,
            "rows": [r.model_dump(mode="json") for r in rows],
            "rtf_monotone": monotone,
        }
        json_path.write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")
        txt_path.write_text(table + "\n", encoding="utf-8")
        return {
            "success": True,
            "rows": rows,
            "table": table,
            "rtf_monotone": monotone,
            "json": str(json_path),
            "txt": str(txt_path),
        }
    except MeanFlowError as e:
        return {"success": False, "error": str(e)}


# ==================== verify ====================


class SignFlippedField(AverageField):
    """全导数项取反的包装场，供 verify --mutation sign 使用；前向求值不变"""

    def __init__(self, inner: AverageField):
        self.inner = inner

    def __call__(self, x: Tensor, r: Tensor, t: Tensor, y: Tensor) -> Tensor:
        return self.inner(x, r, t, y)

    def parameters(self) -> List[Tensor]:
        return self.inner.parameters()

    def forward_with_jvp(
        self, q: FieldQuery, dx: np.ndarray, dt: Any = 1.0
    ) -> Tuple[np.ndarray, np.ndarray]:
        u, du = self.inner.forward_with_jvp(q, dx, dt)
        return u, -du

    def finite_difference_total_derivative(
        self, q: FieldQuery, dx: np.ndarray, dt: Any = 1.0, h: float = 1e-3
    ) -> np.ndarray:
        return -self.inner.finite_difference_total_derivative(q, dx, dt, h)


Basis = Callable[[Tensor, Tensor, Tensor], Tensor]


class CoefficientField(AverageField):
    """u = Σ θ_k·φ_k(x, r, t)：基函数固定，系数可学习；不动点检验用"""

    def __init__(self, basis: Sequence[Basis], theta: Optional[Sequence[float]] = None):
        self.basis = list(basis)
        theta = [0.0] * len(self.basis) if theta is None else list(theta)
        if len(theta) != len(self.basis):
            raise ValueError(f"系数个数 {len(theta)} 与基函数个数 {len(self.basis)} 不一致")
        self.theta = [Tensor(np.full((1, 1), float(v))) for v in theta]

    def parameters(self) -> List[Tensor]:
        return list(self.theta)

    def coefficients(self) -> np.ndarray:
        return np.array([float(p.data.reshape(-1)[0]) for p in self.theta])

    def __call__(self, x: Tensor, r: Tensor, t: Tensor, y: Tensor) -> Tensor:
        out = self.theta[0] * self.basis[0](x, r, t)
        for theta, phi in zip(self.theta[1:], self.basis[1:]):
            out = out + theta * phi(x, r, t)
        return out


def linear_time_field(theta: Sequence[float] = (0.0, 0.0)) -> CoefficientField:
    """u = θ0 + θ1·(t + r)，与 x 无关"""
    return CoefficientField([lambda x, r, t: x * 0.0 + 1.0, lambda x, r, t: t + r], theta)


def affine_split_field(field: AnalyticAverageField) -> CoefficientField:
    """
    仿射场平均速度拆成 x 相关部分 a·h0·x 与 x 无关部分 u(0, r, t)；
    系数 (1, 1) 即精确平均场
    """
    state_part = AnalyticAverageField(field.a, np.zeros_like(field.b))

    def drift(x: Tensor, r: Tensor, t: Tensor) -> Tensor:
        zeros = Tensor(np.zeros(x.shape))
        return field(zeros, r, t, zeros)

    return CoefficientField([lambda x, r, t: state_part(x, r, t, x), drift])


def _random_head_net(cfg: FieldConfig, dim: int, seed: int) -> MeanFlowNet:
    """输出头随机化的网络（初始化时输出头为零，导数检验无意义）"""
    params = init_params(cfg, dim, seed=seed)
    rng = np.random.default_rng(seed + 1)
    params.assign({
        "head.weight": rng.normal(0.0, 1.0 / math.sqrt(cfg.width), (cfg.width, dim)),
        "head.bias": rng.normal(0.0, 0.1, dim),
    })
    return MeanFlowNet(params)


def check_identity_residual(flip_sign: bool = False) -> Tuple[float, str]:
    """解析仿射场上 u 与 v - (t-r)·du/dt 的最大残差（10×10×10 网格）"""
    field = make_affine_problem(dim=2, seed=0).field
    target_field = SignFlippedField(field) if flip_sign else field
    xs, ts, fr = np.linspace(-2.0, 2.0, 10), np.linspace(0.1, 1.0, 10), np.linspace(0.0, 0.9, 10)
    X, T, F = np.meshgrid(xs, ts, fr, indexing="ij")
    t = T.reshape(-1)
    r = t * F.reshape(-1)
    x = X.reshape(-1, 1) + np.array([[0.0, 0.5]])
    q = FieldQuery(x=x, r=r, t=t, y=np.zeros_like(x))

    v = field.velocity(x, t)
    sample = PathSample(t=t, z=np.zeros_like(x), mu_t=x, sigma_t=np.zeros(()), x_t=x, v_t=v)
    cfg = ObjectiveConfig(c=1.0, jacobian_clip=float("inf"))
    target, _ = mfse_target(sample, q, target_field, cfg)
    residual = float(np.max(np.abs(field.forward(q) - target.data)))

    engine = field.forward_with_jvp(q, v, 1.0)[1]
    closed = field.total_derivative(x, r, t)
    return residual, f"JVP 与闭式全导数最大差 {np.max(np.abs(engine - closed)):.2e}"


def check_diagonal_reduction(seed: int = 0) -> Tuple[float, str]:
    """r = t 时目标逐位等于 v_t，总损失逐位等于 CFM 损失"""
    dim, batch_size, segment = 8, 4, 3
    net = _random_head_net(FieldConfig(width=32, n_blocks=2, embed_dim=16), dim, seed)
    rng = np.random.default_rng(seed)
    x1 = rng.normal(size=(batch_size, segment, dim))
    y = rng.normal(size=(batch_size, segment, dim))
    t = rng.uniform(0.1, 0.9, batch_size)
    batch = make_batch(x1, y, t.copy(), t, PathConfig(), rng)

    sample = PathSample(
        t=batch.t, z=np.zeros_like(batch.x_t), mu_t=batch.x_t, sigma_t=np.zeros(()),
        x_t=batch.x_t, v_t=batch.v_t,
    )
    target, _ = mfse_target(sample, batch.query(), net, ObjectiveConfig())
    v = batch.rows()[4]
    total, _ = mfse_loss(batch, net, ObjectiveConfig(), step=100)
    cfm = cfm_loss(batch, net)

    target_equal = np.array_equal(target.data, v)
    loss_equal = total.item() == cfm.item()
    value = float(np.max(np.abs(target.data - v))) + abs(total.item() - cfm.item())
    if not (target_equal and loss_equal):
        value = max(value, np.finfo(np.float64).tiny)
    return value, f"目标逐位相等={target_equal}，损失逐位相等={loss_equal}"


def check_jvp_vs_fd(cfg: FieldConfig, dim: int, n: int, h: float, seed: int = 0) -> Tuple[float, str]:
    """JVP 与中心差分全导数的相对误差 ‖jvp - fd‖ / ‖jvp‖"""
    net = _random_head_net(cfg, dim, seed)
    rng = np.random.default_rng(seed + 2)
    t = rng.uniform(0.0, 1.0, n)
    r = t * rng.uniform(0.0, 1.0, n)
    x = rng.normal(size=(n, dim))
    q = FieldQuery(x=x, r=r, t=t, y=rng.normal(size=(n, dim)))
    dx = rng.normal(size=(n, dim))

    _, du = net.forward_with_jvp(q, dx, 1.0)
    fd = net.finite_difference_total_derivative(q, dx, 1.0, h)
    rel = float(np.linalg.norm(du - fd) / np.linalg.norm(du))
    return rel, f"{n} 个查询，dim={dim}，h={h:g}"


def check_exact_field_invariance(seed: int = 0) -> Tuple[float, str]:
    """真实平均场下 N ∈ {1,2,4,8} 的位移采样结果一致，且等于闭式轨迹终点"""
    problem = make_affine_problem(dim=2, seed=seed)
    cfg = PathConfig()
    y = problem.y + np.random.default_rng(seed).normal(size=problem.y.shape)
    z = np.random.default_rng(seed + 1).normal(size=y.shape)

    outputs = []
    for n in (1, 2, 4, 8):
        schedule = SamplerSchedule.displacement(n, cfg.t_rev, cfg.t_eps)
        outputs.append(enhance_multi_step(y, problem.field, schedule, cfg, z=z).enhanced)
    spread = max(float(np.max(np.abs(o - outputs[0]))) for o in outputs)

    x_rev = reverse_init(y, cfg.t_rev, cfg=cfg, z=z)
    expected = problem.field.trajectory(x_rev, cfg.t_rev, cfg.t_eps)
    rel = float(np.max(np.abs(outputs[0] - expected)) / np.max(np.abs(expected)))
    return max(spread, rel), f"N 间最大差 {spread:.2e}，相对闭式终点 {rel:.2e}"


def check_euler_order(seed: int = 3, steps: Tuple[int, int] = (64, 128)) -> Tuple[float, str]:
    """解析瞬时场上欧拉法的收敛阶 log2(e_N / e_2N)"""
    problem = make_affine_problem(dim=2, seed=seed)
    field = problem.field
    x1 = problem.x
    x0 = field.trajectory(x1, 1.0, 0.0)

    def velocity(x: np.ndarray, s: float, y: np.ndarray) -> np.ndarray:
        return field.velocity(x, s)

    errors = []
    for n in steps:
        out = euler_fm(np.zeros_like(x0), velocity, SamplerSchedule.euler(n), x0=x0).enhanced
        errors.append(float(np.max(np.abs(out - x1))))
    order = math.log2(errors[0] / errors[1])
    return order, f"误差 {errors[0]:.3e} (N={steps[0]}) → {errors[1]:.3e} (N={steps[1]})"


_FIXED_POINT_OBJECTIVE = ObjectiveConfig(
    c=1.0, mean_branch_weight_max=1.0, diagonal_fraction=0.0, warmup_steps=0, jacobian_clip=float("inf")
)


def _loss_gradient(field: AverageField, batch: PathBatch, cfg: ObjectiveConfig) -> np.ndarray:
    params = field.parameters()
    with GradTape() as tape:
        tape.watch(*params)
        total, _ = mfse_loss(batch, field, cfg, step=0)
    return np.array([float(g.reshape(-1)[0]) for g in tape.gradient(total, params)])


def _set_coefficients(field: CoefficientField, values: np.ndarray) -> None:
    for p, value in zip(field.parameters(), values):
        p.data = np.full((1, 1), float(value))


def fit_coefficients(
    field: CoefficientField,
    batch: PathBatch,
    cfg: ObjectiveConfig = _FIXED_POINT_OBJECTIVE,
    flip_sign: bool = False,
    iterations: int = 3,
) -> np.ndarray:
    """
    在均值分支损失上训练系数场，返回最终系数

    目标截断梯度时损失梯度是 θ 的仿射函数：每步用单位增量量出梯度的雅可比，
    再做一次牛顿步。flip_sign 时目标中的全导数项取反。
    """
    model = SignFlippedField(field) if flip_sign else field
    k = len(field.parameters())
    for _ in range(iterations):
        theta = field.coefficients()
        g0 = _loss_gradient(model, batch, cfg)
        jac = np.empty((k, k))
        for j in range(k):
            _set_coefficients(field, theta + np.eye(k)[j])
            jac[:, j] = _loss_gradient(model, batch, cfg) - g0
        _set_coefficients(field, theta - np.linalg.solve(jac, g0))
    return field.coefficients()


def _fixed_point_times(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
    t = rng.uniform(0.05, 1.0, n)
    return t * rng.uniform(0.0, 0.95, n), t


def fixed_point_affine(flip_sign: bool = False, seed: int = 0, n: int = 64) -> Tuple[float, np.ndarray]:
    """仿射问题（a ≠ 0）上拆分场 θ0·a·h0·x + θ1·u(0, r, t) 的系数误差，精确解为 (1, 1)"""
    problem = make_affine_problem(dim=2, seed=seed)
    rng = np.random.default_rng(seed)
    r, t = _fixed_point_times(rng, n)
    x = rng.normal(0.0, 1.0, (n, problem.field.dim))
    v = problem.field.velocity(x, t)
    batch = PathBatch(
        x_t=x.reshape(n, 1, -1), v_t=v.reshape(n, 1, -1), y=np.zeros((n, 1, x.shape[1])), r=r, t=t
    )
    theta = fit_coefficients(affine_split_field(problem.field), batch, flip_sign=flip_sign)
    return float(np.max(np.abs(theta - 1.0))), theta


def fixed_point_linear_time(
    flip_sign: bool = False, coeffs: Tuple[float, float] = (0.7, -1.3), seed: int = 0, n: int = 64
) -> Tuple[float, np.ndarray]:
    """a = 0、v = b0 + b1·τ 时线性场 θ0 + θ1·(t+r) 的系数误差，精确解为 (b0, b1/2)"""
    b0, b1 = coeffs
    r, t = _fixed_point_times(np.random.default_rng(seed), n)
    zeros = np.zeros((n, 1, 1))
    batch = PathBatch(x_t=zeros, v_t=(b0 + b1 * t).reshape(n, 1, 1), y=zeros.copy(), r=r, t=t)
    theta = fit_coefficients(linear_time_field(), batch, flip_sign=flip_sign)
    return float(np.max(np.abs(theta - np.array([b0, b1 / 2.0])))), theta


def check_fixed_point(flip_sign: bool = False, seed: int = 0) -> Tuple[float, str]:
    """均值分支损失的不动点即精确平均场：仿射问题与 a = 0 问题的系数误差取大者"""
    affine_error, affine_theta = fixed_point_affine(flip_sign, seed)
    linear_error, linear_theta = fixed_point_linear_time(flip_sign, seed=seed)
    detail = (
        f"仿射 θ = ({affine_theta[0]:.6f}, {affine_theta[1]:.6f})，期望 (1, 1)；"
        f"a = 0 θ = ({linear_theta[0]:.6f}, {linear_theta[1]:.6f})"
    )
    return max(affine_error, linear_error), detail


def _below(limit: float) -> Callable[[float], bool]:
    return lambda value: value < limit


def _run_check(name: str, threshold: float, fn: Callable[[], Tuple[float, str]], within: Callable[[float], bool]) -> VerifyCheck:
    started = time.perf_counter()
    try:
        value, detail = fn()
        passed = bool(np.isfinite(value)) and within(value)
    except Exception as e:
        logger.exception(f"检查 {name} 出错")
        value, detail, passed = float("nan"), f"{type(e).__name__}: {e}", False
    seconds = time.perf_counter() - started
    check = VerifyCheck(name=name, passed=passed, value=value, threshold=threshold, seconds=seconds, detail=detail)
    logger.info(f"[{'PASS' if passed else 'FAIL'}] {name}: {value:.3e} (阈值 {threshold:g}, {seconds:.2f}s)")
    return check


def run_verify(
    config: Optional[RunConfig] = None, quick: bool = False, mutation: Optional[str] = None
) -> VerifyReport:
    """
    运行解析预言机检查集

    quick 只跑亚秒级子集（JVP 检验改用小网络）；mutation="sign" 翻转目标中
    全导数项的符号，恒等式残差与不动点检查必须失败。
    """
    if mutation not in (None, "sign"):
        raise ConfigError(f"未知的变异: {mutation}")
    config = config or RunConfig()
    flip = mutation == "sign"

    with default_dtype("float64"):
        checks = [
            _run_check("identity_residual", 1e-8, lambda: check_identity_residual(flip), _below(1e-8)),
            _run_check("diagonal_reduction", 0.0, check_diagonal_reduction, lambda v: v == 0.0),
        ]
        if quick:
            small = FieldConfig(width=32, n_blocks=2, embed_dim=16)
            checks.append(
                _run_check("jvp_vs_fd", 1e-3, lambda: check_jvp_vs_fd(small, 16, 10, 1e-3), _below(1e-3))
            )
        else:
            dim = 2 * config.frontend.n_bins
            checks.append(
                _run_check("jvp_vs_fd", 1e-3, lambda: check_jvp_vs_fd(config.field, dim, 100, 1e-3), _below(1e-3))
            )
            checks.append(
                _run_check(
                    "jvp_vs_fd_fine", 1e-4, lambda: check_jvp_vs_fd(config.field, dim, 100, 1e-4), _below(1e-4)
                )
            )
        checks.append(_run_check("exact_field_invariance", 1e-8, check_exact_field_invariance, _below(1e-8)))
        checks.append(
            _run_check("euler_order", 1.0, check_euler_order, lambda order: 0.9 <= order <= 1.1)
        )
        if not quick:
            checks.append(_run_check("fixed_point", 1e-3, lambda: check_fixed_point(flip), _below(1e-3)))
    return VerifyReport(checks=checks, quick=quick, mutation=mutation)


def verify(
    config: RunConfig,
    workdir: Union[str, Path],
    quick: bool = False,
    mutation: Optional[str] = None,
) -> Dict[str, Any]:
    """
    运行检查集并写出 verify/verify.json

    Returns:
        {"success", "passed", "report", "json"}；success 表示检查集本身运行完成
    """
    try:
        report = run_verify(config, quick, mutation)
        out_dir = Path(workdir) / VERIFY_DIR
        out_dir.mkdir(parents=True, exist_ok=True)
        config.dump(out_dir / RESOLVED_CONFIG)
        json_path = out_dir / "verify.json"
        json_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
        return {"success": True, "passed": report.passed, "report": report, "json": str(json_path)}
    except MeanFlowError as e:
        return {"success": False, "error": str(e)}
