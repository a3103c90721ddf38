"""
trainer - 优化循环

Adam（带偏差修正）+ 全局梯度范数裁剪 + EMA 影子权重，检查点与确定性续训。
每个路径样本的随机数来自 (seed, step, 样本序号) 子流，批次与生成顺序无关。
"""

from __future__ import annotations

import logging
import math
import queue
import threading
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from meanflowse.errors import CorpusError, MeanFlowError, NonFiniteError
from meanflowse.models import LossReport, ObjectiveConfig, RunConfig, SamplerConfig, TrainConfig
from meanflowse.tools.field_network import (
    FieldParams,
    MeanFlowNet,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from meanflowse.tools.metrics import si_sdr
from meanflowse.tools.objective import PathBatch, make_batch, mfse_loss, sample_times
from meanflowse.tools.sampler import enhance_waveform
from meanflowse.tools.tensor_core import GradTape, default_dtype
from meanflowse.tools.toy_data import FrameCorpus, PairedUtterance

logger = logging.getLogger(__name__)


@dataclass
class TrainState:
    """
    训练状态

    Attributes:
        params: 当前参数
        ema: EMA 影子参数（初始与 params 相同）
        adam_m / adam_v: Adam 一阶 / 二阶矩
        step: 已完成的步数
        seed: 批次随机子流的根种子
    """

    params: FieldParams
    ema: FieldParams
    adam_m: Dict[str, np.ndarray]
    adam_v: Dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    history: List[LossReport] = dc_field(default_factory=list)


def init_state(cfg: RunConfig, dim: int) -> TrainState:
    params = init_params(cfg.field, dim, dtype=cfg.train.precision)
    zeros = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    return TrainState(
        params=params,
        ema=params.copy(),
        adam_m=zeros,
        adam_v={k: v.copy() for k, v in zeros.items()},
        step=0,
        seed=cfg.train.seed,
    )


# ==================== 更新规则 ====================


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """全局范数超过 max_norm 时整体缩放；返回 (裁剪后梯度, 裁剪前范数)"""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def apply_gradients(state: TrainState, grads: Dict[str, np.ndarray], cfg: TrainConfig) -> float:
    """
    先裁剪再做 Adam 更新，随后更新 EMA，步数加一

    Returns:
        裁剪前的全局梯度范数
    """
    grads, norm = clip_by_global_norm(grads, cfg.grad_clip_norm)
    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    for name, tensor in state.params.weights.items():
        g = grads[name]
        m = b1 * state.adam_m[name] + (1.0 - b1) * g
        v = b2 * state.adam_v[name] + (1.0 - b2) * g * g
        state.adam_m[name] = m
        state.adam_v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data = tensor.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

    decay = 1.0 - cfg.ema_decay
    for name, shadow in state.ema.weights.items():
        shadow.data = shadow.data + decay * (state.params.weights[name].data - shadow.data)

    state.step = t
    return norm


def train_step(
    state: TrainState,
    batch: PathBatch,
    objective_cfg: ObjectiveConfig,
    train_cfg: Optional[TrainConfig] = None,
) -> Tuple[TrainState, LossReport]:
    """
    一步训练：损失与梯度 → 裁剪 → Adam → EMA

    Raises:
        NonFiniteError: 损失或梯度出现 NaN/Inf（附批统计）
    """
    train_cfg = train_cfg or TrainConfig()
    net = MeanFlowNet(state.params)
    names = list(state.params.weights)
    params = state.params.trainable()

    with GradTape() as tape:
        tape.watch(*params)
        total, report = mfse_loss(batch, net, objective_cfg, state.step)
    grads = dict(zip(names, tape.gradient(total, params)))

    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteError(
            f"step {state.step}: 梯度非有限 ({', '.join(bad[:5])})；"
            f"batch max|x_t|={np.max(np.abs(batch.x_t)):.3e}，max|v_t|={np.max(np.abs(batch.v_t)):.3e}，"
            f"t∈[{batch.t.min():.3f}, {batch.t.max():.3f}]"
        )

    norm = apply_gradients(state, grads, train_cfg)
    report = report.model_copy(update={"grad_norm": norm})
    return state, report


# ==================== 批次 ====================


def draw_batch(corpus: FrameCorpus, step: int, cfg: RunConfig, seed: int) -> PathBatch:
    """
    第 step 步的训练批次

    第 i 个样本只依赖子流 (seed, step, i)：选语句、选起始帧、采样 (r, t) 与 z。
    """
    segment = cfg.train.segment_frames
    x1, y, z, r, t = [], [], [], [], []
    for i in range(cfg.train.batch_size):
        rng = np.random.default_rng([seed, step, i])
        k = int(rng.integers(len(corpus)))
        start = int(rng.integers(corpus.clean[k].shape[0] - segment + 1))
        x1.append(corpus.clean[k][start:start + segment])
        y.append(corpus.noisy[k][start:start + segment])
        if cfg.path.convention == "flowse":
            ti = rng.uniform(0.0, 1.0 - cfg.path.delta)
            ri = ti
        else:
            ri, ti = sample_times(step, cfg.objective, rng)
        r.append(ri)
        t.append(ti)
        z.append(rng.standard_normal((segment, corpus.dim)))
    dtype = np.dtype(cfg.train.precision)
    return make_batch(
        np.stack(x1).astype(dtype),
        np.stack(y).astype(dtype),
        np.array(r),
        np.array(t),
        cfg.path,
        z=np.stack(z).astype(dtype),
    )


class BatchPrefetcher:
    """后台线程按步序生成批次，放入有界队列"""

    _DONE = object()

    def __init__(self, corpus: FrameCorpus, cfg: RunConfig, seed: int, start: int, stop: int):
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(1, cfg.train.prefetch))
        self._stop = threading.Event()
        self._thread = threading.Thread(
            target=self._produce, args=(corpus, cfg, seed, start, stop), daemon=True
        )
        self._thread.start()

    def _produce(self, corpus: FrameCorpus, cfg: RunConfig, seed: int, start: int, stop: int) -> None:
        try:
            for step in range(start, stop):
                if self._stop.is_set():
                    return
                self._put(draw_batch(corpus, step, cfg, seed))
        except Exception as e:
            self._put(e)
        self._put(self._DONE)

    def _put(self, item) -> None:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def __iter__(self) -> Iterator[PathBatch]:
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5.0)


def _batches(corpus: FrameCorpus, cfg: RunConfig, seed: int, start: int, stop: int):
    if cfg.train.prefetch > 0:
        return BatchPrefetcher(corpus, cfg, seed, start, stop)
    return (draw_batch(corpus, step, cfg, seed) for step in range(start, stop))


# ==================== 检查点 ====================


def save_state(path: Union[str, Path], state: TrainState) -> Path:
    """参数、EMA、Adam 矩、步数与种子"""
    tensors = {f"adam_m/{k}": v for k, v in state.adam_m.items()}
    tensors.update({f"adam_v/{k}": v for k, v in state.adam_v.items()})
    return save_checkpoint(
        path, state.params, ema=state.ema, extra={"step": state.step, "seed": state.seed}, tensors=tensors
    )


def load_state(path: Union[str, Path]) -> TrainState:
    ckpt = load_checkpoint(path)
    if ckpt.ema is None:
        raise MeanFlowError(f"{path} 不含 EMA 参数，无法续训")
    adam_m = {k[len("adam_m/"):]: v for k, v in ckpt.tensors.items() if k.startswith("adam_m/")}
    adam_v = {k[len("adam_v/"):]: v for k, v in ckpt.tensors.items() if k.startswith("adam_v/")}
    if set(adam_m) != set(ckpt.params.weights):
        zeros = {k: np.zeros_like(t.data) for k, t in ckpt.params.weights.items()}
        adam_m, adam_v = zeros, {k: v.copy() for k, v in zeros.items()}
    return TrainState(
        params=ckpt.params,
        ema=ckpt.ema,
        adam_m=adam_m,
        adam_v=adam_v,
        step=int(ckpt.extra.get("step", 0)),
        seed=int(ckpt.extra.get("seed", 0)),
    )


# ==================== 验证 ====================


def validate(
    state: TrainState,
    pairs: Sequence[PairedUtterance],
    cfg: RunConfig,
    use_ema: bool = True,
) -> Dict[str, float]:
    """
    EMA 权重 + 单步推理，返回平均 SI-SDR 与相对带噪输入的提升
    """
    if not pairs:
        return {"si_sdr_db": float("nan"), "noisy_si_sdr_db": float("nan"), "improvement_db": float("nan")}
    net = MeanFlowNet(state.ema if use_ema else state.params)
    single = SamplerConfig(mode="mf", nfe=1)
    enhanced, noisy = [], []
    for i, pair in enumerate(pairs):
        rng = np.random.default_rng([state.seed, 104729, i])
        result = enhance_waveform(pair.noisy, net, single, cfg.path, cfg.frontend, rng)
        enhanced.append(si_sdr(result.waveform, pair.clean))
        noisy.append(si_sdr(pair.noisy, pair.clean))
    out = {
        "si_sdr_db": float(np.mean(enhanced)),
        "noisy_si_sdr_db": float(np.mean(noisy)),
    }
    out["improvement_db"] = out["si_sdr_db"] - out["noisy_si_sdr_db"]
    return out


# ==================== 训练主循环 ====================


def fit(
    config: RunConfig,
    corpus: FrameCorpus,
    workdir: Optional[Union[str, Path]] = None,
    state: Optional[TrainState] = None,
    val_pairs: Sequence[PairedUtterance] = (),
    progress: bool = True,
) -> TrainState:
    """
    按课程训练到 config.train.steps

    传入 state 时从 state.step 续训。workdir 下写出 train_log.jsonl、
    checkpoints/step_XXXXXX.mfnn 与 checkpoints/final.mfnn。

    Raises:
        CorpusError: 语料为空或语句短于片段帧数
    """
    if len(corpus) == 0:
        raise CorpusError("训练语料为空")
    tcfg = config.train
    if corpus.min_frames < tcfg.segment_frames:
        raise CorpusError(f"语句帧数 {corpus.min_frames} 少于片段长度 {tcfg.segment_frames}")

    with default_dtype(tcfg.precision):
        return _train(config, corpus, workdir, state, val_pairs, progress)


def _train(
    config: RunConfig,
    corpus: FrameCorpus,
    workdir: Optional[Union[str, Path]],
    state: Optional[TrainState],
    val_pairs: Sequence[PairedUtterance],
    progress: bool,
) -> TrainState:
    tcfg = config.train
    state = state or init_state(config, corpus.dim)
    workdir = Path(workdir) if workdir is not None else None
    log_file = None
    ckpt_dir = None
    if workdir is not None:
        ckpt_dir = workdir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(workdir / "train_log.jsonl", "a", encoding="utf-8")

    start = state.step
    logger.info(f"开始训练: step {start} → {tcfg.steps}，batch={tcfg.batch_size}×{tcfg.segment_frames} 帧")
    batches = _batches(corpus, config, state.seed, start, tcfg.steps)
    bar = tqdm(total=max(0, tcfg.steps - start), disable=not progress, desc="train")
    try:
        for batch in batches:
            state, report = train_step(state, batch, config.objective, tcfg)
            state.history.append(report)
            bar.update(1)
            bar.set_postfix(loss=f"{report.total:.4f}", w=f"{report.mean_weight:.3f}")
            if log_file is not None:
                log_file.write(report.model_dump_json() + "\n")
            if state.step % tcfg.log_every == 0:
                logger.info(
                    f"step {state.step}: total={report.total:.5f} cfm={report.cfm_loss:.5f} "
                    f"mfse={report.mfse_loss:.5f} w={report.mean_weight:.3f} p={report.span_exponent:.2f}"
                )
            if ckpt_dir is not None and tcfg.checkpoint_every and state.step % tcfg.checkpoint_every == 0:
                save_state(ckpt_dir / f"step_{state.step:06d}.mfnn", state)
            if tcfg.validate_every and state.step % tcfg.validate_every == 0 and val_pairs:
                logger.info(f"step {state.step} 验证: {validate(state, val_pairs[:tcfg.val_utterances], config)}")
    finally:
        bar.close()
        if isinstance(batches, BatchPrefetcher):
            batches.close()
        if log_file is not None:
            log_file.close()

    if ckpt_dir is not None:
        save_state(ckpt_dir / "final.mfnn", state)
    if val_pairs and tcfg.val_utterances:
        logger.info(f"最终验证 (EMA, NFE=1): {validate(state, val_pairs[:tcfg.val_utterances], config)}")
    logger.info(f"训练结束: step={state.step}")
    return state
