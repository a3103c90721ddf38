"""MeanFlowSE 计算模块"""

from meanflowse.tools.conditional_path import (
    PathSample,
    noisy_prior,
    reverse_init,
    sample_path,
    sample_path_flowse,
    sample_path_meanflowse,
    sample_times_flowse,
    sigma_at,
)
from meanflowse.tools.field_network import (
    AnalyticAverageField,
    AverageField,
    CountingField,
    FieldParams,
    FieldQuery,
    MeanFlowNet,
    analytic_average_field,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from meanflowse.tools.metrics import evaluate_corpus, evaluate_utterance, si_sdr, snr_db, spectral_log_mse
from meanflowse.tools.objective import PathBatch, cfm_loss, curriculum, make_batch, mfse_loss, mfse_target, sample_times
from meanflowse.tools.sampler import (
    EnhanceResult,
    SamplerSchedule,
    displace_step,
    enhance,
    enhance_multi_step,
    enhance_single_step,
    enhance_waveform,
    euler_fm,
    instantaneous_view,
    measure_rtf,
)
from meanflowse.tools.signal_frontend import (
    ComplexSpectrogram,
    Waveform,
    analyze,
    compress,
    decompress,
    istft,
    peak_normalize,
    read_wav,
    stft,
    synthesize,
    write_wav,
)
from meanflowse.tools.tensor_core import GradTape, Tensor, grad, jvp, stop_gradient
from meanflowse.tools.toy_data import (
    PairedUtterance,
    build_frame_corpus,
    generate_pair,
    generate_split,
    load_manifest,
    load_pair,
    make_affine_problem,
    write_corpus,
)
from meanflowse.tools.trainer import TrainState, fit, init_state, load_state, save_state, train_step, validate

__all__ = [
    "PathSample",
    "noisy_prior",
    "reverse_init",
    "sample_path",
    "sample_path_flowse",
    "sample_path_meanflowse",
    "sample_times_flowse",
    "sigma_at",
    "AnalyticAverageField",
    "AverageField",
    "CountingField",
    "FieldParams",
    "FieldQuery",
    "MeanFlowNet",
    "analytic_average_field",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "evaluate_corpus",
    "evaluate_utterance",
    "si_sdr",
    "snr_db",
    "spectral_log_mse",
    "PathBatch",
    "cfm_loss",
    "curriculum",
    "make_batch",
    "mfse_loss",
    "mfse_target",
    "sample_times",
    "EnhanceResult",
    "SamplerSchedule",
    "displace_step",
    "enhance",
    "enhance_multi_step",
    "enhance_single_step",
    "enhance_waveform",
    "euler_fm",
    "instantaneous_view",
    "measure_rtf",
    "ComplexSpectrogram",
    "Waveform",
    "analyze",
    "compress",
    "decompress",
    "istft",
    "peak_normalize",
    "read_wav",
    "stft",
    "synthesize",
    "write_wav",
    "GradTape",
    "Tensor",
    "grad",
    "jvp",
    "stop_gradient",
    "PairedUtterance",
    "build_frame_corpus",
    "generate_pair",
    "generate_split",
    "load_manifest",
    "load_pair",
    "make_affine_problem",
    "write_corpus",
    "TrainState",
    "fit",
    "init_state",
    "load_state",
    "save_state",
    "train_step",
    "validate",
]
