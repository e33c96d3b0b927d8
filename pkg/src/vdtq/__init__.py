"""vdtq: desk-scale post-training quantization for toy video-DiT blocks."""

from .backend import active_backend, set_backend
from .config import RunConfig
from .distill import (
    TokenWeights,
    sparsity_report,
    token_attention_mass,
    token_loss_weights,
    weighted_token_loss,
)
from .engine import (
    AdamW,
    BlockCalibrationResult,
    TrainConfig,
    adamw_step,
    calibrate_block,
    cosine_lr,
    sequential_calibrate,
)
from .errors import (
    ConfigError,
    DegenerateStateError,
    IOFormatError,
    NumericError,
    ShapeError,
    TrainingError,
    VdtqError,
)
from .model import (
    ScheduleConfig,
    ToyBlock,
    ToyModel,
    ToyModelConfig,
    block_forward,
    build_toy_model,
    model_forward,
    synth_pool,
    synth_trajectory,
)
from .quantizers import (
    PER_CHANNEL,
    PER_TENSOR,
    PER_TOKEN,
    QuantizedTensor,
    QuantSpec,
    compute_delta,
    dequantize,
    gptq_quantize_weight,
    quantize,
    rtn_quantize_weight,
)
from .selection import (
    CalibrationSet,
    DiffusionTrajectory,
    SalienceScore,
    combined_salience,
    diffusion_salience,
    normalize_scores,
    quantization_salience,
    score_candidates,
    select_baseline,
    select_calibration,
)
from .tensorfile import read_tensor, write_tensor
from .tensors import (
    AttentionOutput,
    SpectralResult,
    attention_forward,
    frobenius_sq,
    matmul,
    softmax_rows,
    spectral_norm,
)
from .transforms import (
    LayerTransform,
    apply_transform_fp,
    cayley_rotation,
    quantized_linear_forward,
)

__version__ = "0.1.0"
