"""Phase-aware 4-bit microscaling quantized inference, desk scale.

Bit-level emulation of the 4-bit (1-2-1) and 8-bit (1-4-3) grids, two-level
block quantization, a quantized GEMM with oracles, a small decoder-only
transformer with a KV cache, phase-wise execution modes, a prompt/decode
worker split with a checksummed cache wire format, and analysis metrics.
"""

from .engine import ExecutionMode, SamplerSpec, Trajectory, generate
from .model import (
    KvCache,
    ModelConfig,
    ModelWeights,
    Precision,
    decode_step,
    init_model,
    load_model,
    prefill,
    save_model,
)
from .quantizer import QuantConfig, QuantizedTensor, TensorScalePolicy, dequantize, quantize
from .gemm import qgemm, qgemm_mirror, reference_gemm

__version__ = "0.1.0"

__all__ = [
    "ExecutionMode",
    "KvCache",
    "ModelConfig",
    "ModelWeights",
    "Precision",
    "QuantConfig",
    "QuantizedTensor",
    "SamplerSpec",
    "TensorScalePolicy",
    "Trajectory",
    "decode_step",
    "dequantize",
    "generate",
    "init_model",
    "load_model",
    "prefill",
    "qgemm",
    "qgemm_mirror",
    "quantize",
    "reference_gemm",
    "save_model",
    "__version__",
]
