"""Static W8A8 quantization toolkit for selective state-space models."""

__version__ = "0.1.0"

from ssmq.quant import (  # noqa: F401
    QTensor,
    QuantScheme,
    SchemeKind,
    compute_scale_absmax,
    compute_scale_percentile,
    dequantize,
    quantize,
)
