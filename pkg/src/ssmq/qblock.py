"""Quantized execution path of one block.

INT8 projections with fused scales, fused quantized conv + SiLU, a quantized
selective scan with dequantize-on-read semantics, output quantization either
directly or in the Hadamard basis with the inverse transform folded into the
output projection, and the fused RMSNorm + residual + requantize operator that
links blocks.  Integer matmuls accumulate exactly in int32.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from ssmq.hadamard import HadamardPlan, fuse_inverse_into_weights, hadamard_quantize
from ssmq.quant import (
    QTensor,
    QuantScheme,
    SchemeKind,
    compute_scale_absmax,
    dequantize,
    quantize,
)
from ssmq.ssm import BlockConfig, SSMParams, gate, rmsnorm, scan_core, silu, softplus

# 127^2 * 2^15 < 2^31: int32 accumulation cannot overflow below this inner dim.
MAX_ACC_DIM = 2**15


class Mode(str, Enum):
    NAIVE = "naive"
    IN_PERCENTILE = "in_percentile"
    OUT_HADAMARD = "out_hadamard"
    FULL = "full"

    @property
    def percentile_input(self) -> bool:
        return self in (Mode.IN_PERCENTILE, Mode.FULL)

    @property
    def hadamard_output(self) -> bool:
        return self in (Mode.OUT_HADAMARD, Mode.FULL)


# External mode tags (CLI flags and container metadata) -> internal modes.
MODE_TAGS = {
    "naive": Mode.NAIVE,
    "in-per": Mode.IN_PERCENTILE,
    "out-had": Mode.OUT_HADAMARD,
    "quamba": Mode.FULL,
}
TAG_FOR_MODE = {mode: tag for tag, mode in MODE_TAGS.items()}

# Per-layer activation quantization sites, in dataflow order.
ACT_SITES = ("in", "conv_in", "conv_out", "x", "b", "c", "dt_r", "dt", "y", "y_had")


@dataclass(frozen=True)
class ScaleEntry:
    """One calibrated site: resolved scale, zero point, and the scheme used."""

    scale: float
    zero_point: int
    scheme: QuantScheme

    def __post_init__(self):
        if not (self.scale > 0.0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.scheme.symmetric and self.zero_point != 0:
            raise ValueError("symmetric scheme requires zero_point = 0")


@dataclass
class QuantizedBlock:
    cfg: BlockConfig
    mode: Mode
    weights: dict[str, QTensor]
    act: dict[str, ScaleEntry]
    plan: HadamardPlan

    def __post_init__(self):
        missing = [s for s in ACT_SITES if s not in self.act]
        if missing:
            raise ValueError(f"missing activation scales: {missing}")
        if self.mode.percentile_input:
            if self.act["x"].scheme.kind is not SchemeKind.STATIC_SYMMETRIC_PERCENTILE:
                raise ValueError(f"mode {self.mode.value} requires a percentile scan-input scale")
        if self.mode.hadamard_output != ("w_out_h" in self.weights):
            raise ValueError("fused output weights must be present exactly in Hadamard modes")

    @property
    def bit_width(self) -> int:
        return self.weights["w_in"].bit_width


def qlinear(
    x_q: QTensor,
    w_q: QTensor,
    bias_q: QTensor | None = None,
    s_out: float | None = None,
    extra_scale: float = 1.0,
):
    """Integer matmul with exact int32 accumulation, rescaled by s_x*s_w.

    Returns a QTensor when s_out is given (requantized output), otherwise the
    real-valued result (output-projection case).
    """
    if x_q.zero_point or w_q.zero_point:
        raise ValueError("qlinear requires symmetric operands")
    d_in = w_q.values.shape[0]
    if x_q.values.shape[-1] != d_in:
        raise ValueError("qlinear inner dimensions do not match")
    if d_in > MAX_ACC_DIM:
        raise ValueError(f"inner dimension {d_in} exceeds the int32 accumulation bound")
    acc = x_q.values.astype(np.int32) @ w_q.values.astype(np.int32)
    out = acc.astype(np.float32) * np.float32(x_q.scale * w_q.scale * extra_scale)
    if bias_q is not None:
        out = out + dequantize(bias_q)
    if s_out is None:
        return out
    return quantize(out, s_out, x_q.bit_width)


def fused_qconv(x_q: QTensor, w_q: QTensor, bias_q: QTensor | None, s_out: float) -> QTensor:
    """Integer depthwise causal conv, rescale, SiLU in real arithmetic, requantize."""
    if x_q.zero_point or w_q.zero_point:
        raise ValueError("fused conv requires symmetric operands")
    T, C = x_q.values.shape
    K = w_q.values.shape[0]
    if w_q.values.shape[1] != C:
        raise ValueError("conv channel mismatch")
    xp = np.zeros((T + K - 1, C), dtype=np.int32)
    xp[K - 1:] = x_q.values
    w32 = w_q.values.astype(np.int32)
    acc = np.zeros((T, C), dtype=np.int32)
    for k in range(K):
        acc += w32[k] * xp[k:k + T]
    real = acc.astype(np.float32) * np.float32(x_q.scale * w_q.scale)
    if bias_q is not None:
        real = real + dequantize(bias_q)
    return quantize(silu(real), s_out, x_q.bit_width)


def quantized_selective_scan(
    a_q: QTensor,
    b_q: QTensor,
    c_q: QTensor,
    d_q: QTensor,
    dt_q: QTensor,
    x_q: QTensor,
) -> np.ndarray:
    """Scan over quantized operands with dequantize-on-read semantics.

    Bit-exact contract: equals the float scan applied to the dequantized
    arguments; the output stays in real precision.
    """
    y, _ = scan_core(
        dequantize(x_q),
        dequantize(dt_q),
        dequantize(b_q),
        dequantize(c_q),
        dequantize(a_q),
        dequantize(d_q),
    )
    return y


def fused_rmsnorm_quant(
    x_out: np.ndarray,
    x_res: np.ndarray,
    gain: np.ndarray,
    s_out: float,
    bit_width: int = 8,
):
    """Residual add in real precision; the normalized branch is statically quantized.

    Returns (quantized input for the next block, carried real residual).
    """
    res = x_out + x_res
    return quantize(rmsnorm(res, gain), s_out, bit_width), res


def block_forward_q(u_q: QTensor, qb: QuantizedBlock) -> np.ndarray:
    """Quantized block forward over a (T, d_model) input; returns real (T, d_model).

    The z branch leaves the input projection in real precision and is never
    quantized between there and the gate.
    """
    n_bits = qb.bit_width
    w_in = qb.weights["w_in"]
    acc = u_q.values.astype(np.int32) @ w_in.values.astype(np.int32)
    s_lin = np.float32(u_q.scale * w_in.scale)
    d_inner = qb.cfg.d_inner
    x_real = acc[:, :d_inner].astype(np.float32) * s_lin
    z = acc[:, d_inner:].astype(np.float32) * s_lin
    x_q = quantize(x_real, qb.act["conv_in"].scale, n_bits)
    # The conv's fused output quantization IS the scan-input quantization:
    # one write at the mode's scan-input scale (percentile or abs-max).
    scan_x = fused_qconv(x_q, qb.weights["conv_w"], qb.weights["conv_b"], qb.act["x"].scale)
    b_q = qlinear(scan_x, qb.weights["w_b"], s_out=qb.act["b"].scale)
    c_q = qlinear(scan_x, qb.weights["w_c"], s_out=qb.act["c"].scale)
    dtr_q = qlinear(scan_x, qb.weights["w_dt_rank"], s_out=qb.act["dt_r"].scale)
    dt_real = qlinear(dtr_q, qb.weights["w_dt"], bias_q=qb.weights["dt_bias"])
    delta_q = quantize(softplus(dt_real), qb.act["dt"].scale, n_bits)
    y = quantized_selective_scan(
        qb.weights["a"], b_q, c_q, qb.weights["d"], delta_q, scan_x
    )
    gated = gate(y, z)
    if qb.mode.hadamard_output:
        y_q = hadamard_quantize(gated, qb.act["y_had"].scale, qb.plan, n_bits)
        return qlinear(y_q, qb.weights["w_out_h"], extra_scale=1.0 / qb.plan.n)
    y_q = quantize(gated, qb.act["y"].scale, n_bits)
    return qlinear(y_q, qb.weights["w_out"])


def quantize_weight(w: np.ndarray, bit_width: int = 8) -> QTensor:
    """Per-tensor symmetric abs-max weight quantization."""
    return quantize(w, compute_scale_absmax(w, bit_width), bit_width)


def quantize_block(
    params: SSMParams,
    cfg: BlockConfig,
    act: dict[str, ScaleEntry],
    mode: Mode,
    plan: HadamardPlan,
    bit_width: int = 8,
) -> QuantizedBlock:
    """Quantize one block's weights and bind its calibrated activation scales."""
    weights = {
        name: quantize_weight(getattr(params, name), bit_width)
        for name in params.tensor_names()
    }
    if mode.hadamard_output:
        weights["w_out_h"] = quantize_weight(
            fuse_inverse_into_weights(params.w_out.astype(np.float64), plan), bit_width
        )
    return QuantizedBlock(cfg=cfg, mode=mode, weights=weights, act=act, plan=plan)
