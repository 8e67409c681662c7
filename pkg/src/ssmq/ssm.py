"""Float32 reference implementation of one selective-SSM block.

This is the oracle every quantized path is measured against: input projection
into x/z branches, depthwise causal conv + SiLU, input-dependent selection of
the recurrence parameters, the selective scan, SiLU gating, and the output
projection.  All math is 32-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ssmq import kernels
from ssmq.hadamard import HadamardPlan, apply_hadamard, plan_for_dim

RMSNORM_EPS = 1e-6


@dataclass(frozen=True)
class BlockConfig:
    d_model: int
    expand: int = 2
    d_state: int = 16
    d_conv: int = 4
    dt_rank: int = 4

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        # Must be transformable; raises "no Hadamard factorization available"
        # for widths outside the supported 2^p * {1, 12, 20} family.
        plan_for_dim(self.d_inner)

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


@dataclass
class SSMParams:
    """All weights of one block.

    a: (d_inner, d_state), strictly negative (per-channel diagonal dynamics)
    d: (d_inner,) residual/skip coefficient
    w_in: (d_model, 2*d_inner), even split into x branch then z branch
    conv_w: (d_conv, d_inner); conv_b: (d_inner,)
    w_b, w_c: (d_inner, d_state), no bias
    w_dt_rank: (d_inner, dt_rank); w_dt: (dt_rank, d_inner); dt_bias: (d_inner,)
    w_out: (d_inner, d_model)
    """

    a: np.ndarray
    d: np.ndarray
    w_in: np.ndarray
    conv_w: np.ndarray
    conv_b: np.ndarray
    w_b: np.ndarray
    w_c: np.ndarray
    w_dt_rank: np.ndarray
    w_dt: np.ndarray
    dt_bias: np.ndarray
    w_out: np.ndarray

    def validate(self, cfg: BlockConfig) -> None:
        di, ds = cfg.d_inner, cfg.d_state
        expected = {
            "a": (di, ds),
            "d": (di,),
            "w_in": (cfg.d_model, 2 * di),
            "conv_w": (cfg.d_conv, di),
            "conv_b": (di,),
            "w_b": (di, ds),
            "w_c": (di, ds),
            "w_dt_rank": (di, cfg.dt_rank),
            "w_dt": (cfg.dt_rank, di),
            "dt_bias": (di,),
            "w_out": (di, cfg.d_model),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
        if not (self.a < 0).all():
            raise ValueError("state transition entries must be strictly negative")

    def tensor_names(self) -> list[str]:
        return [f.name for f in fields(self)]


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.logaddexp(x, x.dtype.type(0))


def silu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-x))


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = RMSNORM_EPS) -> np.ndarray:
    x = np.asarray(x)
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + eps) * gain


def gate(y: np.ndarray, z: np.ndarray) -> np.ndarray:
    return y * silu(z)


def selection(x: np.ndarray, params: SSMParams):
    """Input-dependent recurrence parameters: (b, c, delta) from the scan input.

    b, c are linear in x; delta = softplus of the two-stage projection plus
    bias, hence elementwise positive.
    """
    b = x @ params.w_b
    c = x @ params.w_c
    delta = softplus(x @ params.w_dt_rank @ params.w_dt + params.dt_bias)
    return b, c, delta


def discretize(a: np.ndarray, b_t: np.ndarray, delta_t: np.ndarray):
    """One-step discretization: a_bar = exp(delta*a) elementwise, b_bar = delta*b."""
    a_bar = np.exp(delta_t[:, None] * a)
    b_bar = delta_t[:, None] * b_t[None, :]
    return a_bar, b_bar


def causal_conv(x: np.ndarray, conv_w: np.ndarray, conv_b: np.ndarray) -> np.ndarray:
    return kernels.causal_conv(x, conv_w, conv_b)


def scan_core(x, delta, b, c, a, d, h0=None):
    """The recurrence h_t = exp(delta_t a) h_{t-1} + delta_t b_t x_t, y_t = <c_t, h_t> + d x_t."""
    return kernels.selective_scan_core(x, delta, a, b, c, d, h0=h0)


def selective_scan(x: np.ndarray, params: SSMParams) -> np.ndarray:
    """Selection followed by the scan, starting from h_0 = 0."""
    b, c, delta = selection(x, params)
    y, _ = scan_core(x, delta, b, c, params.a, params.d)
    return y


def block_forward_fp(
    u: np.ndarray,
    params: SSMParams,
    plan: HadamardPlan | None = None,
    observer=None,
):
    """Float block forward over a (T, d_model) input; returns (T, d_model).

    The residual add is the caller's job.  `observer(site, tensor)` is called
    at every quantization site of the dataflow and its return value replaces
    the tensor (identity observers just record).  The transformed-output site
    is observed only when a plan is supplied; its return value is unused by
    the float path.
    """
    ob = observer if observer is not None else (lambda site, t: t)
    xz = u.astype(np.float32) @ params.w_in
    d_inner = params.w_out.shape[0]
    x_branch = ob("conv_in", np.ascontiguousarray(xz[:, :d_inner]))
    z_branch = xz[:, d_inner:]
    x = silu(causal_conv(x_branch, params.conv_w, params.conv_b))
    x = ob("conv_out", x)
    x = ob("x", x)
    b = ob("b", x @ params.w_b)
    c = ob("c", x @ params.w_c)
    dt_r = ob("dt_r", x @ params.w_dt_rank)
    delta = ob("dt", softplus(dt_r @ params.w_dt + params.dt_bias))
    y, _ = scan_core(x, delta, b, c, params.a, params.d)
    gated = gate(y, z_branch)
    gated = ob("y", gated)
    if plan is not None and observer is not None:
        ob("y_had", apply_hadamard(plan, gated))
    return gated @ params.w_out


def init_block_params(cfg: BlockConfig, rng: np.random.Generator) -> SSMParams:
    """Seeded toy initialization with stable decaying dynamics.

    a = -exp(U[0, ln d_state]) per entry, delta bias = softplus^-1(U[1e-3, 1e-1]),
    projections U[-1/sqrt(fan_in), +1/sqrt(fan_in)], skip coefficients at one.
    """

    def proj(fan_in, shape):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape).astype(np.float32)

    di, ds = cfg.d_inner, cfg.d_state
    a = -np.exp(rng.uniform(0.0, np.log(ds), size=(di, ds))).astype(np.float32)
    dt_target = rng.uniform(1e-3, 1e-1, size=di)
    dt_bias = np.log(np.expm1(dt_target)).astype(np.float32)
    return SSMParams(
        a=a,
        d=np.ones(di, dtype=np.float32),
        w_in=proj(cfg.d_model, (cfg.d_model, 2 * di)),
        conv_w=proj(cfg.d_conv, (cfg.d_conv, di)),
        conv_b=proj(cfg.d_conv, (di,)),
        w_b=proj(di, (di, ds)),
        w_c=proj(di, (di, ds)),
        w_dt_rank=proj(di, (di, cfg.dt_rank)),
        w_dt=proj(cfg.dt_rank, (cfg.dt_rank, di)),
        dt_bias=dt_bias,
        w_out=proj(di, (di, cfg.d_model)),
    )
