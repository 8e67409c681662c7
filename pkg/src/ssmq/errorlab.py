"""Error laboratory for the linear-recurrence quantization bound.

Samples time-varying systems whose state matrices decay under an exponential
spectral-norm envelope, runs paired clean/perturbed simulations, evaluates the
closed-form error bounds, and verifies that no sampled trajectory violates
them.  Also hosts the cumulative spectral-norm study and the per-tensor
sensitivity scan used on toy models.  All of this runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ssmq.quant import compute_scale_absmax, dequantize, quantize

MAX_SPECTRAL_DIM = 128

# Violations beyond this relative slack count as real (floating-point noise
# allowance on an otherwise strict inequality).
BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class BoundParams:
    a: float
    b: float
    eps: float
    T: int
    N_dim: int = 8
    P_dim: int = 4

    def __post_init__(self):
        if not (0.0 < self.a < 1.0):
            raise ValueError(f"decay factor must lie in (0, 1), got {self.a}")
        if self.b <= 0 or self.eps <= 0:
            raise ValueError("input-matrix bound and perturbation bound must be positive")
        if self.T < 1 or self.N_dim < 1 or self.P_dim < 1:
            raise ValueError("dimensions and horizon must be positive")


def spectral_norm(m: np.ndarray) -> float:
    """Largest singular value by power iteration on M^T M.

    Runs 200 iterations or until the Rayleigh quotient stabilizes to relative
    1e-12.  Dimensions are capped at 128.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("spectral norm expects a matrix")
    if max(m.shape) > MAX_SPECTRAL_DIM:
        raise ValueError(f"dimensions exceed the {MAX_SPECTRAL_DIM} cap")
    return float(_batch_spectral_norms(m[None, :, :])[0])


def _batch_spectral_norms(mats: np.ndarray) -> np.ndarray:
    """Power iteration on a stack of matrices at once (same contract per matrix)."""
    gram = np.einsum("tji,tjk->tik", mats, mats)
    rng = np.random.default_rng(0)
    v = rng.standard_normal((gram.shape[0], gram.shape[1]))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    prev = np.zeros(gram.shape[0])
    zero = np.zeros(gram.shape[0], dtype=bool)
    for _ in range(200):
        w = np.einsum("tij,tj->ti", gram, v)
        norms = np.linalg.norm(w, axis=1)
        zero = norms == 0.0
        safe = np.where(zero, 1.0, norms)
        v = w / safe[:, None]
        est = np.einsum("ti,tij,tj->t", v, gram, v)
        done = (prev > 0) & (np.abs(est - prev) <= 1e-12 * prev)
        prev = est
        if (done | zero).all():
            break
    prev = np.where(zero, 0.0, np.maximum(prev, 0.0))
    return np.sqrt(prev)


@dataclass
class LTISystem:
    """Time-varying recurrence h(t) = A(t) h(t-1) + B x(t), h(0) = 0."""

    a_seq: np.ndarray  # (T, N, N)
    b: np.ndarray      # (N, P)
    params: BoundParams

    def __post_init__(self):
        p = self.params
        if self.a_seq.shape != (p.T, p.N_dim, p.N_dim) or self.b.shape != (p.N_dim, p.P_dim):
            raise ValueError("system shapes do not match the bound parameters")
        limits = p.a * np.exp(np.arange(1, p.T + 1) - p.T)
        norms = _batch_spectral_norms(self.a_seq)
        bad = np.nonzero(norms > limits * (1 + 1e-9))[0]
        if bad.size:
            raise ValueError(f"state matrix at step {bad[0] + 1} violates the norm envelope")
        if spectral_norm(self.b) > p.b * (1 + 1e-9):
            raise ValueError("input matrix violates its norm bound")


def sample_lti(params: BoundParams, seed: int) -> LTISystem:
    """Random system under the norm assumptions: ||A(t)|| <= a e^(t-T), ||B|| <= b."""
    rng = np.random.default_rng(seed)
    mats = rng.standard_normal((params.T, params.N_dim, params.N_dim))
    u = rng.uniform(0.5, 1.0, size=params.T)
    targets = params.a * np.exp(np.arange(1, params.T + 1) - params.T) * u
    a_seq = mats * (targets / _batch_spectral_norms(mats))[:, None, None]
    m = rng.standard_normal((params.N_dim, params.P_dim))
    v = rng.uniform(0.5, 1.0)
    b = m * (params.b * v / spectral_norm(m))
    return LTISystem(a_seq=a_seq, b=b, params=params)


def simulate_pair(sys: LTISystem, x: np.ndarray, delta_x: np.ndarray) -> np.ndarray:
    """Error trajectory between clean and perturbed runs.

    Runs h with inputs x and h_bar with x + delta_x, returns the per-step
    difference, and cross-checks it against the direct error recurrence
    Delta(t) = A(t) Delta(t-1) + B delta_x(t) in a single evaluation order.
    """
    p = sys.params
    if x.shape != (p.T, p.P_dim) or delta_x.shape != (p.T, p.P_dim):
        raise ValueError("input shapes do not match the system")
    h = np.zeros(p.N_dim)
    h_bar = np.zeros(p.N_dim)
    err = np.zeros(p.N_dim)
    out = np.empty((p.T, p.N_dim))
    for t in range(p.T):
        h = sys.a_seq[t] @ h + sys.b @ x[t]
        h_bar = sys.a_seq[t] @ h_bar + sys.b @ (x[t] + delta_x[t])
        diff = h_bar - h
        err = sys.a_seq[t] @ err + sys.b @ delta_x[t]
        scale = max(1.0, float(np.linalg.norm(err)))
        if np.linalg.norm(diff - err) > 1e-12 * scale:
            raise AssertionError("subtraction path diverged from the error recurrence")
        out[t] = diff
    return out


def theoretical_bound(params: BoundParams, t: int) -> tuple[float, float]:
    """Closed-form (per-step, global) bounds: eps*b/(1 - a e^(t-T)) and eps*b/(1-a)."""
    if not (1 <= t <= params.T):
        raise ValueError(f"step must lie in [1, {params.T}]")
    decay = params.a * math.exp(t - params.T)
    per_step = params.eps * params.b / (1.0 - decay)
    global_bound = params.eps * params.b / (1.0 - params.a)
    return per_step, global_bound


def _unit_perturbations(params: BoundParams, rng: np.random.Generator) -> np.ndarray:
    """Perturbations with each row at exactly norm eps (worst-case-leaning)."""
    d = rng.standard_normal((params.T, params.P_dim))
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return d / norms * params.eps


def verify_bound(params: BoundParams, trials: int, seed: int) -> dict:
    """Sample systems and perturbations; count bound violations (must be zero)."""
    bounds = np.array([theoretical_bound(params, t)[0] for t in range(1, params.T + 1)])
    global_bound = theoretical_bound(params, params.T)[1]
    violations = 0
    max_ratio = 0.0
    per_t_max = np.zeros(params.T)
    first_violation_seed = None
    for i in range(trials):
        trial_seed = seed + i
        sys = sample_lti(params, trial_seed)
        rng = np.random.default_rng((trial_seed, 1))
        x = rng.standard_normal((params.T, params.P_dim))
        delta = _unit_perturbations(params, rng)
        err = simulate_pair(sys, x, delta)
        norms = np.linalg.norm(err, axis=1)
        ratios = norms / bounds
        per_t_max = np.maximum(per_t_max, ratios)
        max_ratio = max(max_ratio, float(ratios.max()))
        bad = (norms > bounds * (1 + BOUND_SLACK)).any() or (
            norms[-1] > global_bound * (1 + BOUND_SLACK)
        )
        if bad:
            violations += 1
            if first_violation_seed is None:
                first_violation_seed = trial_seed
    return {
        "params": {
            "a": params.a,
            "b": params.b,
            "eps": params.eps,
            "T": params.T,
            "N_dim": params.N_dim,
            "P_dim": params.P_dim,
        },
        "trials": trials,
        "violations": violations,
        "max_ratio": max_ratio,
        "per_t_max": [float(r) for r in per_t_max],
        "first_violation_seed": first_violation_seed,
    }


def cumulative_spectral_norms(a_seq: np.ndarray) -> list[float]:
    """||A(T) A(T-1) ... A(t)||_2 for each suffix start t = 1..T, right-to-left."""
    a_seq = np.asarray(a_seq, dtype=np.float64)
    T = a_seq.shape[0]
    norms = [0.0] * T
    prod = np.eye(a_seq.shape[1])
    for t in range(T - 1, -1, -1):
        prod = prod @ a_seq[t]
        norms[t] = spectral_norm(prod)
    return norms


# Per-tensor sensitivity scan -------------------------------------------------

# Activation sites are hooked in the float dataflow; weight sites quantize one
# parameter group.  Each id appears exactly once in the report.
ACTIVATION_SENSITIVITY_SITES = {
    "act:in": "in",
    "act:x": "x",
    "act:b": "b",
    "act:c": "c",
    "act:dt": "dt",
    "act:y": "y",
}
WEIGHT_SENSITIVITY_SITES = {
    "w:in_proj": ("w_in",),
    "w:conv": ("conv_w",),
    "w:b_proj": ("w_b",),
    "w:c_proj": ("w_c",),
    "w:dt_proj": ("w_dt_rank", "w_dt"),
    "w:out_proj": ("w_out",),
    "w:state_decay": ("a",),
    "w:skip": ("d",),
}
SENSITIVITY_SITES = list(ACTIVATION_SENSITIVITY_SITES) + list(WEIGHT_SENSITIVITY_SITES)


def _fake_quant(tensor: np.ndarray, bit_width: int = 8) -> np.ndarray:
    q = quantize(tensor, compute_scale_absmax(tensor, bit_width), bit_width)
    return dequantize(q, dtype=np.asarray(tensor).dtype)


def sensitivity_scan(model, corpus, sites=None, bit_width: int = 8) -> list[dict]:
    """Quantize one tensor at a time (abs-max, 8-bit) and measure output deviation.

    Returns one record per site with the relative output MSE and cosine
    distance against the float reference, ranked worst first.
    """
    from ssmq.model import forward_fp

    if not corpus:
        raise ValueError("empty corpus")
    sites = list(sites) if sites is not None else list(SENSITIVITY_SITES)
    reference = np.concatenate(
        [forward_fp(model, seq).ravel() for seq in corpus]
    ).astype(np.float64)
    ref_energy = float(np.sum(reference**2))
    ref_norm = float(np.linalg.norm(reference))
    results = []
    for site in sites:
        if site in ACTIVATION_SENSITIVITY_SITES:
            suffix = "." + ACTIVATION_SENSITIVITY_SITES[site]

            def hook(name: str, tensor: np.ndarray) -> np.ndarray:
                if name.endswith(suffix):
                    return _fake_quant(tensor, bit_width)
                return tensor

            outputs = [forward_fp(model, seq, observer=hook) for seq in corpus]
        elif site in WEIGHT_SENSITIVITY_SITES:
            names = WEIGHT_SENSITIVITY_SITES[site]
            saved = []
            for layer in model.layers:
                for name in names:
                    w = getattr(layer.ssm, name)
                    saved.append((layer.ssm, name, w))
                    setattr(layer.ssm, name, _fake_quant(w, bit_width))
            try:
                outputs = [forward_fp(model, seq) for seq in corpus]
            finally:
                for owner, name, w in saved:
                    setattr(owner, name, w)
        else:
            raise ValueError(f"unknown sensitivity site {site!r}")
        got = np.concatenate([o.ravel() for o in outputs]).astype(np.float64)
        rel_mse = float(np.sum((got - reference) ** 2) / ref_energy)
        denom = ref_norm * float(np.linalg.norm(got))
        cosine = float(np.dot(got, reference) / denom) if denom > 0 else 1.0
        results.append({"site": site, "rel_mse": rel_mse, "cosine_distance": 1.0 - cosine})
    results.sort(key=lambda r: (-r["rel_mse"], r["site"]))
    return results
