"""Static scale collection.

The float reference model runs over a calibration corpus with observation
hooks at every quantization site; per-site abs-max accumulators and pooled
absolute-value stores are then finalized into a ScaleSet under per-site
schemes (percentile at the scan input, abs-max everywhere else).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ssmq import jsonfmt
from ssmq.model import FloatModel, QuantizedLayer, QuantizedModel, forward_fp
from ssmq.qblock import ACT_SITES, Mode, ScaleEntry, quantize_block
from ssmq.quant import (
    DEFAULT_PERCENTILE,
    QuantScheme,
    SchemeKind,
    compute_scale_absmax,
    compute_scale_percentile,
    qmax,
)

# Pooled values per site stay exact up to this cap, then a seeded uniform
# reservoir takes over so memory stays bounded and runs stay deterministic.
POOL_CAP = 2**22


@dataclass
class SiteStats:
    absmax: float = 0.0
    count: int = 0
    seen: int = 0
    pool: list[np.ndarray] = field(default_factory=list)
    pooled: int = 0

    def add(self, values: np.ndarray, rng: np.random.Generator) -> None:
        self.absmax = max(self.absmax, float(np.max(values)) if values.size else 0.0)
        self.count += 1
        self.seen += values.size
        if self.pooled + values.size <= POOL_CAP:
            self.pool.append(values)
            self.pooled += values.size
            return
        # Reservoir step: each new element replaces a random slot with
        # probability cap/seen.  Collapse the pool to one flat array first.
        flat = np.concatenate(self.pool) if self.pool else np.empty(0, dtype=np.float64)
        if flat.size < POOL_CAP:
            take = POOL_CAP - flat.size
            flat = np.concatenate([flat, values[:take]])
            values = values[take:]
        base = self.seen - values.size
        for i in range(values.size):
            j = rng.integers(0, base + i + 1)
            if j < POOL_CAP:
                flat[j] = values[i]
        self.pool = [flat]
        self.pooled = flat.size

    def pooled_values(self) -> np.ndarray:
        if not self.pool:
            return np.empty(0, dtype=np.float64)
        return np.sort(np.concatenate(self.pool))


class CalibrationStats:
    """Per-site activation statistics accumulated during calibration runs."""

    def __init__(self, seed: int = 0):
        self.sites: dict[str, SiteStats] = {}
        self._rng = np.random.default_rng(seed)

    def observe(self, site: str, activation: np.ndarray) -> None:
        values = np.abs(np.asarray(activation, dtype=np.float64)).ravel()
        self.sites.setdefault(site, SiteStats()).add(values, self._rng)

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        """Deterministic shard merge: abs-max by max, pools by concatenation."""
        for site, stats in other.sites.items():
            mine = self.sites.setdefault(site, SiteStats())
            mine.absmax = max(mine.absmax, stats.absmax)
            mine.count += stats.count
            mine.seen += stats.seen
            mine.pool = mine.pool + [arr.copy() for arr in stats.pool]
            mine.pooled += stats.pooled
        return self


_ABSMAX = QuantScheme(SchemeKind.STATIC_SYMMETRIC_MAX)


def default_schemes(n_layers: int, p: float = DEFAULT_PERCENTILE) -> dict[str, QuantScheme]:
    """Default scheme assignment: percentile at every scan input, abs-max elsewhere."""
    schemes: dict[str, QuantScheme] = {}
    for layer in range(n_layers):
        for site in ACT_SITES:
            name = f"layers.{layer}.{site}"
            if site == "x":
                schemes[name] = QuantScheme(SchemeKind.STATIC_SYMMETRIC_PERCENTILE, p)
            else:
                schemes[name] = _ABSMAX
    return schemes


class ScaleSet:
    """Named map of calibrated static scales per activation/weight site."""

    VERSION = 1

    def __init__(self, bit_width: int = 8):
        self.bit_width = bit_width
        self.entries: dict[str, ScaleEntry] = {}

    def __contains__(self, site: str) -> bool:
        return site in self.entries

    def __getitem__(self, site: str) -> ScaleEntry:
        return self.entries[site]

    def set(self, site: str, entry: ScaleEntry) -> None:
        self.entries[site] = entry

    def to_dict(self) -> dict:
        sites = {}
        for name, e in self.entries.items():
            sites[name] = {
                "scale": e.scale,
                "zero_point": e.zero_point,
                "scheme": e.scheme.kind.value,
                "p": e.scheme.p,
            }
        return {"version": self.VERSION, "bit_width": self.bit_width, "sites": sites}

    def to_json_bytes(self) -> bytes:
        return jsonfmt.dumps_bytes(self.to_dict()) + b"\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ScaleSet":
        if doc.get("version") != cls.VERSION:
            raise ValueError(f"unsupported scale-set version {doc.get('version')}")
        ss = cls(bit_width=int(doc["bit_width"]))
        for name, rec in doc["sites"].items():
            scheme = QuantScheme(SchemeKind(rec["scheme"]), rec.get("p"))
            ss.set(name, ScaleEntry(float(rec["scale"]), int(rec["zero_point"]), scheme))
        return ss

    @classmethod
    def from_json_bytes(cls, raw: bytes) -> "ScaleSet":
        return cls.from_dict(json.loads(raw.decode("utf-8")))


def finalize_scales(
    stats: CalibrationStats,
    schemes: dict[str, QuantScheme],
    bit_width: int = 8,
) -> ScaleSet:
    """Resolve per-site scales; every assigned site must have been visited."""
    ss = ScaleSet(bit_width=bit_width)
    for site in sorted(schemes):
        scheme = schemes[site]
        if site not in stats.sites or stats.sites[site].count == 0:
            raise ValueError(f"site {site} was never observed during calibration")
        st = stats.sites[site]
        if scheme.kind is SchemeKind.STATIC_SYMMETRIC_MAX:
            scale = st.absmax / qmax(bit_width) if st.absmax > 0 else compute_scale_absmax([0.0], bit_width)
        elif scheme.kind is SchemeKind.STATIC_SYMMETRIC_PERCENTILE:
            scale = compute_scale_percentile(st.pooled_values(), scheme.p, bit_width)
        else:
            raise ValueError(f"scheme {scheme.kind.value} is not a static calibration scheme")
        ss.set(site, ScaleEntry(scale, 0, scheme))
    return ss


def sample_corpus(corpus, num_samples: int, seed: int):
    """Seeded sampling without replacement, clamped to the corpus size."""
    if not corpus:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(seed)
    n = min(num_samples, len(corpus))
    idx = rng.choice(len(corpus), size=n, replace=False)
    return [corpus[i] for i in idx]


def run_calibration(
    model: FloatModel,
    corpus,
    num_samples: int = 512,
    p: float = DEFAULT_PERCENTILE,
    seed: int = 42,
    schemes: dict[str, QuantScheme] | None = None,
) -> ScaleSet:
    """Observe every activation site over a sampled sub-corpus and finalize scales.

    The per-site scheme assignment defaults to percentile-p at the scan inputs
    and abs-max everywhere else; pass `schemes` to override it site by site.
    """
    stats = CalibrationStats(seed=seed)

    def hook(site: str, tensor: np.ndarray) -> np.ndarray:
        stats.observe(site, tensor)
        return tensor

    for seq in sample_corpus(corpus, num_samples, seed):
        forward_fp(model, seq, observer=hook)
    if schemes is None:
        schemes = default_schemes(model.config.n_layers, p)
    return finalize_scales(stats, schemes, model.config.bit_width)


def quantize_model(model: FloatModel, scales: ScaleSet, mode: Mode) -> QuantizedModel:
    """Quantize all block weights per-tensor abs-max and bind activation scales.

    The scan-input scale follows the mode: the percentile-calibrated entry in
    percentile modes, the abs-max of the same tensor (the conv-output site)
    otherwise.  Normalization gains and the embedding stay in real precision.
    Weight scales are recorded into the returned model's scale set.
    """
    cfg = model.config
    bits = cfg.bit_width
    out_scales = ScaleSet(bit_width=bits)
    for name, entry in scales.entries.items():
        out_scales.set(name, entry)
    qlayers: list[QuantizedLayer] = []
    for idx, layer in enumerate(model.layers):
        prefix = f"layers.{idx}."
        act: dict[str, ScaleEntry] = {}
        for site in ACT_SITES:
            act[site] = scales[prefix + site]
        if not mode.percentile_input:
            absmax_entry = scales[prefix + "conv_out"]
            act["x"] = ScaleEntry(absmax_entry.scale, 0, _ABSMAX)
            out_scales.set(prefix + "x", act["x"])
        block = quantize_block(layer.ssm, cfg.block, act, mode, model.plan, bits)
        for wname, wq in block.weights.items():
            out_scales.set(
                prefix + wname, ScaleEntry(wq.scale, 0, _ABSMAX)
            )
        qlayers.append(QuantizedLayer(norm_weight=layer.norm_weight.copy(), block=block))
    return QuantizedModel(
        config=cfg,
        mode=mode,
        embedding=model.embedding.copy(),
        layers=qlayers,
        final_norm=model.final_norm.copy(),
        scales=out_scales,
    )
