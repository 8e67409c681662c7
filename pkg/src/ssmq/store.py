"""Model container and corpus files.

A container is a UTF-8 JSON manifest line followed by a raw little-endian
tensor payload; offsets are contiguous and the manifest is emitted through the
deterministic JSON formatter, so save -> load -> save is byte-identical.
Corpora are JSON Lines, one {"tokens": [...]} object per line.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ssmq import jsonfmt
from ssmq.calibration import ScaleSet
from ssmq.model import FloatModel, LayerParams, ModelConfig, QuantizedLayer, QuantizedModel
from ssmq.qblock import MODE_TAGS, TAG_FOR_MODE, QuantizedBlock
from ssmq.quant import QTensor
from ssmq.ssm import SSMParams

CONTAINER_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("i1")}

_SSM_TENSORS = (
    "a", "d", "w_in", "conv_w", "conv_b", "w_b", "w_c",
    "w_dt_rank", "w_dt", "dt_bias", "w_out",
)


def _tensor_entries(model) -> list[tuple[str, str, np.ndarray]]:
    quantized = isinstance(model, QuantizedModel)
    entries: list[tuple[str, str, np.ndarray]] = [("embedding", "f32", model.embedding)]
    for idx, layer in enumerate(model.layers):
        prefix = f"layers.{idx}."
        entries.append((prefix + "norm_weight", "f32", layer.norm_weight))
        if quantized:
            names = list(_SSM_TENSORS)
            if "w_out_h" in layer.block.weights:
                names.append("w_out_h")
            for name in names:
                entries.append((prefix + name, "i8", layer.block.weights[name].values))
        else:
            for name in _SSM_TENSORS:
                entries.append((prefix + name, "f32", getattr(layer.ssm, name)))
    entries.append(("final_norm", "f32", model.final_norm))
    return entries


def model_to_bytes(model) -> bytes:
    quantized = isinstance(model, QuantizedModel)
    tensors = []
    payload = bytearray()
    for name, dtype, arr in _tensor_entries(model):
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        tensors.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "byte_offset": len(payload),
                "byte_length": len(raw),
            }
        )
        payload.extend(raw)
    manifest = {
        "version": CONTAINER_VERSION,
        "mode": TAG_FOR_MODE[model.mode] if quantized else "float",
        "config": model.config.to_dict(),
        "scales": model.scales.to_dict() if quantized else None,
        "tensors": tensors,
    }
    return jsonfmt.dumps_bytes(manifest) + b"\n" + bytes(payload)


def save_model(path, model) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def _read_tensors(manifest: dict, payload: bytes) -> dict[str, np.ndarray]:
    expected = 0
    out: dict[str, np.ndarray] = {}
    for rec in manifest["tensors"]:
        dtype = rec["dtype"]
        if dtype not in _DTYPES:
            raise ValueError(f"unknown dtype {dtype!r} in manifest")
        if rec["byte_offset"] != expected:
            raise ValueError("tensor offsets are not contiguous")
        shape = tuple(rec["shape"])
        np_dtype = _DTYPES[dtype]
        nbytes = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize if shape else np_dtype.itemsize
        if nbytes != rec["byte_length"]:
            raise ValueError(f"tensor {rec['name']} length does not match its shape")
        expected += rec["byte_length"]
        if expected > len(payload):
            raise ValueError("payload length mismatch")
        raw = payload[rec["byte_offset"]:expected]
        out[rec["name"]] = np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()
    if expected != len(payload):
        raise ValueError("payload length mismatch")
    return out


def model_from_bytes(raw: bytes):
    head, sep, payload = raw.partition(b"\n")
    if not sep:
        raise ValueError("missing manifest delimiter")
    manifest = json.loads(head.decode("utf-8"))
    if manifest.get("version") != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {manifest.get('version')}")
    config = ModelConfig(**manifest["config"])
    tensors = _read_tensors(manifest, payload)
    mode_tag = manifest["mode"]
    if mode_tag == "float":
        return _build_float(config, tensors)
    if mode_tag not in MODE_TAGS:
        raise ValueError(f"unknown mode tag {mode_tag!r}")
    scales = ScaleSet.from_dict(manifest["scales"])
    return _build_quantized(config, MODE_TAGS[mode_tag], scales, tensors)


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())


def _layer_tensor(tensors: dict, name: str) -> np.ndarray:
    if name not in tensors:
        raise ValueError(f"container is missing tensor {name!r}")
    return tensors[name]


def _build_float(config: ModelConfig, tensors: dict) -> FloatModel:
    layers = []
    for idx in range(config.n_layers):
        prefix = f"layers.{idx}."
        params = SSMParams(**{n: _layer_tensor(tensors, prefix + n) for n in _SSM_TENSORS})
        layers.append(LayerParams(norm_weight=_layer_tensor(tensors, prefix + "norm_weight"), ssm=params))
    return FloatModel(
        config=config,
        embedding=_layer_tensor(tensors, "embedding"),
        layers=layers,
        final_norm=_layer_tensor(tensors, "final_norm"),
    )


def _build_quantized(config, mode, scales: ScaleSet, tensors: dict) -> QuantizedModel:
    from ssmq.hadamard import plan_for_dim
    from ssmq.qblock import ACT_SITES

    plan = plan_for_dim(config.d_inner)
    bits = config.bit_width
    layers = []
    for idx in range(config.n_layers):
        prefix = f"layers.{idx}."
        names = list(_SSM_TENSORS) + (["w_out_h"] if mode.hadamard_output else [])
        weights = {}
        for name in names:
            values = _layer_tensor(tensors, prefix + name)
            entry = scales[prefix + name]
            weights[name] = QTensor(values, entry.scale, entry.zero_point, bits)
        act = {site: scales[prefix + site] for site in ACT_SITES}
        block = QuantizedBlock(cfg=config.block, mode=mode, weights=weights, act=act, plan=plan)
        layers.append(QuantizedLayer(norm_weight=_layer_tensor(tensors, prefix + "norm_weight"), block=block))
    return QuantizedModel(
        config=config,
        mode=mode,
        embedding=_layer_tensor(tensors, "embedding"),
        layers=layers,
        final_norm=_layer_tensor(tensors, "final_norm"),
        scales=scales,
    )


def write_corpus(path, sequences) -> None:
    lines = []
    for seq in sequences:
        tokens = [int(t) for t in np.asarray(seq).ravel()]
        lines.append(jsonfmt.dumps({"tokens": tokens}))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_corpus(path) -> list[np.ndarray]:
    sequences = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        doc = json.loads(line)
        sequences.append(np.asarray(doc["tokens"], dtype=np.int64))
    return sequences
