"""Batch command-line surface.

Subcommands: init-toy, calibrate, quantize, eval, sweep-percentile,
bound-check, sensitivity.  Machine-readable JSON goes to stdout, human tables
to stderr.  Exit codes: 0 success, 1 property violation, 2 usage/input error.
All randomness flows from --seed; outputs are byte-reproducible.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ssmq import jsonfmt
from ssmq.calibration import run_calibration, quantize_model, ScaleSet
from ssmq.errorlab import BoundParams, sensitivity_scan, verify_bound
from ssmq.model import (
    FloatModel,
    ModelConfig,
    QuantizedModel,
    evaluate,
    init_toy_model,
    inject_outliers,
    make_corpus,
)
from ssmq.qblock import MODE_TAGS, Mode
from ssmq.quant import DEFAULT_PERCENTILE
from ssmq import store


class UsageError(Exception):
    pass


def _emit(doc) -> None:
    sys.stdout.write(jsonfmt.dumps(doc) + "\n")


def _load_model(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"model file not found: {path}")
    try:
        return store.load_model(p)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot load model {path}: {exc}") from exc


def _load_float_model(path) -> FloatModel:
    model = _load_model(path)
    if not isinstance(model, FloatModel):
        raise UsageError(f"{path} is already quantized")
    return model


def _load_corpus(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"corpus file not found: {path}")
    corpus = store.read_corpus(p)
    if not corpus:
        raise UsageError(f"corpus is empty: {path}")
    return corpus


def cmd_init_toy(args) -> int:
    cfg_dict = {}
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg_dict = json.loads(cfg_path.read_text())
    try:
        config = ModelConfig(**cfg_dict)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    model = init_toy_model(config, args.seed)
    outliers = None
    spike_tokens: list[int] = []
    if args.inject_outliers:
        rng = np.random.default_rng((args.seed, 1))
        outliers = inject_outliers(model, rng)
        spike_tokens = outliers["spike_tokens"]
    corpus = make_corpus(
        config.vocab_size, args.corpus_sequences, args.corpus_length,
        seed=(args.seed, 2), spike_tokens=spike_tokens,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / "model.bin"
    corpus_path = out_dir / "corpus.jsonl"
    store.save_model(model_path, model)
    store.write_corpus(corpus_path, corpus)
    _emit(
        {
            "model": str(model_path),
            "corpus": str(corpus_path),
            "config": config.to_dict(),
            "outliers": outliers,
        }
    )
    return 0


def cmd_calibrate(args) -> int:
    model = _load_float_model(args.model)
    corpus = _load_corpus(args.corpus)
    if not (0.0 < args.percentile <= 100.0):
        raise UsageError(f"percentile must lie in (0, 100], got {args.percentile}")
    scales = run_calibration(model, corpus, args.samples, args.percentile, args.seed)
    Path(args.out_scales).write_bytes(scales.to_json_bytes())
    print(f"{'site':<24}{'scheme':<32}{'p':>8}  scale", file=sys.stderr)
    for name in sorted(scales.entries):
        e = scales.entries[name]
        p_txt = "-" if e.scheme.p is None else f"{e.scheme.p:g}"
        print(f"{name:<24}{e.scheme.kind.value:<32}{p_txt:>8}  {e.scale:.9g}", file=sys.stderr)
    _emit({"scales": str(args.out_scales), "sites": len(scales.entries)})
    return 0


def cmd_quantize(args) -> int:
    model = _load_float_model(args.model)
    scales_path = Path(args.scales)
    if not scales_path.is_file():
        raise UsageError(f"scale file not found: {args.scales}")
    scales = ScaleSet.from_json_bytes(scales_path.read_bytes())
    mode = MODE_TAGS[args.mode]
    qmodel = quantize_model(model, scales, mode)
    store.save_model(args.out, qmodel)
    _emit({"model": str(args.out), "mode": args.mode})
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    corpus = _load_corpus(args.corpus)
    reference = _load_model(args.reference) if args.reference else None
    report = evaluate(model, corpus, reference=reference)
    _emit(report.to_dict())
    return 0


def cmd_sweep_percentile(args) -> int:
    model = _load_float_model(args.model)
    corpus = _load_corpus(args.corpus)
    try:
        p_list = [float(tok) for tok in args.p.split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"bad percentile list: {args.p}") from exc
    if not p_list or not all(0.0 < p <= 100.0 for p in p_list):
        raise UsageError("percentiles must lie in (0, 100]")
    float_report = evaluate(model, corpus)
    rows = []
    for p in p_list:
        scales = run_calibration(model, corpus, args.samples, p, args.seed)
        qmodel = quantize_model(model, scales, Mode.FULL)
        report = evaluate(qmodel, corpus, reference=model)
        scan_scales = {
            name: entry.scale
            for name, entry in scales.entries.items()
            if name.endswith(".x")
        }
        rows.append(
            {
                "p": p,
                "scan_input_scales": scan_scales,
                "perplexity": report.perplexity,
                "mse": report.mse,
                "cosine": report.cosine,
            }
        )
        print(f"p={p:<10g} ppl={report.perplexity:.6g} mse={report.mse:.6g}", file=sys.stderr)
    _emit({"mode": "quamba", "float_perplexity": float_report.perplexity, "rows": rows})
    return 0


def cmd_bound_check(args) -> int:
    try:
        dims = [int(tok) for tok in args.dims.split(",")]
        if len(dims) != 2:
            raise ValueError
    except ValueError:
        raise UsageError(f"--dims expects 'N,P', got {args.dims}") from None
    try:
        params = BoundParams(a=args.a, b=args.b, eps=args.eps, T=args.T,
                             N_dim=dims[0], P_dim=dims[1])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = verify_bound(params, trials=args.trials, seed=args.seed)
    _emit(report)
    return 0 if report["violations"] == 0 else 1


def cmd_sensitivity(args) -> int:
    model = _load_float_model(args.model)
    corpus = _load_corpus(args.corpus)
    report = sensitivity_scan(model, corpus)
    _emit({"sites": report})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssmq",
        description="Static W8A8 quantization toolkit for selective state-space models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-toy", help="write a seeded toy model and synthetic corpus")
    p.add_argument("--config", help="JSON file overriding model-config fields")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--inject-outliers", action="store_true",
                   help="plant output-channel outliers and heavy-tailed scan inputs")
    p.add_argument("--corpus-sequences", type=int, default=64)
    p.add_argument("--corpus-length", type=int, default=128)
    p.set_defaults(func=cmd_init_toy)

    p = sub.add_parser("calibrate", help="collect static activation scales")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--percentile", type=float, default=DEFAULT_PERCENTILE)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out-scales", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", help="quantize a float model under a scale set")
    p.add_argument("--model", required=True)
    p.add_argument("--scales", required=True)
    p.add_argument("--mode", choices=sorted(MODE_TAGS), default="quamba")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="perplexity (and deviation vs. a float reference)")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--reference")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-percentile", help="calibrate/quantize/evaluate per percentile")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--p", default="99,99.9,99.99,99.999")
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_sweep_percentile)

    p = sub.add_parser("bound-check", help="verify the recurrence error bound empirically")
    p.add_argument("--a", type=float, default=0.9)
    p.add_argument("--b", type=float, default=2.0)
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--T", type=int, default=64)
    p.add_argument("--dims", default="8,4", help="state,input dimensions as 'N,P'")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_bound_check)

    p = sub.add_parser("sensitivity", help="per-tensor quantization sensitivity scan")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_sensitivity)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
