"""Command-line frontend: datasets, calibration, sweeps, training, inference.

Exit codes: 0 success, 1 runtime/numeric failure, 2 usage or parse failure.
All emitted CSVs are RFC 4180 (CRLF, header row first).
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import calib, io, nn, train
from .datasets import make_pattern_dataset
from .lognum import (
    KIND_LINEAR,
    KIND_LOG,
    ROUND_FLOOR,
    ROUND_NEAREST,
    AccumulatorOverflow,
    ConfigError,
    DomainError,
    QuantizerConfig,
)
from .nn import CONV, FC, LINQUANT, LOGQUANT, ModelGraph, forward
from .tensor import Tensor


def worker_threads() -> int:
    env = os.environ.get("LOGNET_THREADS", "")
    if env:
        try:
            return max(1, int(env))
        except ValueError as e:
            raise ConfigError(f"LOGNET_THREADS must be an integer, got {env!r}") from e
    return min(4, os.cpu_count() or 1)


def _fmt(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)  # RFC 4180 line endings
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def load_images(path) -> np.ndarray:
    arr = io.read_idx(path)
    if arr.ndim == 3:
        arr = arr[:, None, :, :]
    if arr.ndim != 4:
        raise io.FileFormatError(0, f"expected rank 3 or 4 image data, got rank {arr.ndim}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return arr.astype(np.float32)


def load_labels(path, count: int | None = None) -> np.ndarray:
    arr = io.read_idx(path)
    if arr.ndim != 1:
        raise io.FileFormatError(0, f"labels must be rank 1, got rank {arr.ndim}")
    labels = arr.astype(np.int64)
    if count is not None and len(labels) != count:
        raise io.FileFormatError(0, f"{len(labels)} labels for {count} samples")
    return labels


def _open_model(path) -> ModelGraph:
    try:
        return io.read_model(path)
    except FileNotFoundError:
        raise SystemExit(_usage_fail(f"cannot open model file {path!r}"))


def _usage_fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 2


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def predict_scores(graph: ModelGraph, images: np.ndarray, mode: str, accum: str,
                   batch_size: int = 256, threads: int | None = None) -> np.ndarray:
    """Forward over batches, fanned out to worker threads, ordered by index."""
    if len(images) == 0:
        return np.zeros((0, 0), dtype=np.float32)
    spans = [(lo, min(lo + batch_size, len(images)))
             for lo in range(0, len(images), batch_size)]

    def run(span):
        lo, hi = span
        return forward(graph, Tensor.from_real(images[lo:hi]), mode, accum).data

    n_workers = threads if threads is not None else worker_threads()
    if n_workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            chunks = list(pool.map(run, spans))
    else:
        chunks = [run(s) for s in spans]
    return np.concatenate(chunks, axis=0)


def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    if len(labels) == 0:
        return math.nan
    k = min(k, scores.shape[1])
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float((top == labels[:, None]).any(axis=1).mean())


def ensure_weight_qconfigs(graph: ModelGraph, bits: int, base_frac_bits: int,
                           rounding: str) -> None:
    """Attach calibrated weight quantizers to conv/fc layers missing one."""
    for i, layer in enumerate(graph.layers):
        if layer.kind in (CONV, FC) and layer.qconfig is None:
            template = QuantizerConfig(KIND_LOG, bits, True, 0,
                                       base_frac_bits, rounding)
            fsr = calib.calibrate_fsr(graph.weight_array(i), template)
            graph.layers[i] = replace(layer, qconfig=replace(template, fsr=fsr))


def _parse_range(text: str) -> range:
    try:
        lo, hi = (int(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}")
    if hi < lo:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return range(lo, hi + 1)


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    for split, n, seed in (("train", args.n, args.seed), ("test", args.test_n, args.seed + 1)):
        images, labels = make_pattern_dataset(n, classes=args.classes, size=args.size,
                                              seed=seed, noise=args.noise,
                                              template_seed=args.seed)
        io.write_idx(os.path.join(args.out, f"{split}-images.idx"), images)
        io.write_idx(os.path.join(args.out, f"{split}-labels.idx"),
                     labels.astype(np.uint8))
    print(f"wrote {args.n}+{args.test_n} samples, {args.classes} classes, "
          f"{args.size}x{args.size} -> {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    graph = _open_model(args.model)
    try:
        images = load_images(args.data)
    except FileNotFoundError:
        return _usage_fail(f"cannot open data file {args.data!r}")
    if len(images) < 1:
        return _usage_fail("calibration needs at least one sample")
    sample = images[:args.samples]
    captured = nn.collect_quantizer_inputs(graph, Tensor.from_real(sample))
    if not captured:
        return _usage_fail("model has no quantizer layers to calibrate")
    # calibrate each layer under its own quantizer kind
    report = calib.CalibrationReport(global_fsr=graph.fsr)
    for kind in (KIND_LOG, KIND_LINEAR):
        group = {i: captured[i] for i in captured
                 if graph.layers[i].qconfig.kind == kind}
        if group:
            template = QuantizerConfig(kind, args.bitwidth, False, 0,
                                       rounding=args.rounding)
            sub = calib.calibrate_layers(group, template, graph.fsr, args.fsr_grid)
            report.layers.extend(sub.layers)
    report.layers.sort(key=lambda lc: lc.layer_index)
    for lc in report.layers:
        layer = graph.layers[lc.layer_index]
        cfg = replace(layer.qconfig, bitwidth=args.bitwidth, rounding=args.rounding)
        graph.layers[lc.layer_index] = replace(layer, qconfig=cfg,
                                               fsr_offset=lc.fsr_offset)
    io.write_model(args.out, graph)
    write_csv(args.report, ["layer", "fsr", "l1_error", "chosen"], report.csv_rows())
    print(report.summary())
    print(f"calibrated model -> {args.out}; report -> {args.report}")
    return 0


def cmd_sweep(args) -> int:
    graph = _open_model(args.model)
    try:
        images = load_images(args.data)
        labels = load_labels(args.labels, len(images))
    except FileNotFoundError as e:
        return _usage_fail(f"cannot open {e.filename!r}")
    if args.mode.startswith("method2"):
        ensure_weight_qconfigs(graph, args.weight_bits, 0, ROUND_NEAREST)
    rows = []
    for bw in args.bitwidths:
        g = ModelGraph(layers=list(graph.layers), fsr=graph.fsr,
                       weights=dict(graph.weights))
        for i, layer in enumerate(g.layers):
            if layer.kind in (LOGQUANT, LINQUANT):
                g.layers[i] = replace(layer, qconfig=replace(layer.qconfig, bitwidth=bw))
        for fsr in args.fsr_range:
            g.fsr = fsr
            scores = predict_scores(g, images, args.mode, args.accum)
            rows.append((bw, fsr, topk_accuracy(scores, labels, 1),
                         topk_accuracy(scores, labels, 5)))
    write_csv(args.out, ["bitwidth", "fsr", "top1", "top5"], rows)
    print(f"swept {len(rows)} grid points -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    graph = _open_model(args.model)
    try:
        images = load_images(args.data)
    except FileNotFoundError:
        return _usage_fail(f"cannot open data file {args.data!r}")
    if args.mode.startswith("method2"):
        ensure_weight_qconfigs(graph, args.weight_bits, 0, ROUND_NEAREST)
    timings = {}
    preds = np.zeros(0, dtype=np.int64)
    for mode, accum in ((args.mode, args.accum), ("float32", "linear")):
        t0 = time.perf_counter()
        scores = predict_scores(graph, images, mode, accum)
        timings[mode] = time.perf_counter() - t0
        if mode == args.mode:
            preds = scores.argmax(axis=1) if scores.size else np.zeros(0, dtype=np.int64)
        if args.mode == "float32":
            break
    write_csv(args.out, ["index", "prediction"], list(enumerate(preds)))
    for mode, dt in timings.items():
        rate = len(images) / dt if dt > 0 else math.nan
        print(f"{mode}: {len(images)} samples in {dt:.3f}s ({rate:.1f}/s)")
    print(f"predictions -> {args.out}")
    return 0


def cmd_quant_analyze(args) -> int:
    graph = _open_model(args.model)
    try:
        images = load_images(args.data)
    except FileNotFoundError:
        return _usage_fail(f"cannot open data file {args.data!r}")
    captured = nn.collect_quantizer_inputs(graph, Tensor.from_real(images[:args.samples]))
    if not captured:
        return _usage_fail("model has no quantizer layers to analyze")
    rows = []
    for idx in sorted(captured):
        layer = graph.layers[idx]
        cfg = replace(layer.qconfig, bitwidth=args.bitwidth,
                      fsr=graph.fsr + layer.fsr_offset)
        edges, counts = calib.error_histogram(captured[idx], cfg, args.bins)
        l1_log = calib.quant_error_l1(captured[idx], cfg)
        lin = QuantizerConfig(KIND_LINEAR, args.bitwidth, False, cfg.fsr)
        l1_lin = calib.quant_error_l1(captured[idx], lin)
        print(f"layer {idx}: L1 log {l1_log:.6g} vs linear {l1_lin:.6g} at fsr {cfg.fsr}")
        for b in range(len(counts)):
            rows.append((idx, edges[b], edges[b + 1], int(counts[b])))
    write_csv(args.out, ["layer", "bin_left", "bin_right", "count"], rows)
    print(f"histograms -> {args.out}")
    return 0


def cmd_pack(args) -> int:
    graph = _open_model(args.model)
    fb = 1 if args.base == "sqrt2" else 0
    rounding = ROUND_FLOOR if args.rounding == "floor" else ROUND_NEAREST
    template = QuantizerConfig(KIND_LOG, args.bits, True, 0, fb, rounding)
    from .tensor import quantize_tensor
    n_packed = 0
    for i, layer in enumerate(graph.layers):
        if layer.kind not in (CONV, FC):
            continue
        w = graph.weights[i]
        if w.is_quantized:
            continue
        fsr = calib.calibrate_fsr(w.real(), template)
        cfg = replace(template, fsr=fsr)
        graph.layers[i] = replace(layer, qconfig=cfg)
        graph.weights[i] = quantize_tensor(w, cfg)
        n_packed += 1
    io.write_model(args.out, graph)
    before = os.path.getsize(args.model)
    after = os.path.getsize(args.out)
    print(f"packed {n_packed} weight tensors at {args.bits}b "
          f"({before} -> {after} bytes, {before / after:.2f}x smaller)")
    return 0


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

_TRAIN_DEFAULTS = {
    "test_images": "", "test_labels": "",
    "conv_channels": "8,16", "fc_units": "64",
    "act_bits": "4", "act_kind": "log", "act_fsr": "3",
    "weight_bits": "5", "weight_kind": "log",
    "grad_bits": "5",
    "base": "2", "rounding": "nearest",
    "optimizer": "sgd", "lr": "0.02", "momentum": "0.9",
    "beta1": "0.9", "beta2": "0.999", "eps": "1e-8",
    "lr_decay_epochs": "0", "lr_decay_factor": "0.1",
    "batch_size": "100", "epochs": "10", "seed": "0",
    "grad_fsr_floor": "-20", "checkpoint_every": "1",
}
_TRAIN_REQUIRED = ("train_images", "train_labels", "out_model", "out_metrics")


def parse_train_config(path) -> dict:
    raw = dict(_TRAIN_DEFAULTS)
    try:
        with open(path) as f:
            lines = f.readlines()
    except FileNotFoundError:
        raise ConfigError(f"cannot open config file {path!r}")
    for ln, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _TRAIN_DEFAULTS and key not in _TRAIN_REQUIRED:
            raise ConfigError(f"unknown config key '{key}'")
        raw[key] = value
    for key in _TRAIN_REQUIRED:
        if key not in raw:
            raise ConfigError(f"missing required config key '{key}'")
    return raw


def _cfg_int(raw, key) -> int:
    try:
        return int(raw[key])
    except ValueError:
        raise ConfigError(f"key '{key}': expected an integer, got {raw[key]!r}")


def _cfg_float(raw, key) -> float:
    try:
        return float(raw[key])
    except ValueError:
        raise ConfigError(f"key '{key}': expected a number, got {raw[key]!r}")


def _cfg_choice(raw, key, choices) -> str:
    if raw[key] not in choices:
        raise ConfigError(f"key '{key}': expected one of {sorted(choices)}, got {raw[key]!r}")
    return raw[key]


def build_train_setup(raw: dict):
    """Config dict -> (graph, TrainConfig, datasets)."""
    fb = {"2": 0, "sqrt2": 1}[_cfg_choice(raw, "base", {"2", "sqrt2"})]
    rounding = {"nearest": ROUND_NEAREST, "floor": ROUND_FLOOR}[
        _cfg_choice(raw, "rounding", {"nearest", "floor"})]

    act_bits = _cfg_int(raw, "act_bits")
    act_kind = _cfg_choice(raw, "act_kind", {"log", "linear"})
    act_q = None
    if act_bits:
        act_q = QuantizerConfig(act_kind, act_bits, False, _cfg_int(raw, "act_fsr"),
                                0, rounding)
    weight_bits = _cfg_int(raw, "weight_bits")
    weight_kind = _cfg_choice(raw, "weight_kind", {"log", "linear"})
    weight_q = None
    if weight_bits:
        weight_q = QuantizerConfig(weight_kind, weight_bits, True, 0,
                                   fb if weight_kind == "log" else 0, rounding)
    grad_bits = _cfg_int(raw, "grad_bits")
    grad_q = None
    if grad_bits:
        grad_q = QuantizerConfig("log", grad_bits, True, 0, fb, rounding)

    opt = train.OptimizerSpec(
        kind={"sgd": "sgd_momentum", "adam": "adam"}[
            _cfg_choice(raw, "optimizer", {"sgd", "adam"})],
        lr=_cfg_float(raw, "lr"), momentum=_cfg_float(raw, "momentum"),
        beta1=_cfg_float(raw, "beta1"), beta2=_cfg_float(raw, "beta2"),
        eps=_cfg_float(raw, "eps"),
        lr_decay_epochs=_cfg_int(raw, "lr_decay_epochs"),
        lr_decay_factor=_cfg_float(raw, "lr_decay_factor"))
    cfg = train.TrainConfig(
        weight_q=weight_q, activation_q=act_q, gradient_q=grad_q, optimizer=opt,
        batch_size=_cfg_int(raw, "batch_size"), epochs=_cfg_int(raw, "epochs"),
        seed=_cfg_int(raw, "seed"), grad_fsr_floor=_cfg_int(raw, "grad_fsr_floor"))

    try:
        train_x = load_images(raw["train_images"])
        train_y = load_labels(raw["train_labels"], len(train_x))
        test = None
        if raw["test_images"]:
            test_x = load_images(raw["test_images"])
            test = (test_x.astype(np.float64), load_labels(raw["test_labels"], len(test_x)))
    except FileNotFoundError as e:
        raise ConfigError(f"cannot open dataset file {e.filename!r}")

    channels = raw["conv_channels"].split(",")
    if len(channels) != 2:
        raise ConfigError("key 'conv_channels': expected two comma-separated integers")
    try:
        c1, c2 = int(channels[0]), int(channels[1])
    except ValueError:
        raise ConfigError(f"key 'conv_channels': {raw['conv_channels']!r}")
    classes = int(train_y.max()) + 1
    in_shape = train_x.shape[1:]
    # activations stay on the base-2 grid; the base option applies to the
    # weight/gradient quantizers
    graph = train.build_small_cnn(in_shape, (c1, c2), _cfg_int(raw, "fc_units"),
                                  classes, act_bits or 4, 0, 0, rounding)
    if act_kind == "linear" and act_q is not None:
        for i, layer in enumerate(graph.layers):
            if layer.kind == LOGQUANT:
                graph.layers[i] = nn.act_quant_layer("linear", act_bits,
                                                     layer.fsr_offset, 0, rounding)
    return graph, cfg, (train_x.astype(np.float64), train_y), test


def cmd_train(args) -> int:
    raw = parse_train_config(args.config)
    graph, cfg, train_data, test_data = build_train_setup(raw)
    state = train.init_state(graph, cfg)
    io.write_model(raw["out_model"], train.sync_graph_weights(state, cfg))

    header = ["step", "epoch", "loss", "train_acc", "test_acc"]
    rows: list[tuple] = []
    checkpoint_every = max(_cfg_int(raw, "checkpoint_every"), 1)

    def on_epoch(row):
        rows.append((row["step"], row["epoch"], row["loss"], row["train_acc"],
                     row["test_acc"]))
        if row["epoch"] % checkpoint_every == 0:
            io.write_model(raw["out_model"], train.sync_graph_weights(state, cfg))

    try:
        train.fit(state, cfg, train_data, test_data, on_epoch=on_epoch)
    except train.TrainingDiverged as e:
        write_csv(raw["out_metrics"], header, rows)
        print(f"aborted: {e}; last good checkpoint kept at {raw['out_model']}",
              file=sys.stderr)
        return 1
    io.write_model(raw["out_model"], train.sync_graph_weights(state, cfg))
    write_csv(raw["out_metrics"], header, rows)
    if rows:
        last = rows[-1]
        print(f"epoch {last[1]}: loss {last[2]:.4f} train_acc {last[3]:.4f} "
              + (f"test_acc {last[4]:.4f}" if not math.isnan(last[4]) else ""))
    print(f"checkpoint -> {raw['out_model']}; metrics -> {raw['out_metrics']}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lognet",
        description="Logarithmic data representation for neural networks")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic image dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=10000)
    g.add_argument("--test-n", type=int, default=2000)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--size", type=int, default=12)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    c = sub.add_parser("calibrate", help="choose per-layer fsr offsets from samples")
    c.add_argument("model")
    c.add_argument("data")
    c.add_argument("--bitwidth", type=int, default=4)
    c.add_argument("--fsr-grid", type=_parse_range, default=range(-10, 21))
    c.add_argument("--samples", type=int, default=100)
    c.add_argument("--rounding", choices=[ROUND_FLOOR, ROUND_NEAREST],
                   default=ROUND_NEAREST)
    c.add_argument("--out", required=True)
    c.add_argument("--report", required=True)
    c.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("sweep", help="accuracy vs fsr per bitwidth")
    s.add_argument("model")
    s.add_argument("data")
    s.add_argument("labels")
    s.add_argument("--mode", choices=list(nn.FORWARD_MODES), required=True)
    s.add_argument("--accum", choices=["linear", "log"], default="linear")
    s.add_argument("--bitwidths", type=_parse_int_list, default=[3, 4])
    s.add_argument("--fsr-range", type=_parse_range, required=True)
    s.add_argument("--weight-bits", type=int, default=5)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    t = sub.add_parser("train", help="train per the key=value config file")
    t.add_argument("config")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="predict classes and report timing")
    i.add_argument("model")
    i.add_argument("data")
    i.add_argument("--mode", choices=list(nn.FORWARD_MODES), default="method2_base2")
    i.add_argument("--accum", choices=["linear", "log"], default="linear")
    i.add_argument("--weight-bits", type=int, default=5)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_infer)

    q = sub.add_parser("quant-analyze", help="quantization error histograms")
    q.add_argument("model")
    q.add_argument("data")
    q.add_argument("--bitwidth", type=int, default=4)
    q.add_argument("--bins", type=int, default=256)
    q.add_argument("--samples", type=int, default=100)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_quant_analyze)

    k = sub.add_parser("pack", help="quantize weights and pack to true bitwidth")
    k.add_argument("model")
    k.add_argument("--bits", type=int, default=4)
    k.add_argument("--base", choices=["2", "sqrt2"], default="2")
    k.add_argument("--rounding", choices=["nearest", "floor"], default="nearest")
    k.add_argument("--out", required=True)
    k.set_defaults(fn=cmd_pack)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.fn(args)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    except FileNotFoundError as e:
        return _usage_fail(f"cannot open {getattr(e, 'filename', e)!r}")
    except (io.FileFormatError, ConfigError, DomainError) as e:
        return _usage_fail(str(e))
    except (train.TrainingDiverged, AccumulatorOverflow, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
