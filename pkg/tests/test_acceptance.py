"""Acceptance suite: one test per shipping criterion, pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines.  Tolerances are pinned here, not configurable.
"""

import time
from dataclasses import replace
from fractions import Fraction

import numpy as np

from lognet import QuantizerConfig, Tensor, dot_method1, dot_method2, LogCode
from lognet import lognum
from lognet.calib import fsr_error_profile
from lognet.datasets import make_pattern_dataset
from lognet.lognum import log_accumulate_raw
from lognet import io as lio
from lognet.cli import main as cli_main
from lognet import train as T
from lognet.nn import ModelGraph, fc as fc_layer

from oracles import linquant_ref, logquant_ref


def report(n: int, ok: bool, text: str, detail: str = ""):
    tag = "PASS" if ok else "FAIL"
    print(f"{tag}: criterion {n} - {text}" + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {n}: {text} {detail}"


# ---------------------------------------------------------------------------
# 1. quantizer oracle equivalence
# ---------------------------------------------------------------------------

def _input_grid(cfg: QuantizerConfig, per_config: int, rng) -> np.ndarray:
    lo = cfg.fsr - cfg.num_codes * cfg.step - 2
    hi = cfg.fsr + 2
    exps = rng.uniform(lo, hi, size=per_config)
    xs = 2.0 ** exps
    anchors = 2.0 ** np.arange(max(lo, -30), min(hi, 30) + 1, dtype=np.float64)
    xs = np.concatenate([xs, anchors[:per_config // 4]])
    if cfg.signed:
        xs = np.concatenate([xs, -xs[: len(xs) // 2]])
    return xs


def test_criterion_1_quantizer_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(2016)
    checked = 0
    mismatches = []
    for bw in range(1, 7):
        for signed in (False, True):
            if signed and bw < 2:
                continue
            for fsr in range(-8, 17):
                for fb in (0, 1):
                    for mode in (lognum.ROUND_NEAREST, lognum.ROUND_FLOOR):
                        cfg = QuantizerConfig("log", bw, signed, fsr, fb, mode)
                        xs = _input_grid(cfg, 64, rng)
                        got = lognum.dequantize_array(
                            lognum.logquant_array(xs, cfg), cfg)
                        for x, g in zip(xs, got):
                            _, want = logquant_ref(float(x), bw, signed, fsr, fb, mode)
                            checked += 1
                            if g != want:
                                mismatches.append((cfg, float(x), float(g), want))
                # linear variant: base 2 only, rounding fixed by the formula
                cfg = QuantizerConfig("linear", bw, signed, fsr)
                xs = _input_grid(cfg, 14, rng)
                got = lognum.dequantize_array(lognum.linquant_array(xs, cfg), cfg)
                for x, g in zip(xs, got):
                    _, want = linquant_ref(float(x), bw, signed, fsr)
                    checked += 1
                    if g != want:
                        mismatches.append((cfg, float(x), float(g), want))
    dt = time.time() - t0
    report(1, not mismatches and checked >= 10**5 and dt < 60,
           "logquant/linquant match the high-precision oracle exactly",
           f"{checked} points, {len(mismatches)} mismatches, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 2. log-accumulation error bounds
# ---------------------------------------------------------------------------

def test_criterion_2_log_accumulation_bounds():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    f = 4

    a = rng.integers(-8 << f, (8 << f) + 1, size=10**5)
    b0 = rng.integers(-8 << f, (8 << f) + 1, size=10**5)
    keep = np.abs(a - b0) <= (16 << f)
    a, b0 = a[keep], b0[keep]
    got = log_accumulate_raw(a, b0, f) / (1 << f)
    exact = np.logaddexp2(a / (1 << f), b0 / (1 << f))
    pair_err = np.abs(got - exact).max()

    seqs = rng.integers(-8 << f, (8 << f) + 1, size=(10**4, 64))
    s = seqs[:, 0].copy()
    for k in range(1, 64):
        s = log_accumulate_raw(s, seqs[:, k], f)
    exact_seq = np.logaddexp2.reduce(seqs / (1 << f), axis=1)
    seq_err = np.abs(s / (1 << f) - exact_seq).max()

    dt = time.time() - t0
    report(2, pair_err <= 0.15 and seq_err <= 64 * 0.15 and dt < 60,
           "log-domain accumulation stays within the per-step bound",
           f"pair err {pair_err:.4f} <= 0.15, len-64 err {seq_err:.3f} <= 9.6, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 3. multiplier-free exactness on powers of two
# ---------------------------------------------------------------------------

def test_criterion_3_power_of_two_exactness():
    rng = np.random.default_rng(77)
    cfg_x = QuantizerConfig("log", 4, False, 5)
    cfg_w = QuantizerConfig("log", 6, True, 5)

    def code_for(cfg, e, s=1):
        return LogCode.of(s, cfg.num_codes - (cfg.fsr - e))

    bad = 0
    for case in range(10**4):
        n = int(rng.integers(1, 32))
        xe = rng.integers(-4, 5, size=n)
        we = rng.integers(-4, 5, size=n)
        ws = rng.choice([-1, 1], size=n)
        x_codes = [code_for(cfg_x, int(e)) for e in xe]
        w_codes = [code_for(cfg_w, int(e), int(s)) for e, s in zip(we, ws)]
        w_real = [float(s) * 2.0 ** int(e) for e, s in zip(we, ws)]
        exact = sum(Fraction(w) * Fraction(2) ** int(e)
                    for w, e in zip(w_real, xe))
        if case % 2 == 0:
            got = dot_method1(w_real, x_codes, cfg_x).value
        else:
            got = dot_method2(w_codes, x_codes, cfg_w, cfg_x, "linear").value
        if Fraction(got) != exact:
            bad += 1
    report(3, bad == 0, "bitshift dot products are exact on power-of-two operands",
           f"10^4 cases, {bad} mismatches")


# ---------------------------------------------------------------------------
# 4. log vs linear mean L1 on Exp(1) samples
# ---------------------------------------------------------------------------

def test_criterion_4_log_beats_linear_on_exponential():
    t0 = time.time()
    rng = np.random.default_rng(41)
    x = rng.exponential(1.0, size=10**6)
    x *= 2.0**7 / x.max()  # scale the sample onto [0, 2^7]
    results = {}
    for bw in (3, 4):
        e_log = min(e for _, e in fsr_error_profile(
            x, QuantizerConfig("log", bw, False, 0)))
        e_lin = min(e for _, e in fsr_error_profile(
            x, QuantizerConfig("linear", bw, False, 0)))
        results[bw] = (e_log, e_lin)
    dt = time.time() - t0
    ok = all(e_log < e_lin for e_log, e_lin in results.values()) and dt < 60
    detail = ", ".join(
        f"{bw}b: log {e_log:.4f} vs linear {e_lin:.4f}"
        for bw, (e_log, e_lin) in results.items()) + f", {dt:.1f}s"
    # A thin-tailed exponential keeps max/mean near ln(N); at 3-4 bits an
    # optimally ranged uniform step then beats the factor-2 grid's ~17%
    # mean relative error, at any scaling.  Heavy-tailed samples (as real
    # activations are) reverse this; see test_calib for that property.
    report(4, ok, "log quantization beats linear on scaled Exp(1) at 3b and 4b",
           detail)


# ---------------------------------------------------------------------------
# 5. base-sqrt2 improvement on Gaussian weights
# ---------------------------------------------------------------------------

def test_criterion_5_sqrt2_improvement():
    t0 = time.time()
    rng = np.random.default_rng(43)
    w = rng.normal(0.0, 1.0, size=10**6)
    e2 = min(e for _, e in fsr_error_profile(w, QuantizerConfig("log", 5, True, 0)))
    es = min(e for _, e in fsr_error_profile(
        w, QuantizerConfig("log", 5, True, 0, base_frac_bits=1)))
    dt = time.time() - t0
    report(5, es <= 0.6 * e2 and dt < 60,
           "5b base-sqrt2 cuts weight L1 error to <= 0.6x of base-2",
           f"ratio {es / e2:.3f}, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 6. quantized training tracks the float baseline
# ---------------------------------------------------------------------------

def test_criterion_6_quantized_training_convergence():
    t0 = time.time()
    tx, ty = make_pattern_dataset(10000, classes=10, size=12, seed=100,
                                  template_seed=100)
    vx, vy = make_pattern_dataset(2000, classes=10, size=12, seed=101,
                                  template_seed=100)
    tx, vx = tx.astype(np.float64), vx.astype(np.float64)
    gaps = []
    for seed in (0, 1, 2):
        accs = {}
        for quant in (False, True):
            kw = {}
            if quant:
                kw = dict(weight_q=QuantizerConfig("log", 5, True, 0),
                          activation_q=QuantizerConfig("log", 4, False, 3),
                          gradient_q=QuantizerConfig("log", 5, True, 0))
            cfg = T.TrainConfig(
                optimizer=T.OptimizerSpec("sgd_momentum", lr=0.03, momentum=0.9,
                                          lr_decay_epochs=5, lr_decay_factor=0.1),
                batch_size=50, epochs=10, seed=seed, **kw)
            g = T.build_small_cnn((1, 12, 12), (8, 16), 64, 10)
            st = T.init_state(g, cfg)
            st, hist = T.fit(st, cfg, (tx, ty), (vx, vy))
            accs[quant] = hist[-1]["test_acc"]
        gaps.append((seed, accs[False], accs[True],
                     (accs[False] - accs[True]) * 100))
    dt = time.time() - t0
    ok = all(gap <= 3.0 for _, _, _, gap in gaps) and dt < 30 * 60
    detail = "; ".join(f"seed {s}: float {f:.4f} quant {q:.4f} gap {g:.2f}pp"
                       for s, f, q, g in gaps) + f"; {dt:.0f}s"
    report(6, ok, "4b/5b/5b quantized training within 3pp of float after 10 epochs",
           detail)


# ---------------------------------------------------------------------------
# 7. gradient check
# ---------------------------------------------------------------------------

def test_criterion_7_gradient_check():
    rng = np.random.default_rng(71)
    graph = ModelGraph(layers=[fc_layer(5, 6), T.relu_layer(), fc_layer(3, 5)], fsr=0)
    cfg = T.TrainConfig(seed=1)
    state = T.init_state(graph, cfg)
    x = rng.normal(size=(8, 6))
    y = rng.integers(0, 3, size=8)

    logits, caches = T._forward_train(state, x, cfg, training=True)
    _, gl = T.softmax_cross_entropy(logits, y)
    grads, _ = T._backward_train(state, caches, gl, cfg)

    worst = 0.0
    for i in grads:
        w = state.params[i]
        num = np.zeros_like(w)
        h = 1e-5
        it = np.nditer(w, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = w[idx]
            w[idx] = old + h
            up = T.softmax_cross_entropy(T._forward_train(state, x, cfg, True)[0], y)[0]
            w[idx] = old - h
            dn = T.softmax_cross_entropy(T._forward_train(state, x, cfg, True)[0], y)[0]
            w[idx] = old
            num[idx] = (up - dn) / (2 * h)
        denom = np.maximum(np.abs(num), 1e-4)
        worst = max(worst, float((np.abs(grads[i] - num) / denom).max()))
    report(7, worst <= 1e-3, "backward matches central finite differences",
           f"max relative error {worst:.2e} <= 1e-3")


# ---------------------------------------------------------------------------
# 8. packed serialization compression
# ---------------------------------------------------------------------------

def test_criterion_8_compression(tmp_path):
    rng = np.random.default_rng(83)
    w = rng.normal(0, 0.5, size=(1000, 4096)).astype(np.float32)
    graph = ModelGraph(layers=[fc_layer(1000, 4096)], fsr=0)
    graph.weights[0] = Tensor.from_real(w)
    f32_path = tmp_path / "f32.lgn"
    lio.write_model(f32_path, graph)

    cfg = QuantizerConfig("log", 4, True, 0)
    from lognet import quantize_tensor
    gq = ModelGraph(layers=[replace(graph.layers[0], qconfig=cfg)], fsr=0)
    gq.weights[0] = quantize_tensor(Tensor.from_real(w), cfg)
    packed_path = tmp_path / "packed.lgn"
    lio.write_model(packed_path, gq)

    ratio = f32_path.stat().st_size / packed_path.stat().st_size
    report(8, abs(ratio - 8.0) <= 0.08,
           "4b packed weights are 8x smaller than f32 within 1% container overhead",
           f"ratio {ratio:.4f}")


# ---------------------------------------------------------------------------
# 9. determinism of the command-line entry points
# ---------------------------------------------------------------------------

def test_criterion_9_cli_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli_main(["gen-data", "--out", str(data), "--n", "400", "--test-n", "100",
                     "--classes", "4", "--size", "12", "--seed", "9"]) == 0
    outputs = {"train": [], "sweep": []}
    for run in ("a", "b"):
        cfg = tmp_path / f"cfg{run}"
        cfg.write_text("\n".join([
            f"train_images = {data}/train-images.idx",
            f"train_labels = {data}/train-labels.idx",
            f"out_model = {tmp_path}/m{run}.lgn",
            f"out_metrics = {tmp_path}/t{run}.csv",
            "conv_channels = 4,8", "fc_units = 16",
            "epochs = 2", "batch_size = 100", "seed = 4",
        ]))
        assert cli_main(["train", str(cfg)]) == 0
        outputs["train"].append((tmp_path / f"t{run}.csv").read_bytes())
        sweep_out = tmp_path / f"s{run}.csv"
        assert cli_main(["sweep", str(tmp_path / f"m{run}.lgn"),
                         str(data / "test-images.idx"), str(data / "test-labels.idx"),
                         "--mode", "method2_base2", "--bitwidths", "4",
                         "--fsr-range", "2:4", "--out", str(sweep_out)]) == 0
        outputs["sweep"].append(sweep_out.read_bytes())
    ok = (outputs["train"][0] == outputs["train"][1]
          and outputs["sweep"][0] == outputs["sweep"][1])
    report(9, ok, "fixed-seed train and sweep runs emit byte-identical CSVs",
           f"train {len(outputs['train'][0])}B, sweep {len(outputs['sweep'][0])}B")
