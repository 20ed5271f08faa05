"""File formats and command-line behavior."""

import os

import numpy as np
import pytest

from lognet import QuantizerConfig, Tensor, quantize_tensor
from lognet import io as lio
from lognet.cli import main, parse_train_config
from lognet.lognum import ConfigError, DomainError
from lognet.nn import ModelGraph, act_quant_layer, batchnorm_layer, conv, fc, maxpool_layer, relu_layer


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------

def test_pack_codes_size():
    codes = np.arange(8, dtype=np.uint8)
    assert len(lio.pack_codes(codes, 4)) == 4
    assert len(lio.pack_codes(np.zeros(3, dtype=np.uint8), 5)) == 2  # ceil(15/8)


def test_pack_unpack_round_trip():
    rng = np.random.default_rng(127)
    for bw in range(1, 9):
        codes = rng.integers(0, 1 << bw, size=101, dtype=np.uint8)
        packed = lio.pack_codes(codes, bw)
        assert len(packed) == (101 * bw + 7) // 8
        got = lio.unpack_codes(packed, bw, 101)
        assert np.array_equal(got, codes)


def test_pack_codes_overflow_rejected():
    with pytest.raises(DomainError):
        lio.pack_codes(np.array([16], dtype=np.uint8), 4)


def test_pack_sign_bit_leads():
    # a single 4-bit code 0b1010 lands in the top nibble, sign bit first
    packed = lio.pack_codes(np.array([0b1010], dtype=np.uint8), 4)
    assert packed == bytes([0b10100000])


def test_fc_weight_compression_ratio():
    n = 1000 * 4096
    payload_f32 = 4 * n
    payload_4b = (4 * n + 7) // 8
    assert payload_f32 / payload_4b == 8.0


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

def small_model(quantize_weights=False):
    wq = QuantizerConfig("log", 4, True, 1)
    layers = [
        conv(4, 1, 3, pad=1, wq=wq),
        batchnorm_layer(4),
        relu_layer(),
        act_quant_layer("log", 4, fsr_offset=2),
        maxpool_layer(2),
        fc(3, 4 * 3 * 3, wq=wq),
    ]
    g = ModelGraph(layers=layers, fsr=5)
    rng = np.random.default_rng(131)
    g.weights[0] = Tensor.from_real(rng.normal(0, 0.5, size=(4, 1, 3, 3)))
    g.weights[1] = Tensor.from_real(np.stack([np.ones(4), np.zeros(4),
                                              np.zeros(4), np.ones(4)]))
    g.weights[5] = Tensor.from_real(rng.normal(0, 0.5, size=(3, 36)))
    if quantize_weights:
        for i in (0, 5):
            g.weights[i] = quantize_tensor(g.weights[i], wq)
    return g


def test_model_round_trip(tmp_path):
    path = tmp_path / "m.lgn"
    g = small_model()
    lio.write_model(path, g)
    g2 = lio.read_model(path)
    assert g2.fsr == 5
    assert [l.kind for l in g2.layers] == [l.kind for l in g.layers]
    assert g2.layers[3].fsr_offset == 2
    assert g2.layers[0].qconfig == g.layers[0].qconfig
    for i in (0, 1, 5):
        assert np.array_equal(g2.weights[i].data, g.weights[i].data)
    # write -> read -> write is byte-identical
    path2 = tmp_path / "m2.lgn"
    lio.write_model(path2, g2)
    assert path.read_bytes() == path2.read_bytes()


def test_model_round_trip_packed(tmp_path):
    path = tmp_path / "p.lgn"
    g = small_model(quantize_weights=True)
    lio.write_model(path, g)
    g2 = lio.read_model(path)
    for i in (0, 5):
        assert g2.weights[i].is_quantized
        assert np.array_equal(g2.weights[i].data, g.weights[i].data)
        assert g2.weights[i].qconfig == g.weights[i].qconfig


def test_model_rejects_unknown_tags(tmp_path):
    path = tmp_path / "bad.lgn"
    g = small_model()
    lio.write_model(path, g)
    raw = bytearray(path.read_bytes())
    raw[10] = 0xEE  # first layer kind tag
    path.write_bytes(bytes(raw))
    with pytest.raises(lio.FileFormatError) as err:
        lio.read_model(path)
    assert "byte 10" in str(err.value)


def test_model_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.lgn"
    path.write_bytes(b"JUNKxxxxxxxx")
    with pytest.raises(lio.FileFormatError):
        lio.read_model(path)


def test_model_rejects_truncation(tmp_path):
    path = tmp_path / "t.lgn"
    lio.write_model(path, small_model())
    data = path.read_bytes()
    path.write_bytes(data[:len(data) - 7])
    with pytest.raises(lio.FileFormatError):
        lio.read_model(path)


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------

def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(137)
    imgs = rng.uniform(0, 1, size=(7, 1, 5, 5)).astype(np.float32)
    labels = rng.integers(0, 10, size=7).astype(np.uint8)
    pi, pl = tmp_path / "i.idx", tmp_path / "l.idx"
    lio.write_idx(pi, imgs)
    lio.write_idx(pl, labels)
    assert np.array_equal(lio.read_idx(pi), imgs)
    assert np.array_equal(lio.read_idx(pl), labels)


def test_idx_big_endian_dims(tmp_path):
    path = tmp_path / "d.idx"
    lio.write_idx(path, np.zeros((300, 2), dtype=np.uint8))
    raw = path.read_bytes()
    assert raw[:4] == bytes([0, 0, 0x08, 2])
    assert int.from_bytes(raw[4:8], "big") == 300


# ---------------------------------------------------------------------------
# CLI end to end
# ---------------------------------------------------------------------------

EPOCHS = 8


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    rc = main(["gen-data", "--out", str(data), "--n", "1200", "--test-n", "200",
               "--classes", "4", "--size", "12", "--seed", "5"])
    assert rc == 0
    cfgfile = root / "train.cfg"
    cfgfile.write_text("\n".join([
        f"train_images = {data}/train-images.idx",
        f"train_labels = {data}/train-labels.idx",
        f"test_images = {data}/test-images.idx",
        f"test_labels = {data}/test-labels.idx",
        f"out_model = {root}/model.lgn",
        f"out_metrics = {root}/metrics.csv",
        "conv_channels = 4,8",
        "fc_units = 16",
        f"epochs = {EPOCHS}",
        "batch_size = 50",
        "lr = 0.05",
        "seed = 3",
    ]))
    rc = main(["train", str(cfgfile)])
    assert rc == 0
    return root, data, cfgfile


def test_cli_train_outputs(workspace):
    root, data, _ = workspace
    assert (root / "model.lgn").exists()
    lines = (root / "metrics.csv").read_bytes().split(b"\r\n")
    assert lines[0] == b"step,epoch,loss,train_acc,test_acc"
    assert len([l for l in lines if l]) == EPOCHS + 1  # header + one row per epoch


def test_cli_train_determinism(workspace, tmp_path):
    root, data, cfgfile = workspace
    text = cfgfile.read_text()
    for run in ("a", "b"):
        cfg2 = tmp_path / f"cfg{run}"
        cfg2.write_text(text
                        .replace("model.lgn", f"model{run}.lgn")
                        .replace("metrics.csv", f"metrics{run}.csv"))
        assert main(["train", str(cfg2)]) == 0
    ma = (root / "metricsa.csv").read_bytes()
    mb = (root / "metricsb.csv").read_bytes()
    assert ma == mb
    assert (root / "modela.lgn").read_bytes() == (root / "modelb.lgn").read_bytes()


def test_cli_train_epochs_zero(workspace, tmp_path):
    root, data, cfgfile = workspace
    cfg2 = tmp_path / "cfg0"
    cfg2.write_text(cfgfile.read_text()
                    .replace("epochs = 8", "epochs = 0")
                    .replace("model.lgn", "model0.lgn")
                    .replace("metrics.csv", "metrics0.csv"))
    assert main(["train", str(cfg2)]) == 0
    assert (root / "model0.lgn").exists()
    body = (root / "metrics0.csv").read_bytes()
    assert body == b"step,epoch,loss,train_acc,test_acc\r\n"


def test_cli_train_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense_key = 1\n")
    assert main(["train", str(bad)]) == 2
    assert "nonsense_key" in capsys.readouterr().err


def test_cli_infer(workspace, tmp_path, capsys):
    root, data, _ = workspace
    out = tmp_path / "pred.csv"
    rc = main(["infer", str(root / "model.lgn"), str(data / "test-images.idx"),
               "--mode", "method2_base2", "--out", str(out)])
    assert rc == 0
    lines = out.read_bytes().split(b"\r\n")
    assert lines[0] == b"index,prediction"
    assert len([l for l in lines if l]) == 201
    assert "float32:" in capsys.readouterr().out


def test_cli_infer_agreement_with_float(workspace, tmp_path):
    # exponent-sum inference vs float32 over the same dequantized weights:
    # pack first so both modes consume identical weight codes
    root, data, _ = workspace
    packed = tmp_path / "packed.lgn"
    assert main(["pack", str(root / "model.lgn"), "--bits", "5",
                 "--out", str(packed)]) == 0
    outs = {}
    for mode in ("method2_base2", "float32"):
        out = tmp_path / f"{mode}.csv"
        assert main(["infer", str(packed), str(data / "test-images.idx"),
                     "--mode", mode, "--out", str(out)]) == 0
        rows = out.read_text().strip().splitlines()[1:]
        outs[mode] = [r.split(",")[1] for r in rows]
    same = sum(a == b for a, b in zip(outs["method2_base2"], outs["float32"]))
    assert same / len(outs["float32"]) >= 0.95


def test_cli_infer_empty_dataset(workspace, tmp_path):
    root, data, _ = workspace
    empty = tmp_path / "empty.idx"
    lio.write_idx(empty, np.zeros((0, 1, 12, 12), dtype=np.float32))
    out = tmp_path / "pred.csv"
    rc = main(["infer", str(root / "model.lgn"), str(empty), "--out", str(out)])
    assert rc == 0
    assert out.read_bytes() == b"index,prediction\r\n"


def test_cli_unknown_mode_exits_2(workspace, tmp_path, capsys):
    root, data, _ = workspace
    rc = main(["infer", str(root / "model.lgn"), str(data / "test-images.idx"),
               "--mode", "warp", "--out", str(tmp_path / "x.csv")])
    assert rc == 2
    assert "method2_base2" in capsys.readouterr().err  # lists valid modes


def test_cli_missing_file_exits_2(tmp_path, capsys):
    rc = main(["infer", str(tmp_path / "absent.lgn"), str(tmp_path / "absent.idx"),
               "--out", str(tmp_path / "x.csv")])
    assert rc == 2
    assert "cannot open" in capsys.readouterr().err


def test_cli_calibrate(workspace, tmp_path):
    root, data, _ = workspace
    out_model = tmp_path / "cal.lgn"
    report = tmp_path / "cal.csv"
    rc = main(["calibrate", str(root / "model.lgn"), str(data / "train-images.idx"),
               "--bitwidth", "4", "--fsr-grid=-4:8",
               "--out", str(out_model), "--report", str(report)])
    assert rc == 0
    g = lio.read_model(out_model)
    quant_layers = [l for l in g.layers if l.kind in ("logquant", "linearquant")]
    assert quant_layers
    rows = report.read_text().strip().splitlines()
    assert rows[0] == "layer,fsr,l1_error,chosen"
    # one row per (layer, candidate)
    assert len(rows) - 1 == len(quant_layers) * 13


def test_cli_calibrate_single_candidate_forced(workspace, tmp_path):
    root, data, _ = workspace
    out_model = tmp_path / "cal1.lgn"
    rc = main(["calibrate", str(root / "model.lgn"), str(data / "train-images.idx"),
               "--fsr-grid", "5:5", "--out", str(out_model),
               "--report", str(tmp_path / "r.csv")])
    assert rc == 0
    g = lio.read_model(out_model)
    for l in g.layers:
        if l.kind in ("logquant", "linearquant"):
            assert g.fsr + l.fsr_offset == 5


def test_cli_sweep(workspace, tmp_path):
    root, data, _ = workspace
    out = tmp_path / "sweep.csv"
    rc = main(["sweep", str(root / "model.lgn"), str(data / "test-images.idx"),
               str(data / "test-labels.idx"), "--mode", "method2_base2",
               "--bitwidths", "3,4", "--fsr-range", "2:6", "--out", str(out)])
    assert rc == 0
    rows = out.read_text().strip().splitlines()
    assert rows[0] == "bitwidth,fsr,top1,top5"
    assert len(rows) - 1 == 2 * 5
    # peak of the curve is at least as good as its endpoints
    import csv as _csv
    recs = list(_csv.DictReader(out.read_text().splitlines()))
    for bw in ("3", "4"):
        accs = [float(r["top1"]) for r in recs if r["bitwidth"] == bw]
        assert max(accs) >= accs[0] and max(accs) >= accs[-1]


def test_cli_sweep_float32_constant(workspace, tmp_path):
    root, data, _ = workspace
    out = tmp_path / "sweepf.csv"
    rc = main(["sweep", str(root / "model.lgn"), str(data / "test-images.idx"),
               str(data / "test-labels.idx"), "--mode", "float32",
               "--bitwidths", "3", "--fsr-range", "0:3", "--out", str(out)])
    assert rc == 0
    import csv as _csv
    recs = list(_csv.DictReader(out.read_text().splitlines()))
    accs = {r["top1"] for r in recs}
    assert len(accs) == 1


def test_cli_sweep_empty_range_exits_2(workspace, tmp_path, capsys):
    root, data, _ = workspace
    rc = main(["sweep", str(root / "model.lgn"), str(data / "test-images.idx"),
               str(data / "test-labels.idx"), "--mode", "float32",
               "--fsr-range", "5:2", "--out", str(tmp_path / "x.csv")])
    assert rc == 2


def test_cli_sweep_determinism(workspace, tmp_path):
    root, data, _ = workspace
    outs = []
    for run in range(2):
        out = tmp_path / f"s{run}.csv"
        assert main(["sweep", str(root / "model.lgn"), str(data / "test-images.idx"),
                     str(data / "test-labels.idx"), "--mode", "method1",
                     "--bitwidths", "4", "--fsr-range", "3:5", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_cli_pack_compression(workspace, tmp_path):
    root, _, _ = workspace
    out = tmp_path / "packed.lgn"
    rc = main(["pack", str(root / "model.lgn"), "--bits", "4", "--out", str(out)])
    assert rc == 0
    g = lio.read_model(out)
    assert g.weights[0].is_quantized
    assert os.path.getsize(out) < os.path.getsize(root / "model.lgn")


def test_cli_quant_analyze(workspace, tmp_path, capsys):
    root, data, _ = workspace
    out = tmp_path / "hist.csv"
    rc = main(["quant-analyze", str(root / "model.lgn"),
               str(data / "train-images.idx"), "--out", str(out)])
    assert rc == 0
    rows = out.read_text().strip().splitlines()
    assert rows[0] == "layer,bin_left,bin_right,count"
    assert "L1 log" in capsys.readouterr().out


def test_cli_train_linear_reference_config(workspace, tmp_path):
    # linear-quantized weights/activations with float gradients: the
    # reference configuration runs to completion alongside the log one
    root, data, cfgfile = workspace
    cfg2 = tmp_path / "lin.cfg"
    cfg2.write_text(cfgfile.read_text()
                    .replace("model.lgn", "lin.lgn")
                    .replace("metrics.csv", "lin.csv")
                    .replace("epochs = 8", "epochs = 2")
                    + "\nact_kind = linear\nweight_kind = linear\ngrad_bits = 0\n")
    assert main(["train", str(cfg2)]) == 0
    rows = (root / "lin.csv").read_text().strip().splitlines()
    assert len(rows) == 3
    final = float(rows[-1].split(",")[3])
    assert final > 0.5  # learns, even if behind the log configuration


def test_cli_sweep_sqrt2_and_log_accum(workspace, tmp_path):
    root, data, _ = workspace
    out = tmp_path / "s2.csv"
    rc = main(["sweep", str(root / "model.lgn"), str(data / "test-images.idx"),
               str(data / "test-labels.idx"), "--mode", "method2_sqrt2",
               "--accum", "log", "--bitwidths", "4", "--fsr-range", "3:4",
               "--out", str(out)])
    assert rc == 0
    rows = out.read_text().strip().splitlines()
    assert len(rows) == 3
    accs = [float(r.split(",")[2]) for r in rows[1:]]
    assert max(accs) > 0.5  # the shift-add pipeline still classifies


def test_parse_train_config_errors(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("epochs = banana\ntrain_images=x\ntrain_labels=y\nout_model=m\nout_metrics=q\n")
    raw = parse_train_config(f)
    with pytest.raises(ConfigError) as e:
        from lognet.cli import _cfg_int
        _cfg_int(raw, "epochs")
    assert "epochs" in str(e.value)
