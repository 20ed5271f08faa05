"""Full-scale-range calibration and quantization-error analysis.

The calibration criterion is the mean L1 quantization error over a grid of
candidate full-scale exponents; ties break toward the smaller fsr.  Error
histograms use signed errors Q(x) - x over symmetric uniform bins.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .lognum import (
    KIND_LOG,
    DomainError,
    QuantizerConfig,
    dequantize_array,
    linquant_array,
    logquant_array,
)
from .tensor import Tensor

DEFAULT_FSR_GRID = range(-10, 21)


def _quantized_values(x: np.ndarray, cfg: QuantizerConfig) -> np.ndarray:
    quant = logquant_array if cfg.kind == KIND_LOG else linquant_array
    return dequantize_array(quant(x, cfg), cfg)


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.real()
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise DomainError("cannot analyze an empty sample")
    return x


def quant_error_l1(x, cfg: QuantizerConfig) -> float:
    """Mean absolute elementwise quantization error (1/N) * sum |Q(x) - x|."""
    vals = _as_array(x)
    return float(np.abs(_quantized_values(vals, cfg) - vals).mean())


def fsr_error_profile(x, cfg_template: QuantizerConfig,
                      fsr_grid: Iterable[int] = DEFAULT_FSR_GRID) -> list[tuple[int, float]]:
    """Mean L1 error for every candidate fsr in the grid."""
    vals = _as_array(x)
    profile = []
    for f in fsr_grid:
        cfg = replace(cfg_template, fsr=int(f))
        profile.append((int(f), float(np.abs(_quantized_values(vals, cfg) - vals).mean())))
    if not profile:
        raise DomainError("fsr grid is empty")
    return profile


def calibrate_fsr(sample, cfg_template: QuantizerConfig,
                  fsr_grid: Iterable[int] = DEFAULT_FSR_GRID) -> int:
    """The grid fsr minimizing mean L1 error, ties toward smaller fsr."""
    profile = fsr_error_profile(sample, cfg_template, sorted(fsr_grid))
    best_fsr, best_err = profile[0]
    for f, err in profile[1:]:
        if err < best_err:
            best_fsr, best_err = f, err
    return best_fsr


def error_histogram(x, cfg: QuantizerConfig, bins: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of signed errors Q(x) - x.

    Bins are uniform over [-max|err|, +max|err|]; an all-exact sample
    degenerates to a unit window so everything lands in the zero bin.
    Returns (edges, counts) with len(edges) == bins + 1.
    """
    if bins < 1:
        raise DomainError("need at least one histogram bin")
    vals = _as_array(x)
    errs = _quantized_values(vals, cfg) - vals
    peak = float(np.abs(errs).max())
    if peak == 0.0:
        peak = 0.5
    counts, edges = np.histogram(errs, bins=bins, range=(-peak, peak))
    return edges, counts


@dataclass
class LayerCalibration:
    """Calibration outcome for one quantizer layer."""

    layer_index: int
    chosen_fsr: int
    fsr_offset: int
    l1_log: float
    l1_linear: float
    profile: list[tuple[int, float]]
    histogram: tuple[np.ndarray, np.ndarray]


@dataclass
class CalibrationReport:
    """Per-layer chosen offsets plus the evidence they were chosen from."""

    global_fsr: int
    layers: list[LayerCalibration] = field(default_factory=list)

    def csv_rows(self) -> list[tuple]:
        rows = []
        for lc in self.layers:
            for f, err in lc.profile:
                rows.append((lc.layer_index, f, err, int(f == lc.chosen_fsr)))
        return rows

    def summary(self) -> str:
        lines = [f"global fsr: {self.global_fsr}"]
        for lc in self.layers:
            lines.append(
                f"layer {lc.layer_index}: fsr {lc.chosen_fsr} "
                f"(offset {lc.fsr_offset:+d}), L1 log {lc.l1_log:.6g}, "
                f"L1 linear {lc.l1_linear:.6g}"
            )
        return "\n".join(lines)


def calibrate_layers(samples: dict[int, np.ndarray], cfg_template: QuantizerConfig,
                     global_fsr: int,
                     fsr_grid: Iterable[int] = DEFAULT_FSR_GRID,
                     bins: int = 256) -> CalibrationReport:
    """Calibrate every captured quantizer input and report offsets.

    ``samples`` maps layer index to the activations seen entering that
    quantizer (from a float reference forward over calibration images).
    """
    report = CalibrationReport(global_fsr=global_fsr)
    grid = sorted(fsr_grid)
    for idx in sorted(samples):
        acts = samples[idx]
        profile = fsr_error_profile(acts, cfg_template, grid)
        chosen, best_err = profile[0]
        for f, err in profile[1:]:  # strict <: ties keep the smaller fsr
            if err < best_err:
                chosen, best_err = f, err
        if cfg_template.kind == KIND_LOG:
            log_cfg = replace(cfg_template, fsr=chosen)
            lin_cfg = QuantizerConfig("linear", cfg_template.bitwidth,
                                      cfg_template.signed, chosen)
        else:
            lin_cfg = replace(cfg_template, fsr=chosen)
            log_cfg = QuantizerConfig("log", cfg_template.bitwidth,
                                      cfg_template.signed, chosen)
        report.layers.append(LayerCalibration(
            layer_index=idx,
            chosen_fsr=chosen,
            fsr_offset=chosen - global_fsr,
            l1_log=quant_error_l1(acts, log_cfg),
            l1_linear=quant_error_l1(acts, lin_cfg),
            profile=profile,
            histogram=error_histogram(acts, replace(cfg_template, fsr=chosen), bins),
        ))
    return report
