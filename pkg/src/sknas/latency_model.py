"""Differentiable per-layer runtime model over the gate decisions.

Per-layer runtimes for each (kernel, expansion) option come from a lookup
table; total network runtime is their sum plus a fixed overhead for the
non-searchable parts.  The relaxed model composes the table entries with
the same gates that select the weights, so the runtime term stays
differentiable w.r.t. weights and thresholds.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import superkernel as skm
from . import tensor_core as tc
from .superkernel import Gates, IndicatorConfig, SuperKernel
from .supernet_builder import MAX_EXPANSION, DerivedArchitecture, MacroConfig, Supernet
from .tensor_core import Tensor


class LutCoverageError(ValueError):
    """The table does not cover a layer the model needs."""


@dataclass(frozen=True)
class LayerLatency:
    """Measured (or synthesized) runtimes in ms for one layer's four options."""

    r33_3: float
    r33_6: float
    r55_3: float
    r55_6: float

    def __post_init__(self):
        for name in ("r33_3", "r33_6", "r55_3", "r55_6"):
            if not getattr(self, name) > 0:
                raise ValueError(f"latency entry {name} must be positive, got {getattr(self, name)}")

    def lookup(self, k: int, e: int) -> float:
        return getattr(self, f"r{k}{k}_{e}")


@dataclass(frozen=True)
class LatencyTable:
    entries: tuple[LayerLatency, ...]
    fixed_overhead_ms: float

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.fixed_overhead_ms > 0:
            raise ValueError(f"fixed overhead must be positive, got {self.fixed_overhead_ms}")
        for i, e in enumerate(self.entries):
            # Real measurements can be noisy, so cost inversions only warn.
            if e.r55_3 < e.r33_3 or e.r55_6 < e.r33_6:
                warnings.warn(f"layer {i}: 5x5 entry below 3x3 entry", stacklevel=2)
            if e.r33_6 < e.r33_3 or e.r55_6 < e.r55_3:
                warnings.warn(f"layer {i}: e=6 entry below e=3 entry", stacklevel=2)

    def layer(self, i: int) -> LayerLatency:
        if i >= len(self.entries):
            raise LutCoverageError(
                f"latency table has {len(self.entries)} layers, no entry for layer {i}"
            )
        return self.entries[i]


@dataclass(frozen=True)
class RuntimeEstimate:
    total_ms: float
    per_layer_ms: tuple[float, ...]
    differentiable: bool


def layer_runtime_relaxed(sk: SuperKernel, entry: LayerLatency, cfg: IndicatorConfig,
                          gates: Gates | None = None) -> Tensor:
    """Gate-weighted runtime of one layer.

    The expansion decision interpolates between the 5x5 entries; the kernel
    decision then rescales by the measured 3x3/5x5 ratio at e=6.  The e=3,
    k=3 corner is therefore approximated by r55_3 * (r33_6 / r55_6) rather
    than the measured r33_3; ``validate_lut`` quantifies that gap.
    """
    if gates is None:
        gates, _ = skm.gates_and_kernel(sk, cfg)
    r_e = gates.e3 * (entry.r55_3 + gates.e6 * (entry.r55_6 - entry.r55_3))
    ratio = entry.r33_6 / entry.r55_6
    return r_e * ratio + (r_e * (1.0 - ratio)) * gates.k5


def network_runtime_from_gates(gates_per_layer: list[Gates], lut: LatencyTable,
                               supernet: Supernet, cfg: IndicatorConfig) -> Tensor:
    """Sum of per-layer gate-weighted runtimes plus the fixed overhead."""
    if len(lut.entries) < len(gates_per_layer):
        raise LutCoverageError(
            f"latency table covers {len(lut.entries)} layers, "
            f"network has {len(gates_per_layer)}"
        )
    total = tc.scalar(lut.fixed_overhead_ms)
    for i, gates in enumerate(gates_per_layer):
        total = total + layer_runtime_relaxed(supernet.layers[i].sk, lut.layer(i),
                                              cfg, gates=gates)
    return total


def network_runtime_relaxed(supernet: Supernet, lut: LatencyTable,
                            cfg: IndicatorConfig) -> Tensor:
    """Differentiable total runtime computed fresh from the current weights."""
    if len(lut.entries) < len(supernet.layers):
        raise LutCoverageError(
            f"latency table covers {len(lut.entries)} layers, "
            f"network has {len(supernet.layers)}"
        )
    total = tc.scalar(lut.fixed_overhead_ms)
    for i, layer in enumerate(supernet.layers):
        total = total + layer_runtime_relaxed(layer.sk, lut.layer(i), cfg)
    return total


def predict_discrete_runtime(arch: DerivedArchitecture, lut: LatencyTable) -> RuntimeEstimate:
    """Exact table lookup per decision; skipped layers cost nothing."""
    if len(lut.entries) < len(arch.decisions):
        raise LutCoverageError(
            f"latency table covers {len(lut.entries)} layers, "
            f"architecture has {len(arch.decisions)}"
        )
    per_layer = []
    total = lut.fixed_overhead_ms
    for i, decision in enumerate(arch.decisions):
        ms = 0.0 if decision is None else lut.layer(i).lookup(*decision)
        per_layer.append(ms)
        total += ms
    return RuntimeEstimate(total_ms=total, per_layer_ms=tuple(per_layer), differentiable=False)


# ---------------------------------------------------------------------------
# synthetic tables


def _mbconv_macs(c_in: int, c_out: int, k: int, e: int, in_res: int, stride: int) -> int:
    """Multiply-accumulate count of one inverted bottleneck at one geometry."""
    out_res = (in_res - 1) // stride + 1
    c_mid = c_in * e
    expand = in_res * in_res * c_in * c_mid
    depthwise = out_res * out_res * c_mid * k * k
    linear = out_res * out_res * c_mid * c_out
    return expand + depthwise + linear


def _fixed_macs(macro: MacroConfig) -> int:
    """Stem and head cost: everything outside the searchable layers."""
    stem_c = macro.scaled(macro.stem_channels)
    stem_res = (macro.input_resolution - 1) // 2 + 1
    stem = stem_res * stem_res * (3 * 9 + 3 * stem_c)
    plans = macro.layer_plans()
    last = plans[-1]
    out_res = (last.in_resolution - 1) // last.stride + 1
    head_c = macro.scaled(macro.head_channels)
    head = out_res * out_res * last.c_out * head_c + head_c * macro.num_classes
    return stem + head


def synth_lut(macro: MacroConfig, ms_per_mmac: float = 20.0, noise: float = 0.0,
              seed: int = 0) -> LatencyTable:
    """Build a table proportional to MAC counts, optionally with seeded noise.

    With noise=0 the table satisfies the cost monotonicity invariants by
    construction.  Noise is multiplicative: entry * (1 + noise * u) with
    u uniform on [-1, 1].
    """
    rng = np.random.default_rng(seed)
    scale = ms_per_mmac / 1e6
    entries = []
    for plan in macro.layer_plans():
        values = {}
        for k in (3, 5):
            for e in (3, 6):
                ms = scale * _mbconv_macs(plan.c_in, plan.c_out, k, e,
                                          plan.in_resolution, plan.stride)
                if noise > 0:
                    ms *= 1.0 + noise * rng.uniform(-1.0, 1.0)
                values[f"r{k}{k}_{e}"] = ms
        entries.append(LayerLatency(**values))
    overhead = scale * _fixed_macs(macro)
    return LatencyTable(entries=tuple(entries), fixed_overhead_ms=overhead)


@dataclass(frozen=True)
class LutValidationReport:
    rmse_ms: float
    mean_abs_pct_error: float
    n_samples: int
    #: published mobile-device reference for this validation protocol
    reference_rmse_ms: float = 1.32
    reference_pct_error: float = 1.76

    def summary(self) -> str:
        return (
            f"runtime model validation over {self.n_samples} architectures: "
            f"RMSE {self.rmse_ms:.4f} ms, mean abs error {self.mean_abs_pct_error:.2f}% "
            f"(published Pixel-1 reference: RMSE {self.reference_rmse_ms} ms, "
            f"{self.reference_pct_error}% — quoted for context, not reproduced here)"
        )


def validate_lut(lut: LatencyTable,
                 samples: "list[tuple[DerivedArchitecture, float]]") -> LutValidationReport:
    """Compare predicted runtimes against measured values.

    Percentage error uses the measured value as the denominator.
    """
    if not samples:
        raise ValueError("validate_lut needs at least one (architecture, measured) sample")
    sq = 0.0
    pct = 0.0
    for arch, measured in samples:
        predicted = predict_discrete_runtime(arch, lut).total_ms
        sq += (predicted - measured) ** 2
        pct += abs(predicted - measured) / measured * 100.0
    n = len(samples)
    return LutValidationReport(
        rmse_ms=float(np.sqrt(sq / n)),
        mean_abs_pct_error=pct / n,
        n_samples=n,
    )
