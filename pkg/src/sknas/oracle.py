"""Ground truth for small instances.

Independent reference implementations (direct-summation convolutions, a
window-placement MAC counter) plus exhaustive evaluation of small design
spaces, used to check the fast paths and to rank search results.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import latency_model as lm
from . import search_engine as se
from . import supernet_builder as snb
from .data_io import DatasetBundle, decisions_token
from .latency_model import LatencyTable
from .supernet_builder import DerivedArchitecture, MacroConfig


# ---------------------------------------------------------------------------
# reference implementations (kept deliberately naive)


def reference_depthwise_conv(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Direct-summation depthwise convolution; zero padding of K//2 per side."""
    n, c, h, win = x.shape
    k = w.shape[1]
    p = k // 2
    ho = -(-h // stride)
    wo = -(-win // stride)
    out = np.zeros((n, c, ho, wo))
    for ni in range(n):
        for ci in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    acc = 0.0
                    for a in range(k):
                        for b in range(k):
                            ii = stride * oi + a - p
                            jj = stride * oj + b - p
                            if 0 <= ii < h and 0 <= jj < win:
                                acc += x[ni, ci, ii, jj] * w[ci, a, b]
                    out[ni, ci, oi, oj] = acc
    return out


def reference_pointwise_conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Direct-summation 1x1 convolution, w is [Cout,Cin]."""
    n, c, h, win = x.shape
    cout = w.shape[0]
    out = np.zeros((n, cout, h, win))
    for ni in range(n):
        for oi in range(cout):
            for ii in range(h):
                for jj in range(win):
                    acc = 0.0
                    for ci in range(c):
                        acc += x[ni, ci, ii, jj] * w[oi, ci]
                    out[ni, oi, ii, jj] = acc
    return out


def _conv_positions(size: int, stride: int) -> int:
    """Count output rows by stepping window centers across the input."""
    count = 0
    center = 0
    while center < size:
        count += 1
        center += stride
    return count


def reference_mbconv_macs(c_in: int, c_out: int, k: int, e: int,
                          in_res: int, stride: int) -> int:
    """MAC count of one inverted bottleneck, geometry derived by window placement."""
    c_mid = c_in * e
    expand_positions = _conv_positions(in_res, 1) * _conv_positions(in_res, 1)
    out_positions = _conv_positions(in_res, stride) * _conv_positions(in_res, stride)
    expand = expand_positions * c_in * c_mid
    depthwise = out_positions * c_mid * k * k
    linear = out_positions * c_mid * c_out
    return expand + depthwise + linear


# ---------------------------------------------------------------------------
# exhaustive space evaluation


@dataclass(frozen=True)
class ArchRecord:
    index: int
    decisions: tuple
    top1: float
    eval_ce: float
    runtime_ms: float
    objective: float


@dataclass(frozen=True)
class SpaceEvaluation:
    macro: MacroConfig
    lam: float
    records: tuple[ArchRecord, ...]
    pareto_indices: tuple[int, ...]


def pareto_front(points: "list[tuple[float, float]]") -> tuple[int, ...]:
    """Indices of non-dominated (maximize first, minimize second) points.

    O(n^2) pairwise dominance; fine at oracle scale and trivially auditable.
    """
    front = []
    for i, (acc_i, rt_i) in enumerate(points):
        dominated = False
        for j, (acc_j, rt_j) in enumerate(points):
            if j == i:
                continue
            if acc_j >= acc_i and rt_j <= rt_i and (acc_j > acc_i or rt_j < rt_i):
                dominated = True
                break
        if not dominated:
            front.append(i)
    return tuple(front)


def exhaustive_evaluate(macro: MacroConfig, data: DatasetBundle, lut: LatencyTable,
                        schedule: se.TrainSchedule, lam: float,
                        cap: int = 256,
                        runtime_floor_ms: float = 1e-3) -> SpaceEvaluation:
    """Train every architecture in the space under identical seeds/schedules.

    Records are keyed by enumeration order and use per-architecture fresh
    networks seeded identically, so evaluating in any order gives identical
    results.  The ranking objective is eval cross-entropy plus
    lam * ln(max(runtime, floor)), matching the search loss.
    """
    total = snb.space_size(macro)
    if total > cap:
        raise snb.SpaceTooLargeError(
            f"space has {total} architectures (cap {cap}); refusing to enumerate"
        )
    records = []
    for index, arch in enumerate(snb.enumerate_space(macro, cap=cap)):
        net = snb.build_discrete(arch, rng=np.random.default_rng([schedule.seed, 17]))
        metrics = se.train_discrete(net, data, schedule)
        runtime = lm.predict_discrete_runtime(arch, lut).total_ms
        objective = metrics["loss"] + lam * math.log(max(runtime, runtime_floor_ms))
        records.append(ArchRecord(
            index=index,
            decisions=arch.decisions,
            top1=metrics["top1"],
            eval_ce=metrics["loss"],
            runtime_ms=runtime,
            objective=objective,
        ))
    front = pareto_front([(r.top1, r.runtime_ms) for r in records])
    return SpaceEvaluation(macro=macro, lam=lam, records=tuple(records),
                           pareto_indices=front)


def search_vs_oracle(space_eval: SpaceEvaluation, arch: DerivedArchitecture,
                     lam: float) -> float:
    """Fraction of the enumerated space with strictly better objective."""
    if lam != space_eval.lam:
        raise ValueError(f"lambda mismatch: search used {lam}, space used {space_eval.lam}")
    if arch.macro != space_eval.macro:
        raise ValueError("macro config mismatch between search and space evaluation")
    match = [r for r in space_eval.records if r.decisions == arch.decisions]
    if not match:
        raise ValueError(f"architecture {decisions_token(arch.decisions)} not in the space")
    target = match[0].objective
    better = sum(1 for r in space_eval.records if r.objective < target)
    return better / len(space_eval.records)


def space_to_csv(space_eval: SpaceEvaluation) -> str:
    pareto = set(space_eval.pareto_indices)
    lines = ["index,decisions,top1,eval_ce,runtime_ms,objective,pareto"]
    for r in space_eval.records:
        lines.append(
            f"{r.index},{decisions_token(r.decisions)},{r.top1!r},"
            f"{r.eval_ce!r},{r.runtime_ms!r},{r.objective!r},{int(r.index in pareto)}"
        )
    return "\n".join(lines) + "\n"
