"""Joint weight/threshold search under a latency-aware loss, plus the
training utilities for discrete networks.

One optimizer, one loss, one step: weights and thresholds live in the same
parameter set and are updated together, with no alternating phases.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import latency_model as lm
from . import superkernel as skm
from . import supernet_builder as snb
from . import tensor_core as tc
from .data_io import DatasetBundle, DatasetHandle, augment_batch
from .latency_model import LatencyTable
from .superkernel import DecisionSnapshot, IndicatorConfig
from .supernet_builder import DerivedArchitecture, DiscreteNetwork, MacroConfig, Supernet
from .tensor_core import Tensor


class SearchDivergedError(RuntimeError):
    """Loss became non-finite; carries the last finite trace."""

    def __init__(self, step: int, trace: "SearchTrace"):
        super().__init__(f"search diverged at step {step}")
        self.step = step
        self.trace = trace


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 0.1
    kind: str = "cosine"  # "cosine" | "constant"
    min_lr: float = 0.0

    def at(self, step: int, total_steps: int) -> float:
        if self.kind == "constant":
            return self.initial
        if self.kind == "cosine":
            frac = step / max(1, total_steps)
            return self.min_lr + (self.initial - self.min_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))
        raise ValueError(f"unknown lr schedule kind {self.kind!r}")


@dataclass(frozen=True)
class DropoutSchedule:
    """Subset dropout runs early in the search, then switches off."""

    p_start: float = 0.5
    p_end: float = 0.0
    active_fraction: float = 0.75

    def probability(self, epoch: int, total_epochs: int) -> float:
        active_epochs = int(round(self.active_fraction * total_epochs))
        if epoch >= active_epochs or active_epochs == 0:
            return 0.0
        if active_epochs == 1:
            return self.p_start
        t = epoch / (active_epochs - 1)
        return self.p_start + (self.p_end - self.p_start) * t


@dataclass(frozen=True)
class SearchConfig:
    lam: float = 0.1
    epochs: int = 8
    batch_size: int = 128
    lr: LrSchedule = field(default_factory=LrSchedule)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    dropout: DropoutSchedule = field(default_factory=DropoutSchedule)
    seed: int = 1
    indicator: IndicatorConfig = field(default_factory=IndicatorConfig)
    runtime_floor_ms: float = 1e-3
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not self.runtime_floor_ms > 0:
            raise ValueError(f"runtime floor must be positive, got {self.runtime_floor_ms}")


@dataclass(frozen=True)
class TrainSchedule:
    """Plain training knobs for discrete networks."""

    epochs: int = 10
    batch_size: int = 64
    lr: LrSchedule = field(default_factory=LrSchedule)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 1
    augment: bool = False


@dataclass(frozen=True)
class LossBreakdown:
    step: int
    ce: float
    runtime_ms: float
    total: float


@dataclass
class SearchTrace:
    records: list[LossBreakdown] = field(default_factory=list)
    snapshots: list[tuple[int, list[DecisionSnapshot]]] = field(default_factory=list)


class SGD:
    """SGD with momentum; weight decay skips the listed parameter names.

    ``grad_clip`` rescales the global gradient norm when it exceeds the
    bound.  Large runtime coefficients produce gradients proportional to
    the weights themselves, which oscillate divergently under momentum
    unless capped.
    """

    def __init__(self, params: list[tuple[str, Tensor]], lr: float, momentum: float,
                 weight_decay: float, no_decay: set[str] = frozenset(),
                 grad_clip: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.grad_clip = grad_clip
        self._velocity = {name: np.zeros_like(t.data) for name, t in params}

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None

    def step(self) -> None:
        clip_scale = 1.0
        if self.grad_clip is not None:
            sq = 0.0
            for _, t in self.params:
                if t.grad is not None:
                    sq += float((t.grad * t.grad).sum())
            gnorm = np.sqrt(sq)
            if gnorm > self.grad_clip:
                clip_scale = self.grad_clip / gnorm
        for name, t in self.params:
            if t.grad is None:
                continue
            g = t.grad * clip_scale
            if self.weight_decay and name not in self.no_decay:
                g = g + self.weight_decay * t.data
            v = self._velocity[name]
            v *= self.momentum
            v += g
            t.data -= self.lr * v


def nas_loss(ce: Tensor, runtime: Tensor, lam: float, floor_ms: float) -> Tensor:
    """ce + lam * ln(max(runtime, floor)); gradient is zero below the floor."""
    return ce + tc.mul(tc.log(tc.clamp_min(runtime, floor_ms)), lam)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def run_search(supernet: Supernet, data: DatasetBundle, lut: LatencyTable,
               cfg: SearchConfig) -> tuple[DerivedArchitecture, SearchTrace]:
    """Jointly train superkernel weights and thresholds on the combined loss.

    Subset dropout is active for the early fraction of epochs.  The trace
    records one loss breakdown per step and per-layer decision snapshots at
    every epoch boundary.  Deterministic under cfg.seed.
    """
    train = data.train
    n = len(train.labels)
    batch_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])

    opt = SGD(supernet.params(), lr=cfg.lr.initial, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay, no_decay=supernet.threshold_names(),
              grad_clip=cfg.grad_clip)
    total_steps = cfg.epochs * steps_per_epoch(n, cfg.batch_size)
    trace = SearchTrace()

    step = 0
    tape = tc.Tape()
    with tape:
        for epoch in range(cfg.epochs):
            p_drop = cfg.dropout.probability(epoch, cfg.epochs)
            for idx in _batches(n, cfg.batch_size, batch_rng):
                xb = train.images[idx]
                yb = train.labels[idx]
                drop_plan = None
                if p_drop > 0.0:
                    drop_plan = [skm.subset_dropout(layer.sk, p_drop, p_drop, drop_rng)
                                 for layer in supernet.layers]

                tape.clear()
                opt.zero_grad()
                logits, gates = supernet.forward(Tensor(xb), cfg.indicator, drop_plan=drop_plan)
                ce = tc.softmax_cross_entropy(logits, yb)
                runtime = lm.network_runtime_from_gates(gates, lut, supernet, cfg.indicator)
                loss = nas_loss(ce, runtime, cfg.lam, cfg.runtime_floor_ms)

                if not np.isfinite(loss.data):
                    raise SearchDivergedError(step, trace)
                tc.backward(loss, tape)
                opt.lr = cfg.lr.at(step, total_steps)
                opt.step()

                trace.records.append(LossBreakdown(
                    step=step, ce=float(ce.data), runtime_ms=float(runtime.data),
                    total=float(loss.data),
                ))
                step += 1
            trace.snapshots.append((epoch, supernet.snapshots()))

    return supernet.derive(), trace


def evaluate(net: DiscreteNetwork | Supernet, handle: DatasetHandle,
             batch_size: int = 256) -> tuple[float, float]:
    """(top-1 accuracy, mean cross-entropy) over a dataset split."""
    n = len(handle.labels)
    correct = 0
    ce_sum = 0.0
    with tc.no_tape():
        for start in range(0, n, batch_size):
            xb = handle.images[start : start + batch_size]
            yb = handle.labels[start : start + batch_size]
            if isinstance(net, Supernet):
                logits, _ = net.forward(Tensor(xb))
            else:
                logits = net.forward(Tensor(xb))
            ce = tc.softmax_cross_entropy(logits, yb)
            ce_sum += float(ce.data) * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    return correct / n, ce_sum / n


def train_discrete(net: DiscreteNetwork, data: DatasetBundle,
                   schedule: TrainSchedule) -> dict[str, float]:
    """Plain SGD training; returns evaluation metrics on the held-out split."""
    train = data.train
    n = len(train.labels)
    batch_rng = np.random.default_rng([schedule.seed, 1])
    aug_rng = np.random.default_rng([schedule.seed, 2])
    opt = SGD(net.params(), lr=schedule.lr.initial, momentum=schedule.momentum,
              weight_decay=schedule.weight_decay)
    total_steps = schedule.epochs * steps_per_epoch(n, schedule.batch_size)

    step = 0
    with tc.Tape() as tape:
        for _ in range(schedule.epochs):
            for idx in _batches(n, schedule.batch_size, batch_rng):
                xb = train.images[idx]
                if schedule.augment:
                    xb = augment_batch(xb, aug_rng)
                yb = train.labels[idx]
                tape.clear()
                opt.zero_grad()
                logits = net.forward(Tensor(xb))
                loss = tc.softmax_cross_entropy(logits, yb)
                if not np.isfinite(loss.data):
                    raise SearchDivergedError(step, SearchTrace())
                tc.backward(loss, tape)
                opt.lr = schedule.lr.at(step, total_steps)
                opt.step()
                step += 1

    top1, ce = evaluate(net, data.eval)
    return {"top1": top1, "loss": ce}


def ablation_subset_training(net: DiscreteNetwork, data: DatasetBundle,
                             schedule: TrainSchedule) -> dict[str, float]:
    """Train one 5x5 network under two losses at once: inner-3x3 and full.

    Each step backpropagates the masked-to-center loss and the full-kernel
    loss, accumulates both gradient sets, and applies a single update.
    Evaluation reports accuracy under both inference modes.
    """
    for layer in net.layers:
        if layer is not None and layer.k != 5:
            raise ValueError("subset-training ablation needs 5x5 kernels everywhere")

    train = data.train
    n = len(train.labels)
    batch_rng = np.random.default_rng([schedule.seed, 1])
    opt = SGD(net.params(), lr=schedule.lr.initial, momentum=schedule.momentum,
              weight_decay=schedule.weight_decay)
    total_steps = schedule.epochs * steps_per_epoch(n, schedule.batch_size)

    step = 0
    with tc.Tape() as tape:
        for _ in range(schedule.epochs):
            for idx in _batches(n, schedule.batch_size, batch_rng):
                xb = Tensor(train.images[idx])
                yb = train.labels[idx]
                opt.zero_grad()
                for inner_only in (True, False):
                    tape.clear()
                    logits = net.forward(xb, inner_only=inner_only)
                    loss = tc.softmax_cross_entropy(logits, yb)
                    if not np.isfinite(loss.data):
                        raise SearchDivergedError(step, SearchTrace())
                    tc.backward(loss, tape)
                opt.lr = schedule.lr.at(step, total_steps)
                opt.step()
                step += 1

    inner_top1, inner_ce = _evaluate_masked(net, data.eval, inner_only=True)
    full_top1, full_ce = _evaluate_masked(net, data.eval, inner_only=False)
    return {
        "inner_top1": inner_top1,
        "inner_loss": inner_ce,
        "full_top1": full_top1,
        "full_loss": full_ce,
    }


def _evaluate_masked(net: DiscreteNetwork, handle: DatasetHandle,
                     inner_only: bool, batch_size: int = 256) -> tuple[float, float]:
    n = len(handle.labels)
    correct = 0
    ce_sum = 0.0
    with tc.no_tape():
        for start in range(0, n, batch_size):
            xb = handle.images[start : start + batch_size]
            yb = handle.labels[start : start + batch_size]
            logits = net.forward(Tensor(xb), inner_only=inner_only)
            ce_sum += float(tc.softmax_cross_entropy(logits, yb).data) * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    return correct / n, ce_sum / n


def random_search_baseline(macro: MacroConfig, lut: LatencyTable,
                           runtime_window: tuple[float, float], n: int,
                           rng: np.random.Generator,
                           max_attempts: int = 200_000,
                           ) -> tuple[list[DerivedArchitecture], float]:
    """Rejection-sample architectures whose predicted runtime is in the window."""
    lo, hi = runtime_window
    if lo > hi:
        raise ValueError(f"runtime window is empty: [{lo}, {hi}]")
    option_lists = [snb.layer_options(plan) for plan in macro.layer_plans()]
    accepted: list[DerivedArchitecture] = []
    attempts = 0
    while len(accepted) < n:
        if attempts >= max_attempts:
            rate = len(accepted) / attempts
            if rate < 1e-4:
                raise RuntimeError(
                    f"runtime window [{lo}, {hi}] ms looks infeasible: "
                    f"{len(accepted)}/{attempts} accepted"
                )
            # Feasible but slow; keep sampling in further chunks.
            max_attempts *= 2
        decisions = tuple(opts[rng.integers(len(opts))] for opts in option_lists)
        arch = DerivedArchitecture(decisions, macro)
        attempts += 1
        if lo <= lm.predict_discrete_runtime(arch, lut).total_ms <= hi:
            accepted.append(arch)
    return accepted, len(accepted) / attempts
