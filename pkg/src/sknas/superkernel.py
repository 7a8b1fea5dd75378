"""Shared depthwise superkernel with threshold-gated weight subsets.

One 5x5, max-expansion weight block per searchable layer encodes every
candidate operation of that layer: the 3x3 center vs the full 5x5 (kernel
size), the first vs both channel halves (expansion ratio), and an all-zero
kernel (skip).  Each choice is a comparison of a subset's squared norm
against a trainable threshold, relaxed to a sigmoid for gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor

MAX_KERNEL = 5
INNER_KERNEL = 3

#: A per-layer decision: None means skip, otherwise (kernel_size, expansion).
Decision = "tuple[int, int] | None"

CANDIDATES: tuple[tuple[int, int], ...] = ((3, 3), (3, 6), (5, 3), (5, 6))


class IndicatorMode(str, Enum):
    #: hard 0/1 gate in the forward pass, sigmoid gradient in the backward pass
    HARD_ST = "hard-forward-soft-backward"
    #: sigmoid value in both passes
    RELAXED = "fully-relaxed"


@dataclass(frozen=True)
class IndicatorConfig:
    """Sharpness and relaxation mode of the threshold gates."""

    temperature: float = 1.0
    mode: IndicatorMode = IndicatorMode.HARD_ST

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"indicator temperature must be positive, got {self.temperature}")


class Gates(NamedTuple):
    """Current gate values of one layer, as scalar tensors (e3, e6, k5)."""

    e3: Tensor
    e6: Tensor
    k5: Tensor


@dataclass(frozen=True)
class SubsetDropout:
    """Which superkernel subsets are zeroed for the current step."""

    shell_dropped: bool
    half6_dropped: bool

    @property
    def active(self) -> bool:
        return self.shell_dropped or self.half6_dropped


@dataclass(frozen=True)
class DecisionSnapshot:
    """Hard evaluation of one layer's gates and the decision they imply."""

    norm_sq_shell: float
    norm_sq_half3: float
    norm_sq_half6: float
    ind_k5: float
    ind_e3: float
    ind_e6: float
    derived: "tuple[int, int] | None"


class SuperKernel:
    """One shared [C,5,5] depthwise weight block plus three trainable thresholds.

    The logical subsets (3x3 center, 5x5 shell, first/second channel half)
    are views over the same storage; there are no per-candidate copies.
    """

    def __init__(self, weights: Tensor, t_k5: Tensor, t_e3: Tensor, t_e6: Tensor,
                 layer_index: int, skip_allowed: bool = True):
        c = weights.shape[0]
        if weights.data.ndim != 3 or weights.shape[1:] != (MAX_KERNEL, MAX_KERNEL):
            raise ValueError(f"superkernel weights must be [C,5,5], got {weights.shape}")
        if c % 2 != 0:
            raise ValueError(f"superkernel channel count must be even, got {c}")
        self.weights = weights
        self.t_k5 = t_k5
        self.t_e3 = t_e3
        self.t_e6 = t_e6
        self.layer_index = layer_index
        self.skip_allowed = skip_allowed

        inner = np.zeros((c, MAX_KERNEL, MAX_KERNEL))
        inner[:, 1:4, 1:4] = 1.0
        self.inner_mask = inner
        self.shell_mask = 1.0 - inner
        half3 = np.zeros((c, MAX_KERNEL, MAX_KERNEL))
        half3[: c // 2] = 1.0
        self.half3_mask = half3
        self.half6_mask = 1.0 - half3

    @property
    def channels(self) -> int:
        return self.weights.shape[0]

    # Views alias the underlying storage; mutating them mutates the kernel.
    def inner_view(self) -> np.ndarray:
        return self.weights.data[:, 1:4, 1:4]

    def half3_view(self) -> np.ndarray:
        return self.weights.data[: self.channels // 2]

    def half6_view(self) -> np.ndarray:
        return self.weights.data[self.channels // 2 :]

    def subset_weights(self, decision: tuple[int, int]) -> np.ndarray:
        """Copy of the weight subset realizing a discrete (k, e) decision."""
        k, e = decision
        if k not in (3, 5) or e not in (3, 6):
            raise ValueError(f"unknown decision {decision}")
        rows = self.channels // 2 if e == 3 else self.channels
        off = (MAX_KERNEL - k) // 2
        return self.weights.data[:rows, off : off + k, off : off + k].copy()

    def thresholds(self) -> tuple[Tensor, Tensor, Tensor]:
        return (self.t_k5, self.t_e3, self.t_e6)


def make_superkernel(channels: int, layer_index: int, skip_allowed: bool,
                     rng: np.random.Generator) -> SuperKernel:
    """Fan-in-scaled uniform weights; thresholds start at half the paired norm.

    Starting each threshold at 0.5x its subset's initial squared norm keeps
    every gate open but away from sigmoid saturation.
    """
    # Matches the discrete depthwise init (He-style gain for the relu6 after it).
    bound = np.sqrt(3.0 * 2.0 / (MAX_KERNEL * MAX_KERNEL))
    w = rng.uniform(-bound, bound, size=(channels, MAX_KERNEL, MAX_KERNEL))
    weights = Tensor(w, requires_grad=True)

    inner = np.zeros_like(w)
    inner[:, 1:4, 1:4] = 1.0
    shell_ns = float((w * w * (1.0 - inner)).sum())
    half = channels // 2
    half3_ns = float((w[:half] ** 2).sum())
    half6_ns = float((w[half:] ** 2).sum())

    t_k5 = tc.scalar(0.5 * shell_ns, requires_grad=True)
    t_e3 = tc.scalar(0.5 * half3_ns, requires_grad=True)
    t_e6 = tc.scalar(0.5 * half6_ns, requires_grad=True)
    return SuperKernel(weights, t_k5, t_e3, t_e6, layer_index, skip_allowed)


def group_norm_sq(weights: Tensor, mask: np.ndarray) -> Tensor:
    """Squared L2 norm of a weight subset (raw sum of squares, differentiable)."""
    return tc.masked_sum_sq(weights, mask)


def indicator(norm_sq: Tensor, t: Tensor, cfg: IndicatorConfig) -> Tensor:
    """Gate = 1(norm_sq > t), relaxed to sigmoid((norm_sq - t) / temperature).

    In hard mode the forward value is exactly 0 or 1 (ties resolve to 0, the
    smaller architecture) while gradients in both modes are those of the
    sigmoid; the gradient w.r.t. the threshold is the negation of the
    gradient w.r.t. the norm.
    """
    z = (float(norm_sq.data) - float(t.data)) / cfg.temperature
    soft = float(tc.sigmoid(z))
    if cfg.mode is IndicatorMode.HARD_ST:
        value = 1.0 if float(norm_sq.data) > float(t.data) else 0.0
    else:
        value = soft

    taping = tc.active_tape() is not None and (norm_sq.requires_grad or t.requires_grad)
    out = Tensor(np.float64(value), requires_grad=taping)
    if taping:
        dz = soft * (1.0 - soft) / cfg.temperature

        def bwd(go, acc):
            g = float(go) * dz
            acc(norm_sq, np.float64(g))
            acc(t, np.float64(-g))

        tc.record(out, bwd)
    return out


def decision_gate_values(decision: "tuple[int, int] | None") -> tuple[float, float, float]:
    """Hard (e3, e6, k5) gate triple realizing a discrete decision."""
    if decision is None:
        return (0.0, 0.0, 0.0)
    k, e = decision
    return (1.0, 1.0 if e == 6 else 0.0, 1.0 if k == 5 else 0.0)


#: Sentinel distinguishing "no pin" from pinning to the skip decision (None).
UNPINNED = object()


def gates_and_kernel(sk: SuperKernel, cfg: IndicatorConfig,
                     drop: SubsetDropout | None = None,
                     pin=UNPINNED) -> tuple[Gates, Tensor]:
    """Compute the three gates and the effective kernel they select.

    The composition mirrors the decision structure: the shell is scaled by
    the kernel-size gate first, then the expansion gate scales the second
    channel half and the skip gate scales the whole kernel.  The expansion
    norms are taken over the shell-gated kernel, so the kernel-size decision
    feeds the expansion decisions.  ``pin`` forces hard gates for a given
    discrete decision; ``drop`` zeroes subsets for the current step.
    """
    w = sk.weights
    if drop is not None and drop.active:
        mask = np.ones_like(w.data)
        if drop.shell_dropped:
            mask *= sk.inner_mask
        if drop.half6_dropped:
            mask *= sk.half3_mask
        w = tc.mask_mul(w, mask)

    if pin is not UNPINNED:
        e3v, e6v, k5v = decision_gate_values(pin)
        if pin is None and not sk.skip_allowed:
            raise ValueError(f"layer {sk.layer_index} cannot be pinned to skip")
        g_k5 = tc.scalar(k5v)
        g_e6 = tc.scalar(e6v)
        g_e3 = tc.scalar(e3v)
    else:
        g_k5 = indicator(group_norm_sq(w, sk.shell_mask), sk.t_k5, cfg)
        g_e6 = None
        g_e3 = None

    w_k = tc.add(tc.mask_mul(w, sk.inner_mask), tc.scale_by(tc.mask_mul(w, sk.shell_mask), g_k5))

    if g_e6 is None:
        g_e6 = indicator(group_norm_sq(w_k, sk.half6_mask), sk.t_e6, cfg)
        if sk.skip_allowed:
            g_e3 = indicator(group_norm_sq(w_k, sk.half3_mask), sk.t_e3, cfg)
        else:
            g_e3 = tc.scalar(1.0)

    gated = tc.add(tc.mask_mul(w_k, sk.half3_mask), tc.scale_by(tc.mask_mul(w_k, sk.half6_mask), g_e6))
    w_eff = tc.scale_by(gated, g_e3)
    return Gates(e3=g_e3, e6=g_e6, k5=g_k5), w_eff


def effective_kernel(sk: SuperKernel, cfg: IndicatorConfig,
                     drop: SubsetDropout | None = None, pin=UNPINNED) -> Tensor:
    _, w_eff = gates_and_kernel(sk, cfg, drop=drop, pin=pin)
    return w_eff


def superkernel_forward(x: Tensor, sk: SuperKernel, stride: int, cfg: IndicatorConfig,
                        drop: SubsetDropout | None = None, pin=UNPINNED) -> Tensor:
    """Depthwise convolution of x with the gate-selected effective kernel."""
    return tc.conv2d_depthwise(x, effective_kernel(sk, cfg, drop=drop, pin=pin), stride)


def subset_dropout(sk: SuperKernel, p_shell: float, p_half6: float,
                   rng: np.random.Generator) -> SubsetDropout:
    """Draw this step's subset masks; each subset drops independently."""
    if not (0.0 <= p_shell <= 1.0 and 0.0 <= p_half6 <= 1.0):
        raise ValueError(f"dropout probabilities must be in [0,1], got {p_shell}, {p_half6}")
    return SubsetDropout(
        shell_dropped=bool(rng.random() < p_shell),
        half6_dropped=bool(rng.random() < p_half6),
    )


def suggest_temperature(kernels: "list[SuperKernel]", fraction: float = 0.25) -> float:
    """Temperature that keeps freshly initialized gates responsive.

    Group norms are raw sums of squares, so their scale grows with channel
    count; a temperature around a quarter of the median subset norm keeps
    the initial sigmoid arguments of order one across layers.
    """
    norms = []
    for sk in kernels:
        snap = derive_decision(sk)
        norms.extend([snap.norm_sq_shell, snap.norm_sq_half3, snap.norm_sq_half6])
    return fraction * float(np.median(norms))


def decide_from_norms(norm_sq_shell: float, t_k5: float,
                      half3_of_wk: float, t_e3: float,
                      half6_of_wk: float, t_e6: float,
                      skip_allowed: bool) -> tuple[float, float, float, "tuple[int, int] | None"]:
    """Hard decision tree over (norm, threshold) comparisons.

    Invariant under any strictly monotone rescaling applied to every
    norm/threshold pair, since only the comparisons matter.
    """
    ind_k5 = 1.0 if norm_sq_shell > t_k5 else 0.0
    ind_e6 = 1.0 if half6_of_wk > t_e6 else 0.0
    ind_e3 = (1.0 if half3_of_wk > t_e3 else 0.0) if skip_allowed else 1.0
    if ind_e3 == 0.0:
        return ind_k5, ind_e3, ind_e6, None
    return ind_k5, ind_e3, ind_e6, (5 if ind_k5 else 3, 6 if ind_e6 else 3)


def derive_decision(sk: SuperKernel) -> DecisionSnapshot:
    """Evaluate the gates in hard mode and extract the discrete decision."""
    w = sk.weights.data
    shell_ns = float((w * w * sk.shell_mask).sum())
    k5 = 1.0 if shell_ns > float(sk.t_k5.data) else 0.0
    wk = w * sk.inner_mask + k5 * (w * sk.shell_mask)
    half3_ns = float((wk * wk * sk.half3_mask).sum())
    half6_ns = float((wk * wk * sk.half6_mask).sum())
    ind_k5, ind_e3, ind_e6, derived = decide_from_norms(
        shell_ns, float(sk.t_k5.data),
        half3_ns, float(sk.t_e3.data),
        half6_ns, float(sk.t_e6.data),
        sk.skip_allowed,
    )
    return DecisionSnapshot(
        norm_sq_shell=shell_ns,
        norm_sq_half3=half3_ns,
        norm_sq_half6=half6_ns,
        ind_k5=ind_k5,
        ind_e3=ind_e3,
        ind_e6=ind_e6,
        derived=derived,
    )
