"""MobileNetV2-style macro-architecture as a single-path supernet.

Every searchable layer is an inverted-bottleneck block (pointwise expand,
depthwise, linear pointwise, residual where geometry allows) whose
depthwise stage is a shared superkernel.  Discrete networks with plain
kernels are built from derived decisions, optionally copying the matching
weight subsets out of a trained supernet.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import superkernel as skm
from . import tensor_core as tc
from .superkernel import (CANDIDATES, Gates, IndicatorConfig, SubsetDropout,
                          SuperKernel, UNPINNED)
from .tensor_core import Tensor

MAX_EXPANSION = 6


class SpaceTooLargeError(ValueError):
    """Full enumeration refused; sample the space instead."""


@dataclass(frozen=True)
class BlockSpec:
    num_layers: int
    out_channels: int
    first_stride: int

    def __post_init__(self):
        if not 1 <= self.num_layers <= 4:
            raise ValueError(f"block num_layers must be 1..4, got {self.num_layers}")
        if self.first_stride not in (1, 2):
            raise ValueError(f"block first_stride must be 1 or 2, got {self.first_stride}")
        if self.out_channels <= 0:
            raise ValueError(f"block out_channels must be positive, got {self.out_channels}")


@dataclass(frozen=True)
class MacroConfig:
    stem_channels: int
    blocks: tuple[BlockSpec, ...]
    head_channels: int
    num_classes: int
    width_multiplier: float = 1.0
    input_resolution: int = 32

    def __post_init__(self):
        if len(self.blocks) == 0:
            raise ValueError("macro config needs at least one block")
        if not self.width_multiplier > 0:
            raise ValueError(f"width_multiplier must be positive, got {self.width_multiplier}")
        object.__setattr__(self, "blocks", tuple(self.blocks))

    def scaled(self, channels: int) -> int:
        """Width-multiplied channel count, rounded to a positive even integer."""
        return max(2, int(np.floor(channels * self.width_multiplier / 2.0 + 0.5)) * 2)

    def layer_plans(self) -> list["LayerPlan"]:
        plans = []
        c_in = self.scaled(self.stem_channels)
        resolution = (self.input_resolution - 1) // 2 + 1  # stem has stride 2
        index = 0
        for block in self.blocks:
            c_out = self.scaled(block.out_channels)
            for j in range(block.num_layers):
                stride = block.first_stride if j == 0 else 1
                skip_allowed = stride == 1 and c_in == c_out
                plans.append(LayerPlan(index, c_in, c_out, stride, resolution, skip_allowed))
                resolution = (resolution - 1) // stride + 1
                c_in = c_out
                index += 1
        return plans

    def num_layers(self) -> int:
        return sum(b.num_layers for b in self.blocks)


@dataclass(frozen=True)
class LayerPlan:
    """Resolved geometry of one searchable layer."""

    index: int
    c_in: int
    c_out: int
    stride: int
    in_resolution: int
    skip_allowed: bool


@dataclass(frozen=True)
class DerivedArchitecture:
    """Discrete per-layer decisions extracted after a search."""

    decisions: tuple
    macro: MacroConfig

    def __post_init__(self):
        object.__setattr__(self, "decisions", tuple(self.decisions))
        plans = self.macro.layer_plans()
        if len(self.decisions) != len(plans):
            raise ValueError(
                f"architecture has {len(self.decisions)} decisions "
                f"but macro config defines {len(plans)} layers"
            )
        for plan, d in zip(plans, self.decisions):
            if d is None:
                if not plan.skip_allowed:
                    raise ValueError(f"layer {plan.index} cannot be skipped")
            elif d not in CANDIDATES:
                raise ValueError(f"layer {plan.index}: unknown decision {d!r}")


def desk_config(width_multiplier: float = 1.0) -> MacroConfig:
    """Default small configuration: trainable in minutes, 6 searchable layers."""
    return MacroConfig(
        stem_channels=8,
        blocks=(BlockSpec(2, 16, 1), BlockSpec(2, 24, 2), BlockSpec(2, 32, 2)),
        head_channels=64,
        num_classes=10,
        width_multiplier=width_multiplier,
        input_resolution=32,
    )


def mobile22_config(width_multiplier: float = 1.0) -> MacroConfig:
    """22-searchable-layer mobile configuration at 224x224.

    Per-block filter counts are approximate placeholders in the usual
    mobile range; they are not calibrated against any specific network.
    """
    return MacroConfig(
        stem_channels=32,
        blocks=(
            BlockSpec(1, 16, 1),
            BlockSpec(4, 24, 2),
            BlockSpec(4, 32, 2),
            BlockSpec(4, 64, 2),
            BlockSpec(4, 112, 1),
            BlockSpec(4, 184, 2),
            BlockSpec(1, 352, 1),
        ),
        head_channels=1280,
        num_classes=1000,
        width_multiplier=width_multiplier,
        input_resolution=224,
    )


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
             gain: float = 1.0) -> np.ndarray:
    # gain 2 compensates the variance relu6 removes; there is no batch norm
    # here to re-inflate collapsed activations.
    bound = np.sqrt(3.0 * gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Stem:
    """Separable 3x3 stride-2 entry conv: depthwise over RGB then pointwise.

    Inputs arrive in [0, 1]; the stem recenters them to [-2, 2] so the
    first conv sees zero-mean, roughly unit-scale values.
    """

    INPUT_SHIFT = -0.5
    INPUT_SCALE = 4.0

    def __init__(self, out_channels: int, rng: np.random.Generator):
        self.dw_w = Tensor(_uniform(rng, (3, 3, 3), 9), requires_grad=True)
        self.pw_w = Tensor(_uniform(rng, (out_channels, 3), 3, gain=2.0), requires_grad=True)
        self.scale = Tensor(np.ones(out_channels), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        h = tc.mul(tc.add(x, self.INPUT_SHIFT), self.INPUT_SCALE)
        h = tc.conv2d_depthwise(h, self.dw_w, stride=2)
        h = tc.conv2d_pointwise(h, self.pw_w)
        h = tc.channel_affine(h, self.scale, self.bias)
        return tc.relu6(h)

    def params(self) -> list[tuple[str, Tensor]]:
        return [("stem.dw_w", self.dw_w), ("stem.pw_w", self.pw_w),
                ("stem.scale", self.scale), ("stem.bias", self.bias)]


class Head:
    def __init__(self, in_channels: int, head_channels: int, num_classes: int,
                 rng: np.random.Generator):
        self.pw_w = Tensor(_uniform(rng, (head_channels, in_channels), in_channels, gain=2.0),
                           requires_grad=True)
        self.scale = Tensor(np.ones(head_channels), requires_grad=True)
        self.bias = Tensor(np.zeros(head_channels), requires_grad=True)
        self.dense_w = Tensor(_uniform(rng, (head_channels, num_classes), head_channels),
                              requires_grad=True)
        self.dense_b = Tensor(np.zeros(num_classes), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        h = tc.conv2d_pointwise(x, self.pw_w)
        h = tc.channel_affine(h, self.scale, self.bias)
        h = tc.relu6(h)
        h = tc.global_avg_pool(h)
        return tc.dense(h, self.dense_w, self.dense_b)

    def params(self) -> list[tuple[str, Tensor]]:
        return [("head.pw_w", self.pw_w), ("head.scale", self.scale),
                ("head.bias", self.bias), ("head.dense_w", self.dense_w),
                ("head.dense_b", self.dense_b)]


class SearchableMBConv:
    """Inverted bottleneck at max expansion with a superkernel depthwise stage.

    The affines after the depthwise and linear stages carry no bias so that
    a fully gated-off superkernel yields an exactly zero branch, which is
    what makes the skip decision equal to the identity on the residual path.
    """

    def __init__(self, plan: LayerPlan, rng: np.random.Generator):
        self.plan = plan
        c_mid = plan.c_in * MAX_EXPANSION
        self.expand_w = Tensor(_uniform(rng, (c_mid, plan.c_in), plan.c_in, gain=2.0),
                               requires_grad=True)
        self.expand_scale = Tensor(np.ones(c_mid), requires_grad=True)
        self.expand_bias = Tensor(np.zeros(c_mid), requires_grad=True)
        self.sk = skm.make_superkernel(c_mid, plan.index, plan.skip_allowed, rng)
        self.dw_scale = Tensor(np.ones(c_mid), requires_grad=True)
        self.linear_w = Tensor(_uniform(rng, (plan.c_out, c_mid), c_mid), requires_grad=True)
        self.linear_scale = Tensor(np.ones(plan.c_out), requires_grad=True)
        self.residual = plan.stride == 1 and plan.c_in == plan.c_out

    def forward(self, x: Tensor, cfg: IndicatorConfig,
                drop: SubsetDropout | None = None, pin=UNPINNED) -> tuple[Tensor, Gates]:
        h = tc.conv2d_pointwise(x, self.expand_w)
        h = tc.channel_affine(h, self.expand_scale, self.expand_bias)
        h = tc.relu6(h)
        gates, w_eff = skm.gates_and_kernel(self.sk, cfg, drop=drop, pin=pin)
        h = tc.conv2d_depthwise(h, w_eff, self.plan.stride)
        h = tc.channel_affine(h, self.dw_scale)
        h = tc.relu6(h)
        h = tc.conv2d_pointwise(h, self.linear_w)
        h = tc.channel_affine(h, self.linear_scale)
        if self.residual:
            h = tc.add(h, x)
        return h, gates

    def params(self) -> list[tuple[str, Tensor]]:
        p = self.prefix()
        return [
            (f"{p}.expand_w", self.expand_w),
            (f"{p}.expand_scale", self.expand_scale),
            (f"{p}.expand_bias", self.expand_bias),
            (f"{p}.sk.weights", self.sk.weights),
            (f"{p}.sk.t_k5", self.sk.t_k5),
            (f"{p}.sk.t_e3", self.sk.t_e3),
            (f"{p}.sk.t_e6", self.sk.t_e6),
            (f"{p}.dw_scale", self.dw_scale),
            (f"{p}.linear_w", self.linear_w),
            (f"{p}.linear_scale", self.linear_scale),
        ]

    def prefix(self) -> str:
        return f"layers.{self.plan.index}"


class Supernet:
    """The whole searchable network: stem, searchable layers, head."""

    def __init__(self, macro: MacroConfig, icfg: IndicatorConfig, rng: np.random.Generator):
        self.macro = macro
        self.icfg = icfg
        self.stem = Stem(macro.scaled(macro.stem_channels), rng)
        self.layers = [SearchableMBConv(plan, rng) for plan in macro.layer_plans()]
        last_c = self.layers[-1].plan.c_out
        self.head = Head(last_c, macro.scaled(macro.head_channels), macro.num_classes, rng)

    def forward(self, x: Tensor, cfg: IndicatorConfig | None = None,
                drop_plan: "list[SubsetDropout] | None" = None,
                pins: "list | None" = None) -> tuple[Tensor, list[Gates]]:
        cfg = cfg or self.icfg
        h = self.stem.forward(x)
        gates_per_layer = []
        for i, layer in enumerate(self.layers):
            drop = drop_plan[i] if drop_plan is not None else None
            pin = pins[i] if pins is not None else UNPINNED
            h, gates = layer.forward(h, cfg, drop=drop, pin=pin)
            gates_per_layer.append(gates)
        return self.head.forward(h), gates_per_layer

    def params(self) -> list[tuple[str, Tensor]]:
        out = list(self.stem.params())
        for layer in self.layers:
            out.extend(layer.params())
        out.extend(self.head.params())
        return out

    def threshold_names(self) -> set[str]:
        return {name for name, _ in self.params() if ".sk.t_" in name}

    def derive(self) -> DerivedArchitecture:
        decisions = [skm.derive_decision(layer.sk).derived for layer in self.layers]
        return DerivedArchitecture(tuple(decisions), self.macro)

    def snapshots(self) -> list[skm.DecisionSnapshot]:
        return [skm.derive_decision(layer.sk) for layer in self.layers]


def build_supernet(macro: MacroConfig, icfg: IndicatorConfig,
                   rng: np.random.Generator) -> Supernet:
    return Supernet(macro, icfg, rng)


class DiscreteMBConv:
    """Plain inverted bottleneck with a fixed (k, e) depthwise kernel."""

    def __init__(self, plan: LayerPlan, k: int, e: int, rng: np.random.Generator):
        if (k, e) not in CANDIDATES:
            raise ValueError(f"unknown MBConv type ({k}, {e})")
        self.plan = plan
        self.k = k
        self.e = e
        c_mid = plan.c_in * e
        self.expand_w = Tensor(_uniform(rng, (c_mid, plan.c_in), plan.c_in, gain=2.0),
                               requires_grad=True)
        self.expand_scale = Tensor(np.ones(c_mid), requires_grad=True)
        self.expand_bias = Tensor(np.zeros(c_mid), requires_grad=True)
        self.dw_w = Tensor(_uniform(rng, (c_mid, k, k), k * k, gain=2.0), requires_grad=True)
        self.dw_scale = Tensor(np.ones(c_mid), requires_grad=True)
        self.linear_w = Tensor(_uniform(rng, (plan.c_out, c_mid), c_mid), requires_grad=True)
        self.linear_scale = Tensor(np.ones(plan.c_out), requires_grad=True)
        self.residual = plan.stride == 1 and plan.c_in == plan.c_out
        if k == 5:
            inner = np.zeros((c_mid, k, k))
            inner[:, 1:4, 1:4] = 1.0
            self.inner_mask = inner
        else:
            self.inner_mask = None

    def forward(self, x: Tensor, inner_only: bool = False) -> Tensor:
        h = tc.conv2d_pointwise(x, self.expand_w)
        h = tc.channel_affine(h, self.expand_scale, self.expand_bias)
        h = tc.relu6(h)
        w = self.dw_w
        if inner_only and self.inner_mask is not None:
            w = tc.mask_mul(w, self.inner_mask)
        h = tc.conv2d_depthwise(h, w, self.plan.stride)
        h = tc.channel_affine(h, self.dw_scale)
        h = tc.relu6(h)
        h = tc.conv2d_pointwise(h, self.linear_w)
        h = tc.channel_affine(h, self.linear_scale)
        if self.residual:
            h = tc.add(h, x)
        return h

    def params(self) -> list[tuple[str, Tensor]]:
        p = f"layers.{self.plan.index}"
        return [
            (f"{p}.expand_w", self.expand_w),
            (f"{p}.expand_scale", self.expand_scale),
            (f"{p}.expand_bias", self.expand_bias),
            (f"{p}.dw_w", self.dw_w),
            (f"{p}.dw_scale", self.dw_scale),
            (f"{p}.linear_w", self.linear_w),
            (f"{p}.linear_scale", self.linear_scale),
        ]


class DiscreteNetwork:
    """A fixed architecture; skipped layers are omitted entirely."""

    def __init__(self, arch: DerivedArchitecture, rng: np.random.Generator):
        self.arch = arch
        macro = arch.macro
        self.stem = Stem(macro.scaled(macro.stem_channels), rng)
        self.layers: list[DiscreteMBConv | None] = []
        for plan, decision in zip(macro.layer_plans(), arch.decisions):
            if decision is None:
                self.layers.append(None)
            else:
                k, e = decision
                self.layers.append(DiscreteMBConv(plan, k, e, rng))
        last_c = macro.layer_plans()[-1].c_out
        self.head = Head(last_c, macro.scaled(macro.head_channels), macro.num_classes, rng)

    def forward(self, x: Tensor, inner_only: bool = False) -> Tensor:
        h = self.stem.forward(x)
        for layer in self.layers:
            if layer is not None:
                h = layer.forward(h, inner_only=inner_only)
        return self.head.forward(h)

    def params(self) -> list[tuple[str, Tensor]]:
        out = list(self.stem.params())
        for layer in self.layers:
            if layer is not None:
                out.extend(layer.params())
        out.extend(self.head.params())
        return out


def build_discrete(arch: DerivedArchitecture, source: Supernet | None = None,
                   rng: np.random.Generator | None = None) -> DiscreteNetwork:
    """Materialize a discrete network; copy subset weights when given a supernet.

    With a source supernet, the expansion/linear stages take the channel
    slices corresponding to the chosen expansion ratio and the depthwise
    kernel takes the chosen spatial/channel subset of the superkernel.
    """
    if source is None:
        if rng is None:
            raise ValueError("build_discrete needs an rng when building fresh weights")
        return DiscreteNetwork(arch, rng)

    if source.macro != arch.macro:
        raise ValueError("architecture macro config does not match the source supernet")
    net = DiscreteNetwork(arch, rng or np.random.default_rng(0))

    dst_stem = dict(net.stem.params())
    for name, tensor in source.stem.params():
        dst_stem[name].data[...] = tensor.data
    dst_head = dict(net.head.params())
    for name, tensor in source.head.params():
        dst_head[name].data[...] = tensor.data

    for sup_layer, disc_layer in zip(source.layers, net.layers):
        if disc_layer is None:
            continue
        rows = disc_layer.plan.c_in * disc_layer.e
        disc_layer.expand_w.data[...] = sup_layer.expand_w.data[:rows]
        disc_layer.expand_scale.data[...] = sup_layer.expand_scale.data[:rows]
        disc_layer.expand_bias.data[...] = sup_layer.expand_bias.data[:rows]
        disc_layer.dw_w.data[...] = sup_layer.sk.subset_weights((disc_layer.k, disc_layer.e))
        disc_layer.dw_scale.data[...] = sup_layer.dw_scale.data[:rows]
        disc_layer.linear_w.data[...] = sup_layer.linear_w.data[:, :rows]
        disc_layer.linear_scale.data[...] = sup_layer.linear_scale.data
    return net


def param_count(net: Supernet | DiscreteNetwork) -> int:
    return sum(t.data.size for _, t in net.params())


def layer_options(plan: LayerPlan) -> tuple:
    """Candidate decisions at one layer, skip first where it is legal."""
    if plan.skip_allowed:
        return (None,) + CANDIDATES
    return CANDIDATES


def space_size(macro: MacroConfig) -> int:
    """Number of legal architectures in the space, without iterating it."""
    n = 1
    for plan in macro.layer_plans():
        n *= len(layer_options(plan))
    return n


def nominal_space_size(macro: MacroConfig) -> int:
    """Headline count of five candidates per layer, ignoring skip legality."""
    return 5 ** macro.num_layers()


def enumerate_space(macro: MacroConfig, cap: int = 4096):
    """Iterate every architecture in the space, in a fixed deterministic order."""
    total = space_size(macro)
    if total > cap:
        raise SpaceTooLargeError(
            f"space has {total} architectures (cap {cap}); sample instead of enumerating"
        )
    option_lists = [layer_options(plan) for plan in macro.layer_plans()]
    for combo in itertools.product(*option_lists):
        yield DerivedArchitecture(combo, macro)
