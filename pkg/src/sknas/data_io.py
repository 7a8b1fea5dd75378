"""Readers and writers: datasets, configs, tables, architectures, checkpoints.

All writers are deterministic (stable key order, shortest-round-trip float
formatting) and all round-trips are lossless.  Parsers reject malformed
input with the offending line or offset; nothing is silently coerced.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .latency_model import LatencyTable, LayerLatency
from .supernet_builder import BlockSpec, DerivedArchitecture, MacroConfig

RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixels, public CIFAR-10 binary layout


class DataFormatError(ValueError):
    """Malformed input file; message carries the location and reason."""


@dataclass(frozen=True)
class DatasetHandle:
    source: str
    split: str
    num_classes: int
    resolution: int
    images: np.ndarray  # [n, 3, R, R] float64 in [0, 1]
    labels: np.ndarray  # [n] int64

    def __post_init__(self):
        n = len(self.labels)
        expected = (n, 3, self.resolution, self.resolution)
        if self.images.shape != expected:
            raise ValueError(f"images shape {self.images.shape} != {expected}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("images must be normalized to [0, 1]")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must be in [0, {self.num_classes})")


class DatasetBundle(NamedTuple):
    train: DatasetHandle
    eval: DatasetHandle


def load_cifar10_binary(paths: "list[str | Path]", split: str = "train") -> DatasetHandle:
    """Parse CIFAR-10 binary batch files (label byte + 3072 pixel bytes per record)."""
    images = []
    labels = []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % RECORD_BYTES != 0:
            raise DataFormatError(
                f"{path}: file ends mid-record at byte offset {len(raw)} "
                f"(length must be a multiple of {RECORD_BYTES})"
            )
        n = len(raw) // RECORD_BYTES
        buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_BYTES)
        file_labels = buf[:, 0].astype(np.int64)
        bad = np.nonzero(file_labels > 9)[0]
        if bad.size:
            raise DataFormatError(
                f"{path}: label {int(file_labels[bad[0]])} at record {int(bad[0])} exceeds 9"
            )
        images.append(buf[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0)
        labels.append(file_labels)
    return DatasetHandle(
        source="cifar10",
        split=split,
        num_classes=10,
        resolution=32,
        images=np.concatenate(images, axis=0),
        labels=np.concatenate(labels, axis=0),
    )


def synth_dataset(classes: int, n: int, resolution: int, seed: int,
                  separation: float = 4.0, noise_sigma: float = 0.06,
                  split: str = "train") -> DatasetHandle:
    """Deterministic class-conditional Gaussian blobs, balanced and separable.

    Each class gets a fixed unit-norm template: a global color tint plus a
    Gaussian bump at a class-specific location.  Samples are mid-gray plus
    ``noise_sigma * (separation * template + unit Gaussian pixel noise)``,
    so class means sit ``separation`` noise-sigmas apart along the template
    direction and the classes are linearly separable for separation >= 2.
    Train and eval splits share templates but draw independent noise.
    """
    if n < classes:
        raise ValueError(f"need at least one sample per class: n={n}, classes={classes}")
    pattern_rng = np.random.default_rng([seed, 777])
    yy, xx = np.mgrid[0:resolution, 0:resolution]
    patterns = []
    for c in range(classes):
        tint = pattern_rng.standard_normal(3)
        tint_map = np.broadcast_to(tint[:, None, None], (3, resolution, resolution)).copy()
        tint_map /= np.linalg.norm(tint_map)
        angle = 2.0 * np.pi * c / classes + float(pattern_rng.uniform(0, 2 * np.pi / classes))
        cy = resolution / 2 + resolution / 4 * np.sin(angle)
        cx = resolution / 2 + resolution / 4 * np.cos(angle)
        width = max(1.5, resolution / 5)
        bump2d = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        color = pattern_rng.standard_normal(3)
        bump = color[:, None, None] * bump2d[None]
        bump /= np.linalg.norm(bump)
        template = tint_map + bump
        patterns.append(template / np.linalg.norm(template))
    noise_rng = np.random.default_rng([seed, 0 if split == "train" else 1])

    labels = np.arange(n, dtype=np.int64) % classes
    images = np.empty((n, 3, resolution, resolution), dtype=np.float64)
    for i in range(n):
        eps = noise_rng.standard_normal((3, resolution, resolution))
        images[i] = 0.5 + noise_sigma * (separation * patterns[labels[i]] + eps)
    np.clip(images, 0.0, 1.0, out=images)
    return DatasetHandle(
        source="synth",
        split=split,
        num_classes=classes,
        resolution=resolution,
        images=images,
        labels=labels,
    )


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random horizontal flip plus random crop from a zero-padded frame."""
    n, _, h, w = images.shape
    out = np.empty_like(images)
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    for i in range(n):
        img = padded[i]
        if rng.random() < 0.5:
            img = img[:, :, ::-1]
        dy = int(rng.integers(0, 2 * pad + 1))
        dx = int(rng.integers(0, 2 * pad + 1))
        out[i] = img[:, dy : dy + h, dx : dx + w]
    return out


# ---------------------------------------------------------------------------
# atomic file writing


def _atomic_write_text(path: "str | Path", text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_write_bytes(path: "str | Path", blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# decision tokens


def decision_token(decision: "tuple[int, int] | None") -> str:
    if decision is None:
        return "skip"
    k, e = decision
    return f"k{k}e{e}"


def parse_decision_token(token: str) -> "tuple[int, int] | None":
    if token == "skip":
        return None
    if len(token) == 4 and token[0] == "k" and token[2] == "e":
        k, e = token[1], token[3]
        if k in "35" and e in "36":
            return (int(k), int(e))
    raise DataFormatError(f"unknown decision token {token!r}")


def decisions_token(decisions) -> str:
    return "-".join(decision_token(d) for d in decisions)


def parse_decisions_token(text: str) -> tuple:
    return tuple(parse_decision_token(t) for t in text.split("-"))


# ---------------------------------------------------------------------------
# architecture JSON


def _check_keys(obj: dict, expected: set[str], where: str) -> None:
    got = set(obj)
    if got != expected:
        unknown = sorted(got - expected)
        missing = sorted(expected - got)
        parts = []
        if unknown:
            parts.append(f"unknown keys {unknown}")
        if missing:
            parts.append(f"missing keys {missing}")
        raise DataFormatError(f"{where}: " + ", ".join(parts))


def macro_to_dict(macro: MacroConfig) -> dict:
    return {
        "stem_channels": macro.stem_channels,
        "blocks": [
            {"num_layers": b.num_layers, "out_channels": b.out_channels,
             "first_stride": b.first_stride}
            for b in macro.blocks
        ],
        "head_channels": macro.head_channels,
        "num_classes": macro.num_classes,
        "width_multiplier": macro.width_multiplier,
        "input_resolution": macro.input_resolution,
    }


def macro_from_dict(obj: dict) -> MacroConfig:
    _check_keys(obj, {"stem_channels", "blocks", "head_channels", "num_classes",
                      "width_multiplier", "input_resolution"}, "macro")
    blocks = []
    for i, b in enumerate(obj["blocks"]):
        _check_keys(b, {"num_layers", "out_channels", "first_stride"}, f"macro.blocks[{i}]")
        blocks.append(BlockSpec(int(b["num_layers"]), int(b["out_channels"]),
                                int(b["first_stride"])))
    return MacroConfig(
        stem_channels=int(obj["stem_channels"]),
        blocks=tuple(blocks),
        head_channels=int(obj["head_channels"]),
        num_classes=int(obj["num_classes"]),
        width_multiplier=float(obj["width_multiplier"]),
        input_resolution=int(obj["input_resolution"]),
    )


def architecture_to_json(arch: DerivedArchitecture, provenance: dict) -> str:
    _check_keys(provenance, {"seed", "lambda", "search_steps"}, "provenance")
    doc = {
        "macro": macro_to_dict(arch.macro),
        "decisions": [
            "skip" if d is None else {"k": d[0], "e": d[1]} for d in arch.decisions
        ],
        "provenance": {
            "seed": provenance["seed"],
            "lambda": provenance["lambda"],
            "search_steps": provenance["search_steps"],
        },
    }
    return json.dumps(doc, indent=2) + "\n"


def write_architecture(path: "str | Path", arch: DerivedArchitecture, provenance: dict) -> None:
    _atomic_write_text(path, architecture_to_json(arch, provenance))


def read_architecture(path: "str | Path") -> tuple[DerivedArchitecture, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    _check_keys(doc, {"macro", "decisions", "provenance"}, str(path))
    macro = macro_from_dict(doc["macro"])
    decisions = []
    for i, d in enumerate(doc["decisions"]):
        if d == "skip":
            decisions.append(None)
        elif isinstance(d, dict):
            _check_keys(d, {"k", "e"}, f"decisions[{i}]")
            decisions.append((int(d["k"]), int(d["e"])))
        else:
            raise DataFormatError(f"{path}: decisions[{i}] is neither 'skip' nor an object")
    prov = doc["provenance"]
    _check_keys(prov, {"seed", "lambda", "search_steps"}, "provenance")
    return DerivedArchitecture(tuple(decisions), macro), dict(prov)


# ---------------------------------------------------------------------------
# config file (key = value text)

_MACRO_KEYS = ("macro.input_resolution", "macro.stem_channels", "macro.blocks",
               "macro.head_channels", "macro.num_classes", "macro.width_multiplier")
_SEARCH_KEYS = ("search.lambda", "search.epochs", "search.batch_size",
                "search.lr_initial", "search.lr_kind", "search.lr_min",
                "search.momentum", "search.weight_decay",
                "search.dropout_p_start", "search.dropout_p_end",
                "search.dropout_active_fraction", "search.seed",
                "search.indicator_temperature", "search.indicator_mode",
                "search.runtime_floor_ms", "search.grad_clip")


def _blocks_token(blocks) -> str:
    return ",".join(f"{b.out_channels}:{b.num_layers}:{b.first_stride}" for b in blocks)


def _parse_blocks_token(text: str, line_no: int) -> tuple[BlockSpec, ...]:
    blocks = []
    for token in text.split(","):
        parts = token.split(":")
        if len(parts) != 3:
            raise DataFormatError(
                f"line {line_no}: block token {token!r} must be out_channels:num_layers:stride"
            )
        try:
            out_c, layers, stride = (int(p) for p in parts)
        except ValueError as e:
            raise DataFormatError(f"line {line_no}: non-integer block field in {token!r}") from e
        blocks.append(BlockSpec(layers, out_c, stride))
    return tuple(blocks)


def config_to_text(macro: MacroConfig, search) -> str:
    lines = [
        f"macro.input_resolution = {macro.input_resolution}",
        f"macro.stem_channels = {macro.stem_channels}",
        f"macro.blocks = {_blocks_token(macro.blocks)}",
        f"macro.head_channels = {macro.head_channels}",
        f"macro.num_classes = {macro.num_classes}",
        f"macro.width_multiplier = {macro.width_multiplier!r}",
        f"search.lambda = {search.lam!r}",
        f"search.epochs = {search.epochs}",
        f"search.batch_size = {search.batch_size}",
        f"search.lr_initial = {search.lr.initial!r}",
        f"search.lr_kind = {search.lr.kind}",
        f"search.lr_min = {search.lr.min_lr!r}",
        f"search.momentum = {search.momentum!r}",
        f"search.weight_decay = {search.weight_decay!r}",
        f"search.dropout_p_start = {search.dropout.p_start!r}",
        f"search.dropout_p_end = {search.dropout.p_end!r}",
        f"search.dropout_active_fraction = {search.dropout.active_fraction!r}",
        f"search.seed = {search.seed}",
        f"search.indicator_temperature = {search.indicator.temperature!r}",
        f"search.indicator_mode = {search.indicator.mode.value}",
        f"search.runtime_floor_ms = {search.runtime_floor_ms!r}",
        f"search.grad_clip = {search.grad_clip!r}",
    ]
    return "\n".join(lines) + "\n"


def write_config(path: "str | Path", macro: MacroConfig, search) -> None:
    _atomic_write_text(path, config_to_text(macro, search))


def read_config(path: "str | Path"):
    """Parse a config file into (MacroConfig, SearchConfig)."""
    from .search_engine import DropoutSchedule, LrSchedule, SearchConfig
    from .superkernel import IndicatorConfig, IndicatorMode

    values: dict[str, str] = {}
    lines: dict[str, int] = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}: line {line_no}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _MACRO_KEYS + _SEARCH_KEYS:
            raise DataFormatError(f"{path}: line {line_no}: unknown key {key!r}")
        if key in values:
            raise DataFormatError(f"{path}: line {line_no}: duplicate key {key!r}")
        values[key] = value.strip()
        lines[key] = line_no

    missing = sorted(set(_MACRO_KEYS + _SEARCH_KEYS) - set(values))
    if missing:
        raise DataFormatError(f"{path}: missing keys {missing}")

    def _num(key: str, kind):
        try:
            return kind(values[key])
        except ValueError as e:
            raise DataFormatError(
                f"{path}: line {lines[key]}: {key} must be {kind.__name__}, got {values[key]!r}"
            ) from e

    macro = MacroConfig(
        stem_channels=_num("macro.stem_channels", int),
        blocks=_parse_blocks_token(values["macro.blocks"], lines["macro.blocks"]),
        head_channels=_num("macro.head_channels", int),
        num_classes=_num("macro.num_classes", int),
        width_multiplier=_num("macro.width_multiplier", float),
        input_resolution=_num("macro.input_resolution", int),
    )
    try:
        mode = IndicatorMode(values["search.indicator_mode"])
    except ValueError as e:
        raise DataFormatError(
            f"{path}: line {lines['search.indicator_mode']}: "
            f"unknown indicator mode {values['search.indicator_mode']!r}"
        ) from e
    search = SearchConfig(
        lam=_num("search.lambda", float),
        epochs=_num("search.epochs", int),
        batch_size=_num("search.batch_size", int),
        lr=LrSchedule(initial=_num("search.lr_initial", float),
                      kind=values["search.lr_kind"],
                      min_lr=_num("search.lr_min", float)),
        momentum=_num("search.momentum", float),
        weight_decay=_num("search.weight_decay", float),
        dropout=DropoutSchedule(p_start=_num("search.dropout_p_start", float),
                                p_end=_num("search.dropout_p_end", float),
                                active_fraction=_num("search.dropout_active_fraction", float)),
        seed=_num("search.seed", int),
        indicator=IndicatorConfig(temperature=_num("search.indicator_temperature", float),
                                  mode=mode),
        runtime_floor_ms=_num("search.runtime_floor_ms", float),
        grad_clip=_num("search.grad_clip", float),
    )
    return macro, search


# ---------------------------------------------------------------------------
# latency table CSV

_LUT_HEADER = "layer,r33_3,r33_6,r55_3,r55_6"


def lut_to_csv(lut: LatencyTable) -> str:
    lines = [_LUT_HEADER]
    for i, e in enumerate(lut.entries):
        lines.append(f"{i},{e.r33_3!r},{e.r33_6!r},{e.r55_3!r},{e.r55_6!r}")
    lines.append(f"overhead,{lut.fixed_overhead_ms!r},,,")
    return "\n".join(lines) + "\n"


def write_lut(path: "str | Path", lut: LatencyTable) -> None:
    _atomic_write_text(path, lut_to_csv(lut))


def read_lut(path: "str | Path") -> LatencyTable:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _LUT_HEADER:
        raise DataFormatError(f"{path}: line 1: header must be {_LUT_HEADER!r}")
    entries = []
    overhead = None
    for line_no, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 5:
            raise DataFormatError(f"{path}: line {line_no}: expected 5 columns, got {len(fields)}")
        if fields[0] == "overhead":
            if fields[2:] != ["", "", ""]:
                raise DataFormatError(f"{path}: line {line_no}: overhead row takes one value")
            if line_no != len(lines):
                raise DataFormatError(f"{path}: line {line_no}: overhead row must be last")
            overhead = _positive_float(fields[1], path, line_no, "overhead")
            continue
        if fields[0] != str(len(entries)):
            raise DataFormatError(
                f"{path}: line {line_no}: expected layer {len(entries)}, got {fields[0]!r}"
            )
        r33_3, r33_6, r55_3, r55_6 = (
            _positive_float(f, path, line_no, name)
            for f, name in zip(fields[1:], ("r33_3", "r33_6", "r55_3", "r55_6"))
        )
        entries.append(LayerLatency(r33_3, r33_6, r55_3, r55_6))
    if overhead is None:
        raise DataFormatError(f"{path}: missing trailing overhead row")
    return LatencyTable(entries=tuple(entries), fixed_overhead_ms=overhead)


def _positive_float(text: str, path, line_no: int, name: str) -> float:
    try:
        value = float(text)
    except ValueError as e:
        raise DataFormatError(f"{path}: line {line_no}: {name} is not a number: {text!r}") from e
    if not value > 0:
        raise DataFormatError(f"{path}: line {line_no}: {name} must be positive, got {value!r}")
    return value


# ---------------------------------------------------------------------------
# runtime measurement samples CSV (for table validation)

_SAMPLES_HEADER = "arch,measured_ms"


def write_samples_csv(path: "str | Path", samples: "list[tuple[tuple, float]]") -> None:
    lines = [_SAMPLES_HEADER]
    for decisions, measured in samples:
        lines.append(f"{decisions_token(decisions)},{measured!r}")
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_samples_csv(path: "str | Path") -> "list[tuple[tuple, float]]":
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _SAMPLES_HEADER:
        raise DataFormatError(f"{path}: line 1: header must be {_SAMPLES_HEADER!r}")
    samples = []
    for line_no, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 2:
            raise DataFormatError(f"{path}: line {line_no}: expected 2 columns, got {len(fields)}")
        samples.append((parse_decisions_token(fields[0]),
                        _positive_float(fields[1], path, line_no, "measured_ms")))
    return samples


# ---------------------------------------------------------------------------
# search trace exports


def trace_to_csv(trace) -> str:
    lines = ["step,ce,runtime_ms,total"]
    for r in trace.records:
        lines.append(f"{r.step},{r.ce!r},{r.runtime_ms!r},{r.total!r}")
    return "\n".join(lines) + "\n"


def write_trace_csv(path: "str | Path", trace) -> None:
    _atomic_write_text(path, trace_to_csv(trace))


def decisions_to_jsonl(trace) -> str:
    lines = []
    for epoch, snapshots in trace.snapshots:
        doc = {
            "epoch": epoch,
            "layers": [
                {
                    "norm_sq_shell": s.norm_sq_shell,
                    "norm_sq_half3": s.norm_sq_half3,
                    "norm_sq_half6": s.norm_sq_half6,
                    "ind_k5": s.ind_k5,
                    "ind_e3": s.ind_e3,
                    "ind_e6": s.ind_e6,
                    "derived": decision_token(s.derived),
                }
                for s in snapshots
            ],
        }
        lines.append(json.dumps(doc))
    return "\n".join(lines) + "\n" if lines else ""


def write_decisions_jsonl(path: "str | Path", trace) -> None:
    _atomic_write_text(path, decisions_to_jsonl(trace))


# ---------------------------------------------------------------------------
# checkpoints

_CHECKPOINT_MAGIC = b"SPNAS1"


def checkpoint_to_bytes(named_params: "list[tuple[str, np.ndarray]]") -> bytes:
    out = [_CHECKPOINT_MAGIC, struct.pack("<I", len(named_params))]
    for name, arr in named_params:
        arr = np.asarray(arr, dtype="<f8")
        name_bytes = name.encode("utf-8")
        out.append(struct.pack("<I", len(name_bytes)))
        out.append(name_bytes)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def save_checkpoint(path: "str | Path", net) -> None:
    _atomic_write_bytes(path, checkpoint_to_bytes(
        [(name, t.data) for name, t in net.params()]
    ))


def load_checkpoint(path: "str | Path") -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[: len(_CHECKPOINT_MAGIC)] != _CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic bytes at offset 0")
    offset = len(_CHECKPOINT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise DataFormatError(f"{path}: unexpected end of file at offset {offset}")
        chunk = blob[offset : offset + n]
        offset += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
        if name in params:
            raise DataFormatError(f"{path}: duplicate parameter {name!r}")
        params[name] = arr
    if offset != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - offset} trailing bytes at offset {offset}")
    return params


def load_state(net, state: dict[str, np.ndarray]) -> None:
    """Copy a checkpoint's arrays into a network, requiring an exact name match."""
    params = dict(net.params())
    if set(params) != set(state):
        unknown = sorted(set(state) - set(params))
        missing = sorted(set(params) - set(state))
        raise DataFormatError(
            f"checkpoint does not match network: unknown {unknown}, missing {missing}"
        )
    for name, tensor in params.items():
        if tensor.data.shape != state[name].shape:
            raise DataFormatError(
                f"checkpoint parameter {name!r} has shape {state[name].shape}, "
                f"network expects {tensor.data.shape}"
            )
        tensor.data[...] = state[name]
