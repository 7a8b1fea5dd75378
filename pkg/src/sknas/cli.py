"""Command-line surface for the search pipeline.

Every subcommand writes machine-readable result files and prints a short
human summary to stdout.  Runs with identical flags and seed produce
byte-identical result files.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data_io as dio
from . import latency_model as lm
from . import oracle as orc
from . import search_engine as se
from . import supernet_builder as snb
from .superkernel import IndicatorConfig


def _parse_data_spec(spec: str) -> dio.DatasetBundle:
    if spec.startswith("synth:"):
        kv = {}
        for token in spec[len("synth:"):].split(","):
            if "=" not in token:
                raise dio.DataFormatError(f"data spec token {token!r} must be key=value")
            key, _, value = token.partition("=")
            kv[key] = value
        known = {"classes", "n", "resolution", "seed", "n_eval", "separation", "sigma"}
        unknown = set(kv) - known
        if unknown:
            raise dio.DataFormatError(f"unknown data spec keys {sorted(unknown)}")
        for required in ("classes", "n", "resolution", "seed"):
            if required not in kv:
                raise dio.DataFormatError(f"data spec missing {required!r}")
        classes = int(kv["classes"])
        n = int(kv["n"])
        resolution = int(kv["resolution"])
        seed = int(kv["seed"])
        n_eval = int(kv.get("n_eval", max(classes, n // 2)))
        separation = float(kv.get("separation", 4.0))
        sigma = float(kv.get("sigma", 0.06))
        train = dio.synth_dataset(classes, n, resolution, seed,
                                  separation=separation, noise_sigma=sigma, split="train")
        evl = dio.synth_dataset(classes, n_eval, resolution, seed,
                                separation=separation, noise_sigma=sigma, split="eval")
        return dio.DatasetBundle(train=train, eval=evl)
    if spec.startswith("cifar:"):
        root = Path(spec[len("cifar:"):])
        train_files = sorted(root.glob("data_batch_*.bin"))
        eval_files = sorted(root.glob("test_batch*.bin"))
        if not train_files or not eval_files:
            raise dio.DataFormatError(f"no CIFAR-10 binary batches under {root}")
        return dio.DatasetBundle(
            train=dio.load_cifar10_binary(train_files, split="train"),
            eval=dio.load_cifar10_binary(eval_files, split="eval"),
        )
    raise dio.DataFormatError(f"data spec {spec!r} must start with 'synth:' or 'cifar:'")


def _parse_window(text: str) -> tuple[float, float]:
    lo, sep, hi = text.partition(":")
    if not sep:
        raise ValueError(f"window {text!r} must be lo:hi in ms")
    return float(lo), float(hi)


def _write_json(path: Path, doc: dict) -> None:
    dio._atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def _cmd_search(args) -> int:
    macro, cfg = dio.read_config(args.config)
    if args.seed is not None:
        cfg = se.SearchConfig(**{**cfg.__dict__, "seed": args.seed})
    lut = dio.read_lut(args.lut)
    data = _parse_data_spec(args.data)
    supernet = snb.build_supernet(macro, cfg.indicator, np.random.default_rng([cfg.seed, 0]))
    arch, trace = se.run_search(supernet, data, lut, cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provenance = {"seed": cfg.seed, "lambda": cfg.lam, "search_steps": len(trace.records)}
    dio.write_architecture(out / "architecture.json", arch, provenance)
    dio.write_trace_csv(out / "trace.csv", trace)
    dio.write_decisions_jsonl(out / "decisions.jsonl", trace)
    dio.save_checkpoint(out / "checkpoint.bin", supernet)
    _write_json(out / "search_meta.json",
                {"macro": dio.macro_to_dict(macro), "provenance": provenance})

    runtime = lm.predict_discrete_runtime(arch, lut).total_ms
    print(f"searched {len(trace.records)} steps; derived {dio.decisions_token(arch.decisions)}")
    print(f"predicted runtime {runtime:.4f} ms; results in {out}")
    return 0


def _cmd_derive(args) -> int:
    ckpt_path = Path(args.checkpoint)
    meta_path = Path(args.meta) if args.meta else ckpt_path.with_name("search_meta.json")
    meta = json.loads(meta_path.read_text())
    macro = dio.macro_from_dict(meta["macro"])
    supernet = snb.build_supernet(macro, IndicatorConfig(), np.random.default_rng(0))
    dio.load_state(supernet, dio.load_checkpoint(ckpt_path))
    arch = supernet.derive()
    dio.write_architecture(args.out, arch, meta["provenance"])
    print(f"derived {dio.decisions_token(arch.decisions)} -> {args.out}")
    return 0


def _train_schedule(args, seed: int) -> se.TrainSchedule:
    return se.TrainSchedule(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=se.LrSchedule(initial=args.lr),
        seed=seed,
        augment=getattr(args, "augment", False),
    )


def _cmd_train(args) -> int:
    arch, provenance = dio.read_architecture(args.arch)
    data = _parse_data_spec(args.data)
    seed = args.seed if args.seed is not None else int(provenance["seed"])
    net = snb.build_discrete(arch, rng=np.random.default_rng([seed, 7]))
    metrics = se.train_discrete(net, data, _train_schedule(args, seed))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dio.save_checkpoint(out / "checkpoint.bin", net)
    _write_json(out / "metrics.json",
                {"top1": metrics["top1"], "loss": metrics["loss"],
                 "epochs": args.epochs, "seed": seed})
    print(f"trained {dio.decisions_token(arch.decisions)}: "
          f"top1 {metrics['top1']:.4f}, loss {metrics['loss']:.4f}")
    return 0


def _cmd_eval(args) -> int:
    arch, _ = dio.read_architecture(args.arch)
    data = _parse_data_spec(args.data)
    net = snb.build_discrete(arch, rng=np.random.default_rng(0))
    dio.load_state(net, dio.load_checkpoint(args.checkpoint))
    top1, ce = se.evaluate(net, data.eval)
    if args.out:
        _write_json(Path(args.out), {"top1": top1, "loss": ce})
    print(f"eval top1 {top1:.4f}, loss {ce:.4f}")
    return 0


def _cmd_predict_runtime(args) -> int:
    arch, _ = dio.read_architecture(args.arch)
    lut = dio.read_lut(args.lut)
    estimate = lm.predict_discrete_runtime(arch, lut)
    if args.out:
        _write_json(Path(args.out), {"total_ms": estimate.total_ms,
                                     "per_layer_ms": list(estimate.per_layer_ms)})
    print(f"{estimate.total_ms!r}")
    return 0


def _cmd_lut_synth(args) -> int:
    macro, _ = dio.read_config(args.config)
    lut = lm.synth_lut(macro, ms_per_mmac=args.ms_per_mmac, noise=args.noise, seed=args.seed or 0)
    dio.write_lut(args.out, lut)
    print(f"wrote {len(lut.entries)}-layer table, overhead {lut.fixed_overhead_ms!r} ms")
    return 0


def _cmd_lut_validate(args) -> int:
    macro, _ = dio.read_config(args.config)
    lut = dio.read_lut(args.lut)
    samples = [(snb.DerivedArchitecture(decisions, macro), measured)
               for decisions, measured in dio.read_samples_csv(args.samples)]
    report = lm.validate_lut(lut, samples)
    if args.out:
        _write_json(Path(args.out), {"rmse_ms": report.rmse_ms,
                                     "mean_abs_pct_error": report.mean_abs_pct_error,
                                     "n_samples": report.n_samples})
    print(report.summary())
    return 0


def _cmd_oracle(args) -> int:
    macro, cfg = dio.read_config(args.config)
    if args.seed is not None:
        cfg = se.SearchConfig(**{**cfg.__dict__, "seed": args.seed})
    lut = dio.read_lut(args.lut)
    data = _parse_data_spec(args.data)
    schedule = se.TrainSchedule(epochs=args.train_epochs, batch_size=cfg.batch_size,
                                lr=cfg.lr, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay, seed=cfg.seed)
    space = orc.exhaustive_evaluate(macro, data, lut, schedule, cfg.lam,
                                    runtime_floor_ms=cfg.runtime_floor_ms)
    supernet = snb.build_supernet(macro, cfg.indicator, np.random.default_rng([cfg.seed, 0]))
    arch, trace = se.run_search(supernet, data, lut, cfg)
    percentile = orc.search_vs_oracle(space, arch, cfg.lam)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dio._atomic_write_text(out / "space.csv", orc.space_to_csv(space))
    _write_json(out / "result.json", {
        "searched": dio.decisions_token(arch.decisions),
        "percentile": percentile,
        "lambda": cfg.lam,
        "seed": cfg.seed,
        "space_size": len(space.records),
        "search_steps": len(trace.records),
    })
    print(f"searched {dio.decisions_token(arch.decisions)}: "
          f"better than all but {percentile:.1%} of {len(space.records)} architectures")
    return 0


def _cmd_ablation(args) -> int:
    macro, cfg = dio.read_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    data = _parse_data_spec(args.data)
    schedule = se.TrainSchedule(epochs=args.epochs, batch_size=cfg.batch_size,
                                lr=cfg.lr, seed=seed)
    all_56 = snb.DerivedArchitecture(tuple((5, 6) for _ in macro.layer_plans()), macro)
    all_36 = snb.DerivedArchitecture(tuple((3, 6) for _ in macro.layer_plans()), macro)

    subset = se.ablation_subset_training(
        snb.build_discrete(all_56, rng=np.random.default_rng([seed, 7])), data, schedule)
    base_33 = se.train_discrete(
        snb.build_discrete(all_36, rng=np.random.default_rng([seed, 7])), data, schedule)
    base_55 = se.train_discrete(
        snb.build_discrete(all_56, rng=np.random.default_rng([seed, 7])), data, schedule)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "subset_trained": {"inner_top1": subset["inner_top1"], "full_top1": subset["full_top1"]},
        "individually_trained": {"top1_3x3": base_33["top1"], "top1_5x5": base_55["top1"]},
        "epochs": args.epochs,
        "seed": seed,
        # published large-scale reference for this protocol, for context only
        "reference_top1": {"subset_inner": 73.43, "subset_full": 73.86,
                           "individual_3x3": 73.59, "individual_5x5": 74.10},
    }
    _write_json(out / "ablation.json", doc)
    print(f"subset-trained: inner {subset['inner_top1']:.4f}, full {subset['full_top1']:.4f}; "
          f"individual: 3x3 {base_33['top1']:.4f}, 5x5 {base_55['top1']:.4f}")
    return 0


def _cmd_random_baseline(args) -> int:
    macro, _ = dio.read_config(args.config)
    lut = dio.read_lut(args.lut)
    window = _parse_window(args.window)
    archs, rate = se.random_search_baseline(macro, lut, window, args.n,
                                            np.random.default_rng(args.seed or 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "baseline.json", {
        "window_ms": list(window),
        "n": args.n,
        "acceptance_rate": rate,
        "architectures": [dio.decisions_token(a.decisions) for a in archs],
        "predicted_ms": [lm.predict_discrete_runtime(a, lut).total_ms for a in archs],
    })
    print(f"accepted {args.n} architectures at rate {rate:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sknas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the architecture search")
    p.add_argument("--config", required=True)
    p.add_argument("--lut", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_search)

    p = sub.add_parser("derive", help="re-derive decisions from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--meta", help="search_meta.json (default: next to the checkpoint)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_derive)

    p = sub.add_parser("train", help="train a discrete architecture from scratch")
    p.add_argument("--arch", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--augment", action="store_true")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    p.add_argument("--arch", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("predict-runtime", help="table-predicted runtime of an architecture")
    p.add_argument("--arch", required=True)
    p.add_argument("--lut", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_predict_runtime)

    lut_parser = sub.add_parser("lut", help="latency table tools")
    lut_sub = lut_parser.add_subparsers(dest="lut_command", required=True)

    p = lut_sub.add_parser("synth", help="synthesize a MAC-proportional table")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ms-per-mmac", type=float, default=20.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_lut_synth)

    p = lut_sub.add_parser("validate", help="compare predictions against measurements")
    p.add_argument("--lut", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_lut_validate)

    p = sub.add_parser("oracle", help="exhaustively evaluate a small space and rank the search")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lut", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-epochs", type=int, default=10)
    p.set_defaults(fn=_cmd_oracle)

    p = sub.add_parser("ablation", help="subset-training comparison on 5x5 kernels")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, default=10)
    p.set_defaults(fn=_cmd_ablation)

    p = sub.add_parser("random-baseline", help="rejection-sample a runtime window")
    p.add_argument("--config", required=True)
    p.add_argument("--lut", required=True)
    p.add_argument("--window", required=True, help="lo:hi in ms")
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_random_baseline)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
