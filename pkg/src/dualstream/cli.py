"""Command-line entry point.

Commands: train, eval, ablate, gradcheck, bench-scan, export-features-stub,
synth-data. Config precedence: built-in defaults, then --config JSON, then
explicit flags. Exit codes: 0 success, 2 usage or I/O problem, 3 numeric
abort, 4 stored-artifact/config incompatibility.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import (
    CompatibilityError,
    ConfigError,
    ContractError,
    CorruptionError,
    DecodeError,
    FormatError,
    NumericError,
    ParseError,
    ValidationError,
)


def _load_config(path: str | None, seed: int | None, fusion_mode: str | None):
    from .train import TrainConfig

    raw = TrainConfig().to_dict()
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            try:
                overrides = json.load(f)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(overrides, dict):
            raise ParseError(f"{path}: config must be a JSON object")
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict):
                raw[key].update(value)
            else:
                raw[key] = value
    cfg = TrainConfig.from_dict(raw)
    if seed is not None:
        cfg.seed = seed
    if fusion_mode is not None:
        cfg.fusion_mode = fusion_mode
    cfg.validate()
    return cfg


def _manifest(path: str):
    from .data import load_manifest

    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    return load_manifest(path)


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed, args.fusion_mode)
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    if not args.train_manifest or not args.test_manifest:
        print("error: --train-manifest and --test-manifest are required", file=sys.stderr)
        return 2
    from .train import run_training

    run_training(
        cfg,
        _manifest(args.train_manifest),
        _manifest(args.test_manifest),
        root_dir=args.data_root,
        out_dir=args.out,
        deterministic=args.deterministic,
        log=print,
    )
    print(f"checkpoint: {os.path.join(args.out, 'best.mdck')}")
    print(f"reports:    {os.path.join(args.out, 'reports.csv')}")
    return 0


def cmd_eval(args) -> int:
    from .train import ensure_compatible, evaluate_manifest, load_checkpoint, restore_model

    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    if args.config is not None:
        ensure_compatible(ckpt, _load_config(args.config, None, None))
    model, cfg = restore_model(ckpt)
    records = _manifest(args.test_manifest)
    result = evaluate_manifest(
        model, records, cfg.preprocess_config(), cfg.batch_size, root_dir=args.data_root
    )
    if args.json:
        print(json.dumps({"pc": result.pc, "mae": result.mae, "rmse": result.rmse, "n": result.n}))
    else:
        print(result.line())
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config, args.seed, None)
    from .train import format_ablation_table, run_ablation

    rows = run_ablation(
        cfg,
        _manifest(args.train_manifest),
        _manifest(args.test_manifest),
        root_dir=args.data_root,
        deterministic=args.deterministic,
        log=print if args.verbose else None,
    )
    table = format_ablation_table(rows)
    print(table)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8") as f:
            f.write("label,fusion_mode,params,pc,mae\n")
            for r in rows:
                f.write(f"{r.label},{r.fusion_mode},{r.n_params},{r.pc:.8f},{r.mae:.8f}\n")
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import SCOPES, run_scope

    scopes = [args.scope] if args.scope != "all" else list(SCOPES)
    worst = None
    ok = True
    for scope in scopes:
        reports = run_scope(scope, seed=args.seed or 0)
        for r in reports:
            print(f"[{scope}] {r.summary()}")
            if not r.passed:
                ok = False
            if worst is None or r.max_rel_err > worst.max_rel_err:
                worst = r
    if not ok and worst is not None:
        print(
            f"FAILED: worst op {worst.name}, element {worst.worst_index}, "
            f"rel err {worst.max_rel_err:.3e}",
            file=sys.stderr,
        )
        return 3
    print("all gradient checks passed")
    return 0


def cmd_bench_scan(args) -> int:
    from .bench import bench_scan, doubling_ratios, format_csv

    lengths = [int(tok) for tok in args.lengths.split(",") if tok.strip()]
    rows = bench_scan(lengths, d_inner=args.d_inner, d_state=args.d_state, reps=args.reps)
    csv = format_csv(rows)
    print(csv)
    for length, scan_ratio, attn_ratio in doubling_ratios(rows):
        print(
            f"# doubling to {length}: scan x{scan_ratio:.2f}, attention x{attn_ratio:.2f}",
            file=sys.stderr,
        )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(csv + "\n")
    return 0


def cmd_export_stub(args) -> int:
    """Run the surrogate frozen encoder over a manifest and write one FPYR
    file per image (the same boundary a real feature exporter targets)."""
    import numpy as np

    from .data import load_and_preprocess
    from .prior import FeaturePyramid, build_frozen_encoder, export_features

    cfg = _load_config(args.config, None, None)
    records = _manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    encoder = build_frozen_encoder(cfg.prior)
    pre = cfg.preprocess_config()
    for rec in records:
        img = load_and_preprocess(rec, pre, root_dir=args.data_root)
        pyramid = encoder.extract(img[None])
        single = FeaturePyramid(scales=[s[0] for s in pyramid.scales])
        stem = os.path.splitext(os.path.basename(rec.image_path))[0]
        export_features(single, os.path.join(args.out, stem + ".fpyr"))
    print(f"wrote {len(records)} pyramids to {args.out}")
    return 0


def cmd_synth_data(args) -> int:
    from .data import generate_synthetic_dataset

    records = generate_synthetic_dataset(args.out, n=args.n, seed=args.seed, size=args.size)
    print(f"wrote {len(records)} images and manifest.csv under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualstream",
        description="Dual-stream facial beauty regression: train, evaluate, verify, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the full training protocol")
    p.add_argument("--config", help="JSON config overriding built-in defaults")
    p.add_argument("--data-root", default=None)
    p.add_argument("--train-manifest")
    p.add_argument("--test-manifest")
    p.add_argument("--out", default="runs", help="output directory for checkpoint and reports")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--fusion-mode", choices=["cross_attention", "concat", "prior_only", "mamba_only"])
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--data-root", default=None)
    p.add_argument("--config", help="optional runtime config to validate compatibility against")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train all four fusion configurations")
    p.add_argument("--config")
    p.add_argument("--data-root", default=None)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference verification suites")
    p.add_argument("--scope", choices=["ops", "block", "full", "all"], default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-scan", help="scan vs quadratic attention timings")
    p.add_argument("--lengths", default="1024,2048,4096,8192")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--d-inner", type=int, default=64)
    p.add_argument("--d-state", type=int, default=8)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench_scan)

    p = sub.add_parser(
        "export-features-stub",
        help="write surrogate-encoder FPYR files for every manifest image",
    )
    p.add_argument("--manifest", required=True)
    p.add_argument("--data-root", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_export_stub)

    p = sub.add_parser("synth-data", help="generate a seeded procedural dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=224)
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CompatibilityError, FormatError, CorruptionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 3
    except (
        OSError,
        ParseError,
        ValidationError,
        DecodeError,
        ContractError,
        ConfigError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
