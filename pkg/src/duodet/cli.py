"""Command-line surface: dataset generation, training, evaluation, comparison.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numeric abort (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .errors import (
    CheckpointError,
    DatasetError,
    NumericError,
    UsageError,
)

CONDITION_HELP = ("conditions: balanced, contrast:<rgb|tir>:<f>, drop:<rgb|tir>, "
                  "noise:<rgb|tir>:<sigma>, region:<rgb|tir>:<f>:<seed>")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems become exit code 1
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="duodet",
                     description="Two-stream visible+thermal detector: synthetic data, "
                                 "degradation-robust training, LAMR/AP evaluation.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap numeric worker threads globally")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="config file (ini)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--out", type=str, default=None,
                        help="output directory (default: runs/<timestamp>-seed<seed>)")

    p_gen = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--n-train", type=int, default=400)
    p_gen.add_argument("--n-test", type=int, default=100)
    p_gen.add_argument("--height", type=int, default=None)
    p_gen.add_argument("--width", type=int, default=None)
    p_gen.add_argument("--night-ratio", type=float, default=None)

    p_train = sub.add_parser("train", parents=[common], help="train a detector")
    p_train.add_argument("--data", type=str, required=True, help="dataset directory")
    p_train.add_argument("--no-interaction", action="store_true",
                         help="disable the cross-modality quality gates")
    p_train.add_argument("--no-degrade", action="store_true",
                         help="disable training-time pseudo degradation")
    p_train.add_argument("--no-aux", action="store_true",
                         help="plain supervised training of a single detector")
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--batch-size", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--alpha", type=float, default=None)
    p_train.add_argument("--seed", type=int, default=None)

    p_eval = sub.add_parser("eval", parents=[common],
                            help="evaluate a checkpoint under test conditions")
    p_eval.add_argument("checkpoint", type=str)
    p_eval.add_argument("data", type=str)
    p_eval.add_argument("conditions", nargs="*", default=["balanced"],
                        help=CONDITION_HELP)
    p_eval.add_argument("--split", type=str, default="test")
    p_eval.add_argument("--export-features", type=str, default=None,
                        metavar="PATH", help="dump pyramid features of positive cells")
    p_eval.add_argument("--export-levels", type=str, default="p3,p4,p5")

    p_cmp = sub.add_parser("compare", help="delta table between two eval reports")
    p_cmp.add_argument("report_a", type=str)
    p_cmp.add_argument("report_b", type=str)
    return parser


def _cap_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config(args):
    from .config import RunConfig
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.default()
    return cfg.with_overrides(args.overrides)


def _run_dir(args, seed: int) -> Path:
    if args.out:
        return Path(args.out)
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    return Path("runs") / f"{stamp}-seed{seed}"


def _write_echo(cfg, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.echo").write_text(cfg.echo())


def cmd_gen(args) -> int:
    import dataclasses

    from .synthdata import generate_dataset

    cfg = _load_config(args)
    scene_updates = {}
    for flag, key in (("seed", "seed"), ("height", "height"), ("width", "width"),
                      ("night_ratio", "night_ratio")):
        value = getattr(args, flag)
        if value is not None:
            scene_updates[key] = value
    if scene_updates:
        try:
            cfg = dataclasses.replace(
                cfg, scene=dataclasses.replace(cfg.scene, **scene_updates))
        except ValueError as e:
            raise UsageError(str(e)) from e
    if args.n_train <= 0 or args.n_test <= 0:
        raise UsageError("--n-train and --n-test must be positive")

    out = _run_dir(args, cfg.scene.seed)
    root = generate_dataset(cfg.scene, args.n_train, args.n_test, out)
    _write_echo(cfg, root)
    print(f"dataset: {root}")
    print(f"manifest: {root / 'meta.json'}")
    print(f"train samples: {args.n_train}")
    print(f"test samples: {args.n_test}")
    return 0


def _effective_train_config(args, cfg):
    import dataclasses
    updates = {}
    if args.no_interaction:
        updates["interaction"] = False
    if args.no_degrade:
        updates["pseudo_degrade"] = False
    if args.no_aux:
        updates["aux"] = False
        updates["consistency"] = False
    for flag in ("epochs", "batch_size", "lr", "alpha", "seed"):
        value = getattr(args, flag)
        if value is not None:
            updates[flag] = value
    try:
        return dataclasses.replace(cfg.train, **updates)
    except ValueError as e:
        raise UsageError(str(e)) from e


def cmd_train(args) -> int:
    import dataclasses

    from .config import RunConfig
    from .detector import ArchConfig
    from .figures import render_loss_curves
    from .synthdata import load_dataset, load_meta
    from .trainer import deliverable_name, train

    cfg = _load_config(args)
    train_cfg = _effective_train_config(args, cfg)
    cfg = dataclasses.replace(cfg, train=train_cfg)

    data_root = Path(args.data)
    if not (data_root / "meta.json").exists():
        raise UsageError(f"no dataset at {data_root} (missing meta.json)")
    meta = load_meta(data_root)
    pairs = load_dataset(data_root, "train")

    arch = ArchConfig(num_classes=len(meta["classes"]),
                      rgb_channels=meta.get("rgb_channels", 3),
                      interaction=train_cfg.interaction)
    out = _run_dir(args, train_cfg.seed)
    _write_echo(cfg, out)
    state, metrics = train(train_cfg, arch, pairs, out_dir=out,
                           degrade_params=cfg.degrade)
    render_loss_curves(out / "metrics.csv", out / "loss_curves.png")
    print(f"steps: {len(metrics)}")
    print(f"final l_total: {metrics[-1].losses.l_total:.6f}")
    for name in ("ckpt.base", "ckpt.aux"):
        if (out / name).exists():
            print(f"checkpoint: {out / name}")
    print(f"deliverable: {out / deliverable_name(train_cfg)}")
    return 0


def cmd_eval(args) -> int:
    from .degrade import parse_condition
    from .detector import checkpoint_sha256, load_params
    from .evaluator import export_features, sweep
    from .synthdata import load_dataset, load_meta

    cfg = _load_config(args)
    conditions = [parse_condition(c) for c in args.conditions]

    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise CheckpointError(f"no checkpoint at {ckpt_path}")
    params = load_params(ckpt_path)
    data_root = Path(args.data)
    meta = load_meta(data_root)
    if len(meta["classes"]) != params.arch.num_classes:
        raise CheckpointError(
            f"checkpoint expects {params.arch.num_classes} classes, dataset "
            f"has {len(meta['classes'])}")
    pairs = load_dataset(data_root, args.split)

    out = _run_dir(args, cfg.eval.seed)
    _write_echo(cfg, out)
    report = sweep(params, pairs, conditions, meta["classes"], cfg.eval,
                   out_dir=out, checkpoint_path=ckpt_path, dataset_path=data_root)

    if args.export_features:
        levels = tuple(s.strip() for s in args.export_levels.split(",") if s.strip())
        n = export_features(params, pairs, args.export_features, levels=levels)
        print(f"exported {n} feature rows to {args.export_features}")

    print(f"checkpoint sha256: {report['checkpoint_sha256']}")
    print(_format_eval_table(report))
    print(f"report: {out / 'report.json'}")
    return 0


def _fmt(v, width=8) -> str:
    return f"{v:{width}.2f}" if isinstance(v, float) else f"{'-':>{width}}"


def _format_eval_table(report: dict) -> str:
    lines = [f"{'condition':<22}{'LAMR':>8}{'day':>8}{'night':>8}{'mAP50':>8}"]
    for name, block in report["conditions"].items():
        lines.append(f"{name:<22}{_fmt(block['lamr'])}{_fmt(block['lamr_day'])}"
                     f"{_fmt(block['lamr_night'])}{_fmt(block['ap50']['mean'])}")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    reports = []
    for path in (args.report_a, args.report_b):
        p = Path(path)
        if not p.exists():
            raise DatasetError(f"no report at {p}")
        reports.append(json.loads(p.read_text()))
    a, b = reports
    conds_a, conds_b = set(a["conditions"]), set(b["conditions"])
    if conds_a != conds_b:
        only_a = sorted(conds_a - conds_b)
        only_b = sorted(conds_b - conds_a)
        raise UsageError(f"condition sets differ: only in A {only_a}, only in B {only_b}")

    print("negative LAMR delta = improvement of B over A")
    header = (f"{'condition':<22}{'lamr A':>8}{'lamr B':>8}{'delta':>20}"
              f"{'mAP A':>8}{'mAP B':>8}{'delta':>10}")
    print(header)
    for name in a["conditions"]:
        la, lb = a["conditions"][name]["lamr"], b["conditions"][name]["lamr"]
        pa, pb = a["conditions"][name]["ap50"]["mean"], b["conditions"][name]["ap50"]["mean"]
        if isinstance(la, float) and isinstance(lb, float):
            d = lb - la
            pct = 100.0 * d / la if la else float("inf")
            delta = f"{d:+.2f} ({pct:+.1f}%)"
        else:
            delta = "-"
        if isinstance(pa, float) and isinstance(pb, float):
            ap_delta = f"{pb - pa:+.2f}"
        else:
            ap_delta = "-"
        print(f"{name:<22}{_fmt(la)}{_fmt(lb)}{delta:>20}"
              f"{_fmt(pa)}{_fmt(pb)}{ap_delta:>10}")
    return 0


_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _cap_threads(args.threads)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
