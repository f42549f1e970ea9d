"""Single command-line entry point.

Subcommands: train, eval, verify-bound, grad-check, export-features,
make-data. Every command prints its effective configuration as '#'-prefixed
banner lines before doing work, writes only inside --out, and exits with:
0 success, 1 verification/run failure, 2 usage or config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import (
    apply_overrides,
    banner_lines,
    build_datasets,
    build_train_config,
    effective_config,
    parse_config_file,
)
from .mibound import SWEEP_COLUMNS, sweep_bound
from .model import load_checkpoint
from .numerics import ConfigError
from .trainer import (
    evaluate,
    export_features,
    fit,
    grad_check_suite,
    write_metrics_csv,
)

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcssl",
        description=(
            "Double-contrast semi-supervised training engine and exact "
            "InfoNCE mutual-information bound verifier."
        ),
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    cfg_parent = argparse.ArgumentParser(add_help=False)
    cfg_parent.add_argument("--config", help="key=value config file")
    cfg_parent.add_argument(
        "--override",
        "-o",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )
    cfg_parent.add_argument(
        "--out", default="out", help="output directory (default: out)"
    )

    sub.add_parser(
        "train", parents=[cfg_parent], help="run training, write metrics + checkpoint"
    )

    p_eval = sub.add_parser(
        "eval", parents=[cfg_parent], help="evaluate a checkpoint on the test set"
    )
    p_eval.add_argument("--checkpoint", help="path (default: <out>/model.ckpt)")

    p_bound = sub.add_parser(
        "verify-bound",
        help="verify the InfoNCE >= log n - MI inequality over random joints",
    )
    p_bound.add_argument("--joints", type=int, default=200)
    p_bound.add_argument("--max-outcomes", type=int, default=5)
    p_bound.add_argument("--max-n", type=int, default=4)
    p_bound.add_argument("--tol", type=float, default=1e-9)
    p_bound.add_argument("--seed", type=int, default=0)
    p_bound.add_argument("--out", default="out")

    p_grad = sub.add_parser(
        "grad-check", help="finite-difference check of the training objective"
    )
    p_grad.add_argument("--trials", type=int, default=20)
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.add_argument("--h", type=float, default=1e-5)
    p_grad.add_argument("--seed", type=int, default=0)

    p_export = sub.add_parser(
        "export-features",
        parents=[cfg_parent],
        help="write encoder features of a dataset split to CSV",
    )
    p_export.add_argument("--checkpoint", help="path (default: <out>/model.ckpt)")
    p_export.add_argument(
        "--split", choices=("train", "test"), default="test", help="which split to export"
    )

    sub.add_parser(
        "make-data", parents=[cfg_parent], help="materialize the configured dataset"
    )
    return parser


def _effective(args) -> dict:
    raw = parse_config_file(args.config) if args.config else {}
    return effective_config(apply_overrides(raw, args.override))


def _print_banner(lines: list[str]) -> None:
    for line in lines:
        print(f"# {line}")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_train(args) -> int:
    eff = _effective(args)
    banner = banner_lines(eff)
    _print_banner(banner)
    out = _out_dir(args)
    train, test, split = build_datasets(eff)
    cfg = build_train_config(eff)
    params, rows = fit(cfg, train, split, test_ds=test, checkpoint_path=out / "model.ckpt")
    write_metrics_csv(out / "metrics.csv", rows, banner)
    if rows:
        last = rows[-1]
        print(
            f"epoch {last.epoch}: loss_total={last.loss_total:.6g} "
            f"train_acc={last.train_acc:.4f} test_acc={last.test_acc:.4f}"
        )
    print(f"wrote {out / 'metrics.csv'} and {out / 'model.ckpt'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    eff = _effective(args)
    _print_banner(banner_lines(eff))
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "model.ckpt"
    params = load_checkpoint(ckpt)
    train, test, _ = build_datasets(eff)
    print(f"train_acc={evaluate(params, train):.9g}")
    print(f"test_acc={evaluate(params, test):.9g}")
    return EXIT_OK


def _cmd_verify_bound(args) -> int:
    banner = [
        f"joints={args.joints}",
        f"max_outcomes={args.max_outcomes}",
        f"max_n={args.max_n}",
        f"tol={args.tol!r}",
        f"seed={args.seed}",
    ]
    _print_banner(banner)
    rows = sweep_bound(
        joints=args.joints,
        max_outcomes=args.max_outcomes,
        max_n=args.max_n,
        tol=args.tol,
        seed=args.seed,
    )
    out = _out_dir(args)
    path = out / "bound_sweep.csv"
    lines = [f"# {b}" for b in banner]
    lines.append(",".join(SWEEP_COLUMNS))
    for r in rows:
        lines.append(
            f"{r.seed},{r.m_r},{r.m_s},{r.n},{r.mi_nats:.9g},{r.infonce:.9g},"
            f"{r.log_n:.9g},{r.gap:.17g},{1 if r.passed else 0}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    failures = [r for r in rows if not r.passed]
    worst = min(rows, key=lambda r: r.gap)
    print(
        f"checked {len(rows)} joints: {len(rows) - len(failures)} passed, "
        f"min gap {worst.gap:.3e} (joint seed {worst.seed})"
    )
    print(f"wrote {path}")
    if failures:
        f = failures[0]
        print(
            f"FAIL: joint seed {f.seed} (m_r={f.m_r}, m_s={f.m_s}, n={f.n}) "
            f"gap={f.gap:.3e} < -{args.tol:g}",
            file=sys.stderr,
        )
        return EXIT_VERIFICATION
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    banner = [
        f"trials={args.trials}",
        f"tol={args.tol!r}",
        f"h={args.h!r}",
        f"seed={args.seed}",
    ]
    _print_banner(banner)
    results = grad_check_suite(trials=args.trials, tol=args.tol, h=args.h, seed=args.seed)
    failed = 0
    worst = 0.0
    for trial, name, report in results:
        if not report.passed:
            failed += 1
            print(f"trial {trial:02d} {name}: {report}")
        worst = max(worst, report.max_rel_err)
    print(
        f"checked {len(results)} parameter tensors over {args.trials} trials: "
        f"{len(results) - failed} passed, max rel err {worst:.3e}"
    )
    return EXIT_OK if failed == 0 else EXIT_VERIFICATION


def _cmd_export_features(args) -> int:
    eff = _effective(args)
    _print_banner(banner_lines(eff))
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "model.ckpt"
    params = load_checkpoint(ckpt)
    train, test, _ = build_datasets(eff)
    ds = train if args.split == "train" else test
    out = _out_dir(args)
    path = out / "features.csv"
    export_features(params, ds, path)
    print(f"wrote {path} ({ds.n} rows)")
    return EXIT_OK


def _cmd_make_data(args) -> int:
    eff = _effective(args)
    banner = banner_lines(eff)
    _print_banner(banner)
    train, test, split = build_datasets(eff)
    out = _out_dir(args)
    path = out / "dataset.npz"
    np.savez(
        path,
        train_x=train.x,
        train_y=train.y,
        test_x=test.x,
        test_y=test.y,
        class_count=train.class_count,
        mean=train.mean,
        std=train.std,
        labeled_idx=split.labeled_idx,
        unlabeled_idx=split.unlabeled_idx,
    )
    cfg_path = out / "dataset.cfg"
    cfg_path.write_text("\n".join(banner) + "\n", encoding="utf-8", newline="\n")
    print(
        f"wrote {path} ({train.n} train / {test.n} test samples, "
        f"{split.n_labeled} labeled) and {cfg_path}"
    )
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "verify-bound": _cmd_verify_bound,
    "grad-check": _cmd_grad_check,
    "export-features": _cmd_export_features,
    "make-data": _cmd_make_data,
}


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return _COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RuntimeError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
