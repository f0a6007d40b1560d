"""Command-line entry points.

Exit codes: 0 success, 1 usage/config error, 2 runtime/training failure,
3 partial-grid failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import theory
from .config import load_config, train_config
from .data import (SplitSpec, SyntheticSceneConfig, generate_synthetic, load_dataset,
                   save_dataset, save_split, stratified_split, validate_manifest)
from .errors import (ConfigError, DataError, GenerationError, PartialGridError,
                     TrainingError, WrelError)
from .metrics import MetricsReport, evaluate
from .pipeline import load_checkpoint, restore_pair, run_training

SUPPORTED_RATIOS = {10: 0.10, 30: 0.30, 50: 0.50}

ABLATION_KNOBS = {
    "steps": ("Step", "stage3.inner_steps", [0, 1, 3, 5]),
    "freq": ("Freq", "stage3.update_freq", [1, 3, 5]),
    "warmup": ("Epoch", "stage1.epochs", [10, 15, 20]),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors map to exit code 1, not argparse's 2
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wrel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--q", type=float, default=1.0,
                   help="probability each attribute is dropped from weak expressions")
    p.add_argument("--grid-size", type=int, default=48)
    p.add_argument("--max-instances", type=int, default=4)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="build a category-stratified accurate/weak split")
    p.add_argument("--dataset", required=True, type=Path)
    p.add_argument("--ratio", type=int, default=None, choices=sorted(SUPPORTED_RATIOS))
    p.add_argument("--ratio-custom", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="default: <dataset>/split.json")
    p.add_argument("--weak-source", choices=("class-name", "stored"), default="class-name")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="run the training pipeline")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY.PATH=VALUE")
    p.add_argument("--stage", choices=("warmup", "lrb", "joint", "all"), default="all")
    p.add_argument("--mode", choices=("only-accurate", "wrel", "lrb-wrel"),
                   default="lrb-wrel")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--resume", type=Path, default=None)
    p.add_argument("--save-every", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--split", choices=("val", "test"), default="val")
    p.add_argument("--which", choices=("student", "teacher"), default="student")
    p.add_argument("--dataset", type=Path, default=None,
                   help="override the dataset directory recorded in the checkpoint")
    p.add_argument("--out", type=Path, default=None, help="write report files here")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one training knob")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[])
    p.add_argument("--knob", required=True, choices=sorted(ABLATION_KNOBS))
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bound-probe", help="run the risk-bound trend probe")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[])
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--force", action="store_true")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_bound_probe)

    return parser


def cmd_synth(args) -> int:
    config = SyntheticSceneConfig(grid_size=args.grid_size, max_instances=args.max_instances,
                                  corruption=args.q, seed=args.seed)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    manifest = generate_synthetic(config, args.n)
    violations = validate_manifest(manifest)
    if violations:
        raise GenerationError(f"generated dataset failed validation: {violations[:3]}")
    save_dataset(manifest, args.out, force=args.force)
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def cmd_split(args) -> int:
    if args.ratio is None and args.ratio_custom is None:
        raise ConfigError("pass --ratio {10,30,50} or --ratio-custom")
    if args.ratio is not None and args.ratio_custom is not None:
        raise ConfigError("--ratio and --ratio-custom are mutually exclusive")
    ratio = SUPPORTED_RATIOS[args.ratio] if args.ratio is not None else args.ratio_custom
    manifest = load_dataset(args.dataset)
    spec = SplitSpec(accurate_ratio=ratio, seed=args.seed)
    accurate, weak = stratified_split(manifest, spec, weak_source=args.weak_source)
    out = args.out or (args.dataset / "split.json")
    save_split(out, accurate, weak, spec, weak_source=args.weak_source)
    print(f"wrote split with {len(accurate)} accurate / {len(weak)} weak ids to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    summary = run_training(cfg, args.mode, args.stage, args.out, resume=args.resume,
                           force=args.force, save_every=args.save_every)
    if args.plot:
        from .plots import plot_run
        plot_run(Path(args.out))
    final = summary.get("final") or {}
    if "val_student" in final:
        rep = _report_from_dict(final["val_student"])
        print(MetricsReport.table([(f"{args.mode} (student)", rep)]), end="")
    print(json.dumps({"out": summary["out"],
                      "final_checkpoint": summary["final_checkpoint"]}, sort_keys=True))
    return 0


def _report_from_dict(d: dict) -> MetricsReport:
    from .metrics import PRECISION_THRESHOLDS
    return MetricsReport(split=d.get("split", "val"), n_samples=d["n_samples"],
                         oiou=d["oIoU"], miou=d["mIoU"],
                         precision={x: d[f"P@{x}"] for x in PRECISION_THRESHOLDS})


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    state = ckpt["state"]
    cfg = state["config"]
    tc = train_config(cfg)
    prefix = args.which
    if args.which == "teacher" and not any(k.startswith("teacher_") for k in ckpt["params"]):
        raise ConfigError("checkpoint holds no teacher parameters (stage 1/2 checkpoint?)")
    encoder, model = restore_pair(tc, len(ckpt["vocab"]), ckpt["params"], prefix)
    dataset_dir = args.dataset or Path(cfg["data"][args.split] or "")
    if not str(dataset_dir):
        raise ConfigError(f"no {args.split} dataset recorded in the checkpoint config; "
                          f"pass --dataset")
    samples = load_dataset(dataset_dir).samples
    report = evaluate(model, encoder, samples, ckpt["vocab"], tc.token_len,
                      split=args.split)
    table = MetricsReport.table([(f"{state['mode']} ({args.which})", report)])
    print(table, end="")
    print(report.to_json(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval-{args.split}-{args.which}.json").write_text(report.to_json(),
                                                                  encoding="utf-8")
        (out / f"eval-{args.split}-{args.which}.txt").write_text(table, encoding="utf-8")
        if args.plot:
            from .plots import plot_metrics_bars
            plot_metrics_bars(report, out / f"eval-{args.split}-{args.which}.png")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    header, key, values = ABLATION_KNOBS[args.knob]
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        run_cfg = load_config(args.config, list(args.overrides) + [f"{key}={value}"])
        summary = run_training(run_cfg, "lrb-wrel", "all", out / f"{args.knob}-{value}",
                               force=args.force)
        final = (summary.get("final") or {}).get("val_student")
        if final is None:
            raise TrainingError("ablation runs need data.val configured for metrics")
        rows.append((value, _report_from_dict(final)))
    table = MetricsReport.table([(str(v), rep) for v, rep in rows]).replace(
        "Method", header, 1)
    (out / f"ablation-{args.knob}.txt").write_text(table, encoding="utf-8")
    payload = {str(v): rep.as_dict() for v, rep in rows}
    (out / f"ablation-{args.knob}.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(table, end="")
    return 0


def cmd_bound_probe(args) -> int:
    cfg = load_config(args.config, args.overrides)
    pc = theory.ProbeConfig.from_dict(cfg)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    report = theory.sweep(pc)
    theory.write_report(report, out)
    if args.plot:
        from .plots import plot_bound_probe
        plot_bound_probe(report, out / "bound_probe.png")
    print(f"wrote {len(report.cells)} cells to {out / 'bound_report.json'}")
    if report.missing:
        print(f"{len(report.missing)} grid cells failed", file=sys.stderr)
        raise PartialGridError(f"{len(report.missing)} probe cells missing")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args) or 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PartialGridError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, GenerationError, TrainingError, WrelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
