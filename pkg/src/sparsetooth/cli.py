"""Command-line entry point: ``sparsetooth <command> ...``.

Every command writes ``manifest.json`` into its output location before doing
any work, so each run directory records the config, seeds, package versions
and a content hash of its inputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, kernels
from .camera import default_cameras, export_view, render
from .mrl import group_purity, mask_guidance
from .pnm import line_plot, write_ppm
from .segnet import forward, load_params
from .synthgen import (JawConfig, generate_dataset, load_dataset, load_scan, sample_sparse_labels,
                       save_dataset)
from .trainer import (TrainConfig, _PromptView, apply_planted, evaluate, make_oracle,
                      planted_outliers, read_log_csv, train, write_metrics_csv)

log = logging.getLogger("sparsetooth")

ABLATION_MODES = ("baseline", "agg", "cpg", "fl", "bl", "mrl")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- manifest

def git_blob_hash(data: bytes):
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(paths):
    """Git-style hash over files: blob hashes of each file, combined in sorted name order."""
    entries = []
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            entries.append(f"{git_blob_hash(f.read_bytes())} {f.as_posix()}")
    entries.sort(key=lambda e: e.split(" ", 1)[1])
    return hashlib.sha1("\n".join(entries).encode()).hexdigest(), entries


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seeds: dict
    inputs: list
    outputs: list
    input_hash: str = ""
    input_files: list = field(default_factory=list)
    versions: dict = field(default_factory=dict)

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (tuple, set)):
        return list(x)
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def versions():
    return {"sparsetooth": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "kernels": kernels.BACKEND}


def emit_manifest(args, out_dir, config, seeds, inputs, outputs):
    digest, files = content_hash([p for p in inputs if Path(p).exists()])
    m = RunManifest(args.command, list(args.argv), config, seeds, [str(p) for p in inputs],
                    [str(p) for p in outputs], digest, files, versions())
    return m.write(out_dir)


# --------------------------------------------------------------------------- config

def load_toml(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: invalid TOML: {exc}") from exc


def jaw_config_from(doc):
    try:
        return JawConfig.from_dict(doc.get("jaw", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad [jaw] section: {exc}") from exc


def train_config_from(doc, **overrides):
    """``[train]`` plus the optional ``[loss]``, ``[dims]``, ``[noise]`` and ``[planted]`` tables."""
    d = dict(doc.get("train", {}))
    for key in ("loss", "dims", "noise", "planted"):
        if key in doc:
            d[key] = dict(doc[key])
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc


def parse_size(text):
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from exc
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("image size must be positive")
    return (h, w)


def ablation_config(cfg: TrainConfig, mode):
    """Table-2 style switches on top of ``cfg``."""
    lc = cfg.loss
    if mode == "baseline":
        lc = replace(lc, lambda2=0.0, lambda3=0.0)
        return replace(cfg, loss=lc)
    if mode == "fl":
        return replace(cfg, loss=replace(lc, lambda3=0.0), prompt_mode="cpg")
    if mode == "bl":
        return replace(cfg, loss=replace(lc, lambda2=0.0), prompt_mode="cpg")
    if mode == "agg":
        return replace(cfg, prompt_mode="agg")
    if mode in ("cpg", "mrl"):
        return replace(cfg, prompt_mode="cpg")
    raise UsageError(f"unknown ablation mode {mode!r}")


# --------------------------------------------------------------------------- commands

def cmd_gen(args):
    doc = load_toml(args.config)
    jaw = jaw_config_from(doc)
    out = Path(args.out)
    names = [f"scan_{i:04d}.ws3d" for i in range(args.count)]
    emit_manifest(args, out, {"jaw": asdict(jaw)}, {"seed": args.seed},
                  [args.config] if args.config else [], names)
    scans = generate_dataset(jaw, args.count, args.seed)
    save_dataset(scans, out)
    if scans:
        s = scans[0]
        frac = sample_sparse_labels(s, 1, 0).labeled_indices.size / s.num_points
        print(f"wrote {len(scans)} scans to {out} ({s.num_points} points, {s.num_teeth} teeth each; "
              f"one label per tooth = {100 * frac:.2f}% of points)")
    return 0


def cmd_render(args):
    out = Path(args.out)
    emit_manifest(args, out, {"views": args.views, "size": list(args.size),
                              "splat_radius": args.splat_radius}, {}, [args.scan], [])
    scan = load_scan(args.scan)
    cams = default_cameras(scan, args.views, args.size)
    for i, cam in enumerate(cams):
        view = render(scan, cam, args.splat_radius, view_id=i)
        export_view(view, out, scan.num_classes, prefix=f"view{i}")
        print(f"view {i}: {len(view.visible_points())} visible points")
    return 0


def _load_split(args):
    scans = load_dataset(args.data)
    if getattr(args, "test", None):
        return scans, load_dataset(args.test)
    holdout = getattr(args, "holdout", 0) or 0
    if holdout:
        if holdout >= len(scans):
            raise UsageError(f"--holdout {holdout} leaves no training scans")
        return scans[:-holdout], scans[-holdout:]
    return scans, []


def _train_and_eval(args, cfg, out, train_scans, test_scans):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, default=_jsonable) + "\n")
    res = train(train_scans, cfg, out_dir=out)
    summary = {"oracle_calls": res.oracle_calls, "train_scans": len(train_scans)}
    if test_scans:
        m = evaluate(res.params, test_scans, sample_points=args.sample_points)
        write_metrics_csv(m, out / "metrics.csv")
        summary.update(miou=m.miou, dsc=m.dsc, acc=m.acc, test_scans=len(test_scans))
        print(f"test mIoU {m.miou:.4f}  DSC {m.dsc:.4f}  Acc {m.acc:.4f}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return res


def _common_train_overrides(args):
    ov = dict(seed=args.seed, epochs=args.epochs, mask_refresh=args.mask_refresh)
    if args.oracle_command:
        ov.update(oracle="external", oracle_command=args.oracle_command)
    return ov


def cmd_train(args):
    doc = load_toml(args.config)
    cfg = train_config_from(doc, **_common_train_overrides(args))
    out = Path(args.out)
    inputs = [args.data] + ([args.test] if args.test else []) + ([args.config] if args.config else [])
    emit_manifest(args, out, cfg.to_dict(), {"seed": cfg.seed}, inputs,
                  ["final.wsnn", "train_log.csv", "config.json"])
    train_scans, test_scans = _load_split(args)
    _train_and_eval(args, cfg, out, train_scans, test_scans)
    return 0


def cmd_eval(args):
    csv_path = Path(args.csv)
    emit_manifest(args, csv_path.parent, {"sample_points": args.sample_points}, {},
                  [args.ckpt, args.data], [csv_path.name])
    params = load_params(args.ckpt)
    m = evaluate(params, load_dataset(args.data), sample_points=args.sample_points)
    write_metrics_csv(m, csv_path)
    print(f"mIoU {m.miou:.4f}  DSC {m.dsc:.4f}  Acc {m.acc:.4f}")
    return 0


def cmd_ablate(args):
    doc = load_toml(args.config)
    base = train_config_from(doc, **_common_train_overrides(args))
    if args.planted_fraction is not None:
        base = replace(base, planted=replace(base.planted, fraction=args.planted_fraction))
    cfg = ablation_config(base, args.mode)
    out = Path(args.out)
    inputs = [args.data] + ([args.test] if args.test else []) + ([args.config] if args.config else [])
    emit_manifest(args, out, {"mode": args.mode, **cfg.to_dict()}, {"seed": cfg.seed}, inputs,
                  ["final.wsnn", "train_log.csv", "metrics.csv"])
    train_scans, test_scans = _load_split(args)
    if not test_scans:
        raise UsageError("ablate needs test scans: pass --test or --holdout")
    _train_and_eval(args, cfg, out, train_scans, test_scans)
    return 0


def cmd_inspect_prompts(args):
    doc = load_toml(args.config)
    cfg = train_config_from(doc)
    csv_path = Path(args.csv)
    emit_manifest(args, csv_path.parent, {"mode": args.mode, "tau": args.tau, "views": args.views},
                  {}, [args.scan, args.ckpt], [csv_path.name])
    scan = load_scan(args.scan)
    params = load_params(args.ckpt)
    pred = forward(scan, params, keep_cache=False)
    logits, conf = pred.logits, pred.confidence
    if cfg.planted.fraction > 0:
        logits, conf = apply_planted(logits, conf, planted_outliers(scan, cfg.planted), cfg.planted.confidence)
    cams = default_cameras(scan, args.views, cfg.image_size)
    views = [render(scan, c, cfg.splat_radius, view_id=i) for i, c in enumerate(cams)]
    oracle = make_oracle(cfg)
    prompts, _, groups = mask_guidance(_PromptView(logits, conf), scan, views, oracle,
                                       args.tau if args.tau is not None else cfg.loss.tau,
                                       args.mode, union_views=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "prompt_view", "prompt_u", "prompt_v", "group_size", "purity"])
        where = {p.class_id: p for p in prompts.for_view(0)}
        for c, size, purity in group_purity(groups[0], scan):
            p = where.get(c)
            w.writerow([c, "" if p is None else p.view_id, "" if p is None else p.u,
                        "" if p is None else p.v, size, repr(purity)])
    for c, reason, v in prompts.dropped:
        print(f"dropped class {c} in view {v}: {reason}")
    print(f"{len(prompts.prompts)} prompts, {len(groups[0].fg_groups)} groups, "
          f"{groups[0].bg_indices.size} background points")
    return 0


def epoch_means(rows):
    """Mean of each loss column per epoch from a training log."""
    by_epoch = {}
    for r in rows:
        by_epoch.setdefault(int(r["epoch"]), []).append(r)
    epochs = sorted(by_epoch)
    out = {"epoch": epochs}
    for key in ("coseg", "fg", "bg", "total"):
        out[key] = [float(np.mean([float(r[key]) for r in by_epoch[e]])) for e in epochs]
    return out


def cmd_report(args):
    out = Path(args.out)
    emit_manifest(args, out, {}, {}, list(args.runs), ["metrics_summary.csv"])
    summary = []
    for run in map(Path, args.runs):
        log_path = run / "train_log.csv"
        if not log_path.exists():
            raise FileNotFoundError(f"{run}: no train_log.csv")
        curves = epoch_means(read_log_csv(log_path))
        with open(out / f"{run.name}_loss_by_epoch.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "coseg", "fg", "bg", "total"])
            for i, e in enumerate(curves["epoch"]):
                w.writerow([e] + [repr(curves[k][i]) for k in ("coseg", "fg", "bg", "total")])
        series = {k: curves[k] for k in ("coseg", "fg", "bg", "total")}
        write_ppm(out / f"{run.name}_loss.ppm", line_plot(series))
        metrics = {}
        if (run / "metrics.csv").exists():
            with open(run / "metrics.csv", newline="") as fh:
                metrics = {r["metric"]: r["value"] for r in csv.DictReader(fh)}
        summary.append((run.name, metrics))
    keys = sorted({k for _, m in summary for k in m}, key=lambda k: (not k[0].isupper(), k))
    with open(out / "metrics_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run"] + keys)
        for name, m in summary:
            w.writerow([name] + [m.get(k, "") for k in keys])
    print(f"report for {len(summary)} run(s) written to {out}")
    return 0


# --------------------------------------------------------------------------- parser

def _add_train_flags(p):
    p.add_argument("--data", required=True, help="directory of .ws3d training scans")
    p.add_argument("--test", help="directory of .ws3d test scans")
    p.add_argument("--holdout", type=int, default=0, help="use the last N scans of --data for testing")
    p.add_argument("--config", help="TOML config ([train], [loss], [dims], [noise], [planted])")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mask-refresh", type=int, help="regenerate oracle masks every n epochs")
    p.add_argument("--oracle-command", help="external mask oracle command (replaces the GT oracle)")
    p.add_argument("--sample-points", type=int, help="evaluate on a subsample and 3-NN upsample")


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsetooth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic jaw scans")
    p.add_argument("--config", help="TOML with a [jaw] table")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("render", help="render a scan and export label/depth/pixel-map files")
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=1)
    p.add_argument("--size", type=parse_size, default=(128, 128), help="HxW")
    p.add_argument("--splat-radius", type=int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="train from sparse labels")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--sample-points", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate one ablation setting")
    p.add_argument("--mode", choices=ABLATION_MODES, required=True)
    p.add_argument("--planted-fraction", type=float,
                   help="plant low-confidence outlier predictions for the prompter")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-prompts", help="dump prompts and group purity for one scan")
    p.add_argument("--scan", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--config")
    p.add_argument("--mode", choices=("cpg", "agg"), default="cpg")
    p.add_argument("--tau", type=float)
    p.add_argument("--views", type=int, default=1)
    p.set_defaults(func=cmd_inspect_prompts)

    p = sub.add_parser("report", help="loss-curve images and metric tables for run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sparsetooth {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any failure as a structured one-liner
        print(f"sparsetooth {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
