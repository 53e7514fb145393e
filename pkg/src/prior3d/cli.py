"""Batch command-line front end.

Subcommands: gen-data, train, eval, compare, plot. Every command is
non-interactive, reproducible from its echoed config sidecar plus seed,
and returns a non-zero exit code on error. PRIOR3D_DATA optionally sets
the default dataset root.
"""

import argparse
import csv
import json
import math
import multiprocessing
import os
import shutil
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import Dataset, write_scene, SPLITS_NAME
from .detector import DecoderConfig, Detector
from .evaluation import compute_report, run_inference, write_report
from .plots import plot_learning_curves, plot_pr_curves
from .scene import PriorNoiseConfig, SceneConfig, build_scene_record
from .training import LearningCurve, train

PRIOR_SETS = ("none", "feat", "feat,loc", "feat,loc,query")


class CliError(Exception):
    pass


def _load_config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "set", None):
        cfg.apply_overrides(args.set)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.training.seed = args.seed
    return cfg


def _data_root(args):
    root = args.data or os.environ.get("PRIOR3D_DATA")
    if not root:
        raise CliError("no dataset given: pass --data or set PRIOR3D_DATA")
    return root


# ---- gen-data ----

def _gen_worker(task):
    root, scene_dict, noise_dict, seed, idx, sid = task
    record = build_scene_record(SceneConfig.from_dict(scene_dict),
                                PriorNoiseConfig.from_dict(noise_dict), seed, idx, sid)
    write_scene(record, os.path.join(root, "scenes", sid))
    return sid


def cmd_gen_data(args):
    cfg = _load_config(args)
    out = args.out
    if os.path.isdir(out) and os.listdir(out):
        if not args.force:
            raise CliError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    os.makedirs(out, exist_ok=True)

    n = args.scenes
    n_val = max(n // 12, 1) if n >= 3 else 0
    n_test = n_val
    n_train = n - n_val - n_test
    ids = [f"scene_{i:05d}" for i in range(n)]
    splits = {"train": ids[:n_train], "val": ids[n_train:n_train + n_val],
              "test": ids[n_train + n_val:]}

    tasks = [(out, cfg.scene.to_dict(), cfg.noise.to_dict(), cfg.seed, i, sid)
             for i, sid in enumerate(ids)]
    if args.jobs > 1:
        with multiprocessing.Pool(args.jobs) as pool:
            for k, _ in enumerate(pool.imap_unordered(_gen_worker, tasks, chunksize=4)):
                if not args.quiet and (k + 1) % 50 == 0:
                    print(f"  rendered {k + 1}/{n} scenes", flush=True)
    else:
        for k, task in enumerate(tasks):
            _gen_worker(task)
            if not args.quiet and (k + 1) % 50 == 0:
                print(f"  rendered {k + 1}/{n} scenes", flush=True)

    meta = {"seed": cfg.seed, "n_scenes": n, "scene": cfg.scene.to_dict(),
            "noise": cfg.noise.to_dict()}
    with open(os.path.join(out, SPLITS_NAME), "w") as f:
        json.dump({"splits": splits, "meta": meta}, f, indent=1, sort_keys=True)
    cfg.save(os.path.join(out, "config.json"))
    if not args.quiet:
        print(f"wrote {n} scenes to {out} "
              f"(train/val/test = {n_train}/{n_val}/{n_test})")
    return 0


# ---- train ----

def parse_priors(priors, loc_source):
    tokens = set() if priors == "none" else set(t.strip() for t in priors.split(",") if t.strip())
    unknown = tokens - {"feat", "loc", "query"}
    if unknown:
        raise CliError(f"unknown prior token(s) {sorted(unknown)}; "
                       f"choose from {', '.join(PRIOR_SETS)}")
    if "query" in tokens and "loc" not in tokens:
        raise CliError("query priors require location priors (--priors feat,loc,query)")
    if "query" in tokens and loc_source == "lidar":
        raise CliError("query priors require 2D boxes; they cannot be combined "
                       "with --loc-source lidar")
    return tokens


def _model_config(cfg, dataset, tokens, loc_source):
    mc = cfg.model.to_dict()
    scene_meta = dataset.meta.get("scene", {})
    mc["n_cameras"] = scene_meta.get("n_cameras", cfg.scene.n_cameras)
    mc["use_feat_prior"] = "feat" in tokens
    mc["use_loc_prior"] = "loc" in tokens
    mc["use_query_prior"] = "query" in tokens
    mc["loc_source"] = loc_source
    try:
        return DecoderConfig.from_dict(mc)
    except ValueError as e:
        raise CliError(str(e)) from e


def cmd_train(args):
    cfg = _load_config(args)
    if args.epochs is not None:
        cfg.training.epochs = args.epochs
    if args.batch is not None:
        cfg.training.batch_size = args.batch
    if args.eval_every is not None:
        cfg.training.eval_every = args.eval_every
    tokens = parse_priors(args.priors, args.loc_source)
    dataset = Dataset(_data_root(args))
    model_cfg = _model_config(cfg, dataset, tokens, args.loc_source)
    model = Detector(model_cfg, seed=cfg.seed, dtype=np.float32)

    os.makedirs(args.out, exist_ok=True)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))

    val_eval = None
    if cfg.training.eval_every:
        from .evaluation import evaluate_run

        def val_eval(m):
            rep = evaluate_run(m, dataset, "val", config=cfg.eval, label="val")
            return rep["ap_bev_iou"]

    model, curve = train(dataset, model, cfg.training, split="train",
                         limit=args.overfit, cache_frames=bool(args.overfit and args.overfit <= 512),
                         val_eval=val_eval, log=log)

    ckpt_dir = os.path.join(args.out, "checkpoint")
    save_checkpoint(model.parameters(), ckpt_dir,
                    extra={"decoder_config": model.config.to_dict(),
                           "priors": args.priors, "loc_source": args.loc_source})
    sidecar = {"run": cfg.to_dict(),
               "cli": {"priors": args.priors, "loc_source": args.loc_source,
                       "overfit": args.overfit, "epochs": cfg.training.epochs,
                       "seed": cfg.seed, "data": _data_root(args)},
               "aborted": curve.aborted}
    with open(os.path.join(args.out, "config.json"), "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
    curve_csv = os.path.join(args.out, "learning_curve.csv")
    curve.to_csv(curve_csv)
    plot_learning_curves({os.path.basename(args.out.rstrip("/")) or "run": curve.records},
                         os.path.join(args.out, "learning_curve.svg"))
    if curve.aborted:
        raise CliError("training aborted on non-finite loss; last good checkpoint kept")
    if not args.quiet:
        print(f"checkpoint and curves written to {args.out}")
    return 0


# ---- eval ----

def _resolve_checkpoint(path):
    if os.path.isfile(os.path.join(path, "manifest.json")):
        return path, os.path.dirname(path.rstrip("/"))
    inner = os.path.join(path, "checkpoint")
    if os.path.isfile(os.path.join(inner, "manifest.json")):
        return inner, path
    raise CliError(f"no checkpoint found under {path}")


def load_model(ckpt_path, dtype=np.float32):
    arrays, extra = load_checkpoint(ckpt_path)
    if "decoder_config" not in extra:
        raise CliError(f"checkpoint {ckpt_path} carries no decoder config")
    model = Detector(DecoderConfig.from_dict(extra["decoder_config"]), seed=0, dtype=dtype)
    model.load_state(arrays)
    return model, extra


def _eval_worker(task):
    ckpt_path, data_root, ids = task
    model, _ = load_model(ckpt_path)
    return run_inference(model, Dataset(data_root), ids)


def cmd_eval(args):
    ckpt_path, run_dir = _resolve_checkpoint(args.checkpoint)
    cfg = _load_config(args)
    if args.nms:
        cfg.eval.use_nms = True
    data_root = _data_root(args)
    dataset = Dataset(data_root)
    ids = dataset.scene_ids(args.split)
    label = args.label or os.path.basename(run_dir.rstrip("/")) or "model"

    if args.jobs > 1:
        chunks = [list(c) for c in np.array_split(ids, args.jobs) if len(c)]
        with multiprocessing.Pool(len(chunks)) as pool:
            parts = pool.map(_eval_worker, [(ckpt_path, data_root, c) for c in chunks])
        detections, gts = [], []
        ref_points, cameras = {}, {}
        for dets, g, rp, cams in parts:
            detections.extend(dets)
            gts.extend(g)
            ref_points.update(rp)
            cameras.update(cams)
    else:
        model, _ = load_model(ckpt_path)
        progress = None
        if not args.quiet:
            progress = lambda k, n: (k % 25 == 0) and print(f"  {k}/{n} frames", flush=True)
        detections, gts, ref_points, cameras = run_inference(model, dataset, ids, progress)

    report = compute_report(detections, gts, ref_points, cameras, len(ids),
                            split=args.split, config=cfg.eval, label=label)
    sidecar_path = os.path.join(run_dir, "config.json")
    if os.path.isfile(sidecar_path):
        with open(sidecar_path) as f:
            report["priors"] = json.load(f).get("cli", {})

    out = args.out or os.path.join(run_dir, f"eval_{args.split}")
    os.makedirs(out, exist_ok=True)
    json_path = os.path.join(out, "report.json")
    csv_path = os.path.join(out, "pr_curves.csv")
    write_report(report, json_path, csv_path)
    rows = _read_pr_csv(csv_path)
    plot_pr_curves(rows, os.path.join(out, "pr_curves.svg"))
    if not args.quiet:
        for cls, v in sorted(report["ap_bev_iou"].items()):
            cent = report["ap_centroid"].get(cls, math.nan)
            print(f"AP {cls}: {100 * v:.2f} (IoU 0.1) / {100 * cent:.2f} (4 m centroid)")
        print(f"report written to {json_path}")
    return 0


# ---- compare ----

def _fmt_delta(val, base):
    return f"{100 * val:.2f} ({100 * (val - base):+.2f})"


def cmd_compare(args):
    if len(args.reports) < 2:
        raise CliError("compare needs at least two report.json files")
    reports = []
    for path in args.reports:
        with open(path) as f:
            reports.append(json.load(f))
    base_cfg = reports[0]["eval_config"]
    for r in reports[1:]:
        if r["eval_config"] != base_cfg or r.get("nms") != reports[0].get("nms"):
            raise CliError("reports were produced under different eval configs; "
                           "re-run eval with matching settings")

    metric = "ap_bev_iou" if args.metric == "iou" else "ap_centroid"
    classes = sorted({cls for r in reports for cls in r[metric]})
    width = max(len(r["label"]) for r in reports) + 2
    lines = []
    header = "model".ljust(width) + "".join(f"AP {cls} (%)".rjust(22) for cls in classes)
    lines.append(header)
    for i, r in enumerate(reports):
        cells = []
        for cls in classes:
            v = r[metric].get(cls)
            if v is None:
                cells.append("absent".rjust(22))
            elif i == 0:
                cells.append(f"{100 * v:.2f}".rjust(22))
            else:
                base = reports[0][metric].get(cls, 0.0)
                cells.append(_fmt_delta(v, base).rjust(22))
        lines.append(r["label"].ljust(width) + "".join(cells))

    verdicts = {}
    for cls in classes:
        vals = [r[metric].get(cls) for r in reports]
        ok = all(v is not None for v in vals) and all(b > a for a, b in zip(vals, vals[1:]))
        verdicts[cls] = ok
        lines.append(f"ORDERING ({cls}, {args.metric}): {'PASS' if ok else 'FAIL'}")
    overall = verdicts.get("VEHICLE", all(verdicts.values()))
    lines.append(f"VERDICT: {'PASS' if overall else 'FAIL'}")

    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    return 0


# ---- plot ----

def _read_pr_csv(path):
    rows = []
    with open(path) as f:
        reader = csv.reader(f)
        for ln, row in enumerate(reader, start=1):
            if ln == 1:
                if row != ["label", "matcher", "class", "threshold", "recall", "precision"]:
                    raise CliError(f"{path}:1: not a PR-curve CSV header: {row}")
                continue
            if not row:
                continue
            try:
                rows.append((row[0], row[1], row[2], float(row[3]), float(row[4]),
                             float(row[5])))
            except (ValueError, IndexError) as e:
                raise CliError(f"{path}:{ln}: malformed PR row: {e}") from e
    return rows


def _read_curve_csv(path):
    try:
        curve = LearningCurve.from_csv(path)
    except (ValueError, KeyError) as e:
        raise CliError(f"{path}: malformed learning-curve CSV: {e}") from e
    for ln, rec in enumerate(curve.records, start=2):
        if "epoch" not in rec or "loss" not in rec:
            raise CliError(f"{path}:{ln}: row lacks epoch/loss")
    return curve


def _sniff_kind(path):
    with open(path) as f:
        header = f.readline().strip()
    if header.startswith("label,matcher,class"):
        return "pr"
    if header.startswith("epoch,loss"):
        return "learning"
    raise CliError(f"{path}:1: unrecognized CSV header {header!r}")


def cmd_plot(args):
    os.makedirs(args.out, exist_ok=True)
    pr_rows = []
    curves = {}
    for path in args.inputs:
        kind = args.kind if args.kind != "auto" else _sniff_kind(path)
        if kind == "pr":
            pr_rows.extend(_read_pr_csv(path))
        else:
            label = os.path.basename(os.path.dirname(os.path.abspath(path))) or \
                os.path.splitext(os.path.basename(path))[0]
            curves[label] = _read_curve_csv(path).records
    wrote = []
    if pr_rows or (args.kind == "pr" and not curves):
        out_path = os.path.join(args.out, "pr_curves.svg")
        plot_pr_curves(pr_rows, out_path, matcher=args.matcher)
        wrote.append(out_path)
    if curves or (args.kind == "learning" and not pr_rows):
        out_path = os.path.join(args.out, "learning_curves.svg")
        plot_learning_curves(curves, out_path)
        wrote.append(out_path)
    if not wrote:
        raise CliError("no plottable CSV inputs given")
    for p in wrote:
        print(f"wrote {p}")
    return 0


# ---- parser ----

def build_parser():
    parser = argparse.ArgumentParser(
        prog="prior3d",
        description="Synthetic multi-camera 3D detection with 2D priors: "
                    "dataset generation, training, evaluation, comparison, plots.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="config override (repeatable; flags win over the file)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--quiet", action="store_true")
        if data:
            p.add_argument("--data", default=None,
                           help="dataset root (default: $PRIOR3D_DATA)")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(g, data=False)
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=2400,
                   help="total scene count (default 2400 = 2000/200/200 splits)")
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector variant")
    common(t)
    t.add_argument("--out", required=True)
    t.add_argument("--priors", default="none",
                   help="none | feat | feat,loc | feat,loc,query")
    t.add_argument("--loc-source", choices=("ray", "lidar"), default="ray")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--overfit", type=int, default=None, metavar="N",
                   help="restrict training to the first N frames")
    t.add_argument("--eval-every", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", default=None)
    e.add_argument("--label", default=None)
    e.add_argument("--nms", action="store_true", help="apply BEV NMS before metrics")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="compare evaluation reports")
    c.add_argument("reports", nargs="+")
    c.add_argument("--metric", choices=("iou", "centroid"), default="iou")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot", help="render SVG figures from CSV outputs")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("auto", "pr", "learning"), default="auto")
    p.add_argument("--matcher", choices=("iou", "centroid"), default="iou")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
