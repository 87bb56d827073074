"""Command-line entry point: ``noiseseg <command> [options]``.

Typical chain::

    noiseseg synth --domain mouse --n-slides 10 --out-dir data/mouse
    noiseseg tile --dataset data/mouse --kind nuclei --out-dir patches/nuclei
    noiseseg train-nuclei --dataset patches/nuclei --out-dir runs/nuclei
    noiseseg tile --dataset data/mouse --out-dir patches/mouse
    noiseseg pseudo-label --checkpoint runs/nuclei/nuclei.pt --dataset patches/mouse --out-dir patches/pseudo
    noiseseg pretrain --dataset patches/pseudo --out-dir runs/pre
    noiseseg finetune --dataset patches/mouse --init runs/pre/pretrain.pt --out-dir runs/ft
    noiseseg predict --checkpoint runs/ft/finetune.pt --dataset data/human --out-dir out
    noiseseg stitch --predictions out/tile_predictions.json --out-dir out
    noiseseg evaluate --predictions out/predictions.json --dataset data/human --out-dir out

Every command writes ``<out-dir>/<command>.summary.json`` and exits with
status 2 when an input fails validation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import io
from .annotations import AnnotationSet
from .pipeline import (
    ARMS,
    MULTICLASS_MAP,
    NUCLEI_CLASS_MAP,
    SEG_CLASS_MAP,
    ExperimentConfig,
    SlideRecord,
    add_pseudo_labels,
    finetune_instance_seg,
    nuclei_annotations,
    pretrain_multiclass,
    pseudo_label,
    run_experiment,
    slide_patches,
    split_validation,
    train_nuclei_detector,
)
from .evaluation import MetricsReport, evaluate
from .model import load_checkpoint, save_checkpoint
from .synth import generate_corpus
from .tiling import ScaleMap, TileGrid, extract_tile, plan_grid, stitch
from .train import Sample, predict

log = logging.getLogger("noiseseg")

COMMANDS = ("synth", "tile", "train-nuclei", "pseudo-label", "pretrain", "finetune", "predict", "stitch",
            "evaluate", "report", "overlay", "experiment")


class UsageError(ValueError):
    pass


def _config(args) -> ExperimentConfig:
    overrides = {"seed": args.seed} if args.seed is not None else {}
    if getattr(args, "name", None):
        overrides["name"] = args.name
    if getattr(args, "data_dir", None):
        overrides["data_dir"] = args.data_dir
    if args.config:
        return io.read_config(args.config, overrides)
    return ExperimentConfig(**overrides)


def _batches(arg: Optional[str]):
    return None if not arg else set(arg.split(","))


def _records(path, batches=None) -> list[SlideRecord]:
    recs = io.read_dataset(path)
    if batches:
        recs = [r for r in recs if r.batch in batches]
    if not recs:
        raise UsageError(f"{path}: no images selected")
    return recs


def _samples(path, batches=None) -> list[Sample]:
    """Patch datasets: every image is already at model resolution."""
    return [Sample(r.image, AnnotationSet(r.ann.width, r.ann.height, r.ann.instances, r.ann.points), r.name)
            for r in _records(path, batches)]


def _write_patch_dataset(out: Path, samples: Sequence[Sample], batches: Sequence[str], domains: Sequence[str],
                         grid_info: dict) -> None:
    for sub in ("images", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for s, batch, dom in zip(samples, batches, domains):
        name = s.source.replace("#", "_t")
        io.write_image(out / "images" / f"{name}.png", s.image)
        io.write_annotations(out / "labels" / f"{name}.txt", s.ann)
        entries.append(io.ManifestEntry(name, f"images/{name}.png", f"labels/{name}.txt", s.image.shape[1],
                                        s.image.shape[0], batch, dom))
    io.write_manifest(out / "manifest.json", io.DatasetManifest(entries, grid_info))


# commands -------------------------------------------------------------------

def cmd_synth(args, out: Path) -> dict:
    seed = 0 if args.seed is None else args.seed
    corpus = generate_corpus(args.domain, args.n_slides, seed, args.size, out_dir=out)
    return {"slides": len(corpus), "batches": sorted({b for b, _ in corpus}), "dataset": str(out)}


def cmd_tile(args, out: Path) -> dict:
    cfg = _config(args)
    recs = _records(args.dataset, _batches(args.batches))
    samples, batches, domains = [], [], []
    for r in recs:
        if args.kind == "nuclei":
            ann = nuclei_annotations(r.ann, cfg.nucleus_box)
        else:
            ann = AnnotationSet(r.ann.width, r.ann.height, r.ann.osteoclasts, [])
        got = slide_patches(r, ann, cfg.tile, cfg.model_size, cfg.overlap, cfg.retain_fraction)
        samples += got
        batches += [r.batch] * len(got)
        domains += [r.domain] * len(got)
    grid_info = {"tile": cfg.tile, "model_size": cfg.model_size, "overlap": cfg.overlap,
                 "slides": {r.name: plan_grid(r.image.shape[1], r.image.shape[0], cfg.tile, cfg.overlap).to_dict()
                            for r in recs}}
    _write_patch_dataset(out, samples, batches, domains, grid_info)
    return {"patches": len(samples), "instances": sum(len(s.ann.instances) for s in samples), "dataset": str(out)}


def _train_common(args):
    cfg = _config(args)
    samples = _samples(args.dataset, _batches(args.batches))
    tr, val = split_validation(samples, cfg.val_fraction, cfg.seed)
    return cfg, tr, val


def cmd_train_nuclei(args, out: Path) -> dict:
    cfg, tr, val = _train_common(args)
    res = train_nuclei_detector(tr, val, cfg.model_config(), cfg.train_config(cfg.pretrain_epochs),
                                out / "nuclei.log.jsonl")
    save_checkpoint(res.model, out / "nuclei.pt", NUCLEI_CLASS_MAP, cfg.seed, {"experiment": cfg.hash()})
    return {"checkpoint": str(out / "nuclei.pt"), "heldout_box_map50": res.best_metric,
            "best_epoch": res.best_epoch, "train": len(tr), "val": len(val)}


def cmd_pseudo_label(args, out: Path) -> dict:
    model, meta = load_checkpoint(args.checkpoint)
    man = io.read_manifest(args.dataset)
    samples = _samples(args.dataset)
    boxes = pseudo_label(model, samples, args.conf)
    labelled = add_pseudo_labels(samples, boxes)
    by_name = {e.name: e for e in man.images}
    _write_patch_dataset(out, [Sample(s.image, s.ann, s.source) for s in labelled],
                         [by_name[s.source].batch for s in labelled], [by_name[s.source].domain for s in labelled],
                         man.grid)
    return {"patches": len(labelled), "pseudo_boxes": sum(map(len, boxes)), "conf_thresh": args.conf,
            "detector_config_hash": meta.get("config_hash"), "dataset": str(out)}


def cmd_pretrain(args, out: Path) -> dict:
    cfg, tr, val = _train_common(args)
    res = pretrain_multiclass(tr, val, cfg.model_config(), cfg.train_config(cfg.pretrain_epochs),
                              out / "pretrain.log.jsonl")
    save_checkpoint(res.model, out / "pretrain.pt", MULTICLASS_MAP, cfg.seed, {"experiment": cfg.hash()})
    return {"checkpoint": str(out / "pretrain.pt"), "val_box_map50": res.best_metric, "best_epoch": res.best_epoch}


def cmd_finetune(args, out: Path) -> dict:
    cfg, tr, val = _train_common(args)
    tr = [Sample(s.image, AnnotationSet(s.ann.width, s.ann.height, s.ann.osteoclasts, []), s.source) for s in tr]
    val = [Sample(s.image, AnnotationSet(s.ann.width, s.ann.height, s.ann.osteoclasts, []), s.source) for s in val]
    init = load_checkpoint(args.init)[0] if args.init else None
    res = finetune_instance_seg(init, tr, val, cfg.model_config(), cfg.train_config(), out / "finetune.log.jsonl")
    save_checkpoint(res.model, out / "finetune.pt", SEG_CLASS_MAP, cfg.seed,
                    {"experiment": cfg.hash(), "init": args.init})
    return {"checkpoint": str(out / "finetune.pt"), "val_mask_map50": res.best_metric, "best_epoch": res.best_epoch,
            "init": args.init}


def cmd_predict(args, out: Path) -> dict:
    cfg = _config(args)
    model, meta = load_checkpoint(args.checkpoint)
    if model.config.input_size != cfg.model_size:
        raise UsageError(f"checkpoint input size {model.config.input_size} != configured {cfg.model_size}")
    recs = _records(args.dataset, _batches(args.batches))
    scale = ScaleMap(cfg.model_size, cfg.tile)
    preds, sizes, grids = {}, {}, {}
    for r in recs:
        grid = plan_grid(r.image.shape[1], r.image.shape[0], cfg.tile, cfg.overlap)
        grids[r.name] = grid.to_dict()
        tiles = [extract_tile(r.image, grid, i, scale) for i in range(len(grid))]
        for i, dets in enumerate(predict(model, tiles, args.score_thresh, with_masks=model.config.with_masks)):
            preds[f"{r.name}#{i}"] = dets
            sizes[f"{r.name}#{i}"] = (cfg.model_size, cfg.model_size)
    path = out / "tile_predictions.json"
    io.write_predictions(path, preds, meta.get("config_hash"), meta.get("seed"), sizes)
    blob = json.loads(path.read_text())
    blob["tiling"] = {"model_size": cfg.model_size, "tile": cfg.tile, "grids": grids}
    path.write_text(json.dumps(blob, indent=1) + "\n")
    return {"predictions": str(path), "tiles": len(preds), "detections": sum(map(len, preds.values()))}


def cmd_stitch(args, out: Path) -> dict:
    preds, meta = io.read_predictions(args.predictions)
    blob = json.loads(Path(args.predictions).read_text())
    tiling = blob.get("tiling")
    if not tiling:
        raise UsageError(f"{args.predictions}: no tiling section; run predict first")
    scale = ScaleMap(int(tiling["model_size"]), int(tiling["tile"]))
    slides, sizes = {}, {}
    for name, gd in tiling["grids"].items():
        grid = TileGrid.from_dict(gd)
        per_tile = [(i, preds.get(f"{name}#{i}", [])) for i in range(len(grid))]
        slides[name] = stitch(per_tile, grid, scale, args.iou, None if args.min_area <= 0 else args.min_area)
        sizes[name] = (grid.slide_w, grid.slide_h)
    path = out / "predictions.json"
    io.write_predictions(path, slides, meta["config_hash"], meta["seed"], sizes)
    return {"predictions": str(path), "slides": len(slides), "detections": sum(map(len, slides.values()))}


def cmd_evaluate(args, out: Path) -> dict:
    recs = {r.name: r for r in _records(args.dataset)}
    rows, hashes, seeds = [], set(), set()
    for k, p in enumerate(args.predictions, 1):
        preds, meta = io.read_predictions(p)
        missing = sorted(set(preds) - set(recs))
        if missing:
            raise UsageError(f"{p}: images not in dataset: {missing[:5]}")
        names = sorted(preds)
        gts = [recs[n].ann.osteoclasts for n in names]
        test = "/".join(sorted({recs[n].batch for n in names}))
        label = args.labels[k - 1] if args.labels else f"Fold {k}"
        rows.append(evaluate([preds[n] for n in names], gts, args.criterion, label=label, test=test))
        hashes.add(meta["config_hash"])
        seeds.add(meta["seed"])
    jp, tp = io.write_report(out / "report", rows, ",".join(sorted(map(str, hashes))),
                             seeds.pop() if len(seeds) == 1 else None, summary=not args.no_summary)
    return {"report": str(jp), "table": str(tp), "rows": len(rows),
            "map50": [r.map[0.5] for r in rows]}


def cmd_report(args, out: Path) -> dict:
    rows = []
    for p in args.inputs:
        reps, blob = io.read_report(p)
        name = (blob.get("extra") or {}).get("name") or Path(p).parent.name
        if "average" in blob:
            r = MetricsReport.from_dict(blob["average"])
        elif len(reps) == 1:
            r = reps[0]
        else:
            raise UsageError(f"{p}: several rows but no average")
        r.label, r.test = name, ""
        rows.append(r)
    jp, tp = io.write_report(out / "table", rows, None, None, summary=args.summary)
    sys.stdout.write(tp.read_text())
    return {"report": str(jp), "table": str(tp), "rows": len(rows)}


def cmd_overlay(args, out: Path) -> dict:
    image = io.read_image(args.image)
    h, w = image.shape[:2]
    if args.predictions:
        preds, _ = io.read_predictions(args.predictions)
        key = args.name or Path(args.image).stem
        if key not in preds:
            raise UsageError(f"{args.predictions}: no entry for image {key!r}")
        dets = [d for d in preds[key] if d.score >= args.score_thresh]
    elif args.annotations:
        dets = io.read_annotations(args.annotations, w, h).instances
    else:
        raise UsageError("overlay needs --predictions or --annotations")
    path = out / f"{Path(args.image).stem}_overlay.png"
    io.write_overlay(path, image, dets)
    return {"overlay": str(path), "instances": len(dets)}


def cmd_experiment(args, out: Path) -> dict:
    cfg = _config(args)
    t0 = time.perf_counter()
    res = run_experiment(cfg, out)
    mean, std = res.summary("mask")
    return {"name": cfg.name, "seed": cfg.seed, "config_hash": cfg.hash(), "folds": len(res.folds),
            "mask_map": {str(t): mean.map[t] for t in mean.thresholds},
            "mask_map_std": {str(t): std.map[t] for t in std.thresholds},
            "box_map50": res.summary("box")[0].map[0.5], "nuclei_map50": res.nuclei_map50,
            "seconds": time.perf_counter() - t0}


HANDLERS = {
    "synth": cmd_synth, "tile": cmd_tile, "train-nuclei": cmd_train_nuclei, "pseudo-label": cmd_pseudo_label,
    "pretrain": cmd_pretrain, "finetune": cmd_finetune, "predict": cmd_predict, "stitch": cmd_stitch,
    "evaluate": cmd_evaluate, "report": cmd_report, "overlay": cmd_overlay, "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: from config, else 0)")
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--out-dir", default=".", help="output directory")
    common.add_argument("--device", default="cpu", help="compute device; only cpu is supported")
    common.add_argument("--workers", type=int, default=None, help="intra-op threads for inference and training")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="noiseseg", description="Nuclei-aware osteoclast instance segmentation.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    s = add("synth", "generate a synthetic slide corpus")
    s.add_argument("--domain", choices=["mouse", "human"], required=True)
    s.add_argument("--n-slides", type=int, default=10)
    s.add_argument("--size", type=int, default=512)

    s = add("tile", "cut slides into model-resolution training patches")
    s.add_argument("--dataset", required=True)
    s.add_argument("--kind", choices=["osteoclast", "nuclei"], default="osteoclast")
    s.add_argument("--batches", help="comma-separated batch ids to include")

    for name, help_ in (("train-nuclei", "train the single-class nuclei detector"),
                        ("pretrain", "two-class detection pretraining on osteoclast + nucleus boxes"),
                        ("finetune", "instance-segmentation finetuning on osteoclast masks")):
        s = add(name, help_)
        s.add_argument("--dataset", required=True, help="patch dataset from `tile` or `pseudo-label`")
        s.add_argument("--batches")
        if name == "finetune":
            s.add_argument("--init", help="pretrained checkpoint; omit for the baseline")

    s = add("pseudo-label", "add detector nucleus boxes to a patch dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--conf", type=float, default=0.25)

    s = add("predict", "per-tile predictions on slides")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--batches")
    s.add_argument("--score-thresh", type=float, default=0.01)

    s = add("stitch", "merge tile predictions into slide predictions")
    s.add_argument("--predictions", required=True)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--min-area", type=int, default=2000, help="drop stitched instances smaller than this; 0 disables")

    s = add("evaluate", "score prediction files against a dataset")
    s.add_argument("--predictions", required=True, nargs="+", help="one file per fold")
    s.add_argument("--dataset", required=True)
    s.add_argument("--criterion", choices=["mask", "box"], default="mask")
    s.add_argument("--labels", nargs="+", help="row labels, one per predictions file")
    s.add_argument("--no-summary", action="store_true", help="omit the Average/Standard Deviation rows")

    s = add("report", "tabulate report files from several runs")
    s.add_argument("--inputs", required=True, nargs="+")
    s.add_argument("--summary", action="store_true")

    s = add("overlay", "draw masks and boxes on an image")
    s.add_argument("--image", required=True)
    s.add_argument("--predictions")
    s.add_argument("--annotations")
    s.add_argument("--name", help="image name inside the predictions file (default: image stem)")
    s.add_argument("--score-thresh", type=float, default=0.25)

    s = add("experiment", "run a named train/test arm end to end")
    s.add_argument("--name", choices=sorted(ARMS))
    s.add_argument("--data-dir", help="dataset root holding */manifest.json; synthetic data when omitted")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"command": args.command, "seed": args.seed, "argv": list(argv if argv is not None else sys.argv[1:])}
    code = 0
    try:
        if args.device != "cpu":
            raise UsageError(f"device {args.device!r} is not supported; use cpu")
        if args.workers is not None:
            if args.workers < 1:
                raise UsageError("--workers must be positive")
            torch.set_num_threads(args.workers)
        summary.update(HANDLERS[args.command](args, out))
        summary["status"] = "ok"
    except (ValueError, OSError, KeyError) as e:
        summary.update(status="error", error=str(e))
        print(f"noiseseg {args.command}: error: {e}", file=sys.stderr)
        code = 2
    (out / f"{args.command}.summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
    if args.command != "report":
        print(json.dumps(summary, sort_keys=True, default=str))
    return code


if __name__ == "__main__":
    sys.exit(main())
