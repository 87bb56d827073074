"""File formats: annotations, dataset manifests, configs, predictions, reports and overlays.

Annotation files (``*.txt``), one record per line::

    # noiseseg-annotations 1
    0 0.10 0.20 0.30 0.20 0.25 0.40     polygon, normalized vertex list (implicitly closed)
    0 rle 12 5 30 ...                   column-major RLE on the image pixel grid
    1 box 0.50 0.50 0.07 0.07           normalized centre-form box (cx cy w h)
    p 0.512 0.430                       nucleus centre point, normalized

Blank lines and other ``#`` comments are ignored; an empty file holds no
instances. Class ids are 0 (osteoclast) and 1 (nucleus).

Prediction files are JSON::

    {"format": "noiseseg-predictions", "version": 1, "config_hash": str, "seed": int,
     "images": [{"name": str, "width": int, "height": int,
                 "detections": [{"class": int, "score": float,
                                 "box": [x1, y1, x2, y2],   # corner-form, pixels
                                 "rle": str | null}]}]}

``rle`` uses the same column-major run-length string as the annotation
files, on the ``width`` x ``height`` grid of the image.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import cv2
import numpy as np

from .annotations import AnnotationSet
from .evaluation import OPERATING_POINT_NOTE, MetricsReport, aggregate_folds
from .geometry import CLASS_NAMES, BoundingBox, Detection
from .masks import InstanceMask, MalformedRLE, mask_to_box, polygon_to_mask

log = logging.getLogger(__name__)

ANNOTATION_FORMAT = "noiseseg-annotations"
ANNOTATION_VERSION = 1
MANIFEST_FORMAT = "noiseseg-manifest"
PREDICTIONS_FORMAT = "noiseseg-predictions"
REPORT_FORMAT = "noiseseg-report"
CONFIG_FORMAT = "noiseseg-config"
FORMAT_VERSION = 1
VALID_CLASSES = (0, 1)

PathLike = Union[str, Path]


class FormatError(ValueError):
    """A file failed validation; carries the path and, when known, the line number."""

    def __init__(self, path, message: str, line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


def _check_version(path, fmt: str, found_fmt, version) -> None:
    if found_fmt != fmt:
        raise FormatError(path, f"expected format {fmt!r}, found {found_fmt!r}")
    if not isinstance(version, int) or version < 1:
        raise FormatError(path, f"invalid version {version!r}")
    if version > FORMAT_VERSION:
        raise FormatError(path, f"{fmt} version {version} is newer than supported version {FORMAT_VERSION}")


# annotations ----------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def format_annotations(ann: AnnotationSet, include_points: bool = True) -> str:
    """Serialize masks as RLE lines, box-only instances as boxes, then points."""
    w, h = ann.width, ann.height
    lines = [f"# {ANNOTATION_FORMAT} {ANNOTATION_VERSION}"]
    for d in ann.instances:
        if d.mask is not None:
            if (d.mask.width, d.mask.height) != (w, h):
                raise ValueError("instance mask does not match the annotation canvas")
            lines.append(f"{d.class_id} rle {d.mask.to_string()}")
        else:
            b = d.box
            vals = ((b.x1 + b.x2) / 2 / w, (b.y1 + b.y2) / 2 / h, b.width / w, b.height / h)
            lines.append(f"{d.class_id} box " + " ".join(_fmt(v) for v in vals))
    if include_points:
        lines += [f"p {_fmt(x / w)} {_fmt(y / h)}" for x, y in ann.points]
    return "\n".join(lines) + "\n"


def _floats(path, lineno: int, fields: Sequence[str], what: str) -> list[float]:
    try:
        vals = [float(f) for f in fields]
    except ValueError:
        raise FormatError(path, f"non-numeric {what} coordinate", lineno) from None
    for v in vals:
        if not math.isfinite(v) or v < 0 or v > 1:
            raise FormatError(path, f"{what} coordinate {v} outside [0, 1]", lineno)
    return vals


def parse_annotations(text: str, width: int, height: int, path: PathLike = "<string>",
                      frame: str = "slide") -> AnnotationSet:
    """Parse annotation text for an image of ``width`` x ``height`` pixels."""
    ann = AnnotationSet(width, height)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == ANNOTATION_FORMAT:
                try:
                    version = int(parts[1])
                except (IndexError, ValueError):
                    raise FormatError(path, "malformed version header", lineno) from None
                if version > ANNOTATION_VERSION:
                    raise FormatError(path, f"annotation version {version} is newer than supported "
                                            f"version {ANNOTATION_VERSION}", lineno)
            continue
        fields = line.split()
        if fields[0] == "p":
            if len(fields) != 3:
                raise FormatError(path, "point lines need exactly two coordinates", lineno)
            x, y = _floats(path, lineno, fields[1:], "point")
            ann.points.append((x * width, y * height))
            continue
        try:
            cls = int(fields[0])
        except ValueError:
            raise FormatError(path, f"invalid class id {fields[0]!r}", lineno) from None
        if cls not in VALID_CLASSES:
            raise FormatError(path, f"unknown class id {cls}", lineno)
        if len(fields) < 2:
            raise FormatError(path, "instance line has no geometry", lineno)
        kind = fields[1]
        if kind == "rle":
            try:
                mask = InstanceMask.from_string(" ".join(fields[2:]), width, height, frame)
            except MalformedRLE as e:
                raise FormatError(path, f"malformed RLE: {e}", lineno) from None
            box = mask_to_box(mask.decode())
            if box is None:
                raise FormatError(path, "empty mask", lineno)
            ann.instances.append(Detection(box, cls, 1.0, mask))
        elif kind == "box":
            if len(fields) != 6:
                raise FormatError(path, "box lines need cx cy w h", lineno)
            cx, cy, bw, bh = _floats(path, lineno, fields[2:], "box")
            x1, y1 = (cx - bw / 2) * width, (cy - bh / 2) * height
            x2, y2 = (cx + bw / 2) * width, (cy + bh / 2) * height
            ann.instances.append(Detection(BoundingBox(x1, y1, x2, y2), cls, 1.0, None))
        else:
            coords = _floats(path, lineno, fields[1:], "polygon")
            if len(coords) % 2:
                raise FormatError(path, "polygon has an odd number of coordinates", lineno)
            verts = [(coords[i] * width, coords[i + 1] * height) for i in range(0, len(coords), 2)]
            if len(verts) > 3 and verts[0] == verts[-1]:
                verts = verts[:-1]
            if len(verts) < 3:
                raise FormatError(path, "polygon needs at least three vertices", lineno)
            mask = polygon_to_mask(verts, width, height, frame)
            box = mask_to_box(mask.decode())
            if box is None:
                raise FormatError(path, "polygon covers no pixel centre", lineno)
            ann.instances.append(Detection(box, cls, 1.0, mask))
    return ann


def write_annotations(path: PathLike, ann: AnnotationSet, include_points: bool = True) -> None:
    Path(path).write_text(format_annotations(ann, include_points))


def read_annotations(path: PathLike, width: int, height: int, frame: str = "slide") -> AnnotationSet:
    p = Path(path)
    if not p.exists():
        raise FormatError(p, "annotation file not found")
    return parse_annotations(p.read_text(), width, height, p, frame)


# images ---------------------------------------------------------------------

def write_image(path: PathLike, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("images must be 8-bit RGB arrays")
    if not cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {path}")


def read_image(path: PathLike) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FormatError(path, "missing or unreadable image")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


# manifests and datasets -----------------------------------------------------

@dataclass
class ManifestEntry:
    name: str
    image: str
    annotations: str
    width: int
    height: int
    batch: str
    domain: str
    points: Optional[str] = None


@dataclass
class DatasetManifest:
    images: list[ManifestEntry]
    grid: Optional[dict] = None
    generator: Optional[dict] = None
    version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {"format": MANIFEST_FORMAT, "version": self.version,
                "images": [vars(e) for e in self.images], "grid": self.grid, "generator": self.generator}


def write_manifest(path: PathLike, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def read_manifest(path: PathLike, check_files: bool = True) -> DatasetManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        d = json.loads(p.read_text())
    except FileNotFoundError:
        raise FormatError(p, "manifest not found") from None
    except json.JSONDecodeError as e:
        raise FormatError(p, f"invalid JSON: {e.msg}", e.lineno) from None
    _check_version(p, MANIFEST_FORMAT, d.get("format"), d.get("version"))
    entries, names = [], set()
    for i, e in enumerate(d.get("images", [])):
        try:
            entry = ManifestEntry(**e)
        except TypeError as err:
            raise FormatError(p, f"images[{i}]: {err}") from None
        if entry.name in names:
            raise FormatError(p, f"images[{i}]: duplicate image name {entry.name!r}")
        if not isinstance(entry.batch, str) or not entry.batch:
            raise FormatError(p, f"images[{i}]: every image needs exactly one batch id")
        names.add(entry.name)
        if check_files:
            for rel in (entry.image, entry.annotations, entry.points):
                if rel is not None and not (p.parent / rel).exists():
                    raise FormatError(p, f"images[{i}]: referenced file {rel!r} does not exist")
        entries.append(entry)
    return DatasetManifest(entries, d.get("grid"), d.get("generator"), d["version"])


def write_corpus(out_dir: PathLike, corpus, domain, seed: int, size: int) -> DatasetManifest:
    """Write ``[(batch, SynthSlide), ...]`` as PNG images, annotation and point files plus a manifest."""
    root = Path(out_dir)
    for sub in ("images", "labels", "nuclei"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    short = domain.name.split("-")[0]
    entries = []
    for i, (batch, slide) in enumerate(corpus):
        name = f"{short}-{i:03d}"
        ann = slide.annotations()
        write_image(root / "images" / f"{name}.png", slide.image)
        write_annotations(root / "labels" / f"{name}.txt", ann, include_points=False)
        pts = AnnotationSet(ann.width, ann.height, [], ann.points)
        write_annotations(root / "nuclei" / f"{name}.txt", pts)
        entries.append(ManifestEntry(name, f"images/{name}.png", f"labels/{name}.txt", slide.width,
                                     slide.height, batch, domain.name, f"nuclei/{name}.txt"))
    gen = {"seed": int(seed), "size": int(size), "n_slides": len(corpus), "domain": domain.to_dict(),
           "slide_seeds": [int(s.seed) for _, s in corpus]}
    manifest = DatasetManifest(entries, None, gen)
    write_manifest(root / "manifest.json", manifest)
    return manifest


def read_dataset(path: PathLike, domains: Optional[Sequence[str]] = None) -> list:
    """Load slide records from one dataset directory, or from every ``*/manifest.json`` below ``path``."""
    from .pipeline import SlideRecord

    root = Path(path)
    manifests = [root / "manifest.json"] if (root / "manifest.json").exists() else \
        sorted(root.glob("*/manifest.json"))
    if not manifests:
        raise FormatError(root, "no manifest.json found")
    out = []
    for mp in manifests:
        man = read_manifest(mp)
        for e in man.images:
            if domains is not None and e.domain not in domains:
                continue
            img = read_image(mp.parent / e.image)
            if img.shape[:2] != (e.height, e.width):
                raise FormatError(mp, f"{e.image}: size {img.shape[1]}x{img.shape[0]} disagrees with manifest")
            ann = read_annotations(mp.parent / e.annotations, e.width, e.height)
            if e.points:
                ann.points.extend(read_annotations(mp.parent / e.points, e.width, e.height).points)
            out.append(SlideRecord(e.name, img, ann, e.batch, e.domain))
    return out


# configs --------------------------------------------------------------------

def write_config(path: PathLike, config) -> None:
    d = {"format": CONFIG_FORMAT, "version": FORMAT_VERSION, **config.to_dict()}
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def read_config(path: PathLike, overrides: Optional[dict] = None):
    from .pipeline import ExperimentConfig

    p = Path(path)
    try:
        d = json.loads(p.read_text())
    except FileNotFoundError:
        raise FormatError(p, "config not found") from None
    except json.JSONDecodeError as e:
        raise FormatError(p, f"invalid JSON: {e.msg}", e.lineno) from None
    _check_version(p, CONFIG_FORMAT, d.pop("format", None), d.pop("version", None))
    d.update(overrides or {})
    try:
        return ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise FormatError(p, str(e)) from None


# predictions ----------------------------------------------------------------

def detection_to_dict(d: Detection) -> dict:
    return {"class": int(d.class_id), "score": float(d.score), "box": [float(v) for v in d.box.as_tuple()],
            "rle": d.mask.to_string() if d.mask is not None else None}


def write_predictions(path: PathLike, preds: dict[str, Sequence[Detection]], config_hash: str,
                      seed: Optional[int], sizes: dict[str, tuple[int, int]]) -> None:
    images = []
    for name in preds:
        w, h = sizes[name]
        images.append({"name": name, "width": int(w), "height": int(h),
                       "detections": [detection_to_dict(d) for d in preds[name]]})
    blob = {"format": PREDICTIONS_FORMAT, "version": FORMAT_VERSION, "config_hash": config_hash,
            "seed": seed, "images": images}
    Path(path).write_text(json.dumps(blob, indent=1) + "\n")


def read_predictions(path: PathLike) -> tuple[dict[str, list[Detection]], dict]:
    """Detections per image name plus the file metadata (hash, seed, image sizes)."""
    p = Path(path)
    try:
        blob = json.loads(p.read_text())
    except FileNotFoundError:
        raise FormatError(p, "predictions file not found") from None
    except json.JSONDecodeError as e:
        raise FormatError(p, f"invalid JSON: {e.msg}", e.lineno) from None
    _check_version(p, PREDICTIONS_FORMAT, blob.get("format"), blob.get("version"))
    out, sizes = {}, {}
    for i, img in enumerate(blob.get("images", [])):
        name, w, h = img["name"], int(img["width"]), int(img["height"])
        sizes[name] = (w, h)
        dets = []
        for j, d in enumerate(img.get("detections", [])):
            where = f"images[{i}].detections[{j}]"
            try:
                mask = InstanceMask.from_string(d["rle"], w, h, "slide") if d.get("rle") is not None else None
                dets.append(Detection(BoundingBox(*map(float, d["box"])), int(d["class"]), float(d["score"]), mask))
            except (KeyError, TypeError, ValueError) as e:
                raise FormatError(p, f"{where}: {e}") from None
        out[name] = dets
    meta = {"config_hash": blob.get("config_hash"), "seed": blob.get("seed"), "sizes": sizes}
    return out, meta


# reports --------------------------------------------------------------------

def _cell(v: float) -> str:
    return f"{v:.3f}"


def format_table(rows: Sequence[MetricsReport], summary: bool = True, title: str = "",
                 first_header: str = "Model", second_header: str = "Test") -> str:
    """Plain-text table: one block of P/R/mAP per IoU threshold, optional Average/Std rows."""
    if not rows:
        raise ValueError("no rows to format")
    ts = rows[0].thresholds
    left = max([len(first_header), len(second_header) + 12, 20] +
               [len(r.label) + len(r.test) + 2 for r in rows])
    block = "  P      R      mAP  "
    sep = " | "
    head1 = "IoU t".ljust(left) + sep + sep.join(f"{t:.2f}".center(len(block)) for t in ts)
    head2 = (first_header.ljust(12) + second_header).ljust(left) + sep + sep.join(block for _ in ts)
    rule = "-" * len(head1)

    def line(label: str, r: MetricsReport) -> str:
        cells = [" ".join(_cell(v) for v in (r.precision[t], r.recall[t], r.map[t])).center(len(block)) for t in ts]
        return label.ljust(left) + sep + sep.join(cells)

    out = [title] if title else []
    out += [head1, head2, rule]
    for r in rows:
        lab = r.label.ljust(12) + r.test if r.test else r.label
        out.append(line(lab, r))
    if summary:
        mean, std = aggregate_folds(rows)
        out.append(rule)
        out.append(line("Average", mean))
        out.append(line("Standard Deviation", std))
    out.append(rule)
    crit = rows[0].criterion
    out.append(f"Note: {crit} IoU; {rows[0].note or OPERATING_POINT_NOTE}.")
    return "\n".join(ln.rstrip() for ln in out) + "\n"


def report_dict(rows: Sequence[MetricsReport], config_hash: Optional[str], seed: Optional[int],
                summary: bool = True, extra: Optional[dict] = None) -> dict:
    d = {"format": REPORT_FORMAT, "version": FORMAT_VERSION, "config_hash": config_hash, "seed": seed,
         "criterion": rows[0].criterion if rows else None, "thresholds": list(rows[0].thresholds) if rows else [],
         "rows": [r.to_dict() for r in rows]}
    if summary and rows:
        mean, std = aggregate_folds(rows)
        d["average"], d["std"] = mean.to_dict(), std.to_dict()
    if extra:
        d["extra"] = extra
    return d


def write_report(out_prefix: PathLike, rows: Sequence[MetricsReport], config_hash: Optional[str],
                 seed: Optional[int], summary: bool = True, title: str = "",
                 extra: Optional[dict] = None) -> tuple[Path, Path]:
    """Write ``<prefix>.json`` and ``<prefix>.txt``."""
    prefix = Path(out_prefix)
    jp, tp = prefix.with_suffix(".json"), prefix.with_suffix(".txt")
    jp.write_text(json.dumps(report_dict(rows, config_hash, seed, summary, extra), indent=2, sort_keys=True) + "\n")
    tp.write_text(format_table(rows, summary, title))
    return jp, tp


def read_report(path: PathLike) -> tuple[list[MetricsReport], dict]:
    p = Path(path)
    blob = json.loads(p.read_text())
    _check_version(p, REPORT_FORMAT, blob.get("format"), blob.get("version"))
    return [MetricsReport.from_dict(r) for r in blob["rows"]], blob


def write_experiment_report(run_dir: PathLike, result) -> None:
    run_dir = Path(run_dir)
    cfg = result.config
    multi = len(result.folds) > 1
    extra = {"name": cfg.name, "nuclei_map50": result.nuclei_map50,
             "best_epochs": [f.best_epoch for f in result.folds]}
    write_config(run_dir / "config.json", cfg)
    for crit in ("mask", "box"):
        write_report(run_dir / f"report_{crit}", result.rows(crit), cfg.hash(), cfg.seed, summary=multi,
                     title=f"{cfg.name} ({crit})", extra=extra)


# overlays -------------------------------------------------------------------

PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180),
    (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128), (170, 110, 40),
)


def overlay_color(index: int) -> tuple[int, int, int]:
    return PALETTE[index % len(PALETTE)]


def render_overlay(image: np.ndarray, dets: Sequence[Detection], alpha: float = 0.4,
                   outline: bool = True, labels: bool = True) -> np.ndarray:
    """Translucent mask fills, box outlines and score labels; colour follows instance index."""
    out = np.array(image, dtype=np.uint8, copy=True)
    if not dets:
        return out
    h, w = out.shape[:2]
    base = out.astype(np.float64)
    for i, d in enumerate(dets):
        if d.mask is None:
            continue
        m = d.mask.decode()
        if m.shape != (h, w):
            raise ValueError("mask and image sizes differ")
        col = np.array(overlay_color(i), dtype=np.float64)
        base[m] = base[m] * (1 - alpha) + col * alpha
    out = np.clip(np.round(base), 0, 255).astype(np.uint8)
    for i, d in enumerate(dets):
        col = tuple(int(c) for c in overlay_color(i))
        b = d.box
        p1 = (int(math.floor(b.x1)), int(math.floor(b.y1)))
        p2 = (max(p1[0], int(math.ceil(b.x2)) - 1), max(p1[1], int(math.ceil(b.y2)) - 1))
        if outline:
            cv2.rectangle(out, p1, p2, col, 1)
        if labels:
            cv2.putText(out, f"{CLASS_NAMES.get(d.class_id, d.class_id)} {d.score:.2f}", (p1[0], max(8, p1[1] - 2)),
                        cv2.FONT_HERSHEY_SIMPLEX, 0.3, col, 1, cv2.LINE_AA)
    return out


def write_overlay(path: PathLike, image: np.ndarray, dets: Sequence[Detection], **kw) -> None:
    write_image(path, render_overlay(image, dets, **kw))
