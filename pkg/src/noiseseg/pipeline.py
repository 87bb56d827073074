"""Nuclei-aware pretraining chain and the named train/test experiment arms.

The chain: weak nuclei boxes from centre points -> single-class nuclei
detector -> pseudo nuclei boxes on osteoclast patches -> two-class detection
pretraining -> instance-segmentation finetuning. The baseline arm skips
everything before finetuning and starts from a fresh model.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .annotations import AnnotationSet, box_instance
from .evaluation import MetricsReport, aggregate_folds, evaluate
from .geometry import NUCLEUS, OSTEOCLAST, BoundingBox, Detection
from .model import ModelConfig, SegModel, build_model, config_hash, reconfigure_classes, save_checkpoint
from .tiling import ScaleMap, clip_annotations, extract_tile, plan_grid, scale_annotations
from .train import Sample, TrainConfig, TrainResult, fit, predict, predict_slide, validation_map

log = logging.getLogger(__name__)

NUCLEUS_BOX = 36
PSEUDO_CONF = 0.25
NUCLEI_CLASS_MAP = {0: "nucleus"}
MULTICLASS_MAP = {0: "osteoclast", 1: "nucleus"}
SEG_CLASS_MAP = {0: "osteoclast"}

# name -> (train domain, test domain, nuclei-aware pretraining)
ARMS = {
    "yolov8-m2m": ("mouse", "mouse", False),
    "yolov8-m2h": ("mouse", "human", False),
    "noise-m2h": ("mouse", "human", True),
    "yolov8-h2h": ("human", "human", False),
    "noise-h2h": ("human", "human", True),
}
# held-out batch per mouse fold, in fold order
MOUSE_FOLD_TEST = ("M1", "M5", "M4", "M3", "M2")
HUMAN_FOLD_TEST = ("H2", "H1")


def points_to_boxes(points: Sequence[Sequence[float]], size: float = NUCLEUS_BOX,
                    width: Optional[float] = None, height: Optional[float] = None) -> list[BoundingBox]:
    """Square ``size`` boxes centred on each point, clipped to the image when bounds are given."""
    half = size / 2
    out = []
    for x, y in points:
        x1, y1, x2, y2 = x - half, y - half, x + half, y + half
        if width is not None:
            x1, x2 = max(0.0, x1), min(float(width), x2)
        if height is not None:
            y1, y2 = max(0.0, y1), min(float(height), y2)
        out.append(BoundingBox(x1, y1, x2, y2))
    return out


@dataclass
class SlideRecord:
    """A slide with its full-resolution ground truth and fold bookkeeping."""

    name: str
    image: np.ndarray
    ann: AnnotationSet
    batch: str
    domain: str


def nuclei_annotations(ann: AnnotationSet, size: float = NUCLEUS_BOX) -> AnnotationSet:
    """Weak nucleus boxes from the point labels, dropping every other instance."""
    boxes = points_to_boxes(ann.points, size, ann.width, ann.height)
    return AnnotationSet(ann.width, ann.height, [box_instance(b, NUCLEUS) for b in boxes], list(ann.points))


def slide_patches(record: SlideRecord, ann: AnnotationSet, tile: int, model_size: int,
                  overlap: float = 0.5, retain_fraction: float = 0.25) -> list[Sample]:
    """Tile a slide and its labels into model-resolution training samples."""
    grid = plan_grid(record.image.shape[1], record.image.shape[0], tile, overlap)
    scale = ScaleMap(model_size, tile)
    out = []
    for i in range(len(grid)):
        clipped = clip_annotations(ann, grid, i, retain_fraction)
        out.append(Sample(extract_tile(record.image, grid, i, scale), scale_annotations(clipped, model_size),
                          f"{record.name}#{i}"))
    return out


def _remap(samples: Sequence[Sample], mapping: dict[int, int]) -> list[Sample]:
    out = []
    for s in samples:
        inst = [d.with_(class_id=mapping[d.class_id]) for d in s.ann.instances if d.class_id in mapping]
        out.append(Sample(s.image, AnnotationSet(s.ann.width, s.ann.height, inst, list(s.ann.points)), s.source))
    return out


def split_validation(samples: Sequence[Sample], fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Random ``fraction`` of patches for validation; at least one stays in training."""
    n = len(samples)
    if n == 0:
        return [], []
    n_val = min(int(round(n * fraction)), n - 1)
    perm = np.random.default_rng([int(seed), 20]).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


def train_nuclei_detector(train: Sequence[Sample], val: Sequence[Sample], model_config: ModelConfig,
                          cfg: TrainConfig, log_file=None) -> TrainResult:
    """Single-class box detector for nuclei.

    Samples carry class-1 (nucleus) boxes; internally the detector has one
    channel, so labels are remapped to channel 0.
    """
    if not train:
        raise ValueError("nuclei dataset is empty")
    for s in train:
        if any(d.class_id != NUCLEUS for d in s.ann.instances):
            raise ValueError(f"{s.source}: nuclei dataset must contain nucleus boxes only")
    model = build_model(model_config.replace(num_classes=1, with_masks=False), cfg.seed)
    res = fit(model, _remap(train, {NUCLEUS: 0}), _remap(val, {NUCLEUS: 0}),
              replace(cfg, detection_only=True), log_file)
    if val:
        res.best_metric = validation_map(res.model, _remap(val, {NUCLEUS: 0}), "box", [0], cfg.eval_score_thresh)
    return res


def pseudo_label(detector: SegModel, patches: Sequence[Sample], conf_thresh: float = PSEUDO_CONF,
                 batch_size: int = 16) -> list[list[BoundingBox]]:
    """Nucleus boxes predicted on every patch with score at least ``conf_thresh``."""
    if detector.config.num_classes != 1:
        raise ValueError("pseudo-labelling expects a single-class nuclei detector")
    if not patches:
        return []
    preds = predict(detector, [p.image for p in patches], score_thresh=conf_thresh,
                    batch_size=batch_size, with_masks=False)
    return [[d.box for d in dets if d.score >= conf_thresh] for dets in preds]


def add_pseudo_labels(patches: Sequence[Sample], boxes: Sequence[Sequence[BoundingBox]]) -> list[Sample]:
    """Append class-1 boxes next to the existing osteoclast labels, which stay untouched."""
    if len(patches) != len(boxes):
        raise ValueError("one box list per patch is required")
    out = []
    for s, bs in zip(patches, boxes):
        kept = [d for d in s.ann.instances if d.class_id == OSTEOCLAST]
        ann = AnnotationSet(s.ann.width, s.ann.height, kept + [box_instance(b, NUCLEUS) for b in bs],
                            list(s.ann.points))
        assert ann.osteoclasts == s.ann.osteoclasts, "pseudo labels altered osteoclast ground truth"
        out.append(Sample(s.image, ann, s.source))
    return out


def pretrain_multiclass(train: Sequence[Sample], val: Sequence[Sample], model_config: ModelConfig,
                        cfg: TrainConfig, log_file=None) -> TrainResult:
    """Two-class box detection (osteoclast + nucleus) without mask heads."""
    if not train:
        raise ValueError("pretraining dataset is empty")
    model = build_model(model_config.replace(num_classes=2, with_masks=False), cfg.seed)
    return fit(model, train, val, replace(cfg, detection_only=True), log_file)


def finetune_instance_seg(init: Optional[SegModel], train: Sequence[Sample], val: Sequence[Sample],
                          model_config: ModelConfig, cfg: TrainConfig, log_file=None) -> TrainResult:
    """Osteoclast instance segmentation; ``init=None`` is the baseline arm."""
    seg_config = model_config.replace(num_classes=1, with_masks=True)
    if init is None:
        model = build_model(seg_config, cfg.seed)
    else:
        if init.config.input_size != seg_config.input_size:
            raise ValueError("initial weights were trained at a different input size")
        model = reconfigure_classes(init, 1, with_masks=True, seed=cfg.seed)
    train = _remap(train, {OSTEOCLAST: 0})
    val = _remap(val, {OSTEOCLAST: 0})
    return fit(model, train, val, replace(cfg, detection_only=False), log_file)


@dataclass
class ExperimentConfig:
    """One named arm and the desk-scale settings shared by both of its model variants.

    ``folds`` may be given explicitly as ``[(train_batches, test_batches), ...]``;
    otherwise it follows from ``name``.
    """

    name: str = "noise-m2h"
    seed: int = 0
    folds: Optional[list] = None
    noise_enabled: Optional[bool] = None
    data_dir: Optional[str] = None
    mouse_slides: int = 10
    human_slides: int = 4
    slide_size: int = 512
    tile: int = 256
    model_size: int = 128
    overlap: float = 0.5
    base_channels: int = 16
    epochs: int = 100
    pretrain_epochs: int = 100
    patience: int = 10
    batch_size: int = 8
    lr: float = 2e-3
    val_fraction: float = 0.2
    retain_fraction: float = 0.25
    nucleus_box: int = NUCLEUS_BOX
    pseudo_conf: float = PSEUDO_CONF
    eval_score_thresh: float = 0.01
    stitch_iou: float = 0.5
    min_area: int = 2000

    def __post_init__(self):
        if self.name not in ARMS:
            raise ValueError(f"unknown experiment {self.name!r}; choose from {sorted(ARMS)}")
        if self.noise_enabled is None:
            self.noise_enabled = ARMS[self.name][2]
        if self.folds is None:
            self.folds = default_folds(self.name)
        self.folds = [(tuple(tr), tuple(te)) for tr, te in self.folds]
        for tr, te in self.folds:
            if not tr or not te:
                raise ValueError("every fold needs training and test batches")
            overlap = set(tr) & set(te)
            if overlap:
                raise ValueError(f"train and test batches overlap: {sorted(overlap)}")

    @property
    def train_domain(self) -> str:
        return ARMS[self.name][0]

    @property
    def test_domain(self) -> str:
        return ARMS[self.name][1]

    @property
    def train_sets(self) -> tuple[str, ...]:
        return tuple(sorted({b for tr, _ in self.folds for b in tr}))

    @property
    def test_sets(self) -> tuple[str, ...]:
        return tuple(sorted({b for _, te in self.folds for b in te}))

    def model_config(self) -> ModelConfig:
        return ModelConfig(input_size=self.model_size, base_channels=self.base_channels)

    def train_config(self, epochs: Optional[int] = None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs if epochs is None else epochs, patience=self.patience,
                           batch_size=self.batch_size, lr=self.lr, seed=self.seed,
                           eval_score_thresh=self.eval_score_thresh)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["folds"] = [[list(tr), list(te)] for tr, te in self.folds]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown experiment config keys: {unknown}")
        return cls(**known)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def hash_chain(self) -> str:
        """Hash of the settings the nuclei chain depends on; arm name and folds excluded."""
        d = self.to_dict()
        for k in ("name", "folds", "noise_enabled", "epochs", "eval_score_thresh", "stitch_iou", "min_area"):
            d.pop(k)
        return config_hash(d)


def default_folds(name: str) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    train_dom, test_dom, _ = ARMS[name]
    mouse = ("M1", "M2", "M3", "M4", "M5")
    human = ("H1", "H2")
    if train_dom == "mouse" and test_dom == "mouse":
        return [(tuple(b for b in mouse if b != t), (t,)) for t in MOUSE_FOLD_TEST]
    if train_dom == "mouse":
        return [(mouse, human)]
    return [(tuple(b for b in human if b != t), (t,)) for t in HUMAN_FOLD_TEST]


def synthetic_slides(config: ExperimentConfig) -> list[SlideRecord]:
    """Seeded mouse-like and human-like corpora sized by ``config``."""
    from .synth import generate_corpus

    out = []
    for dom, n in (("mouse", config.mouse_slides), ("human", config.human_slides)):
        for i, (batch, slide) in enumerate(generate_corpus(dom, n, config.seed, config.slide_size)):
            out.append(SlideRecord(f"{dom}-{i:03d}", slide.image, slide.annotations(), batch, slide.domain))
    return out


def load_slides(config: ExperimentConfig) -> list[SlideRecord]:
    if config.data_dir is None:
        return synthetic_slides(config)
    from .io import read_dataset

    return read_dataset(config.data_dir)


@dataclass
class FoldOutcome:
    label: str
    test: str
    mask: MetricsReport
    box: MetricsReport
    predictions: dict[str, list[Detection]]
    best_epoch: int
    seconds: float


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    folds: list[FoldOutcome]
    nuclei_map50: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def rows(self, criterion: str = "mask") -> list[MetricsReport]:
        return [getattr(f, criterion) for f in self.folds]

    def summary(self, criterion: str = "mask") -> tuple[MetricsReport, MetricsReport]:
        """Average and standard-deviation rows across folds."""
        return aggregate_folds(self.rows(criterion))

    @property
    def report(self) -> MetricsReport:
        return self.summary("mask")[0]


def _patches(records: Sequence[SlideRecord], config: ExperimentConfig, kind: str) -> list[Sample]:
    out = []
    for r in records:
        if kind == "nuclei":
            ann = nuclei_annotations(r.ann, config.nucleus_box)
        else:
            ann = AnnotationSet(r.ann.width, r.ann.height, r.ann.osteoclasts, list(r.ann.points))
        out.extend(slide_patches(r, ann, config.tile, config.model_size, config.overlap, config.retain_fraction))
    return out


def nuclei_chain(mouse: Sequence[SlideRecord], config: ExperimentConfig, run_dir: Optional[Path] = None,
                 tag: str = "") -> tuple[SegModel, float]:
    """Nuclei detector plus two-class pretraining on the given mouse slides.

    Returns the pretrained detection model and the detector's held-out box
    mAP@0.5.
    """
    mcfg = config.model_config()
    logs = (run_dir / "logs") if run_dir else None
    nuc = _patches(mouse, config, "nuclei")
    ntr, nval = split_validation(nuc, config.val_fraction, config.seed)
    det = train_nuclei_detector(ntr, nval, mcfg, config.train_config(config.pretrain_epochs),
                                logs / f"{tag}nuclei.jsonl" if logs else None)
    ost = _patches(mouse, config, "osteoclast")
    pseudo = pseudo_label(det.model, ost, config.pseudo_conf)
    multi = add_pseudo_labels(ost, pseudo)
    ptr, pval = split_validation(multi, config.val_fraction, config.seed)
    pre = pretrain_multiclass(ptr, pval, mcfg, config.train_config(config.pretrain_epochs),
                              logs / f"{tag}pretrain.jsonl" if logs else None)
    if run_dir:
        ckpt = run_dir / "checkpoints"
        extra = {"experiment": config.hash()}
        save_checkpoint(det.model, ckpt / f"{tag}nuclei.pt", NUCLEI_CLASS_MAP, config.seed, extra)
        save_checkpoint(pre.model, ckpt / f"{tag}pretrain.pt", MULTICLASS_MAP, config.seed, extra)
    log.info("nuclei detector mAP50 %.4f; %d pseudo boxes", det.best_metric, sum(map(len, pseudo)))
    return pre.model, det.best_metric


def evaluate_slides(model: SegModel, records: Sequence[SlideRecord], config: ExperimentConfig,
                    label: str, test: str) -> tuple[MetricsReport, MetricsReport, dict]:
    scale = ScaleMap(config.model_size, config.tile)
    preds, gts = {}, []
    for r in records:
        grid = plan_grid(r.image.shape[1], r.image.shape[0], config.tile, config.overlap)
        preds[r.name] = predict_slide(model, r.image, grid, scale, config.eval_score_thresh,
                                      stitch_iou=config.stitch_iou, min_area=config.min_area)
        gts.append(r.ann.osteoclasts)
    plist = [preds[r.name] for r in records]
    mask = evaluate(plist, gts, "mask", label=label, test=test)
    box = evaluate(plist, gts, "box", label=label, test=test)
    return mask, box, preds


def run_experiment(config: ExperimentConfig, run_dir=None, slides: Optional[Sequence[SlideRecord]] = None,
                   cache: Optional[dict] = None) -> ExperimentResult:
    """Run every fold of one arm and score stitched slide predictions on the held-out batches.

    Nuclei pretraining always uses mouse slides from training batches only.
    ``cache`` may be shared between arms with the same seed and data so the
    nuclei chain is trained once.
    """
    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        for sub in ("checkpoints", "logs", "predictions"):
            (run_dir / sub).mkdir(parents=True, exist_ok=True)
    slides = list(slides) if slides is not None else load_slides(config)
    cache = {} if cache is None else cache
    outcomes, nuclei_scores = [], []
    multi = len(config.folds) > 1
    for k, (train_b, test_b) in enumerate(config.folds, 1):
        t0 = time.perf_counter()
        label = f"Fold {k}" if multi else config.name
        test_name = "/".join(test_b)
        train_rec = [r for r in slides if r.batch in train_b]
        test_rec = [r for r in slides if r.batch in test_b]
        if not train_rec or not test_rec:
            raise ValueError(f"fold {k}: no slides for batches train={train_b} test={test_b}")
        init = None
        if config.noise_enabled:
            mouse = [r for r in train_rec if r.batch.startswith("M")]
            if not mouse:
                # mouse-only pretraining for human arms: every mouse batch is outside the test set
                mouse = [r for r in slides if r.batch.startswith("M") and r.batch not in test_b]
            key = (config.seed, tuple(sorted(r.name for r in mouse)), config.hash_chain())
            if key not in cache:
                cache[key] = nuclei_chain(mouse, config, run_dir, tag=f"fold{k}-" if multi else "")
            init, score = cache[key]
            nuclei_scores.append(score)
        patches = _patches(train_rec, config, "osteoclast")
        tr, val = split_validation(patches, config.val_fraction, config.seed)
        tag = f"fold{k}-" if multi else ""
        res = finetune_instance_seg(init, tr, val, config.model_config(), config.train_config(),
                                    run_dir / "logs" / f"{tag}finetune.jsonl" if run_dir else None)
        mask, box, preds = evaluate_slides(res.model, test_rec, config, label, test_name)
        if run_dir:
            save_checkpoint(res.model, run_dir / "checkpoints" / f"{tag}finetune.pt", SEG_CLASS_MAP,
                            config.seed, {"experiment": config.hash()})
            from .io import write_predictions

            write_predictions(run_dir / "predictions" / f"{tag or 'fold1-'}predictions.json", preds,
                              config.hash(), config.seed, {r.name: (r.image.shape[1], r.image.shape[0])
                                                           for r in test_rec})
        outcomes.append(FoldOutcome(label, test_name, mask, box, preds, res.best_epoch, time.perf_counter() - t0))
        log.info("%s %s fold %d: mask mAP50 %.4f box mAP50 %.4f (%.0fs)", config.name, test_name, k,
                 mask.map[0.5], box.map[0.5], outcomes[-1].seconds)
    result = ExperimentResult(config, outcomes, float(np.mean(nuclei_scores)) if nuclei_scores else None)
    if run_dir:
        from .io import write_experiment_report

        write_experiment_report(run_dir, result)
    return result
