"""Detection evaluation (VOC-style AP at IoU 0.5) and feature diagnostics.

`voc_ap` uses all-points precision/recall integration with greedy
score-ordered matching (each ground-truth box matched at most once).
`dump_embeddings` projects pooled region features of top-scoring regions to
2D for scatter plots and computes a cross-domain alignment statistic in the
raw feature space.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .boxes import iou_matrix
from .detector import image_to_tensor, match_to_gt, annotations_to_tensors
from .synthdata import load_manifest, load_split

Detection = tuple[str, int, np.ndarray, float]  # image_id, class_id, box, score
GroundTruth = tuple[str, int, np.ndarray]  # image_id, class_id, box


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    map: float
    counts: dict[int, dict[str, int]]
    empty_classes: list[int] = field(default_factory=list)
    curves: dict[int, dict[str, list[float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON object keys are strings; keep class ids readable
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        d["counts"] = {str(k): v for k, v in self.counts.items()}
        d["curves"] = {str(k): v for k, v in self.curves.items()}
        return d

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        return EvalReport(
            per_class_ap={int(k): float(v) for k, v in d["per_class_ap"].items()},
            map=float(d["map"]),
            counts={int(k): v for k, v in d["counts"].items()},
            empty_classes=[int(c) for c in d.get("empty_classes", [])],
            curves={int(k): v for k, v in d.get("curves", {}).items()},
        )


def _ap_from_pr(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-points interpolated AP: area under the precision envelope."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def _match_class(
    dets: list[Detection], gts: list[GroundTruth], iou_thresh: float
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching by score; returns (tp, fp) indicator arrays."""
    # deterministic order: score desc, then image id / box coords as tie-breaks
    def sort_key(d):
        return (-d[3], d[0], tuple(float(v) for v in d[2]))

    dets = sorted(dets, key=sort_key)
    gt_by_image: dict[str, list[np.ndarray]] = {}
    for image_id, _, box in gts:
        gt_by_image.setdefault(image_id, []).append(np.asarray(box, dtype=np.float64))
    used = {image_id: np.zeros(len(boxes), dtype=bool) for image_id, boxes in gt_by_image.items()}

    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for i, (image_id, _, box, _) in enumerate(dets):
        boxes = gt_by_image.get(image_id)
        if not boxes:
            fp[i] = 1.0
            continue
        ious = iou_matrix(np.asarray(box, dtype=np.float64)[None, :], np.stack(boxes)).numpy()[0]
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh and not used[image_id][best]:
            tp[i] = 1.0
            used[image_id][best] = True
        else:
            fp[i] = 1.0
    return tp, fp


def voc_ap(
    detections: list[Detection],
    ground_truth: list[GroundTruth],
    iou_thresh: float = 0.5,
    with_curves: bool = False,
):
    """Per-class AP over classes present in the ground truth.

    Classes with ground truth but no detections get AP 0 and are listed in
    the returned empty-class list. Detections for classes absent from the
    ground truth are ignored.
    """
    gt_classes = sorted({g[1] for g in ground_truth})
    per_class: dict[int, float] = {}
    empty: list[int] = []
    curves: dict[int, dict[str, list[float]]] = {}
    for class_id in gt_classes:
        class_dets = [d for d in detections if d[1] == class_id]
        class_gts = [g for g in ground_truth if g[1] == class_id]
        if not class_dets:
            per_class[class_id] = 0.0
            empty.append(class_id)
            curves[class_id] = {"recall": [], "precision": []}
            continue
        tp, fp = _match_class(class_dets, class_gts, iou_thresh)
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(fp)
        recall = cum_tp / len(class_gts)
        precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
        per_class[class_id] = _ap_from_pr(recall, precision)
        curves[class_id] = {"recall": recall.tolist(), "precision": precision.tolist()}
    if with_curves:
        return per_class, empty, curves
    return per_class


def evaluate_detector(
    detector,
    samples,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
    iou_thresh: float = 0.5,
) -> EvalReport:
    detections: list[Detection] = []
    ground_truth: list[GroundTruth] = []
    for sample in samples:
        if sample.annotations is None:
            raise ValueError(f"sample {sample.sample_id!r} has no annotations to evaluate against")
        for ann in sample.annotations:
            ground_truth.append((sample.sample_id, ann.class_id, np.asarray(ann.box)))
        for class_id, box, score in detector.detect(
            image_to_tensor(sample.pixels), score_thresh, nms_iou
        ):
            detections.append((sample.sample_id, class_id, box, score))

    per_class, empty, curves = voc_ap(detections, ground_truth, iou_thresh, with_curves=True)
    counts: dict[int, dict[str, int]] = {}
    for class_id in per_class:
        counts[class_id] = {
            "detections": sum(1 for d in detections if d[1] == class_id),
            "gt": sum(1 for g in ground_truth if g[1] == class_id),
        }
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(
        per_class_ap=per_class, map=mean_ap, counts=counts, empty_classes=empty, curves=curves
    )


def evaluate_checkpoint(
    checkpoint_path: str | Path,
    dataset_root: str | Path,
    split: str = "target_eval",
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
) -> EvalReport:
    """Run detection over a labeled split and aggregate per-class AP."""
    detector, config = ckpt.build_detector(checkpoint_path)
    manifest = load_manifest(dataset_root)
    ckpt_classes = config.get("num_classes", detector.config.num_classes)
    if int(ckpt_classes) != int(manifest["num_classes"]):
        raise ValueError(
            f"checkpoint trained with {ckpt_classes} classes but dataset has "
            f"{manifest['num_classes']}"
        )
    samples = load_split(dataset_root, split)
    return evaluate_detector(detector, samples, score_thresh, nms_iou)


# ---------------------------------------------------------------------------
# feature embedding dumps


def _pca_2d(features: np.ndarray) -> np.ndarray:
    """Deterministic 2D PCA: centered SVD with sign-fixed components."""
    centered = features - features.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    for i in range(components.shape[0]):
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    return centered @ components.T


def _top_regions(detector, sample, regions_per_image: int):
    featmap = detector.extract_features(image_to_tensor(sample.pixels))
    regions = detector.propose_regions(featmap, max(64, regions_per_image))
    head = detector.rcnn_head(regions.features)
    c = detector.config.num_classes
    fg_score = head.class_probs[:, :c].max(dim=1).values
    order = torch.argsort(fg_score, descending=True, stable=True)[:regions_per_image]
    return regions.boxes[order], regions.features[order]


@torch.no_grad()
def dump_embeddings(
    checkpoint_path: str | Path,
    dataset_root: str | Path,
    splits: tuple[str, str] = ("source", "target_eval"),
    regions_per_image: int = 8,
    max_images_per_split: int | None = 100,
) -> tuple[list[dict], dict]:
    """Project top-region features of both domains to 2D.

    Returns (rows, stats): one row per region with keys
    {x, y, domain, class_id, image_id}; class_id is the ground-truth class
    matched at IoU >= 0.5 (0 when the region is background). stats carries
    the mean intra-class cross-domain distance between class centroids in
    the 2D projection, normalized by the projection's overall spread. The
    projection is where cluster structure is comparable across checkpoints:
    raw pooled-feature distances are dominated by high-dimensional nuisance
    directions that the adversarial equilibrium leaves in place, while the
    leading principal directions reflect how much of the dominant variance
    is domain split versus class structure.
    """
    detector, _ = ckpt.build_detector(checkpoint_path)
    detector.eval()

    all_features = []
    meta = []
    for split in splits:
        samples = load_split(dataset_root, split)
        if max_images_per_split is not None:
            samples = samples[:max_images_per_split]
        for sample in samples:
            if sample.annotations is None:
                raise ValueError(f"split {split!r} lacks annotations needed for class tags")
            boxes, features = _top_regions(detector, sample, regions_per_image)
            gt_boxes, gt_classes = annotations_to_tensors(sample.annotations)
            best, idx = match_to_gt(boxes, gt_boxes)
            for k in range(boxes.shape[0]):
                class_id = int(gt_classes[idx[k]]) if float(best[k]) >= 0.5 else 0
                meta.append({"domain": sample.domain, "class_id": class_id, "image_id": sample.sample_id})
            all_features.append(features.numpy())

    features = np.concatenate(all_features, axis=0).astype(np.float64)
    coords = _pca_2d(features)
    rows = [
        {"x": float(coords[i, 0]), "y": float(coords[i, 1]), **meta[i]} for i in range(len(meta))
    ]

    stats = {"alignment": alignment_statistic(coords, meta)}
    return rows, stats


def alignment_statistic(features: np.ndarray, meta: list[dict]) -> float:
    """Mean over classes of || mean source point - mean target point ||,
    normalized by the overall standard deviation of the points.

    Works on arrays of any width; dump_embeddings feeds it the 2D
    projection (see its docstring for why)."""
    domains = np.array([m["domain"] for m in meta])
    classes = np.array([m["class_id"] for m in meta])
    scale = float(features.std())
    if scale == 0:
        return 0.0
    dists = []
    for class_id in sorted(set(classes.tolist()) - {0}):
        src = features[(classes == class_id) & (domains == "source")]
        tgt = features[(classes == class_id) & (domains == "target")]
        if len(src) == 0 or len(tgt) == 0:
            continue
        dists.append(float(np.linalg.norm(src.mean(axis=0) - tgt.mean(axis=0))) / scale)
    return float(np.mean(dists)) if dists else 0.0
