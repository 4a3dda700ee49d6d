"""Minimal two-stage detector: conv backbone, anchor RPN, region head.

Single feature level at stride 8, bilinear region pooling on a fixed grid,
and a class-specific box head (N x C x 4) so per-class weighting of box
outputs lines up with the classification columns. All ops are plain tensor
code that also runs in float64, which the gradient-check tests rely on.

Class indexing: head column ``j`` corresponds to annotation ``class_id j+1``
for ``j < C``; column ``C`` is the background class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .boxes import (
    clip_boxes,
    decode_deltas,
    deterministic_order,
    encode_deltas,
    iou_matrix,
    nms,
    smooth_l1,
)

log = logging.getLogger(__name__)


class DetectionLossError(RuntimeError):
    """A detection loss component came out NaN."""


@dataclass
class DetectorConfig:
    image_size: int = 96
    num_classes: int = 3
    stride: int = 8
    feat_dim: int = 64
    pool_size: int = 4
    head_hidden: int = 256
    anchor_scales: tuple[float, ...] = (16.0, 24.0, 40.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_nms_iou: float = 0.7
    rpn_min_size: float = 1.0
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    head_fg_iou: float = 0.5
    head_train_regions: int = 64

    @property
    def pooled_dim(self) -> int:
        return self.feat_dim * self.pool_size * self.pool_size

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)


@dataclass
class RPNOutput:
    anchors: torch.Tensor  # A x 4
    objectness_logits: torch.Tensor  # A
    deltas: torch.Tensor  # A x 4


@dataclass
class RegionBatch:
    boxes: torch.Tensor  # N x 4, image coordinates, clipped
    objectness: torch.Tensor  # N, in [0, 1]
    features: torch.Tensor  # N x D'


@dataclass
class HeadOutput:
    class_probs: torch.Tensor  # N x (C+1)
    box_deltas: torch.Tensor  # N x C x 4
    class_logits: torch.Tensor = field(default=None, repr=False)


def image_to_tensor(pixels: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """HWC [0,1] numpy image -> CHW tensor."""
    return torch.as_tensor(np.ascontiguousarray(pixels.transpose(2, 0, 1)), dtype=dtype)


def generate_anchors(
    feat_h: int, feat_w: int, stride: int, scales, ratios, dtype=torch.float32
) -> torch.Tensor:
    """Anchor boxes (feat_h * feat_w * A, 4) centered on feature cells.

    For scale s and ratio r (height/width), w = s/sqrt(r) and h = s*sqrt(r),
    so the anchor area is s^2 at every ratio. Layout matches the RPN output
    flattening: cell-major, then scale-major, then ratio.
    """
    shapes = []
    for s in scales:
        for r in ratios:
            w = s / np.sqrt(r)
            h = s * np.sqrt(r)
            shapes.append((w, h))
    shapes = torch.tensor(shapes, dtype=dtype)  # A x 2

    ys = (torch.arange(feat_h, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(feat_w, dtype=dtype) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    centers = torch.stack([cx, cy], dim=-1).reshape(-1, 1, 2)  # (h*w) x 1 x 2
    half = shapes.reshape(1, -1, 2) / 2.0
    lo = centers - half
    hi = centers + half
    return torch.cat([lo, hi], dim=-1).reshape(-1, 4)


class Backbone(nn.Module):
    """Stride-8 feature extractor, 96x96x3 -> 12x12x64."""

    def __init__(self, out_dim: int = 64):
        super().__init__()
        widths = [3, 16, 32, 48, out_dim, out_dim]
        strides = [1, 2, 2, 2, 1]
        layers = []
        for c_in, c_out, s in zip(widths[:-1], widths[1:], strides):
            layers.append(nn.Conv2d(c_in, c_out, 3, stride=s, padding=1))
            layers.append(nn.GroupNorm(min(8, c_out), c_out))
            layers.append(nn.ReLU(inplace=True))
        self.body = nn.Sequential(*layers)
        self.out_dim = out_dim
        self.total_stride = 8

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        return self.body(image)


class RPN(nn.Module):
    def __init__(self, feat_dim: int, anchors_per_cell: int):
        super().__init__()
        self.conv = nn.Conv2d(feat_dim, feat_dim, 3, padding=1)
        self.obj = nn.Conv2d(feat_dim, anchors_per_cell, 1)
        self.reg = nn.Conv2d(feat_dim, anchors_per_cell * 4, 1)
        self.anchors_per_cell = anchors_per_cell

    def forward(self, featmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = F.relu(self.conv(featmap))
        a = self.anchors_per_cell
        logits = self.obj(x).permute(0, 2, 3, 1).reshape(-1)
        deltas = self.reg(x).permute(0, 2, 3, 1).reshape(-1, a, 4).reshape(-1, 4)
        return logits, deltas


class RCNNHead(nn.Module):
    """Two fc layers, then classification over C+1 and per-class box deltas."""

    def __init__(self, pooled_dim: int, hidden: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.fc1 = nn.Linear(pooled_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.reg = nn.Linear(hidden, num_classes * 4)

    def forward(self, features: torch.Tensor) -> HeadOutput:
        n = features.shape[0]
        x = F.relu(self.fc1(features))
        x = F.relu(self.fc2(x))
        logits = self.cls(x)
        deltas = self.reg(x).reshape(n, self.num_classes, 4)
        return HeadOutput(
            class_probs=F.softmax(logits, dim=-1),
            box_deltas=deltas,
            class_logits=logits,
        )


def bilinear_pool(featmap: torch.Tensor, boxes: torch.Tensor, pool_size: int, stride: int) -> torch.Tensor:
    """Pool each box to a pool_size x pool_size grid by bilinear sampling.

    One sample per output cell, taken at the cell center; featmap border
    values are replicated for samples falling outside. Pure function of
    (featmap, boxes) and differentiable wrt featmap.
    """
    if featmap.dim() == 4:
        featmap = featmap[0]
    d, h, w = featmap.shape
    n = boxes.shape[0]
    if n == 0:
        return featmap.new_zeros((0, d * pool_size * pool_size))

    boxes = boxes.to(featmap.dtype)
    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    degenerate = (widths <= 0) | (heights <= 0)
    if bool(degenerate.any()):
        log.warning("pooling %d degenerate (zero-area) box(es) from nearest cell", int(degenerate.sum()))

    grid = (torch.arange(pool_size, dtype=featmap.dtype) + 0.5) / pool_size
    # sample points in image coordinates, then into feature-cell coordinates
    sx = boxes[:, 0:1] + grid.unsqueeze(0) * widths.unsqueeze(1)  # N x P
    sy = boxes[:, 1:2] + grid.unsqueeze(0) * heights.unsqueeze(1)
    fx = sx / stride - 0.5
    fy = sy / stride - 0.5
    if bool(degenerate.any()):
        # collapse all samples of a degenerate box onto its nearest cell
        cx = ((boxes[:, 0] + boxes[:, 2]) / 2 / stride - 0.5).round()
        cy = ((boxes[:, 1] + boxes[:, 3]) / 2 / stride - 0.5).round()
        fx = torch.where(degenerate.unsqueeze(1), cx.unsqueeze(1).expand_as(fx), fx)
        fy = torch.where(degenerate.unsqueeze(1), cy.unsqueeze(1).expand_as(fy), fy)

    x0 = fx.floor()
    y0 = fy.floor()
    wx1 = fx - x0
    wy1 = fy - y0
    x0c = x0.long().clamp(0, w - 1)
    x1c = (x0.long() + 1).clamp(0, w - 1)
    y0c = y0.long().clamp(0, h - 1)
    y1c = (y0.long() + 1).clamp(0, h - 1)

    # full N x P x P sample grid via broadcasting over the two axes
    def gather(yi, xi):
        # yi: N x P (rows), xi: N x P (cols) -> N x P x P x D
        flat = featmap.reshape(d, -1)  # D x (h*w)
        idx = yi.unsqueeze(2) * w + xi.unsqueeze(1)  # N x P x P
        return flat[:, idx.reshape(-1)].T.reshape(n, pool_size, pool_size, d)

    v00 = gather(y0c, x0c)
    v01 = gather(y0c, x1c)
    v10 = gather(y1c, x0c)
    v11 = gather(y1c, x1c)
    wx1e = wx1.unsqueeze(1).unsqueeze(3)  # over columns
    wy1e = wy1.unsqueeze(2).unsqueeze(3)  # over rows
    out = (
        (1 - wy1e) * (1 - wx1e) * v00
        + (1 - wy1e) * wx1e * v01
        + wy1e * (1 - wx1e) * v10
        + wy1e * wx1e * v11
    )
    return out.reshape(n, -1)


class Detector(nn.Module):
    """F_conv + F_RPN + F_RCNN with image-level helpers."""

    def __init__(self, config: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.feat_dim)
        self.rpn = RPN(config.feat_dim, config.anchors_per_cell)
        self.head = RCNNHead(config.pooled_dim, config.head_hidden, config.num_classes)

    # -- operations ---------------------------------------------------------

    def extract_features(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.shape[-1] < self.config.stride or image.shape[-2] < self.config.stride:
            raise ValueError(
                f"image {tuple(image.shape[-2:])} smaller than stride {self.config.stride}"
            )
        return self.backbone(image)

    def rpn_forward(self, featmap: torch.Tensor) -> RPNOutput:
        logits, deltas = self.rpn(featmap)
        anchors = generate_anchors(
            featmap.shape[-2],
            featmap.shape[-1],
            self.config.stride,
            self.config.anchor_scales,
            self.config.anchor_ratios,
            dtype=featmap.dtype,
        )
        return RPNOutput(anchors=anchors, objectness_logits=logits, deltas=deltas)

    def propose_regions(
        self, featmap: torch.Tensor, k_top: int, rpn_out: RPNOutput | None = None
    ) -> RegionBatch:
        """Top-k_top proposals by objectness after NMS, scores descending."""
        if k_top < 1:
            raise ValueError(f"k_top must be >= 1, got {k_top}")
        cfg = self.config
        if rpn_out is None:
            rpn_out = self.rpn_forward(featmap)
        scores = torch.sigmoid(rpn_out.objectness_logits).detach()
        boxes = decode_deltas(rpn_out.anchors, rpn_out.deltas.detach())
        boxes = clip_boxes(boxes, (cfg.image_size, cfg.image_size))

        keep_size = (boxes[:, 2] - boxes[:, 0] >= cfg.rpn_min_size) & (
            boxes[:, 3] - boxes[:, 1] >= cfg.rpn_min_size
        )
        if not bool(keep_size.any()):
            keep_size = torch.ones_like(keep_size)  # degenerate net: keep everything
        candidates = torch.nonzero(keep_size, as_tuple=False).squeeze(1)
        kept = nms(boxes[candidates], scores[candidates], cfg.rpn_nms_iou, max_keep=k_top)
        kept = candidates[kept]
        region_boxes = boxes[kept]
        features = bilinear_pool(featmap, region_boxes, cfg.pool_size, cfg.stride)
        return RegionBatch(boxes=region_boxes, objectness=scores[kept], features=features)

    def pool_region_features(self, featmap: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        return bilinear_pool(featmap, boxes, self.config.pool_size, self.config.stride)

    def rcnn_head(self, region_features: torch.Tensor) -> HeadOutput:
        if region_features.shape[-1] != self.config.pooled_dim:
            raise ValueError(
                f"region feature width {region_features.shape[-1]} != {self.config.pooled_dim}"
            )
        return self.head(region_features)

    @torch.no_grad()
    def detect(
        self,
        image: torch.Tensor,
        score_thresh: float = 0.05,
        nms_iou: float = 0.5,
        k_top: int = 300,
    ) -> list[tuple[int, np.ndarray, float]]:
        """Standard inference: (class_id, box, score) sorted by score descending."""
        if not (0.0 <= score_thresh <= 1.0 and 0.0 <= nms_iou <= 1.0):
            raise ValueError("score_thresh and nms_iou must lie in [0, 1]")
        was_training = self.training
        self.eval()
        try:
            featmap = self.extract_features(image)
            regions = self.propose_regions(featmap, k_top)
            head = self.rcnn_head(regions.features)
        finally:
            self.train(was_training)

        cfg = self.config
        results: list[tuple[int, np.ndarray, float]] = []
        for j in range(cfg.num_classes):
            scores = head.class_probs[:, j]
            mask = scores > score_thresh
            if not bool(mask.any()):
                continue
            refined = decode_deltas(regions.boxes[mask], head.box_deltas[mask, j])
            refined = clip_boxes(refined, (cfg.image_size, cfg.image_size))
            kept = nms(refined, scores[mask], nms_iou)
            for i in kept.tolist():
                results.append((j + 1, refined[i].numpy().copy(), float(scores[mask][i])))
        if not results:
            return []
        all_boxes = torch.tensor(np.stack([r[1] for r in results]), dtype=torch.float64)
        all_scores = torch.tensor([r[2] for r in results], dtype=torch.float64)
        order = deterministic_order(all_boxes, all_scores)
        return [results[i] for i in order.tolist()]


# ---------------------------------------------------------------------------
# target assignment and the supervised loss


def match_to_gt(boxes: torch.Tensor, gt_boxes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per box: (best IoU against any gt, index of that gt). Ties -> lowest index."""
    if gt_boxes.shape[0] == 0:
        return (
            torch.zeros(boxes.shape[0], dtype=boxes.dtype),
            torch.full((boxes.shape[0],), -1, dtype=torch.long),
        )
    ious = iou_matrix(boxes, gt_boxes).to(boxes.dtype)
    best, idx = ious.max(dim=1)
    return best, idx


def annotations_to_tensors(annotations, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """(gt_boxes Gx4, gt_class_ids G) from BoxAnnotation list; empty-safe."""
    if not annotations:
        return torch.zeros((0, 4), dtype=dtype), torch.zeros((0,), dtype=torch.long)
    boxes = torch.tensor([a.box for a in annotations], dtype=dtype)
    classes = torch.tensor([a.class_id for a in annotations], dtype=torch.long)
    return boxes, classes


def _balanced_mean(pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    """0.5*mean(pos) + 0.5*mean(neg); single-group mean if one side is empty."""
    if pos.numel() == 0 and neg.numel() == 0:
        raise ValueError("no matched elements on either side")
    if pos.numel() == 0:
        return neg.mean()
    if neg.numel() == 0:
        return pos.mean()
    return 0.5 * pos.mean() + 0.5 * neg.mean()


def _check_finite(name: str, value: torch.Tensor) -> torch.Tensor:
    if torch.isnan(value).any() or torch.isinf(value).any():
        raise DetectionLossError(f"detection loss component {name!r} is not finite")
    return value


def assign_head_targets(
    region_boxes: torch.Tensor,
    gt_boxes: torch.Tensor,
    gt_class_ids: torch.Tensor,
    fg_iou: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Head column labels (background = C column handled by caller) per region.

    Returns (labels, matched_gt): labels hold the 0-based head column for
    foreground regions and -1 for background; matched_gt is the gt index.
    """
    best, idx = match_to_gt(region_boxes, gt_boxes)
    if gt_boxes.shape[0] == 0:
        return torch.full_like(idx, -1), idx
    fg = best >= fg_iou
    labels = torch.where(fg, gt_class_ids[idx.clamp(min=0)] - 1, torch.full_like(idx, -1))
    return labels, idx


def detection_loss(
    rpn_out: RPNOutput,
    head_out: HeadOutput,
    annotations,
    region_boxes: torch.Tensor,
    config: DetectorConfig,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Supervised objective L_det on one image.

    Four components, each a mean over its matched anchors/regions:
      - RPN objectness: binary cross-entropy, balanced between positive
        anchors (IoU >= rpn_pos_iou with any gt, plus the best anchor per gt)
        and negatives (IoU < rpn_neg_iou); anchors in between are ignored.
      - RPN box: smooth L1 on encoded deltas, positives only.
      - head classification: cross-entropy over C+1, balanced between
        foreground regions (IoU >= head_fg_iou) and background.
      - head box: smooth L1 on the matched class's delta slice, foreground only.

    Empty annotations reduce the loss to the two background terms. Any NaN
    component raises DetectionLossError naming the component.
    """
    dtype = rpn_out.objectness_logits.dtype
    gt_boxes, gt_class_ids = annotations_to_tensors(annotations, dtype=dtype)
    zero = rpn_out.objectness_logits.sum() * 0.0

    # --- RPN objectness + box regression
    best_iou, best_gt = match_to_gt(rpn_out.anchors, gt_boxes)
    pos = best_iou >= config.rpn_pos_iou
    if gt_boxes.shape[0] > 0:
        anchor_ious = iou_matrix(rpn_out.anchors, gt_boxes).to(dtype)
        force = anchor_ious.argmax(dim=0)  # best anchor per gt, ties -> lowest index
        pos = pos.clone()
        pos[force] = True
        best_gt = best_gt.clone()
        best_gt[force] = torch.arange(gt_boxes.shape[0])
    neg = (best_iou < config.rpn_neg_iou) & ~pos

    logits = rpn_out.objectness_logits
    pos_bce = F.binary_cross_entropy_with_logits(
        logits[pos], torch.ones_like(logits[pos]), reduction="none"
    )
    neg_bce = F.binary_cross_entropy_with_logits(
        logits[neg], torch.zeros_like(logits[neg]), reduction="none"
    )
    rpn_obj = _check_finite("rpn_objectness", _balanced_mean(pos_bce, neg_bce))

    if bool(pos.any()):
        targets = encode_deltas(rpn_out.anchors[pos], gt_boxes[best_gt[pos]])
        rpn_box = smooth_l1(rpn_out.deltas[pos] - targets).sum(dim=1).mean()
    else:
        rpn_box = zero
    rpn_box = _check_finite("rpn_box", rpn_box)

    # --- head classification + box regression
    labels, matched = assign_head_targets(
        region_boxes, gt_boxes, gt_class_ids, config.head_fg_iou
    )
    fg = labels >= 0
    c = config.num_classes
    target_cols = torch.where(fg, labels, torch.full_like(labels, c))
    ce = F.cross_entropy(head_out.class_logits, target_cols, reduction="none")
    head_cls = _check_finite("head_cls", _balanced_mean(ce[fg], ce[~fg]))

    if bool(fg.any()):
        fg_idx = torch.nonzero(fg, as_tuple=False).squeeze(1)
        deltas = head_out.box_deltas[fg_idx, labels[fg_idx]]
        targets = encode_deltas(region_boxes[fg_idx], gt_boxes[matched[fg_idx]])
        head_box = smooth_l1(deltas - targets).sum(dim=1).mean()
    else:
        head_box = zero
    head_box = _check_finite("head_box", head_box)

    total = rpn_obj + rpn_box + head_cls + head_box
    components = {
        "rpn_objectness": float(rpn_obj.detach()),
        "rpn_box": float(rpn_box.detach()),
        "head_cls": float(head_cls.detach()),
        "head_box": float(head_box.detach()),
    }
    return total, components


def training_regions(
    detector: Detector,
    featmap: torch.Tensor,
    annotations,
    k_top: int | None = None,
) -> torch.Tensor:
    """Region boxes used to train the head: top proposals plus the gt boxes.

    Appending the ground-truth boxes guarantees foreground regions whenever
    the image has objects; everything is deterministic (no random sampling).
    """
    cfg = detector.config
    k = cfg.head_train_regions if k_top is None else k_top
    regions = detector.propose_regions(featmap, k)
    gt_boxes, _ = annotations_to_tensors(annotations, dtype=regions.boxes.dtype)
    return torch.cat([regions.boxes, gt_boxes], dim=0)
