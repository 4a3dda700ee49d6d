"""Axis-aligned box utilities: IoU, NMS, delta encoding, clipping.

Boxes are (x1, y1, x2, y2) in image pixel coordinates with x2 > x1, y2 > y1.
All functions accept torch tensors and preserve dtype/device; `iou_matrix`
and `nms` also accept numpy arrays.
"""

from __future__ import annotations

import numpy as np
import torch


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU between two box sets, shape (len(a), len(b))."""
    a = torch.as_tensor(boxes_a, dtype=torch.float64)
    b = torch.as_tensor(boxes_b, dtype=torch.float64)
    if a.numel() == 0 or b.numel() == 0:
        return torch.zeros((a.shape[0], b.shape[0]), dtype=torch.float64)
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


def deterministic_order(boxes, scores) -> np.ndarray:
    """Indices sorting by score descending, ties broken by box coordinates.

    The coordinate tie-break makes downstream selection (NMS, top-k)
    independent of the caller's box ordering.
    """
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    # np.lexsort: last key is primary
    return np.lexsort((b[:, 3], b[:, 2], b[:, 1], b[:, 0], -s))


def nms(boxes, scores, iou_thresh: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices, score-descending.

    Ordering is deterministic under permutation of the inputs (ties broken
    by coordinates). With max_keep, stops after that many boxes survive —
    identical to truncating the full result.
    """
    b = np.asarray(torch.as_tensor(boxes).detach().cpu(), dtype=np.float64).reshape(-1, 4)
    s = np.asarray(torch.as_tensor(scores).detach().cpu(), dtype=np.float64).reshape(-1)
    if b.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = deterministic_order(b, s)
    areas = np.maximum(b[:, 2] - b[:, 0], 0) * np.maximum(b[:, 3] - b[:, 1], 0)
    keep = []
    suppressed = np.zeros(b.shape[0], dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(idx)
        if max_keep is not None and len(keep) >= max_keep:
            break
        iw = np.minimum(b[:, 2], b[idx, 2]) - np.maximum(b[:, 0], b[idx, 0])
        ih = np.minimum(b[:, 3], b[idx, 3]) - np.maximum(b[:, 1], b[idx, 1])
        inter = np.maximum(iw, 0) * np.maximum(ih, 0)
        union = areas + areas[idx] - inter
        ious = np.where(union > 0, inter / union, 0.0)
        suppressed |= ious > iou_thresh
    return np.asarray(keep, dtype=np.int64)


def clip_boxes(boxes, image_hw):
    """Clip boxes to [0, W] x [0, H]."""
    h, w = image_hw
    x1 = boxes[..., 0].clamp(0, w)
    y1 = boxes[..., 1].clamp(0, h)
    x2 = boxes[..., 2].clamp(0, w)
    y2 = boxes[..., 3].clamp(0, h)
    return torch.stack([x1, y1, x2, y2], dim=-1)


def encode_deltas(anchors, targets):
    """Encode target boxes as center/size log-space deltas wrt anchors."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    gw = targets[:, 2] - targets[:, 0]
    gh = targets[:, 3] - targets[:, 1]
    gx = targets[:, 0] + 0.5 * gw
    gy = targets[:, 1] + 0.5 * gh
    return torch.stack(
        [(gx - ax) / aw, (gy - ay) / ah, torch.log(gw / aw), torch.log(gh / ah)],
        dim=1,
    )


def decode_deltas(anchors, deltas, max_log_scale: float = 4.0):
    """Invert `encode_deltas`; log-size deltas are clamped for stability."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * torch.exp(deltas[:, 2].clamp(-max_log_scale, max_log_scale))
    h = ah * torch.exp(deltas[:, 3].clamp(-max_log_scale, max_log_scale))
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def smooth_l1(diff, beta: float = 1.0):
    """Elementwise smooth L1 (Huber) of a difference tensor."""
    absdiff = diff.abs()
    return torch.where(absdiff < beta, 0.5 * absdiff**2 / beta, absdiff - 0.5 * beta)
