"""Teacher maintenance (EMA), pseudo-labels, and the consistency objective.

The teacher is a structural copy of the student updated as
W_t = alpha * W_{t-1} + (1 - alpha) * W_student after every student step. It
sees clean target images and hands its proposals to the student, which sees
the photometrically augmented version of the same image; the consistency
loss then compares head outputs on identical boxes, optionally weighted per
region and class.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from .detector import Detector, HeadOutput


@dataclass
class TeacherState:
    detector: Detector
    alpha: float = 0.99
    initialized_from_student: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")


@dataclass
class PseudoBatch:
    proposals: torch.Tensor  # K x 4
    teacher_probs: torch.Tensor  # K x (C+1)
    teacher_deltas: torch.Tensor  # K x C x 4


def make_teacher(student: Detector, alpha: float = 0.99) -> TeacherState:
    """Deep-copied teacher, frozen (no grads ever flow into it)."""
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return TeacherState(detector=teacher, alpha=alpha, initialized_from_student=True)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: Detector) -> TeacherState:
    """In-place W_t = alpha * W_{t-1} + (1 - alpha) * W_student; student untouched."""
    alpha = teacher.alpha
    t_params = dict(teacher.detector.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        missing = set(t_params) ^ set(s_params)
        raise ValueError(f"teacher/student parameter names differ: {sorted(missing)[:4]}")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        t.copy_(alpha * t + (1.0 - alpha) * s)
    return teacher


@torch.no_grad()
def teacher_pseudo_labels(
    teacher: TeacherState, target_image: torch.Tensor, k_top: int = 512
) -> PseudoBatch:
    """Teacher proposals + head outputs on a clean target image (K <= k_top)."""
    det = teacher.detector
    was_training = det.training
    det.eval()
    try:
        featmap = det.extract_features(target_image)
        regions = det.propose_regions(featmap, k_top)
        head = det.rcnn_head(regions.features)
    finally:
        det.train(was_training)
    return PseudoBatch(
        proposals=regions.boxes.detach(),
        teacher_probs=head.class_probs.detach(),
        teacher_deltas=head.box_deltas.detach(),
    )


def student_on_shared_proposals(
    student: Detector, augmented_image: torch.Tensor, proposals: torch.Tensor
) -> tuple[HeadOutput, torch.Tensor]:
    """Student head outputs on the teacher's boxes; also returns the pooled features.

    Output rows follow the proposal order exactly, so teacher/student
    predictions can be compared elementwise.
    """
    featmap = student.extract_features(augmented_image)
    features = student.pool_region_features(featmap, proposals)
    return student.rcnn_head(features), features


def _row_norms(x: torch.Tensor) -> torch.Tensor:
    """Per-region L2 norms over all trailing dims, safe at exactly zero.

    sqrt has an undefined gradient at 0; rows with zero squared sum return
    the (zero-gradient) sum itself, and the sqrt argument is clamped away
    from 0 so no NaN leaks in through the masked branch.
    """
    sq = (x * x).reshape(x.shape[0], -1).sum(dim=1)
    safe = torch.sqrt(sq.clamp(min=1e-24))
    return torch.where(sq > 0, safe, sq)


def consistency_loss(
    teacher_probs: torch.Tensor,
    teacher_deltas: torch.Tensor,
    student_probs: torch.Tensor,
    student_deltas: torch.Tensor,
    weights: torch.Tensor,
) -> torch.Tensor:
    """Weighted teacher/student agreement over shared regions.

    Per region r, the classification term is || w_r * (p_T - p_S) ||_2 and
    the box term is || w~_r * (b_T - b_S) ||_2, where w is K x (C+1) and w~
    broadcasts each foreground class entry over that class's 4 box
    coordinates (the background entry weights no boxes). Both terms are
    averaged over the K regions. Teacher tensors are constants; gradients
    reach the student only.
    """
    if (weights < 0).any():
        raise ValueError("consistency weights must be non-negative")
    for name, t in (
        ("teacher_probs", teacher_probs),
        ("teacher_deltas", teacher_deltas),
        ("student_probs", student_probs),
        ("student_deltas", student_deltas),
        ("weights", weights),
    ):
        if torch.isnan(t).any():
            raise ValueError(f"consistency_loss input {name} contains NaN")
    if teacher_probs.shape != student_probs.shape or teacher_deltas.shape != student_deltas.shape:
        raise ValueError("teacher/student shapes disagree")
    if weights.shape != teacher_probs.shape:
        raise ValueError("weights must match the class probability shape")

    teacher_probs = teacher_probs.detach()
    teacher_deltas = teacher_deltas.detach()
    num_classes = teacher_deltas.shape[1]
    cls_term = _row_norms(weights * (teacher_probs - student_probs)).mean()
    box_weights = weights[:, :num_classes].unsqueeze(-1)  # K x C x 1
    box_term = _row_norms(box_weights * (teacher_deltas - student_deltas)).mean()
    return cls_term + box_term
