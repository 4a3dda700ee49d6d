"""Training loop composing the detection, consistency, and domain objectives.

Each step consumes one labeled source image and one unlabeled target image
and minimizes

    l_total = l_det + eta * (l_mt + lambda_ * l_adv)

followed by exactly one EMA update of the teacher. Before `burnin_steps`
(and whenever a term's weight is zero, or the variant excludes it) the
corresponding branch is skipped outright rather than multiplied by zero, so
a run with eta=0 is bitwise identical to supervised-only training.

Variants:
    faster_only  source-only supervised baseline
    mt_ins       mean teacher (unweighted) + a single class-agnostic
                 domain classifier
    mdbank_h     mean teacher (unweighted) + per-class bank, hard G1 gates
    mdbank       full method: entropy-weighted consistency + bank with G2

Determinism: everything downstream of `fit` is a pure function of
(config, dataset bytes). Sampling and augmentation use dedicated seeded
streams so optional branches never desynchronize the mandatory ones.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .dcbank import DomainBank, dcbank_loss, domain_accuracy, domain_scores, entropy_weights
from .detector import (
    Detector,
    DetectorConfig,
    assign_head_targets,
    annotations_to_tensors,
    detection_loss,
    image_to_tensor,
)
from .meanteacher import (
    TeacherState,
    consistency_loss,
    ema_update,
    make_teacher,
    student_on_shared_proposals,
    teacher_pseudo_labels,
)
from .synthdata import ImageSample, augment_photometric, load_manifest, load_split

VARIANTS = ("faster_only", "mt_ins", "mdbank_h", "mdbank")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "mdbank"
    steps: int = 2000
    lr: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    eta: float = 5.0
    lambda_: float = 0.1
    gamma: float = 2.0
    alpha: float = 0.99
    k_top_target: int = 512
    gate: str = "auto"
    burnin_steps: int = 500
    checkpoint_every: int = 1000
    grl_coeff: float = 1.0
    grl_ramp: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def variant_wiring(variant: str) -> dict:
    """Which loss branches a variant runs, and how the bank is gated."""
    wirings = {
        "faster_only": {"l_det": True, "l_mt": False, "l_adv": False, "bank": "none", "gate": None, "entropy_weighting": False},
        "mt_ins": {"l_det": True, "l_mt": True, "l_adv": True, "bank": "single", "gate": "G1", "entropy_weighting": False},
        "mdbank_h": {"l_det": True, "l_mt": True, "l_adv": True, "bank": "per_class", "gate": "G1", "entropy_weighting": False},
        "mdbank": {"l_det": True, "l_mt": True, "l_adv": True, "bank": "per_class", "gate": "G2", "entropy_weighting": True},
    }
    if variant not in wirings:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    return wirings[variant]


def validate_config(config: TrainConfig) -> dict:
    """Sanity-check fields and resolve gate='auto'; returns the wiring."""
    wiring = variant_wiring(config.variant)
    if config.eta < 0 or config.lambda_ < 0:
        raise ValueError("eta and lambda_ must be >= 0")
    if config.gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {config.gamma}")
    if not 0.0 <= config.alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {config.alpha}")
    if config.steps < 1 or config.k_top_target < 1:
        raise ValueError("steps and k_top_target must be >= 1")
    if config.gate != "auto":
        if wiring["bank"] != "per_class":
            raise ValueError(
                f"variant {config.variant!r} does not take an explicit gate (got {config.gate!r})"
            )
        if config.gate != wiring["gate"]:
            raise ValueError(
                f"variant {config.variant!r} is wired for gate {wiring['gate']}, "
                f"got {config.gate!r} (use the other variant instead)"
            )
    return wiring


@dataclass
class StepMetrics:
    step: int
    l_det: float
    l_mt: float
    l_adv: float
    l_total: float
    domain_acc: float | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    student: Detector
    teacher: TeacherState
    bank: DomainBank | None
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    wiring: dict
    step: int = 0
    num_classes: int = 3
    degenerate_steps: int = field(default=0, repr=False)


def init_train_state(config: TrainConfig, num_classes: int) -> TrainState:
    """Seed torch and build student/teacher/bank + optimizer."""
    wiring = validate_config(config)
    torch.manual_seed(config.seed)
    det_cfg = DetectorConfig(num_classes=num_classes)
    student = Detector(det_cfg)
    bank = None
    if wiring["bank"] == "single":
        bank = DomainBank(num_classes=0, in_dim=det_cfg.pooled_dim)
    elif wiring["bank"] == "per_class":
        bank = DomainBank(num_classes=num_classes, in_dim=det_cfg.pooled_dim)
    teacher = make_teacher(student, alpha=config.alpha)
    params = list(student.parameters()) + (list(bank.parameters()) if bank is not None else [])
    optimizer = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    return TrainState(
        student=student,
        teacher=teacher,
        bank=bank,
        optimizer=optimizer,
        config=config,
        wiring=wiring,
        num_classes=num_classes,
    )


def _grl_coeff(config: TrainConfig, step: int) -> float:
    if not config.grl_ramp:
        return config.grl_coeff
    progress = step / max(1, config.steps)
    return config.grl_coeff * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


def _check_component(name: str, value: torch.Tensor) -> torch.Tensor:
    if torch.isnan(value).any() or torch.isinf(value).any():
        raise TrainingError(f"loss component {name!r} is not finite at this step")
    return value


def train_step(
    state: TrainState,
    source_batch: list[ImageSample],
    target_batch: list[ImageSample],
    config: TrainConfig | None = None,
) -> tuple[TrainState, StepMetrics]:
    """One composite optimization step + one EMA update."""
    config = config or state.config
    wiring = state.wiring
    student = state.student
    det_cfg = student.config

    adapt = wiring["l_mt"] and config.eta > 0 and state.step >= config.burnin_steps
    if adapt and not target_batch:
        raise TrainingError(
            f"variant {config.variant!r} needs target samples once adaptation starts"
        )
    use_bank = adapt and wiring["l_adv"] and state.bank is not None and config.lambda_ > 0

    # --- supervised branch (always on)
    l_det = None
    src_features = []
    src_labels = []
    for sample in source_batch:
        if sample.annotations is None:
            raise TrainingError(f"source sample {sample.sample_id!r} is unlabeled")
        image = image_to_tensor(sample.pixels)
        featmap = student.extract_features(image)
        rpn_out = student.rpn_forward(featmap)
        regions = student.propose_regions(featmap, det_cfg.head_train_regions, rpn_out=rpn_out)
        gt_boxes, gt_classes = annotations_to_tensors(sample.annotations)
        region_boxes = torch.cat([regions.boxes, gt_boxes], dim=0)
        features = student.pool_region_features(featmap, region_boxes)
        head_out = student.rcnn_head(features)
        loss, _ = detection_loss(rpn_out, head_out, sample.annotations, region_boxes, det_cfg)
        l_det = loss if l_det is None else l_det + loss
        if use_bank:
            labels, _ = assign_head_targets(region_boxes, gt_boxes, gt_classes, det_cfg.head_fg_iou)
            columns = state.bank.num_classes
            if columns == 0:
                src_labels.append(torch.zeros_like(labels))
            else:
                src_labels.append(torch.where(labels >= 0, labels, torch.full_like(labels, columns)))
            src_features.append(features)
    l_det = _check_component("l_det", l_det / len(source_batch))

    # --- adaptation branches
    l_mt = None
    l_adv = None
    bank_aux = None
    if adapt:
        mt_terms = []
        tgt_features = []
        tgt_probs = []
        for idx, sample in enumerate(target_batch):
            pseudo = teacher_pseudo_labels(state.teacher, image_to_tensor(sample.pixels), config.k_top_target)
            aug_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 393, state.step, idx]))
            augmented = augment_photometric(sample, aug_rng)
            head_s, feats = student_on_shared_proposals(
                student, image_to_tensor(augmented.pixels), pseudo.proposals
            )
            if wiring["entropy_weighting"]:
                weights = entropy_weights(domain_scores(state.bank, feats.detach())).detach()
            else:
                weights = torch.ones_like(pseudo.teacher_probs)
            mt_terms.append(
                consistency_loss(
                    pseudo.teacher_probs, pseudo.teacher_deltas,
                    head_s.class_probs, head_s.box_deltas, weights,
                )
            )
            if use_bank:
                tgt_features.append(feats)
                if state.bank.num_classes == 0:
                    tgt_probs.append(torch.ones(feats.shape[0], 1))
                else:
                    tgt_probs.append(pseudo.teacher_probs)
        l_mt = _check_component("l_mt", sum(mt_terms) / len(mt_terms))

        if use_bank:
            loss, bank_aux = dcbank_loss(
                state.bank,
                torch.cat(src_features) if src_features else torch.zeros((0, det_cfg.pooled_dim)),
                torch.cat(src_labels) if src_labels else torch.zeros((0,), dtype=torch.long),
                torch.cat(tgt_features),
                torch.cat(tgt_probs),
                gate=wiring["gate"],
                gamma=config.gamma,
                grl_coeff=_grl_coeff(config, state.step),
            )
            l_adv = _check_component("l_adv", loss)

    total = l_det
    if l_mt is not None:
        inner = l_mt if l_adv is None else l_mt + config.lambda_ * l_adv
        total = total + config.eta * inner

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    ema_update(state.teacher, student)
    state.step += 1

    det_f = float(l_det.detach())
    mt_f = float(l_mt.detach()) if l_mt is not None else 0.0
    adv_f = float(l_adv.detach()) if l_adv is not None else 0.0
    metrics = StepMetrics(
        step=state.step,
        l_det=det_f,
        l_mt=mt_f,
        l_adv=adv_f,
        l_total=det_f + config.eta * (mt_f + config.lambda_ * adv_f),
        domain_acc=domain_accuracy(bank_aux) if bank_aux is not None else None,
    )
    return state, metrics


def _checkpoint_config(state: TrainState) -> dict:
    return {
        "detector": asdict(state.student.config),
        "train": state.config.to_dict(),
        "num_classes": state.num_classes,
        "step": state.step,
    }


def fit(
    config: TrainConfig,
    dataset_root: str | Path,
    run_dir: str | Path,
    log_fn=None,
) -> Path:
    """Train per config on the dataset; returns the populated run directory.

    The run directory receives config_echo.json, metrics.jsonl (one record
    per step), periodic checkpoints, and final student/teacher checkpoints.
    """
    wiring = validate_config(config)
    manifest = load_manifest(dataset_root)
    num_classes = int(manifest["num_classes"])

    source = load_split(dataset_root, "source")
    target = load_split(dataset_root, "target") if wiring["l_mt"] else []
    if not source:
        raise TrainingError("source split is empty")
    if wiring["l_mt"] and not target:
        raise TrainingError(f"variant {config.variant!r} needs a target split")

    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config_echo.json", "w") as f:
        json.dump({"train": config.to_dict(), "dataset_root": str(dataset_root)}, f, indent=1)

    state = init_train_state(config, num_classes)
    src_stream = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    tgt_stream = np.random.default_rng(np.random.SeedSequence([config.seed, 22]))

    with open(run_dir / "metrics.jsonl", "w") as metrics_file:
        for _ in range(config.steps):
            src = source[int(src_stream.integers(len(source)))]
            tgt_batch = []
            if wiring["l_mt"]:
                tgt_batch = [target[int(tgt_stream.integers(len(target)))]]
            state, metrics = train_step(state, [src], tgt_batch, config)
            metrics_file.write(json.dumps(metrics.to_dict()) + "\n")
            if log_fn is not None and (state.step % 100 == 0 or state.step == 1):
                log_fn(metrics)
            if config.checkpoint_every > 0 and state.step % config.checkpoint_every == 0:
                ckpt.save_checkpoint(
                    run_dir / "checkpoints" / f"step_{state.step:06d}.npz",
                    state.student,
                    state.bank,
                    _checkpoint_config(state),
                )

    ckpt.save_checkpoint(
        run_dir / "checkpoints" / "student_final.npz",
        state.student,
        state.bank,
        _checkpoint_config(state),
    )
    ckpt.save_checkpoint(
        run_dir / "checkpoints" / "teacher_final.npz",
        state.teacher.detector,
        None,
        _checkpoint_config(state),
    )
    return run_dir
