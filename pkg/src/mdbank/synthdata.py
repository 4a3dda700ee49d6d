"""Synthetic two-domain detection benchmark: colored shapes on flat backgrounds.

The source domain is rendered clean; the target domain applies a fixed
photometric restyle (hue rotation, fog blend, additive noise) on top of the
same rendering, so box annotations stay valid across domains. Every image is
a pure function of (scene spec, domain, style); scene specs derive from
(dataset seed, split, index), which makes generation deterministic and safe
to parallelize per image.

Dataset layout under a root directory:

    root/manifest.json
    root/{source,target,target_eval}/images/<sample_id>.png
    root/{source,target,target_eval}/annotations.json

The target split is the unlabeled training split: its annotation records
carry empty object lists and the loader exposes those samples without
annotations.
"""

from __future__ import annotations

import colorsys
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image

SOURCE = "source"
TARGET = "target"
SPLITS = ("source", "target", "target_eval")

CLASS_NAMES = {1: "circle", 2: "square", 3: "triangle"}
NUM_CLASSES = 3

# Per-class hue centers; the target hue rotation pushes classes toward each
# other's source colors, which is what makes class-agnostic alignment lossy.
CLASS_HUES = {1: 0.00, 2: 0.33, 3: 0.62}

MAX_OBJECT_IOU = 0.7  # scenes with heavier box overlap are rejected


class SceneSpecError(ValueError):
    """Raised for scene specs that violate layout constraints."""


@dataclass(frozen=True)
class BoxAnnotation:
    class_id: int
    box: tuple[float, float, float, float]  # x1, y1, x2, y2


@dataclass
class SceneSpec:
    """Declarative scene: object list plus the seed for appearance jitter."""

    image_size: int = 96
    objects: list[tuple[int, tuple[float, float], float, float]] = field(default_factory=list)
    background_style: str = "gradient"
    rng_seed: int = 0


@dataclass
class ImageSample:
    pixels: np.ndarray  # H x W x 3 float in [0, 1]
    domain: str
    annotations: list[BoxAnnotation] | None
    sample_id: str = ""


@dataclass(frozen=True)
class StyleParams:
    """Photometric parameters of the source-to-target domain gap."""

    fog_strength: float = 0.55
    fog_color: tuple[float, float, float] = (0.74, 0.77, 0.80)
    hue_shift: float = 0.13
    noise_sigma: float = 0.05

    def to_dict(self) -> dict:
        return {
            "fog_strength": self.fog_strength,
            "fog_color": list(self.fog_color),
            "hue_shift": self.hue_shift,
            "noise_sigma": self.noise_sigma,
        }

    @staticmethod
    def from_dict(d: dict) -> "StyleParams":
        return StyleParams(
            fog_strength=float(d["fog_strength"]),
            fog_color=tuple(float(c) for c in d["fog_color"]),
            hue_shift=float(d["hue_shift"]),
            noise_sigma=float(d["noise_sigma"]),
        )


def _shape_vertices(class_id: int, center, size: float, angle: float) -> np.ndarray | None:
    """Polygon vertices for square/triangle; None for circle."""
    cx, cy = center
    if class_id == 2:
        half = size / 2.0
        base = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    elif class_id == 3:
        radius = size / 2.0
        angles = np.deg2rad([90.0, 210.0, 330.0])
        base = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    else:
        return None
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    return base @ rot.T + np.array([cx, cy])


def tight_box(class_id: int, center, size: float, angle: float) -> tuple[float, float, float, float]:
    """Axis-aligned bounds of the analytic shape."""
    cx, cy = center
    if class_id == 1:
        r = size / 2.0
        return (cx - r, cy - r, cx + r, cy + r)
    verts = _shape_vertices(class_id, center, size, angle)
    return (
        float(verts[:, 0].min()),
        float(verts[:, 1].min()),
        float(verts[:, 0].max()),
        float(verts[:, 1].max()),
    )


def _box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def validate_scene(spec: SceneSpec) -> list[BoxAnnotation]:
    """Check layout constraints and return the tight-box annotations."""
    if len(spec.objects) > 6:
        raise SceneSpecError(f"scene has {len(spec.objects)} objects, max is 6")
    annotations = []
    for class_id, center, size, angle in spec.objects:
        if not 1 <= class_id <= NUM_CLASSES:
            raise SceneSpecError(f"class_id {class_id} outside [1, {NUM_CLASSES}]")
        box = tight_box(class_id, center, size, angle)
        if box[0] < 0 or box[1] < 0 or box[2] > spec.image_size or box[3] > spec.image_size:
            raise SceneSpecError(f"object box {box} not fully inside the image")
        annotations.append(BoxAnnotation(class_id=class_id, box=box))
    for i in range(len(annotations)):
        for j in range(i + 1, len(annotations)):
            iou = _box_iou(annotations[i].box, annotations[j].box)
            if iou > MAX_OBJECT_IOU:
                raise SceneSpecError(
                    f"objects {i} and {j} overlap with IoU {iou:.2f} > {MAX_OBJECT_IOU}"
                )
    return annotations


def _object_mask(class_id: int, center, size: float, angle: float, grid_xy) -> np.ndarray:
    """Boolean pixel mask: pixel centers inside the analytic shape."""
    px, py = grid_xy
    cx, cy = center
    if class_id == 1:
        r = size / 2.0
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    verts = _shape_vertices(class_id, center, size, angle)
    inside = np.ones(px.shape, dtype=bool)
    n = len(verts)
    # convex polygon with counterclockwise vertices: inside = left of all edges
    for k in range(n):
        ax, ay = verts[k]
        bx, by = verts[(k + 1) % n]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        inside &= cross >= 0
    return inside


def _class_color(class_id: int, rng: np.random.Generator) -> np.ndarray:
    hue = (CLASS_HUES[class_id] + rng.uniform(-0.06, 0.06)) % 1.0
    sat = rng.uniform(0.6, 0.95)
    val = rng.uniform(0.7, 1.0)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val))


def apply_target_style(pixels: np.ndarray, style: StyleParams, rng: np.random.Generator) -> np.ndarray:
    """Restyle a source rendering into the target domain (hue, fog, noise)."""
    hsv = rgb_to_hsv(np.clip(pixels, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + style.hue_shift) % 1.0
    out = hsv_to_rgb(hsv)
    fog = np.asarray(style.fog_color, dtype=out.dtype)
    out = (1.0 - style.fog_strength) * out + style.fog_strength * fog
    out = out + rng.normal(0.0, style.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def render_scene(spec: SceneSpec, domain: str, style: StyleParams = StyleParams()) -> ImageSample:
    """Rasterize a scene in the given domain.

    Annotations are the analytic tight boxes and do not depend on the
    domain; only pixels differ between source and target.
    """
    if domain not in (SOURCE, TARGET):
        raise ValueError(f"unknown domain {domain!r}")
    annotations = validate_scene(spec)
    size = spec.image_size
    rng = np.random.default_rng(np.random.SeedSequence([spec.rng_seed, 983]))

    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5
    py = ys + 0.5

    top = np.array([0.16, 0.18, 0.22]) + rng.uniform(-0.03, 0.03, size=3)
    bottom = np.array([0.26, 0.28, 0.33]) + rng.uniform(-0.03, 0.03, size=3)
    t = (py / size)[..., None]
    pixels = (1.0 - t) * top + t * bottom

    for class_id, center, obj_size, angle in spec.objects:
        color = _class_color(class_id, rng)
        mask = _object_mask(class_id, center, obj_size, angle, (px, py))
        pixels[mask] = color

    pixels = np.clip(pixels, 0.0, 1.0)
    if domain == TARGET:
        noise_rng = np.random.default_rng(np.random.SeedSequence([spec.rng_seed, 6211]))
        pixels = apply_target_style(pixels, style, noise_rng)
    return ImageSample(pixels=pixels, domain=domain, annotations=annotations)


def sample_scene(rng: np.random.Generator, image_size: int = 96, max_objects: int = 5) -> SceneSpec:
    """Draw a random scene whose boxes are inside the image and overlap lightly."""
    n_objects = int(rng.integers(1, max_objects + 1))
    objects = []
    boxes = []
    attempts = 0
    while len(objects) < n_objects and attempts < 200:
        attempts += 1
        class_id = int(rng.integers(1, NUM_CLASSES + 1))
        obj_size = float(rng.uniform(20.0, 44.0))
        # Mild tilt only: heavily rotated squares/triangles have loose
        # axis-aligned boxes and become ambiguous at this resolution.
        angle = float(rng.uniform(-0.3, 0.3))
        # half-extent of the rotated tight box, probed at the origin
        probe = tight_box(class_id, (0.0, 0.0), obj_size, angle)
        hx, hy = max(-probe[0], probe[2]), max(-probe[1], probe[3])
        margin = 1.0
        if image_size - hx - margin <= hx + margin or image_size - hy - margin <= hy + margin:
            continue
        cx = float(rng.uniform(hx + margin, image_size - hx - margin))
        cy = float(rng.uniform(hy + margin, image_size - hy - margin))
        box = tight_box(class_id, (cx, cy), obj_size, angle)
        if any(_box_iou(box, prev) > 0.45 for prev in boxes):
            continue
        objects.append((class_id, (cx, cy), obj_size, angle))
        boxes.append(box)
    seed = int(rng.integers(0, 2**31 - 1))
    return SceneSpec(image_size=image_size, objects=objects, rng_seed=seed)


def augment_photometric(image: ImageSample, rng: np.random.Generator) -> ImageSample:
    """Random contrast/saturation scaling and brightness shift; boxes untouched.

    Contrast scales around the image's gray mean, saturation blends with the
    per-pixel gray value, brightness shifts on the 0-255 scale; the result is
    clipped back to [0, 1].
    """
    contrast = rng.uniform(0.5, 1.5)
    saturation = rng.uniform(0.5, 1.5)
    brightness = rng.uniform(-32.0, 32.0) / 255.0

    pixels = np.asarray(image.pixels, dtype=np.float64)
    gray = pixels.mean(axis=2, keepdims=True)
    pixels = (pixels - gray.mean()) * contrast + gray.mean()
    gray = pixels.mean(axis=2, keepdims=True)
    pixels = (pixels - gray) * saturation + gray
    pixels = np.clip(pixels + brightness, 0.0, 1.0)
    annotations = None if image.annotations is None else list(image.annotations)
    return ImageSample(
        pixels=pixels.astype(image.pixels.dtype, copy=False),
        domain=image.domain,
        annotations=annotations,
        sample_id=image.sample_id,
    )


# ---------------------------------------------------------------------------
# dataset generation and loading


def _quantize(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)


def _annotation_record(sample: ImageSample, image_size: int, labeled: bool) -> dict:
    objects = []
    if labeled and sample.annotations:
        for ann in sample.annotations:
            objects.append({"class_id": ann.class_id, "bbox": [float(v) for v in ann.box]})
    return {
        "sample_id": sample.sample_id,
        "width": image_size,
        "height": image_size,
        "objects": objects,
    }


def generate_dataset(
    root: str | Path,
    n_source: int,
    n_target: int,
    n_eval: int,
    seed: int,
    image_size: int = 96,
    style: StyleParams = StyleParams(),
    overwrite: bool = False,
) -> Path:
    """Write the three splits plus a manifest; returns the root path."""
    counts = {"source": n_source, "target": n_target, "target_eval": n_eval}
    for name, count in counts.items():
        if count <= 0:
            raise ValueError(f"{name} count must be > 0, got {count}")
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{root} exists and is not empty (pass overwrite to replace)")
        shutil.rmtree(root)

    split_domains = {"source": SOURCE, "target": TARGET, "target_eval": TARGET}
    split_labeled = {"source": True, "target": False, "target_eval": True}
    for split_index, split in enumerate(SPLITS):
        image_dir = root / split / "images"
        image_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for i in range(counts[split]):
            rng = np.random.default_rng(np.random.SeedSequence([seed, split_index, i]))
            spec = sample_scene(rng, image_size=image_size)
            sample = render_scene(spec, split_domains[split], style)
            sample.sample_id = f"{split}_{i:06d}"
            Image.fromarray(_quantize(sample.pixels)).save(image_dir / f"{sample.sample_id}.png")
            records.append(_annotation_record(sample, image_size, split_labeled[split]))
        with open(root / split / "annotations.json", "w") as f:
            json.dump(records, f, indent=1)

    manifest = {
        "num_classes": NUM_CLASSES,
        "seed": seed,
        "image_size": image_size,
        "counts": counts,
        "style_params": style.to_dict(),
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return root


def load_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path) as f:
        return json.load(f)


def load_split(root: str | Path, split: str) -> list[ImageSample]:
    """Load a split into memory; the `target` split comes back unlabeled."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
    split_dir = Path(root) / split
    ann_path = split_dir / "annotations.json"
    if not ann_path.exists():
        raise FileNotFoundError(f"missing split annotations: {ann_path}")
    with open(ann_path) as f:
        records = json.load(f)

    labeled = split != "target"
    domain = SOURCE if split == "source" else TARGET
    samples = []
    for record in records:
        png = split_dir / "images" / f"{record['sample_id']}.png"
        pixels = np.asarray(Image.open(png).convert("RGB"), dtype=np.float32) / 255.0
        annotations = None
        if labeled:
            annotations = [
                BoxAnnotation(class_id=int(o["class_id"]), box=tuple(float(v) for v in o["bbox"]))
                for o in record["objects"]
            ]
        samples.append(
            ImageSample(
                pixels=pixels,
                domain=domain,
                annotations=annotations,
                sample_id=record["sample_id"],
            )
        )
    return samples
