"""Deterministic pseudo-X-ray scene generator.

Scenes are composed multiplicatively: every shape is a translucent
attenuator, so the scan value at a pixel is the product of the
transmittances of all shapes covering it (background 1.0), plus mild
additive Gaussian noise.  Overlapping objects therefore darken each other
instead of hiding each other, which is the occlusion phenomenon the
detection pipeline is built around.

Threat items come from a small set of polygon templates; clutter is benign
(ellipses and rectangles) and produces no ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .imaging import bbox_of_points, rasterize_polygon, write_image, write_mask
from .metrics import GroundTruthItem

# unit-size outlines, centered at the origin, longest extent ~1
TEMPLATES: dict[str, np.ndarray] = {
    "knife": np.array([(-0.5, -0.09), (0.5, 0.0), (-0.5, 0.09), (-0.42, 0.0)]),
    "gun": np.array(
        [(-0.5, -0.3), (0.5, -0.3), (0.5, -0.05), (-0.05, -0.05), (-0.05, 0.5), (-0.35, 0.5), (-0.35, -0.05), (-0.5, -0.05)]
    ),
    "shuriken": np.array(
        [(0.5, 0.0), (0.12, 0.12), (0.0, 0.5), (-0.12, 0.12), (-0.5, 0.0), (-0.12, -0.12), (0.0, -0.5), (0.12, -0.12)]
    ),
    "razor": np.array([(-0.5, -0.18), (0.5, -0.18), (0.5, 0.18), (-0.5, 0.18)]),
}

_ELLIPSE = np.array(
    [(0.5 * math.cos(a), 0.3 * math.sin(a)) for a in np.linspace(0.0, 2.0 * math.pi, 20, endpoint=False)]
)
_RECT = np.array([(-0.5, -0.22), (0.5, -0.22), (0.5, 0.22), (-0.5, 0.22)])
CLUTTER_TEMPLATES = {"ellipse": _ELLIPSE, "rect": _RECT}


@dataclass
class ShapeSpec:
    """A posed shape: class_id 0 means clutter (no ground truth)."""

    class_id: int
    template: str
    center: tuple[float, float]
    rotation: float
    scale: float
    transmittance: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not 0.0 < self.transmittance <= 1.0:
            raise ValueError(f"transmittance must be in (0, 1], got {self.transmittance}")


@dataclass
class SceneSpec:
    """One concrete scene: posed threat items plus sampled clutter."""

    canvas: tuple[int, int] = (128, 128)
    items: list[ShapeSpec] = field(default_factory=list)
    clutter: int = 3
    occlusion_level: float = 0.0
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.occlusion_level <= 1.0:
            raise ValueError(f"occlusion level must be in [0, 1], got {self.occlusion_level}")


@dataclass
class SceneTemplate:
    """Distribution a dataset is drawn from."""

    canvas: tuple[int, int] = (128, 128)
    class_names: tuple[str, ...] = ("knife", "gun", "shuriken")
    items_per_scene: tuple[int, int] = (1, 2)
    clutter: int = 3
    occlusion_level: float = 0.3
    noise_sigma: float = 0.02
    scale_range: tuple[float, float] = (0.28, 0.42)  # fraction of min canvas side
    item_transmittance: tuple[float, float] = (0.3, 0.55)
    clutter_transmittance: tuple[float, float] = (0.6, 0.9)


def transform_polygon(template: np.ndarray, center, rotation: float, scale: float) -> np.ndarray:
    c, s = math.cos(rotation), math.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    return template @ (scale * rot.T) + np.asarray(center, dtype=float)


def shape_polygon(spec: ShapeSpec) -> np.ndarray:
    bank = TEMPLATES if spec.class_id > 0 else CLUTTER_TEMPLATES
    if spec.template not in bank:
        raise ValueError(f"unknown template {spec.template!r}")
    return transform_polygon(bank[spec.template], spec.center, spec.rotation, spec.scale)


def render_shape(spec: ShapeSpec, canvas: tuple[int, int]):
    """Rasterize one shape: (transmittance map, mask, polygon).

    The map is 1 outside the shape and ``spec.transmittance`` inside.
    """
    polygon = shape_polygon(spec)
    mask = rasterize_polygon(polygon, canvas)
    if not mask.any():
        raise ValueError(f"shape {spec.template!r} at {spec.center} lies entirely off canvas")
    tmap = np.ones(canvas, dtype=np.float64)
    tmap[mask] = spec.transmittance
    return tmap, mask, polygon


def _overlap_fraction(target_mask: np.ndarray, others: list[np.ndarray]) -> float:
    if not others:
        return 0.0
    cover = np.zeros_like(target_mask)
    for m in others:
        cover |= m
    area = int(target_mask.sum())
    if area == 0:
        return 0.0
    return float((cover & target_mask).sum() / area)


def _sample_clutter(rng, canvas, template: SceneTemplate, near=None) -> ShapeSpec:
    h, w = canvas
    size = min(h, w)
    if near is None:
        cx = rng.uniform(0.15 * w, 0.85 * w)
        cy = rng.uniform(0.15 * h, 0.85 * h)
    else:
        cx = near[0] + rng.normal(0.0, 0.18 * size)
        cy = near[1] + rng.normal(0.0, 0.18 * size)
        cx = float(np.clip(cx, 0.1 * w, 0.9 * w))
        cy = float(np.clip(cy, 0.1 * h, 0.9 * h))
    return ShapeSpec(
        class_id=0,
        template="ellipse" if rng.random() < 0.6 else "rect",
        center=(cx, cy),
        rotation=rng.uniform(0.0, 2.0 * math.pi),
        scale=size * rng.uniform(0.3, 0.55),
        transmittance=rng.uniform(*template.clutter_transmittance),
    )


def compose_scan(scene: SceneSpec, template: SceneTemplate | None = None, return_layers: bool = False):
    """Render a scene into a scan and its ground truth.

    Threat items are rendered as posed; clutter shapes are then sampled and
    placed so each threat item's covered-area fraction lands near
    ``scene.occlusion_level`` (best of up to 100 candidate placements per
    occluder).  With occlusion level 0, clutter is rejected away from every
    threat mask.  Deterministic for a fixed scene seed.
    """
    template = template or SceneTemplate(canvas=scene.canvas)
    rng = np.random.default_rng(scene.seed)
    h, w = scene.canvas

    layers = []  # (tmap, mask, is_threat)
    items = []  # (spec, mask, polygon)
    for spec in scene.items:
        tmap, mask, polygon = render_shape(spec, scene.canvas)
        layers.append((tmap, mask, True))
        items.append((spec, mask, polygon))

    threat_masks = [mask for _, mask, _ in items]
    clutter_masks: list[np.ndarray] = []
    target = scene.occlusion_level

    def place(candidate_fn, score_fn, attempts=100):
        best = None
        for _ in range(attempts):
            spec = candidate_fn()
            try:
                tmap, mask, _ = render_shape(spec, scene.canvas)
            except ValueError:
                continue
            s = score_fn(mask)
            if best is None or s < best[0]:
                best = (s, tmap, mask)
            if s == 0.0:
                break
        return best

    remaining = scene.clutter
    if target > 0:
        # one dedicated occluder per threat item, aimed at the coverage target
        for t_idx, (spec, t_mask, _) in enumerate(items):
            if remaining <= 0:
                break
            others = [m for j, m in enumerate(threat_masks) if j != t_idx] + clutter_masks

            def occlusion_error(mask, t_mask=t_mask, others=others):
                frac = _overlap_fraction(t_mask, others + [mask])
                return abs(frac - target)

            best = place(
                lambda spec=spec: _sample_clutter(rng, scene.canvas, template, near=spec.center),
                occlusion_error,
            )
            if best is not None:
                layers.append((best[1], best[2], False))
                clutter_masks.append(best[2])
                remaining -= 1

    for _ in range(max(0, remaining)):
        # free clutter must not push any threat's coverage past the target band
        def excess(mask):
            worst = 0.0
            for t_idx, (_, t_mask, _) in enumerate(items):
                others = [m for j, m in enumerate(threat_masks) if j != t_idx]
                others = others + clutter_masks + [mask]
                frac = _overlap_fraction(t_mask, others)
                worst = max(worst, max(0.0, frac - (target + 0.1)))
                if target == 0.0:
                    worst = max(worst, frac)
            return worst

        best = place(lambda: _sample_clutter(rng, scene.canvas, template), excess)
        if best is not None and (target > 0 or best[0] == 0.0):
            layers.append((best[1], best[2], False))
            clutter_masks.append(best[2])

    img = np.ones((h, w), dtype=np.float64)
    for tmap, _, _ in layers:
        img *= tmap
    if scene.noise_sigma > 0:
        img = img + rng.normal(0.0, scene.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    truths = [
        GroundTruthItem(
            class_id=spec.class_id,
            bbox=bbox_of_points(polygon),
            polygon=[(float(x), float(y)) for x, y in polygon],
        )
        for spec, mask, polygon in items
    ]
    if return_layers:
        return img, truths, [(mask, is_threat) for _, mask, is_threat in layers]
    return img, truths


def sample_scene(template: SceneTemplate, seed: int) -> SceneSpec:
    """Draw a concrete scene from the template distribution.

    Threat items are placed pairwise disjoint (occlusion comes from benign
    clutter, not from other threats).
    """
    rng = np.random.default_rng(seed)
    h, w = template.canvas
    size = min(h, w)
    n_items = int(rng.integers(template.items_per_scene[0], template.items_per_scene[1] + 1))
    items: list[ShapeSpec] = []
    masks: list[np.ndarray] = []
    for _ in range(n_items):
        for _attempt in range(100):
            name = template.class_names[int(rng.integers(len(template.class_names)))]
            scale = size * rng.uniform(*template.scale_range)
            margin = 0.55 * scale
            spec = ShapeSpec(
                class_id=template.class_names.index(name) + 1,
                template=name,
                center=(
                    rng.uniform(margin, w - margin),
                    rng.uniform(margin, h - margin),
                ),
                rotation=rng.uniform(0.0, 2.0 * math.pi),
                scale=scale,
                transmittance=rng.uniform(*template.item_transmittance),
            )
            mask = rasterize_polygon(shape_polygon(spec), template.canvas)
            if mask.any() and not any((mask & m).any() for m in masks):
                items.append(spec)
                masks.append(mask)
                break
    return SceneSpec(
        canvas=template.canvas,
        items=items,
        clutter=template.clutter,
        occlusion_level=template.occlusion_level,
        noise_sigma=template.noise_sigma,
        seed=int(np.random.SeedSequence([seed, 0xC0FFEE]).generate_state(1)[0]),
    )


def scene_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def generate_dataset(
    n: int,
    template: SceneTemplate,
    seed: int,
    out_dir,
    train_fraction: float = 0.8,
) -> dict:
    """Write ``n`` scans with annotations and masks; returns the manifest.

    Layout: images/<id>.png, annotations/<id>.json,
    masks/<id>_<item_index>.png, manifest.json.  The train/test split takes
    the first round(n * train_fraction) ids.  Fully reproducible from
    (seed, template).
    """
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    if not 0.0 < train_fraction < 1.0 and n > 1:
        raise ValueError(f"train fraction must be in (0, 1), got {train_fraction}")
    root = Path(out_dir)
    for sub in ("images", "annotations", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    ids = []
    for i in range(n):
        image_id = f"scan_{i:05d}"
        scene = sample_scene(template, scene_seed(seed, i))
        img, truths = compose_scan(scene, template)
        write_image(root / "images" / f"{image_id}.png", img)
        record = {
            "image_id": image_id,
            "items": [
                {
                    "class": template.class_names[t.class_id - 1],
                    "bbox": [float(v) for v in t.bbox],
                    "polygon": [[float(x), float(y)] for x, y in t.polygon],
                }
                for t in truths
            ],
        }
        with open(root / "annotations" / f"{image_id}.json", "w", encoding="utf-8") as f:
            json.dump(record, f, indent=1)
        for j, t in enumerate(truths):
            mask = rasterize_polygon(t.polygon, scene.canvas)
            write_mask(root / "masks" / f"{image_id}_{j}.png", mask)
        ids.append(image_id)

    n_train = int(round(n * train_fraction)) if n > 1 else 1
    n_train = min(max(n_train, 1), n)
    manifest = {
        "seed": seed,
        "n": n,
        "classes": list(template.class_names),
        "canvas": list(template.canvas),
        "occlusion_level": template.occlusion_level,
        "template": asdict(template),
        "train": ids[:n_train],
        "test": ids[n_train:],
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    return manifest


# ---------------------------------------------------------------------------
# dataset loading (shared contract for synthetic and external data)


def load_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def load_annotation(dataset_dir, image_id: str, class_names) -> list[GroundTruthItem]:
    """Read one annotation file into GroundTruthItems (class ids 1-based)."""
    path = Path(dataset_dir) / "annotations" / f"{image_id}.json"
    with open(path, encoding="utf-8") as f:
        record = json.load(f)
    name_to_id = {name: i + 1 for i, name in enumerate(class_names)}
    items = []
    for entry in record["items"]:
        items.append(
            GroundTruthItem(
                class_id=name_to_id[entry["class"]],
                bbox=tuple(entry["bbox"]),
                polygon=[tuple(p) for p in entry["polygon"]] if entry.get("polygon") else None,
                image_id=image_id,
            )
        )
    return items
