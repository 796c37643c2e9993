"""End-to-end pipeline: scan -> coherent representation -> backbone ->
morphological filtering -> per-item boxes, masks and scores.

The backbone labels pixels on item contours; postprocessing turns each
surviving contour component into one detection: a filled mask, a rotated
minimum-area box, its axis-aligned envelope, and a confidence score equal
to the mean class probability over the component's pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import backbone as bb
from .imaging import (
    RotatedRect,
    connected_components,
    dilation,
    erosion,
    fill_closed_contour,
    min_bounding_rectangle,
    opening,
    rasterize_polygon,
    resize,
    resize_mask,
    to_luminance,
)
from .metrics import GroundTruthItem
from .structure_tensor import (
    CoherentRepresentation,
    GaussianSpec,
    coherent_representation,
    gradient_stack,
    modified_tensor_set,
)

FRONTENDS = ("tensor", "luminance")


@dataclass(frozen=True)
class PipelineConfig:
    m: int = 4
    k: int = 2
    gaussian: GaussianSpec = field(default_factory=GaussianSpec)
    input_size: tuple[int, int] = (128, 128)
    open_radius: int = 1
    close_radius: int = 3
    min_area: int = 20
    class_names: tuple[str, ...] = ("knife", "gun", "shuriken", "razor")
    boundary_thickness: int = 3
    include_luminance: bool = False
    frontend: str = "tensor"

    def __post_init__(self):
        if not 1 <= self.k <= self.m * (self.m + 1) // 2:
            raise ValueError(f"k={self.k} out of range for m={self.m}")
        if self.min_area < 1:
            raise ValueError("min_area must be >= 1")
        if self.frontend not in FRONTENDS:
            raise ValueError(f"frontend must be one of {FRONTENDS}")
        if not self.class_names:
            raise ValueError("need at least one class name")

    @property
    def num_classes(self) -> int:
        return len(self.class_names) + 1

    @property
    def in_channels(self) -> int:
        return 2 if self.include_luminance else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gaussian"] = {"sigma": self.gaussian.sigma, "radius": self.gaussian.radius}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        g = d.get("gaussian", {})
        return cls(
            m=int(d.get("m", 4)),
            k=int(d.get("k", 2)),
            gaussian=GaussianSpec(float(g.get("sigma", 1.0)), int(g.get("radius", 3))),
            input_size=tuple(d.get("input_size", (128, 128))),
            open_radius=int(d.get("open_radius", 1)),
            close_radius=int(d.get("close_radius", 3)),
            min_area=int(d.get("min_area", 20)),
            class_names=tuple(d.get("class_names", ("knife", "gun", "shuriken", "razor"))),
            boundary_thickness=int(d.get("boundary_thickness", 3)),
            include_luminance=bool(d.get("include_luminance", False)),
            frontend=str(d.get("frontend", "tensor")),
        )


@dataclass
class Detection:
    """One detected item with score, rotated/axis-aligned boxes and mask."""

    class_id: int
    score: float
    rbox: RotatedRect
    aabb: tuple[float, float, float, float]
    mask: np.ndarray
    class_name: str = ""


def backbone_config_for(config: PipelineConfig, stage_channels=(16, 32, 64), seed: int = 0) -> bb.BackboneConfig:
    """A backbone config whose interface matches the pipeline config."""
    return bb.BackboneConfig(
        input_size=tuple(config.input_size),
        in_channels=config.in_channels,
        num_classes=config.num_classes,
        stage_channels=tuple(stage_channels),
        seed=seed,
    )


def _check_compatible(bconf: bb.BackboneConfig, config: PipelineConfig) -> None:
    if tuple(bconf.input_size) != tuple(config.input_size):
        raise ValueError(
            f"backbone input size {bconf.input_size} != pipeline {config.input_size}"
        )
    if bconf.in_channels != config.in_channels:
        raise ValueError("backbone channel count does not match pipeline config")
    if bconf.num_classes != config.num_classes:
        raise ValueError("backbone class count does not match pipeline class names")


def preprocess(scan: np.ndarray, config: PipelineConfig) -> CoherentRepresentation:
    """Luminance-reduce, resize to the network size, fuse coherent tensors."""
    gray = to_luminance(scan)
    if gray.size == 0:
        raise ValueError("empty scan")
    gray = resize(gray, config.input_size, order=1)
    stack = gradient_stack(gray, config.m)
    tset = modified_tensor_set(stack, config.gaussian)
    return coherent_representation(tset, config.k)


def network_input(scan: np.ndarray, config: PipelineConfig) -> np.ndarray:
    """The (H, W, C) array fed to the backbone for one scan."""
    gray = resize(to_luminance(scan), config.input_size, order=1)
    if config.frontend == "tensor":
        base = preprocess(scan, config).values
    else:
        base = gray
    channels = [base]
    if config.include_luminance:
        channels.append(gray)
    return np.stack(channels, axis=-1)


def segment(scan: np.ndarray, params: dict, bconf: bb.BackboneConfig, config: PipelineConfig):
    """Per-pixel argmax label map plus the full probability volume."""
    _check_compatible(bconf, config)
    x = network_input(scan, config)
    probs = bb.forward(params, x, bconf)
    labels = probs.argmax(axis=-1)
    return labels, probs


def postprocess(
    labels: np.ndarray,
    probs: np.ndarray,
    config: PipelineConfig,
    original_size: tuple[int, int],
) -> list[Detection]:
    """Contour components -> scored detections, rescaled to native size."""
    oh, ow = original_size
    nh, nw = labels.shape
    sy, sx = oh / nh, ow / nw
    detections: list[Detection] = []
    for c in range(1, config.num_classes):
        mask = labels == c
        if config.open_radius >= 1:
            mask = opening(mask, config.open_radius, "disk")
        for comp in connected_components(mask, connectivity=8):
            if comp.area < config.min_area:
                continue
            comp_mask = np.zeros_like(mask)
            comp_mask[comp.pixels[:, 0], comp.pixels[:, 1]] = True
            filled = fill_closed_contour(comp_mask, config.close_radius)
            pts = np.stack([comp.pixels[:, 1], comp.pixels[:, 0]], axis=1).astype(float)
            rbox_net = min_bounding_rectangle(pts)
            score = float(probs[comp.pixels[:, 0], comp.pixels[:, 1], c].mean())
            corners = rbox_net.corners() * (sx, sy)
            rbox = min_bounding_rectangle(corners)
            detections.append(
                Detection(
                    class_id=c,
                    score=score,
                    rbox=rbox,
                    aabb=rbox.aabb(),
                    mask=resize_mask(filled, original_size),
                    class_name=config.class_names[c - 1],
                )
            )
    detections.sort(key=lambda d: (-d.score, d.class_id))
    return detections


def detect(scan: np.ndarray, params: dict, bconf: bb.BackboneConfig, config: PipelineConfig) -> list[Detection]:
    """Full pipeline on one scan; detections sorted by descending score."""
    labels, probs = segment(scan, params, bconf, config)
    return postprocess(labels, probs, config, np.asarray(to_luminance(scan)).shape[:2])


# ---------------------------------------------------------------------------
# training data preparation


def boundary_target(
    items: list[GroundTruthItem],
    native_size: tuple[int, int],
    config: PipelineConfig,
) -> np.ndarray:
    """Per-pixel class labels on dilated item boundaries.

    Items are painted in order, so a later item's band overwrites an
    earlier one where outlines cross.
    """
    nh, nw = config.input_size
    oh, ow = native_size
    scale = (nw / ow, nh / oh)
    target = np.zeros(config.input_size, dtype=np.int64)
    grow = max(0, (config.boundary_thickness - 1) // 2)
    for item in items:
        if item.polygon is None:
            continue
        poly = np.asarray(item.polygon, dtype=float) * scale
        mask = rasterize_polygon(poly, config.input_size)
        if not mask.any():
            continue
        band = mask & ~erosion(mask, 1, "disk")
        if grow:
            band = dilation(band, grow, "disk")
        target[band] = item.class_id
    return target


def make_training_records(
    scans: list[np.ndarray],
    annotations: list[list[GroundTruthItem]],
    config: PipelineConfig,
) -> list[bb.TrainRecord]:
    """Pair network inputs with boundary-band label maps."""
    records = []
    for scan, items in zip(scans, annotations):
        native = to_luminance(scan).shape[:2]
        records.append(
            bb.TrainRecord(
                input=network_input(scan, config).astype(np.float32),
                target=boundary_target(items, native, config),
            )
        )
    return records
