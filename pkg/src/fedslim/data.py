"""Deterministic synthetic shape scenes with box annotations.

Each image is uniform background noise with 1..N filled shapes painted over
it; every class has a fixed color so the classes are separable. Object
centers are placed in distinct grid cells (at most one ground-truth object
per cell) and every bounding box lies fully inside the image. Annotation
boxes are derived from the rendered pixel mask, so they are exact pixel
extents with an exclusive max edge.

On-disk formats:
  * images: raw little-endian file, magic "FDS1", then u32 count, u32
    channels, u32 height, u32 width, then count*C*H*W float32 values
    row-major;
  * annotations: one JSON array of {image_index, objects: [{class, box}]}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detection import GridTarget

IMAGE_MAGIC = b"FDS1"

CLASS_PALETTE = (
    (0.90, 0.25, 0.25),
    (0.25, 0.90, 0.25),
    (0.25, 0.25, 0.90),
    (0.90, 0.90, 0.25),
    (0.25, 0.90, 0.90),
    (0.90, 0.25, 0.90),
)


class GenerationError(ValueError):
    """Raised when a scene spec cannot be satisfied."""


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int] = (64, 64)
    min_objects: int = 1
    max_objects: int = 3
    classes: tuple[str, ...] = ("circle", "square", "triangle")
    min_size: float = 0.15
    max_size: float = 0.40
    noise: float = 0.05
    grid_size: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise GenerationError(
                f"object count range [{self.min_objects}, {self.max_objects}] is invalid"
            )
        if self.max_objects > self.grid_size**2:
            raise GenerationError(
                f"cannot place {self.max_objects} objects in {self.grid_size}^2 grid cells "
                "with one center per cell"
            )
        if not 0 < self.min_size <= self.max_size <= 1:
            raise GenerationError(f"size range [{self.min_size}, {self.max_size}] is invalid")
        if not 0 <= self.noise <= 1:
            raise GenerationError(f"noise amplitude must be in [0, 1], got {self.noise}")
        if len(self.classes) > len(CLASS_PALETTE):
            raise GenerationError(f"at most {len(CLASS_PALETTE)} classes supported")
        if not set(self.classes) <= {"circle", "square", "triangle"}:
            raise GenerationError(f"unknown shape classes in {self.classes}")


@dataclass(frozen=True)
class ObjectAnnotation:
    class_id: int
    box: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max in pixels


def _shape_mask(kind: str, cx: float, cy: float, half: float, h: int, w: int) -> np.ndarray:
    ys = (np.arange(h) + 0.5)[:, None]
    xs = (np.arange(w) + 0.5)[None, :]
    if kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half**2
    if kind == "square":
        return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    if kind == "triangle":
        row_half = (ys - cy + half) / 2.0
        return (np.abs(xs - cx) <= row_half) & (ys >= cy - half) & (ys <= cy + half)
    raise GenerationError(f"unknown shape kind {kind!r}")


def generate(spec: SceneSpec, count: int) -> list[tuple[np.ndarray, list[ObjectAnnotation]]]:
    """Render ``count`` scenes; deterministic in (spec, count) and per image."""
    spec.validate()
    if count < 1:
        raise GenerationError(f"count must be >= 1, got {count}")
    h, w = spec.image_size
    s = spec.grid_size
    cell_h, cell_w = h / s, w / s
    min_half = max(2.0, spec.min_size * min(h, w) / 2.0)
    max_half = spec.max_size * min(h, w) / 2.0
    out = []
    for index in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(index,)))
        image = spec.noise * rng.random((3, h, w))
        n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        cells = rng.choice(s * s, size=n_obj, replace=False)
        annotations: list[ObjectAnnotation] = []
        for cell in cells:
            row, col = int(cell) // s, int(cell) % s
            class_id = int(rng.integers(len(spec.classes)))
            # 1px margin from cell edges: the pixel-quantized box center can
            # move up to 0.5px from the sampled center and must stay in-cell
            lo_x = max(col * cell_w + 1.0, min_half)
            hi_x = min((col + 1) * cell_w - 1.0, w - min_half)
            lo_y = max(row * cell_h + 1.0, min_half)
            hi_y = min((row + 1) * cell_h - 1.0, h - min_half)
            if lo_x >= hi_x or lo_y >= hi_y:
                raise GenerationError(
                    f"cell ({row}, {col}) leaves no room for a {min_half * 2:.0f}px object"
                )
            cx = rng.uniform(lo_x, hi_x)
            cy = rng.uniform(lo_y, hi_y)
            fit = min(max_half, cx, w - cx, cy, h - cy)
            half = rng.uniform(min_half, max(min_half, fit))
            mask = _shape_mask(spec.classes[class_id], cx, cy, half, h, w)
            color = CLASS_PALETTE[class_id]
            for ch in range(3):
                image[ch][mask] = color[ch]
            rows = np.flatnonzero(mask.any(axis=1))
            cols_nz = np.flatnonzero(mask.any(axis=0))
            box = (float(cols_nz[0]), float(rows[0]), float(cols_nz[-1] + 1), float(rows[-1] + 1))
            bc_col = min(int((box[0] + box[2]) / 2 / cell_w), s - 1)
            bc_row = min(int((box[1] + box[3]) / 2 / cell_h), s - 1)
            if (bc_row, bc_col) != (row, col):
                raise GenerationError(
                    f"image {index}: rendered box center left its cell ({row}, {col})"
                )
            annotations.append(ObjectAnnotation(class_id=class_id, box=box))
        out.append((image, annotations))
    return out


def partition(count: int, num_clients: int, rng: np.random.Generator) -> list[list[int]]:
    """Disjoint equal-size random index subsets; remainder images unassigned."""
    if num_clients < 1:
        raise ValueError(f"need at least one client, got {num_clients}")
    if count < num_clients:
        raise ValueError(f"cannot split {count} images across {num_clients} clients")
    size = count // num_clients
    perm = rng.permutation(count)
    return [sorted(int(i) for i in perm[k * size : (k + 1) * size]) for k in range(num_clients)]


def encode_grid_target(
    annotations: list[ObjectAnnotation],
    grid_size: int,
    image_size: tuple[int, int],
    num_classes: int,
) -> GridTarget:
    """Turn one image's annotations into per-cell detector targets."""
    h, w = image_size
    s = grid_size
    cell_h, cell_w = h / s, w / s
    objectness = np.zeros((s, s))
    boxes = np.zeros((s, s, 4))
    onehot = np.zeros((s, s, num_classes))
    for ann in annotations:
        x0, y0, x1, y1 = ann.box
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ValueError(f"annotation box {ann.box} leaves the {w}x{h} image")
        if not 0 <= ann.class_id < num_classes:
            raise ValueError(f"class id {ann.class_id} out of range for {num_classes} classes")
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        col = min(int(cx / cell_w), s - 1)
        row = min(int(cy / cell_h), s - 1)
        if objectness[row, col]:
            raise ValueError(f"two object centers fall in grid cell ({row}, {col})")
        objectness[row, col] = 1.0
        boxes[row, col] = (cx / cell_w - col, cy / cell_h - row, (x1 - x0) / w, (y1 - y0) / h)
        onehot[row, col, ann.class_id] = 1.0
    return GridTarget(objectness=objectness, boxes=boxes, class_onehot=onehot)


# ---------------------------------------------------------------------------
# bulk container and on-disk formats
# ---------------------------------------------------------------------------


@dataclass
class DetectionDataset:
    images: np.ndarray  # (count, 3, H, W) float64 in [0, 1]
    annotations: list[list[ObjectAnnotation]]

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.images.shape[2], self.images.shape[3])

    def ground_truths(self) -> list[tuple[int, int, tuple[float, float, float, float]]]:
        return [
            (i, ann.class_id, ann.box)
            for i, anns in enumerate(self.annotations)
            for ann in anns
        ]


def make_dataset(spec: SceneSpec, count: int) -> DetectionDataset:
    pairs = generate(spec, count)
    return DetectionDataset(
        images=np.stack([img for img, _ in pairs]),
        annotations=[anns for _, anns in pairs],
    )


def save_images(path, images: np.ndarray) -> None:
    count, channels, h, w = images.shape
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(np.array([count, channels, h, w], dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(images, dtype="<f4").tobytes())


def load_images(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != IMAGE_MAGIC:
        raise ValueError(f"{path} is not an image file (bad magic {raw[:4]!r})")
    count, channels, h, w = np.frombuffer(raw, dtype="<u4", count=4, offset=4)
    data = np.frombuffer(raw, dtype="<f4", offset=20, count=count * channels * h * w)
    return data.astype(np.float64).reshape(count, channels, h, w)


def save_annotations(path, annotations: list[list[ObjectAnnotation]]) -> None:
    doc = [
        {
            "image_index": i,
            "objects": [{"class": a.class_id, "box": list(a.box)} for a in anns],
        }
        for i, anns in enumerate(annotations)
    ]
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_annotations(path) -> list[list[ObjectAnnotation]]:
    with open(path) as f:
        doc = json.load(f)
    by_index = {rec["image_index"]: rec["objects"] for rec in doc}
    out = []
    for i in range(len(doc)):
        objects = by_index.get(i)
        if objects is None:
            raise ValueError(f"annotation file {path} is missing image index {i}")
        out.append(
            [ObjectAnnotation(class_id=int(o["class"]), box=tuple(o["box"])) for o in objects]
        )
    return out


def save_dataset(directory, dataset: DetectionDataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_images(directory / "images.fds", dataset.images)
    save_annotations(directory / "annotations.json", dataset.annotations)


def load_dataset(directory) -> DetectionDataset:
    directory = Path(directory)
    images = load_images(directory / "images.fds")
    annotations = load_annotations(directory / "annotations.json")
    if len(annotations) != images.shape[0]:
        raise ValueError(
            f"{directory}: {images.shape[0]} images but {len(annotations)} annotation records"
        )
    return DetectionDataset(images=images, annotations=annotations)
