"""Synthetic shapes dataset, labeled/unlabeled partitioning, CutMix, and batch iteration.

The dataset stands in for a real segmentation corpus at desk scale: each
image holds 1-3 colored shapes (rectangle, disk, triangle) on a noisy
background, with the mask tracing the geometry exactly.  Colors correlate
with classes but jitter enough that a color lookup alone stays imperfect,
which is what leaves room for the unlabeled data to help.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

NOISE_SIGMA = 0.05
COLOR_JITTER = 0.22
# background + up to 7 foreground base colors; K-1 of them are used
_PALETTE = np.array(
    [
        [0.30, 0.30, 0.30],
        [0.75, 0.30, 0.25],
        [0.30, 0.70, 0.35],
        [0.30, 0.40, 0.75],
        [0.75, 0.70, 0.25],
        [0.65, 0.30, 0.70],
        [0.25, 0.70, 0.70],
        [0.80, 0.55, 0.35],
    ]
)


def derive_seed(base: int, label: str) -> int:
    """Stable per-component seed from one run seed."""
    digest = hashlib.sha256(f"{base}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


@dataclass
class SegSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    mask: np.ndarray  # [H, W] int64 in [0, K)
    id: int


@dataclass
class LabeledBatch:
    images: np.ndarray  # [B, 3, H, W]
    masks: np.ndarray  # [B, H, W]


@dataclass
class UnlabeledBatch:
    # no mask field on purpose: the training path must never see these labels
    images: np.ndarray  # [B, 3, H, W]


@dataclass
class Partition:
    labeled_ids: list[int]
    unlabeled_ids: list[int]
    ratio: Fraction
    seed: int


def _shape_mask(kind: str, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean [H, W] footprint of one randomly placed shape."""
    yy, xx = np.mgrid[0:height, 0:width]
    size = rng.uniform(min(height, width) / 7.0, min(height, width) / 3.0)
    cy = rng.uniform(size, height - size)
    cx = rng.uniform(size, width - size)
    if kind == "rectangle":
        half_h = size * rng.uniform(0.6, 1.0)
        half_w = size * rng.uniform(0.6, 1.0)
        return (np.abs(yy - cy) <= half_h) & (np.abs(xx - cx) <= half_w)
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2
    if kind == "triangle":
        angles = rng.uniform(0.0, 2.0 * np.pi) + np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
        points = np.stack([cx + size * np.cos(angles), cy + size * np.sin(angles)], axis=1)
        e1, e2 = points[1] - points[0], points[2] - points[0]
        orientation = np.sign(e1[0] * e2[1] - e1[1] * e2[0])
        inside = np.ones((height, width), dtype=bool)
        for i in range(3):
            x0, y0 = points[i]
            x1, y1 = points[(i + 1) % 3]
            inside &= orientation * ((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)) >= 0
        return inside
    raise ValueError(f"unknown shape kind {kind!r}")


def generate_shapes_dataset(
    n: int, height: int, width: int, num_classes: int, seed: int
) -> list[SegSample]:
    """Deterministic synthetic dataset of ``n`` multi-class segmentation samples.

    Every image contains 1-3 shapes; shape classes cycle through the
    foreground classes so each of them is guaranteed to appear as soon as
    there are at least K-1 shapes in total.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes (background + 1), got {num_classes}")
    if num_classes > _PALETTE.shape[0]:
        raise ValueError(f"at most {_PALETTE.shape[0]} classes supported, got {num_classes}")
    if n < 1 or height < 8 or width < 8:
        raise ValueError(f"invalid dataset dims n={n}, size={height}x{width}")
    rng = np.random.default_rng(seed)
    kinds = ("rectangle", "disk", "triangle")
    samples = []
    class_cursor = 0
    for sample_id in range(n):
        background = _PALETTE[0] + rng.uniform(-0.08, 0.08, size=3)
        image = np.broadcast_to(background[:, None, None], (3, height, width)).copy()
        mask = np.zeros((height, width), dtype=np.int64)
        for _ in range(int(rng.integers(1, 4))):
            cls = 1 + class_cursor % (num_classes - 1)
            class_cursor += 1
            kind = kinds[int(rng.integers(0, len(kinds)))]
            footprint = _shape_mask(kind, height, width, rng)
            color = np.clip(_PALETTE[cls] + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3), 0.05, 0.95)
            image[:, footprint] = color[:, None]
            mask[footprint] = cls
        image = image + rng.normal(0.0, NOISE_SIGMA, size=image.shape)
        samples.append(
            SegSample(image=np.clip(image, 0.0, 1.0).astype(np.float32), mask=mask, id=sample_id)
        )
    return samples


def save_dataset(samples: list[SegSample], out_dir: str | Path, num_classes: int, seed: int) -> Path:
    """Persist as images/<id>.png + masks/<id>.png + manifest.json."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    height, width = samples[0].mask.shape
    for sample in samples:
        rgb = np.round(sample.image * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb, mode="RGB").save(out / "images" / f"{sample.id:05d}.png")
        Image.fromarray(sample.mask.astype(np.uint8), mode="L").save(out / "masks" / f"{sample.id:05d}.png")
    manifest = {
        "ids": [s.id for s in samples],
        "num_classes": num_classes,
        "height": height,
        "width": width,
        "seed": seed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_dataset(dataset_dir: str | Path) -> tuple[list[SegSample], dict]:
    """Load a persisted dataset; returns (samples, manifest)."""
    root = Path(dataset_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for sample_id in manifest["ids"]:
        image = np.asarray(Image.open(root / "images" / f"{sample_id:05d}.png"), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(root / "masks" / f"{sample_id:05d}.png"), dtype=np.int64)
        samples.append(SegSample(image=image.transpose(2, 0, 1), mask=mask, id=sample_id))
    return samples, manifest


def partition_dataset(ids: list[int], ratio: Fraction | float, seed: int) -> Partition:
    """Shuffle ids by seed; the first floor(ratio * n) become the labeled set."""
    ratio = Fraction(ratio).limit_denominator(10**6)
    if not 0 < ratio <= 1:
        raise ValueError(f"label ratio must lie in (0, 1], got {ratio}")
    order = list(np.random.default_rng(seed).permutation(len(ids)))
    shuffled = [ids[i] for i in order]
    n_labeled = int(len(ids) * ratio)
    if n_labeled < 1:
        raise ValueError(f"ratio {ratio} yields an empty labeled set for {len(ids)} samples")
    return Partition(
        labeled_ids=shuffled[:n_labeled],
        unlabeled_ids=shuffled[n_labeled:],
        ratio=ratio,
        seed=seed,
    )


def save_partition(partition: Partition, path: str | Path) -> None:
    lines = [str(i) for i in partition.labeled_ids] + ["--"] + [str(i) for i in partition.unlabeled_ids]
    Path(path).write_text("\n".join(lines) + "\n")


def load_partition(path: str | Path) -> tuple[list[int], list[int]]:
    labeled, unlabeled = [], []
    current = labeled
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line == "--":
            current = unlabeled
        elif line:
            current.append(int(line))
    return labeled, unlabeled


def sample_cutmix_box(height: int, width: int, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """One CutMix box (y0, x0, y1, x1), image-aspect shaped, fully inside the frame.

    The area fraction is uniform in (0, 1); side lengths scale with its
    square root so the box keeps the image's aspect ratio.
    """
    area = rng.uniform(0.0, 1.0)
    box_h = int(round(height * np.sqrt(area)))
    box_w = int(round(width * np.sqrt(area)))
    y0 = int(rng.integers(0, height - box_h + 1))
    x0 = int(rng.integers(0, width - box_w + 1))
    return y0, x0, y0 + box_h, x0 + box_w


def cutmix(
    images_a: np.ndarray,
    masks_a: np.ndarray,
    images_b: np.ndarray,
    masks_b: np.ndarray,
    seed: int,
) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int, int, int]]]:
    """Paste one random box per image from batch b into batch a, in image and mask alike.

    Returns the mixed images, mixed masks, and the boxes so the caller can
    apply the identical mix to any other per-pixel target.
    """
    if images_a.shape != images_b.shape or masks_a.shape != masks_b.shape:
        raise ValueError("cutmix requires equally shaped batches")
    rng = np.random.default_rng(seed)
    mixed_images = images_a.copy()
    mixed_masks = masks_a.copy()
    boxes = []
    height, width = masks_a.shape[-2:]
    for i in range(images_a.shape[0]):
        y0, x0, y1, x1 = sample_cutmix_box(height, width, rng)
        mixed_images[i, :, y0:y1, x0:x1] = images_b[i, :, y0:y1, x0:x1]
        mixed_masks[i, y0:y1, x0:x1] = masks_b[i, y0:y1, x0:x1]
        boxes.append((y0, x0, y1, x1))
    return mixed_images, mixed_masks, boxes


def apply_boxes(target_a: np.ndarray, target_b: np.ndarray, boxes: list[tuple[int, int, int, int]]) -> np.ndarray:
    """Re-apply previously sampled boxes to another per-pixel target pair."""
    mixed = target_a.copy()
    for i, (y0, x0, y1, x1) in enumerate(boxes):
        mixed[i, ..., y0:y1, x0:x1] = target_b[i, ..., y0:y1, x0:x1]
    return mixed


class BatchStream:
    """Deterministic infinite stream over a sample set, reshuffled each epoch.

    The ids of batch ``t`` are a pure function of (seed, t), so resuming a
    run at any iteration reproduces the original sequence without replay.
    """

    def __init__(self, ids: list[int], batch_size: int, seed: int, name: str):
        if not ids:
            raise ValueError(f"batch stream {name!r} over an empty set")
        if batch_size < 1:
            raise ValueError(f"batch size must be positive, got {batch_size}")
        self.ids = list(ids)
        self.batch_size = batch_size
        self.seed = seed
        self.name = name
        self._perm_cache: tuple[int, np.ndarray] | None = None
        if batch_size > len(ids):
            warnings.warn(
                f"batch size {batch_size} exceeds the {len(ids)} samples of set {name!r}; "
                "samples will repeat within a batch",
                stacklevel=2,
            )

    def _perm(self, epoch: int) -> np.ndarray:
        if self._perm_cache is not None and self._perm_cache[0] == epoch:
            return self._perm_cache[1]
        rng = np.random.default_rng(derive_seed(self.seed, f"{self.name}/epoch{epoch}"))
        perm = rng.permutation(len(self.ids))
        self._perm_cache = (epoch, perm)
        return perm

    def batch_ids(self, step: int) -> list[int]:
        n = len(self.ids)
        out = []
        for j in range(self.batch_size):
            position = step * self.batch_size + j
            perm = self._perm(position // n)
            out.append(self.ids[perm[position % n]])
        return out


def assemble_labeled(samples_by_id: dict[int, SegSample], ids: list[int]) -> LabeledBatch:
    return LabeledBatch(
        images=np.stack([samples_by_id[i].image for i in ids]),
        masks=np.stack([samples_by_id[i].mask for i in ids]),
    )


def assemble_unlabeled(samples_by_id: dict[int, SegSample], ids: list[int]) -> UnlabeledBatch:
    return UnlabeledBatch(images=np.stack([samples_by_id[i].image for i in ids]))
