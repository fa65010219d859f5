"""Manifest-driven dataset handling: tags, subject-independent splits, crops,
augmentation, and batch iteration.

A manifest is a JSON-lines file: a header object carrying the split seed and
ratios, then one record per line. Images and masks are 8-bit PNGs; mask PNGs
store raw label values {0, 1, 2}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import cv2
import numpy as np
import torch
from PIL import Image

from .geometry import NUM_CLASSES, EyeMask

RESOLUTION_AREA_THRESHOLD = 4900
SPLITS = ("train", "val", "test")
POSE_TAGS = ("near-frontal", "non-frontal")


class EmptyForegroundError(ValueError):
    """Mask has no foreground pixels, so there is nothing to crop around."""


class InsufficientSubjectsError(ValueError):
    """Fewer subjects than splits; a subject-independent split is impossible."""


def tag_resolution(native_area: int) -> str:
    """Tag a patch by its native capture area: high iff area >= 4900 px^2."""
    if native_area <= 0:
        raise ValueError(f"native area must be positive, got {native_area}")
    return "low" if native_area < RESOLUTION_AREA_THRESHOLD else "high"


@dataclass
class EyePatchRecord:
    image_path: str
    mask_path: str
    subject_id: str
    pose_tag: str = "near-frontal"
    resolution_tag: str = "high"
    occlusion_tag: bool = False
    native_area: int = 0

    def validate(self) -> None:
        if self.pose_tag not in POSE_TAGS:
            raise ValueError(f"unknown pose tag {self.pose_tag!r}")
        if self.resolution_tag not in ("high", "low"):
            raise ValueError(f"unknown resolution tag {self.resolution_tag!r}")
        if self.native_area > 0 and self.resolution_tag != tag_resolution(self.native_area):
            raise ValueError(
                f"resolution tag {self.resolution_tag!r} inconsistent with native area {self.native_area}"
            )

    def to_dict(self) -> dict:
        return {
            "image_path": self.image_path,
            "mask_path": self.mask_path,
            "subject_id": self.subject_id,
            "pose_tag": self.pose_tag,
            "resolution_tag": self.resolution_tag,
            "occlusion_tag": self.occlusion_tag,
            "native_area": self.native_area,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EyePatchRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class DatasetManifest:
    """Record list plus an optional whole-subject split assignment."""

    records: list[EyePatchRecord] = field(default_factory=list)
    split_assignment: dict[str, str] = field(default_factory=dict)  # image_path -> split
    split_seed: int | None = None
    split_ratios: tuple[int, int, int] | None = None
    base_dir: Path = field(default_factory=Path)

    def validate(self) -> None:
        paths = [r.image_path for r in self.records]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest contains duplicate image paths")
        for r in self.records:
            r.validate()
        if self.split_assignment:
            subject_splits: dict[str, str] = {}
            for r in self.records:
                split = self.split_assignment.get(r.image_path)
                if split is None:
                    continue
                if split not in SPLITS:
                    raise ValueError(f"unknown split {split!r}")
                prev = subject_splits.setdefault(r.subject_id, split)
                if prev != split:
                    raise ValueError(f"subject {r.subject_id!r} leaks across splits {prev}/{split}")

    def records_for(self, split: str) -> list[EyePatchRecord]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [r for r in self.records if self.split_assignment.get(r.image_path) == split]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def save(self, path: str | Path) -> None:
        path = Path(path)
        header = {
            "kind": "eye-patch-manifest",
            "split_seed": self.split_seed,
            "split_ratios": list(self.split_ratios) if self.split_ratios else None,
        }
        with open(path, "w") as f:
            f.write(json.dumps(header) + "\n")
            for r in self.records:
                d = r.to_dict()
                split = self.split_assignment.get(r.image_path)
                if split is not None:
                    d["split"] = split
                f.write(json.dumps(d) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        records: list[EyePatchRecord] = []
        assignment: dict[str, str] = {}
        with open(path) as f:
            header = json.loads(f.readline())
            if header.get("kind") != "eye-patch-manifest":
                raise ValueError(f"{path} is not an eye-patch manifest")
            for line in f:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                rec = EyePatchRecord.from_dict(d)
                records.append(rec)
                if d.get("split") is not None:
                    assignment[rec.image_path] = d["split"]
        ratios = header.get("split_ratios")
        return cls(
            records=records,
            split_assignment=assignment,
            split_seed=header.get("split_seed"),
            split_ratios=tuple(ratios) if ratios else None,
            base_dir=path.parent,
        )


def foreground_bbox(labels: np.ndarray) -> tuple[int, int, int, int]:
    """Tight (x0, y0, x1, y1) box of nonzero labels, end-exclusive."""
    ys, xs = np.nonzero(labels)
    if xs.size == 0:
        raise EmptyForegroundError("mask has no foreground pixels")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def crop_eye_patch(
    image: np.ndarray,
    mask: np.ndarray,
    tight_bbox: tuple[int, int, int, int],
    margin: float = 0.4,
    min_size: tuple[int, int] = (8, 4),
) -> tuple[np.ndarray, np.ndarray]:
    """Crop a 2:1 eye-centered box around the tight foreground box.

    The output shares the tight box's center and is the smallest 2:1 box
    containing the margin-expanded tight box, floored at `min_size`;
    out-of-image area is zero-padded.
    """
    if image.shape[:2] != mask.shape[:2]:
        raise ValueError("image and mask sizes differ")
    x0, y0, x1, y1 = tight_bbox
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate tight box {tight_bbox}")
    ew = (x1 - x0) * (1.0 + margin)
    eh = (y1 - y0) * (1.0 + margin)
    out_w = 2 * math.ceil(max(ew, 2.0 * eh, float(min_size[0]), 2.0 * min_size[1]) / 2.0)
    out_h = out_w // 2
    cx = 0.5 * (x0 + x1)
    cy = 0.5 * (y0 + y1)
    xs = int(math.floor(cx - out_w / 2.0 + 0.5))
    ys = int(math.floor(cy - out_h / 2.0 + 0.5))
    return (_extract(image, xs, ys, out_w, out_h), _extract(mask, xs, ys, out_w, out_h))


def _extract(arr: np.ndarray, xs: int, ys: int, w: int, h: int) -> np.ndarray:
    out = np.zeros((h, w) + arr.shape[2:], dtype=arr.dtype)
    sx0, sy0 = max(xs, 0), max(ys, 0)
    sx1, sy1 = min(xs + w, arr.shape[1]), min(ys + h, arr.shape[0])
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - ys:sy1 - ys, sx0 - xs:sx1 - xs] = arr[sy0:sy1, sx0:sx1]
    return out


def split_subject_independent(
    records: list[EyePatchRecord],
    ratios: tuple[int, int, int] = (8, 1, 1),
    seed: int = 0,
) -> dict[str, str]:
    """Assign whole subjects to train/val/test, targeting record-count ratios.

    Subjects are shuffled (seeded), processed largest-first, and assigned
    greedily to the split with the largest remaining deficit; a local
    improvement pass then moves single subjects while that reduces the total
    deviation from the targets. Deterministic given the seed.
    """
    if any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"invalid split ratios {ratios}")
    by_subject: dict[str, list[EyePatchRecord]] = {}
    for r in records:
        by_subject.setdefault(r.subject_id, []).append(r)
    if len(by_subject) < len(SPLITS):
        raise InsufficientSubjectsError(
            f"need at least {len(SPLITS)} subjects, got {len(by_subject)}"
        )
    total = len(records)
    targets = [total * r / sum(ratios) for r in ratios]

    rng = np.random.default_rng(seed)
    subjects = sorted(by_subject)
    rng.shuffle(subjects)
    subjects.sort(key=lambda s: -len(by_subject[s]))  # stable: ties keep shuffled order

    sizes = [0.0, 0.0, 0.0]
    assigned: dict[str, int] = {}
    for subj in subjects:
        deficits = [targets[i] - sizes[i] for i in range(3)]
        best = max(range(3), key=lambda i: deficits[i])
        assigned[subj] = best
        sizes[best] += len(by_subject[subj])

    def deviation(szs):
        return sum(abs(szs[i] - targets[i]) for i in range(3))

    improved = True
    while improved:
        improved = False
        for subj in subjects:
            cur = assigned[subj]
            n = len(by_subject[subj])
            for dst in range(3):
                if dst == cur:
                    continue
                trial = list(sizes)
                trial[cur] -= n
                trial[dst] += n
                if deviation(trial) < deviation(sizes) - 1e-9:
                    sizes = trial
                    assigned[subj] = dst
                    improved = True
                    break

    out: dict[str, str] = {}
    for r in records:
        out[r.image_path] = SPLITS[assigned[r.subject_id]]
    return out


def hflip_pair(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror image and mask about the vertical axis (column c -> width-1-c)."""
    return image[:, ::-1].copy(), mask[:, ::-1].copy()


def augment_hflip(
    image: np.ndarray, mask: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """With probability 0.5 flip both image and mask horizontally."""
    if image.shape[:2] != mask.shape[:2]:
        raise ValueError("image and mask sizes differ")
    if rng.random() < 0.5:
        return hflip_pair(image, mask)
    return image, mask


def resize_pair(
    image: np.ndarray, mask: np.ndarray, target: tuple[int, int] = (160, 80)
) -> tuple[np.ndarray, np.ndarray]:
    """Resize to (width, height): bilinear for the image, nearest for the mask."""
    if image.size == 0 or mask.size == 0:
        raise ValueError("cannot resize empty inputs")
    w, h = target
    if image.shape[:2] == (h, w) and mask.shape[:2] == (h, w):
        return image, mask
    image_out = cv2.resize(image, (w, h), interpolation=cv2.INTER_LINEAR)
    mask_out = cv2.resize(mask, (w, h), interpolation=cv2.INTER_NEAREST)
    return image_out, mask_out


def save_image_png(path: str | Path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] (or uint8) as an 8-bit PNG."""
    arr = image
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit PNG into float32 in [0, 1], shape (H, W) or (H, W, 3)."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def save_mask_png(path: str | Path, mask: EyeMask | np.ndarray) -> None:
    labels = mask.labels if isinstance(mask, EyeMask) else np.asarray(mask)
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def load_mask_png(path: str | Path) -> EyeMask:
    return EyeMask(np.asarray(Image.open(path), dtype=np.uint8))


def one_hot_labels(labels: np.ndarray) -> np.ndarray:
    """(H, W) labels -> (3, H, W) float32, channel order (background, sclera, iris)."""
    return np.eye(NUM_CLASSES, dtype=np.float32)[labels].transpose(2, 0, 1)


class Batch(NamedTuple):
    images: torch.Tensor       # (B, C, H, W) float32 in [0, 1]
    mask_onehot: torch.Tensor  # (B, 3, H, W) float32
    mask_labels: torch.Tensor  # (B, H, W) int64


@dataclass
class SplitArrays:
    """A whole split loaded into memory, ready for batching."""

    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N, H, W) uint8

    def __len__(self) -> int:
        return self.images.shape[0]


def load_split_arrays(
    manifest: DatasetManifest, split: str, target_size: tuple[int, int] | None = None
) -> SplitArrays:
    records = manifest.records_for(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    images, labels = [], []
    for rec in records:
        img = load_image_png(manifest.resolve(rec.image_path))
        msk = load_mask_png(manifest.resolve(rec.mask_path)).labels
        if img.shape[:2] != msk.shape[:2]:
            raise ValueError(f"image/mask size mismatch for {rec.image_path}")
        if target_size is not None:
            img, msk = resize_pair(img, msk, target_size)
        if img.ndim == 2:
            img = img[None]
        else:
            img = img.transpose(2, 0, 1)
        images.append(img.astype(np.float32))
        labels.append(msk.astype(np.uint8))
    return SplitArrays(np.stack(images), np.stack(labels))


def iterate_batches(arrays: SplitArrays, batch_size: int, shuffle_seed: int | None) -> Iterator[Batch]:
    """Yield seeded-order batches over preloaded arrays; final partial batch included."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    n = len(arrays)
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    eye = np.eye(NUM_CLASSES, dtype=np.float32)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        labels = arrays.labels[idx]
        onehot = eye[labels].transpose(0, 3, 1, 2)
        yield Batch(
            images=torch.from_numpy(arrays.images[idx].copy()),
            mask_onehot=torch.from_numpy(np.ascontiguousarray(onehot)),
            mask_labels=torch.from_numpy(labels.astype(np.int64)),
        )


def batch_iter(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    shuffle_seed: int | None = None,
    target_size: tuple[int, int] | None = None,
) -> Iterator[Batch]:
    """One epoch of batches for a manifest split, in seed-determined order."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    arrays = load_split_arrays(manifest, split, target_size)
    yield from iterate_batches(arrays, batch_size, shuffle_seed)
