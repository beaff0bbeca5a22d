"""Dataset ingestion, split management, augmentation, synthetic data.

Images are float32 H x W x 3 in [0, 1]; masks are uint8 H x W in {0, 1}.
Splits are value objects: dropping a sample's label for the unlabeled
partition strips the mask but keeps the image, so downstream code cannot
accidentally peek at ground truth of "unlabeled" data.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .seeding import rng_for

DATASET_LAYOUTS = ("kvasir_seg", "covid_qu_ex", "flat_pairs")
_IMG_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

MANIFEST_VERSION = 1


class DatasetError(Exception):
    """Base class for dataset ingestion failures."""


class MissingMaskError(DatasetError):
    def __init__(self, stems: Sequence[str]):
        self.stems = sorted(stems)
        super().__init__(f"images without a matching mask: {', '.join(self.stems)}")


class UnreadableFileError(DatasetError):
    def __init__(self, path: Path):
        self.path = Path(path)
        super().__init__(f"could not read {path}")


class EmptyDatasetError(DatasetError):
    pass


class DuplicateIdError(DatasetError):
    def __init__(self, ids: Sequence[str]):
        self.ids = sorted(ids)
        super().__init__(f"duplicate sample ids: {', '.join(self.ids)}")


class SplitError(ValueError):
    """Invalid split parameters or impossible partition."""


@dataclass
class ImageSample:
    """One image with an optional binary ground-truth mask."""

    id: str
    image: np.ndarray
    mask: Optional[np.ndarray] = None
    source: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be H x W x 3, got {self.image.shape}")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise ValueError("image intensities must lie in [0, 1]")
        if self.mask is not None:
            if self.mask.shape != self.image.shape[:2]:
                raise ValueError(
                    f"mask shape {self.mask.shape} != image shape {self.image.shape[:2]}"
                )
            bad = np.setdiff1d(np.unique(self.mask), [0, 1])
            if bad.size:
                raise ValueError(f"mask must be binary, found values {bad[:8]}")

    def without_mask(self) -> "ImageSample":
        return dataclasses.replace(self, mask=None)


@dataclass(frozen=True)
class SplitManifest:
    """Immutable assignment of sample ids to the four partitions."""

    labeled_ids: Tuple[str, ...]
    unlabeled_ids: Tuple[str, ...]
    val_ids: Tuple[str, ...]
    test_ids: Tuple[str, ...]
    labeled_fraction: float
    seed: int

    def __post_init__(self):
        groups = [self.labeled_ids, self.unlabeled_ids, self.val_ids, self.test_ids]
        total = sum(len(g) for g in groups)
        if len(set().union(*map(set, groups))) != total:
            raise SplitError("partitions are not pairwise disjoint")

    def to_json_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "labeled_fraction": self.labeled_fraction,
            "labeled_ids": list(self.labeled_ids),
            "unlabeled_ids": list(self.unlabeled_ids),
            "val_ids": list(self.val_ids),
            "test_ids": list(self.test_ids),
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "SplitManifest":
        if doc.get("version") != MANIFEST_VERSION:
            raise SplitError(f"unsupported manifest version {doc.get('version')!r}")
        return SplitManifest(
            labeled_ids=tuple(doc["labeled_ids"]),
            unlabeled_ids=tuple(doc["unlabeled_ids"]),
            val_ids=tuple(doc["val_ids"]),
            test_ids=tuple(doc["test_ids"]),
            labeled_fraction=float(doc["labeled_fraction"]),
            seed=int(doc["seed"]),
        )

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True))

    @staticmethod
    def load(path: Path) -> "SplitManifest":
        return SplitManifest.from_json_dict(json.loads(Path(path).read_text()))


@dataclass
class AugmentationConfig:
    """Geometry normalization plus stochastic flips / rotation / transpose.

    With ``enabled`` off only the deterministic resize + center crop runs,
    which is the validation/test path. Rotation defaults to 90-degree
    multiples so masks stay exact; ``free_angle`` switches to arbitrary
    angles with nearest-neighbor mask resampling.
    """

    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    transpose_prob: float = 0.5
    resize_shortest_side: int = 224
    crop_size: int = 224
    enabled: bool = True
    free_angle: bool = False

    def __post_init__(self):
        for name in ("flip_prob", "rotate_prob", "transpose_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.crop_size > self.resize_shortest_side:
            raise ValueError(
                f"crop_size {self.crop_size} exceeds resize_shortest_side {self.resize_shortest_side}"
            )


def _read_image(path: Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise UnreadableFileError(path)
    return cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def _read_mask(path: Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise UnreadableFileError(path)
    # datasets store masks as 0/255 (or 0/65535) images; binarize at half range
    max_intensity = np.iinfo(raw.dtype).max if raw.dtype.kind in "ui" else 1.0
    return (raw.astype(np.float64) >= 0.5 * max_intensity).astype(np.uint8)


def _index_by_stem(directory: Path) -> Dict[str, Path]:
    index: Dict[str, Path] = {}
    dupes = []
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in _IMG_EXTS or not p.is_file():
            continue
        if p.stem in index:
            dupes.append(p.stem)
        index[p.stem] = p
    if dupes:
        raise DuplicateIdError(dupes)
    return index


def _load_pair_dir(images_dir: Path, masks_dir: Path, source: str) -> List[ImageSample]:
    if not images_dir.is_dir():
        raise DatasetError(f"missing directory {images_dir}")
    if not masks_dir.is_dir():
        raise DatasetError(f"missing directory {masks_dir}")
    images = _index_by_stem(images_dir)
    masks = _index_by_stem(masks_dir)
    orphans = sorted(set(images) - set(masks))
    if orphans:
        raise MissingMaskError(orphans)
    samples = []
    for stem, img_path in sorted(images.items()):
        samples.append(
            ImageSample(id=stem, image=_read_image(img_path), mask=_read_mask(masks[stem]), source=source)
        )
    return samples


def load_dataset(root_path: Path, layout: str) -> List[ImageSample]:
    """Load an on-disk dataset.

    Layouts:
      * ``kvasir_seg``   - root/images/, root/masks/, matching stems
      * ``covid_qu_ex``  - root/{Train,Val,Test}/, each with images/ and
        "lung masks"/; the subdir name is recorded in ``source`` so the
        provided pre-split can be honored downstream
      * ``flat_pairs``   - root/<stem>.img.<ext> + root/<stem>.mask.<ext>
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if layout not in DATASET_LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}, expected one of {DATASET_LAYOUTS}")

    if layout == "kvasir_seg":
        samples = _load_pair_dir(root / "images", root / "masks", source="kvasir_seg")
    elif layout == "covid_qu_ex":
        samples = []
        seen: Dict[str, str] = {}
        for part in ("Train", "Val", "Test"):
            part_dir = root / part
            if not part_dir.is_dir():
                raise DatasetError(f"missing pre-split directory {part_dir}")
            part_samples = _load_pair_dir(
                part_dir / "images", part_dir / "lung masks", source=f"covid_qu_ex:{part}"
            )
            clashes = [s.id for s in part_samples if s.id in seen]
            if clashes:
                raise DuplicateIdError(clashes)
            seen.update({s.id: part for s in part_samples})
            samples.extend(part_samples)
    else:
        samples = []
        stems: Dict[str, Dict[str, Path]] = {}
        for p in sorted(root.iterdir()):
            if not p.is_file() or p.suffix.lower() not in _IMG_EXTS:
                continue
            inner = Path(p.stem)
            kind = inner.suffix.lstrip(".")
            if kind not in ("img", "mask"):
                continue
            stems.setdefault(inner.stem, {})[kind] = p
        orphans = [stem for stem, kinds in stems.items() if "mask" not in kinds]
        if orphans:
            raise MissingMaskError(orphans)
        for stem in sorted(stems):
            kinds = stems[stem]
            if "img" not in kinds:
                continue
            samples.append(
                ImageSample(
                    id=stem,
                    image=_read_image(kinds["img"]),
                    mask=_read_mask(kinds["mask"]),
                    source="flat_pairs",
                )
            )

    if not samples:
        raise EmptyDatasetError(f"no samples found under {root} for layout {layout}")
    return samples


def presplit_from_sources(samples: Sequence[ImageSample]) -> Optional[Dict[str, List[str]]]:
    """Recover a fixed train/val/test partition from ``source`` tags, if any."""
    parts: Dict[str, List[str]] = {"train": [], "val": [], "test": []}
    tagged = 0
    for s in samples:
        _, _, part = s.source.partition(":")
        key = part.lower()
        if key in parts:
            parts[key].append(s.id)
            tagged += 1
    if tagged != len(samples) or not all(parts.values()):
        return None
    return parts


def make_split(
    samples: Sequence[ImageSample],
    labeled_fraction: float,
    val_fraction: float = 0.1,
    test_fraction: float = 0.1,
    seed: int = 0,
    presplit: Optional[Dict[str, Sequence[str]]] = None,
) -> SplitManifest:
    """Partition sample ids into labeled/unlabeled/val/test.

    With ``presplit`` given (fixed train/val/test id lists, as shipped with
    COVID-QU-Ex) the val and test partitions are honored as-is and
    ``labeled_fraction`` is applied only within the fixed training ids.
    """
    if not 0.0 < labeled_fraction <= 1.0:
        raise SplitError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    ids = sorted(s.id for s in samples)
    if len(set(ids)) != len(ids):
        seen, dupes = set(), set()
        for i in ids:
            (dupes if i in seen else seen).add(i)
        raise DuplicateIdError(sorted(dupes))

    rng = rng_for(seed, "split")
    if presplit is not None:
        train = list(presplit["train"])
        val = list(presplit["val"])
        test = list(presplit["test"])
        known = set(ids)
        missing = [i for part in (train, val, test) for i in part if i not in known]
        if missing:
            raise SplitError(f"presplit references unknown ids: {missing[:8]}")
    else:
        if not 0.0 < val_fraction <= 1.0 or not 0.0 < test_fraction <= 1.0:
            raise SplitError("val_fraction and test_fraction must be in (0, 1]")
        if val_fraction + test_fraction >= 1.0:
            raise SplitError("val_fraction + test_fraction must be < 1")
        perm = [ids[i] for i in rng.permutation(len(ids))]
        n_test = round(test_fraction * len(ids))
        n_val = round(val_fraction * len(ids))
        test = perm[:n_test]
        val = perm[n_test : n_test + n_val]
        train = perm[n_test + n_val :]

    train_perm = [train[i] for i in rng.permutation(len(train))]
    n_labeled = round(labeled_fraction * len(train))
    labeled = train_perm[:n_labeled]
    unlabeled = train_perm[n_labeled:]

    for name, part in (("labeled", labeled), ("val", val), ("test", test)):
        if not part:
            raise SplitError(f"{name} partition would be empty")

    return SplitManifest(
        labeled_ids=tuple(sorted(labeled)),
        unlabeled_ids=tuple(sorted(unlabeled)),
        val_ids=tuple(sorted(val)),
        test_ids=tuple(sorted(test)),
        labeled_fraction=labeled_fraction,
        seed=seed,
    )


@dataclass
class SplitPartitions:
    labeled: List[ImageSample]
    unlabeled: List[ImageSample]
    val: List[ImageSample]
    test: List[ImageSample]


def partition(samples: Sequence[ImageSample], manifest: SplitManifest) -> SplitPartitions:
    """Materialize the manifest; unlabeled samples have their masks stripped."""
    by_id = {s.id: s for s in samples}
    missing = [
        i
        for group in (manifest.labeled_ids, manifest.unlabeled_ids, manifest.val_ids, manifest.test_ids)
        for i in group
        if i not in by_id
    ]
    if missing:
        raise SplitError(f"manifest references unknown ids: {missing[:8]}")
    return SplitPartitions(
        labeled=[by_id[i] for i in manifest.labeled_ids],
        unlabeled=[by_id[i].without_mask() for i in manifest.unlabeled_ids],
        val=[by_id[i] for i in manifest.val_ids],
        test=[by_id[i] for i in manifest.test_ids],
    )


def _resize_pair(
    image: np.ndarray, mask: Optional[np.ndarray], shortest: int
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    h, w = image.shape[:2]
    if h <= w:
        nh, nw = shortest, round(w * shortest / h)
    else:
        nh, nw = round(h * shortest / w), shortest
    if (nh, nw) == (h, w):
        return image, mask
    image = cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR)
    if mask is not None:
        mask = cv2.resize(mask, (nw, nh), interpolation=cv2.INTER_NEAREST)
    return image, mask


def _center_crop(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[:2]
    assert h >= size and w >= size, "image smaller than crop after resize"
    top = (h - size) // 2
    left = (w - size) // 2
    return arr[top : top + size, left : left + size]


def _rotate_free(image: np.ndarray, mask: Optional[np.ndarray], angle: float):
    h, w = image.shape[:2]
    m = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, 1.0)
    image = cv2.warpAffine(image, m, (w, h), flags=cv2.INTER_LINEAR, borderValue=0)
    if mask is not None:
        mask = cv2.warpAffine(mask, m, (w, h), flags=cv2.INTER_NEAREST, borderValue=0)
    return image, mask


def augment(
    sample: ImageSample, config: AugmentationConfig, rng: Optional[np.random.Generator] = None
) -> ImageSample:
    """Resize shortest side, center crop, then apply stochastic geometry.

    Image and mask always receive the identical transform; masks are
    resampled nearest-neighbor so they stay exactly binary.
    """
    if sample.image.shape[0] < 1 or sample.image.shape[1] < 1:
        raise ValueError("image has empty spatial dims")
    image, mask = sample.image, sample.mask
    image, mask = _resize_pair(image, mask, config.resize_shortest_side)
    image = _center_crop(image, config.crop_size)
    if mask is not None:
        mask = _center_crop(mask, config.crop_size)

    if config.enabled:
        if rng is None:
            raise ValueError("stochastic augmentation needs an rng")
        if rng.random() < config.flip_prob:  # vertical
            image = image[::-1]
            mask = mask[::-1] if mask is not None else None
        if rng.random() < config.flip_prob:  # horizontal
            image = image[:, ::-1]
            mask = mask[:, ::-1] if mask is not None else None
        if rng.random() < config.rotate_prob:
            if config.free_angle:
                angle = float(rng.uniform(0.0, 360.0))
                image = np.ascontiguousarray(image)
                mask = np.ascontiguousarray(mask) if mask is not None else None
                image, mask = _rotate_free(image, mask, angle)
            else:
                k = int(rng.integers(1, 4))
                image = np.rot90(image, k)
                mask = np.rot90(mask, k) if mask is not None else None
        if rng.random() < config.transpose_prob:
            image = np.transpose(image, (1, 0, 2))
            mask = mask.T if mask is not None else None

    image = np.ascontiguousarray(image, dtype=np.float32)
    mask = np.ascontiguousarray(mask, dtype=np.uint8) if mask is not None else None
    return ImageSample(id=sample.id, image=image, mask=mask, source=sample.source)


@dataclass
class ShapeSpec:
    """Generator knobs for the synthetic shapes dataset.

    Distractors are smooth intensity bumps with shape-like contrast but soft
    edges; they are not foreground, which keeps the task from reducing to
    brightness thresholding.
    """

    n_shapes: Tuple[int, int] = (1, 3)
    kinds: Tuple[str, ...] = ("ellipse", "rectangle")
    size_range: Tuple[float, float] = (0.08, 0.20)
    contrast_range: Tuple[float, float] = (0.12, 0.35)
    darker_prob: float = 0.35
    noise_std: float = 0.12
    min_gap_px: int = 3
    n_distractors: Tuple[int, int] = (2, 5)
    distractor_amp_range: Tuple[float, float] = (0.10, 0.30)

    def __post_init__(self):
        if self.n_shapes[0] < 1 or self.n_shapes[0] > self.n_shapes[1]:
            raise ValueError(f"invalid n_shapes range {self.n_shapes}")
        unknown = set(self.kinds) - {"ellipse", "rectangle"}
        if unknown:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")
        if self.n_distractors[0] < 0 or self.n_distractors[0] > self.n_distractors[1]:
            raise ValueError(f"invalid n_distractors range {self.n_distractors}")


def _shape_footprint(
    kind: str, size: int, rng: np.random.Generator, spec: ShapeSpec
) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    a = rng.uniform(*spec.size_range) * size
    b = rng.uniform(*spec.size_range) * size
    margin = max(a, b) + 2
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    if kind == "ellipse":
        theta = rng.uniform(0.0, np.pi)
        xr = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        yr = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        return (xr**2 / a**2 + yr**2 / b**2) <= 1.0
    return (np.abs(xx - cx) <= a) & (np.abs(yy - cy) <= b)


def generate_synthetic_dataset(
    n: int,
    image_size: int = 96,
    shape_spec: Optional[ShapeSpec] = None,
    seed: int = 0,
) -> List[ImageSample]:
    """Textured backgrounds with 1-3 disjoint filled shapes and exact masks.

    Deterministic in (n, image_size, shape_spec, seed); per-sample RNGs are
    derived independently so subsets match across different n.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    spec = shape_spec or ShapeSpec()
    size = image_size
    samples = []
    for i in range(n):
        rng = rng_for(seed, "synthetic", i)
        base = rng.uniform(0.30, 0.55)
        gx, gy = rng.uniform(-0.12, 0.12, size=2)
        yy, xx = np.mgrid[0:size, 0:size]
        canvas = base + gx * (xx / size - 0.5) + gy * (yy / size - 0.5)

        mask = np.zeros((size, size), dtype=bool)
        want = int(rng.integers(spec.n_shapes[0], spec.n_shapes[1] + 1))
        placed = 0
        attempts = 0
        gap = spec.min_gap_px
        while placed < want and attempts < 200:
            attempts += 1
            kind = spec.kinds[int(rng.integers(0, len(spec.kinds)))]
            foot = _shape_footprint(kind, size, rng, spec)
            if not foot.any():
                continue
            rows, cols = np.nonzero(foot)
            r0, r1 = max(rows.min() - gap, 0), min(rows.max() + gap + 1, size)
            c0, c1 = max(cols.min() - gap, 0), min(cols.max() + gap + 1, size)
            if mask[r0:r1, c0:c1].any():
                continue
            sign = -1.0 if rng.random() < spec.darker_prob else 1.0
            contrast = rng.uniform(*spec.contrast_range)
            canvas = np.where(foot, canvas + sign * contrast, canvas)
            mask |= foot
            placed += 1
        assert placed >= 1, "failed to place any shape"

        n_distract = int(rng.integers(spec.n_distractors[0], spec.n_distractors[1] + 1))
        for _ in range(n_distract):
            cx, cy = rng.uniform(0, size, size=2)
            sigma = rng.uniform(*spec.size_range) * size * 0.8
            amp = rng.uniform(*spec.distractor_amp_range)
            sign = -1.0 if rng.random() < 0.5 else 1.0
            canvas = canvas + sign * amp * np.exp(
                -((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2)
            )

        canvas = canvas + rng.normal(0.0, spec.noise_std, size=(size, size))
        tint = rng.uniform(-0.04, 0.04, size=3)
        image = np.clip(canvas[:, :, None] + tint[None, None, :], 0.0, 1.0).astype(np.float32)
        samples.append(
            ImageSample(
                id=f"synth-{seed}-{i:04d}",
                image=image,
                mask=mask.astype(np.uint8),
                source="synthetic",
            )
        )
    return samples
