"""Volume ingestion, slicing, cross-validation folds and episode sampling."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DataError

Setting = Literal["Setting1", "Setting2"]
CT_WINDOW = (-125.0, 275.0)
MR_PERCENTILE = 99.5


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class VolumeRecord:
    case_id: str
    voxels: np.ndarray
    spacing: tuple[float, float, float]
    class_masks: Mapping[str, np.ndarray]
    modality: Literal["CT", "MR"] = "CT"

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise DataError(f"{self.case_id}: voxels must be 3-D, got {self.voxels.shape}")
        for label, m in self.class_masks.items():
            if m.shape != self.voxels.shape:
                raise DataError(
                    f"{self.case_id}: mask {label!r} shape {m.shape} != image {self.voxels.shape}"
                )
            if not np.isin(m, (0, 1)).all():
                raise DataError(f"{self.case_id}: mask {label!r} is not binary")


@dataclass(frozen=True)
class SliceSample:
    case_id: str
    slice_index: int
    image: np.ndarray
    mask: np.ndarray
    class_label: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape or self.image.ndim != 2:
            raise DataError(
                f"{self.case_id}/{self.slice_index}: image {self.image.shape} "
                f"and mask {self.mask.shape} must be equal 2-D grids"
            )
        object.__setattr__(self, "image", _frozen(self.image.astype(np.float32, copy=False)))
        object.__setattr__(self, "mask", _frozen(self.mask.astype(np.uint8, copy=False)))

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.class_label, self.case_id, self.slice_index)


@dataclass(frozen=True)
class Episode:
    support: tuple[SliceSample, ...]
    query: SliceSample
    class_label: str
    classes: tuple[str, ...]
    n_way: int
    k_shot: int

    def support_for(self, label: str) -> list[SliceSample]:
        return [s for s in self.support if s.class_label == label]


@dataclass(frozen=True)
class FoldPlan:
    k_folds: int
    assignments: Mapping[str, int]
    setting: Setting = "Setting1"
    train_classes: tuple[str, ...] = ()
    test_classes: tuple[str, ...] = ()
    seed: int = 0

    def test_cases(self, fold: int) -> list[str]:
        self._check_fold(fold)
        return sorted(c for c, f in self.assignments.items() if f == fold)

    def train_cases(self, fold: int) -> list[str]:
        self._check_fold(fold)
        return sorted(c for c, f in self.assignments.items() if f != fold)

    def banned_from_training(self, label: str) -> bool:
        return self.setting == "Setting2" and label in self.test_classes

    def _check_fold(self, fold: int):
        if not 0 <= fold < self.k_folds:
            raise DataError(f"fold {fold} out of range for {self.k_folds} folds")

    def to_json(self) -> str:
        return json.dumps(
            {
                "k_folds": self.k_folds,
                "setting": self.setting,
                "seed": self.seed,
                "train_classes": list(self.train_classes),
                "test_classes": list(self.test_classes),
                "assignments": dict(sorted(self.assignments.items())),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls(
            k_folds=d["k_folds"],
            assignments=d["assignments"],
            setting=d["setting"],
            train_classes=tuple(d["train_classes"]),
            test_classes=tuple(d["test_classes"]),
            seed=d.get("seed", 0),
        )


# ---------------------------------------------------------------------------
# ingestion


def _default_label_path(image_path: Path) -> Path:
    return image_path.parent.parent / "labels" / image_path.name


def _case_id(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def load_volume(
    path,
    label_map: Mapping[int, str],
    label_path=None,
    keep: Optional[Iterable[str]] = None,
    modality: Literal["CT", "MR"] = "CT",
) -> VolumeRecord:
    """Read a NIfTI image and its aligned integer label volume.

    Without ``label_path`` the labels are looked up at ``../labels/<same name>``.
    Label value 0 is background; every other value must appear in ``label_map``.
    ``keep`` restricts the returned class masks to a subset of class names.
    """
    import nibabel as nib

    path = Path(path)
    label_path = Path(label_path) if label_path is not None else _default_label_path(path)
    for p in (path, label_path):
        if not p.exists():
            raise FileNotFoundError(f"volume file not found: {p}")
    img = nib.load(str(path))
    voxels = np.asarray(img.get_fdata(dtype=np.float32))
    labels = np.asarray(nib.load(str(label_path)).get_fdata()).round().astype(np.int64)
    if voxels.shape != labels.shape:
        raise DataError(f"{path.name}: image shape {voxels.shape} != label shape {labels.shape}")

    label_map = {int(k): v for k, v in label_map.items()}
    present = set(np.unique(labels).tolist()) - {0}
    unknown = sorted(present - set(label_map))
    if unknown:
        raise DataError(f"{path.name}: label value {unknown[0]} not in label map")
    wanted = set(keep) if keep is not None else set(label_map.values())
    masks = {
        name: _frozen((labels == value).astype(np.uint8))
        for value, name in sorted(label_map.items())
        if name in wanted
    }
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return VolumeRecord(
        case_id=_case_id(path),
        voxels=_frozen(voxels),
        spacing=spacing,
        class_masks=masks,
        modality=modality,
    )


def window(volume: np.ndarray, modality: str) -> np.ndarray:
    if modality == "CT":
        return np.clip(volume, *CT_WINDOW)
    hi = np.percentile(volume, MR_PERCENTILE)
    return np.minimum(volume, hi)


def normalize_slice(image: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance; constant slices map to zeros."""
    image = image.astype(np.float64)
    std = image.std()
    if std == 0:
        return np.zeros_like(image, dtype=np.float32)
    return ((image - image.mean()) / std).astype(np.float32)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape == (size, size):
        return image.astype(np.float32)
    t = torch.tensor(np.asarray(image), dtype=torch.float32)[None, None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return (mask > 0).astype(np.uint8)
    t = torch.tensor(np.asarray(mask), dtype=torch.float32)[None, None]
    out = F.interpolate(t, size=(size, size), mode="nearest")
    return (out[0, 0].numpy() > 0.5).astype(np.uint8)


def slice_and_resize(
    volume: VolumeRecord,
    plane: Literal["axial", "short_axis"] = "axial",
    out_size: int = 256,
) -> list[SliceSample]:
    """Cut a volume into normalized 2-D slices, one sample per (slice, class).

    Both planes slice along the third (acquisition) axis; the data is expected
    to have been acquired or reoriented in that plane. Slices whose resized
    mask has no foreground for a class are dropped for that class.
    """
    if plane not in ("axial", "short_axis"):
        raise DataError(f"unknown plane {plane!r}")
    if volume.modality == "CT" and plane != "axial":
        raise DataError("CT volumes are sliced axially")
    if volume.modality == "MR" and plane != "short_axis":
        raise DataError("cardiac MR volumes are sliced along the short axis")
    if out_size < 32:
        raise DataError(f"out_size must be >= 32, got {out_size}")

    windowed = window(volume.voxels, volume.modality)
    images: dict[int, np.ndarray] = {}
    samples = []
    for label, mask3d in volume.class_masks.items():
        for z in np.flatnonzero(mask3d.any(axis=(0, 1))):
            mask = resize_mask(mask3d[:, :, z], out_size)
            if not mask.any():
                continue
            if z not in images:
                images[z] = normalize_slice(resize_image(windowed[:, :, z], out_size))
            samples.append(
                SliceSample(
                    case_id=volume.case_id,
                    slice_index=int(z),
                    image=images[z],
                    mask=mask,
                    class_label=label,
                )
            )
    return samples


# ---------------------------------------------------------------------------
# folds


def make_folds(
    cases: Sequence[str],
    k: int = 5,
    setting: Setting = "Setting1",
    class_split: Optional[tuple[Sequence[str], Sequence[str]]] = None,
    seed: int = 0,
) -> FoldPlan:
    """Seeded near-equal partition of cases into ``k`` folds.

    ``class_split`` is ``(train_classes, test_classes)``; required for Setting2.
    """
    if k < 2:
        raise DataError(f"need k >= 2 folds, got {k}")
    unique = sorted(set(cases))
    if len(unique) != len(cases):
        raise DataError("duplicate case ids")
    if k > len(unique):
        raise DataError(f"cannot split {len(unique)} cases into {k} folds")
    if setting not in ("Setting1", "Setting2"):
        raise DataError(f"unknown setting {setting!r}")
    train_classes: tuple[str, ...] = ()
    test_classes: tuple[str, ...] = ()
    if class_split is not None:
        train_classes, test_classes = tuple(class_split[0]), tuple(class_split[1])
        overlap = set(train_classes) & set(test_classes)
        if overlap:
            raise DataError(f"train and test classes overlap: {sorted(overlap)}")
    elif setting == "Setting2":
        raise DataError("Setting2 requires a class split")

    order = np.random.default_rng(seed).permutation(len(unique))
    assignments = {unique[j]: int(i % k) for i, j in enumerate(order)}
    return FoldPlan(
        k_folds=k,
        assignments=assignments,
        setting=setting,
        train_classes=train_classes,
        test_classes=test_classes,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# episodes


def group_by_class(pool: Iterable[SliceSample]) -> dict[str, list[SliceSample]]:
    groups: dict[str, list[SliceSample]] = defaultdict(list)
    for s in pool:
        groups[s.class_label].append(s)
    return {k: sorted(v, key=lambda s: s.key) for k, v in sorted(groups.items())}


def _deficiency(samples: Sequence[SliceSample], k_shot: int) -> Optional[str]:
    if len(samples) < k_shot + 1:
        return f"{len(samples)} samples < k_shot+1 = {k_shot + 1}"
    if len({s.case_id for s in samples}) < 2:
        return "fewer than two distinct cases"
    return None


def sample_episode(
    pool: Sequence[SliceSample],
    n_way: int = 1,
    k_shot: int = 1,
    rng: Optional[np.random.Generator] = None,
) -> Episode:
    """Draw an N-way K-shot episode whose query case is absent from the support."""
    if n_way < 1 or k_shot < 1:
        raise DataError(f"n_way and k_shot must be >= 1, got {n_way}, {k_shot}")
    if rng is None:
        raise ValueError("sample_episode needs an explicit numpy Generator")
    groups = group_by_class(pool)
    problems = {c: _deficiency(v, k_shot) for c, v in groups.items()}
    eligible = [c for c, p in problems.items() if p is None]
    if len(eligible) < n_way:
        bad = {c: p for c, p in problems.items() if p is not None}
        detail = "; ".join(f"class {c!r}: {p}" for c, p in bad.items()) or "pool is empty"
        raise DataError(f"cannot draw a {n_way}-way {k_shot}-shot episode: {detail}")

    classes = tuple(eligible[i] for i in sorted(rng.choice(len(eligible), n_way, replace=False)))
    query_class = classes[int(rng.integers(n_way))]

    def outside(label, case_id):
        return [s for s in groups[label] if s.case_id != case_id]

    candidates = [
        q
        for q in groups[query_class]
        if all(len(outside(c, q.case_id)) >= k_shot for c in classes)
    ]
    if not candidates:
        raise DataError(
            f"class {query_class!r}: no query leaves {k_shot} support samples from other cases"
        )
    query = candidates[int(rng.integers(len(candidates)))]
    support = []
    for c in classes:
        others = outside(c, query.case_id)
        picks = sorted(rng.choice(len(others), k_shot, replace=False))
        support.extend(others[i] for i in picks)
    return Episode(
        support=tuple(support),
        query=query,
        class_label=query_class,
        classes=classes,
        n_way=n_way,
        k_shot=k_shot,
    )


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class FewShotDataset:
    """Immutable collection of slices plus the fold plan that splits them."""

    samples: tuple[SliceSample, ...]
    folds: FoldPlan
    meta: Mapping[str, object] = field(default_factory=dict)

    @property
    def classes(self) -> list[str]:
        return sorted({s.class_label for s in self.samples})

    @property
    def image_size(self) -> int:
        return self.samples[0].image.shape[0]

    def for_setting(self, setting: Setting) -> "FewShotDataset":
        """Same data and folds under another visibility policy."""
        if setting == self.folds.setting:
            return self
        if setting not in ("Setting1", "Setting2"):
            raise DataError(f"unknown setting {setting!r}")
        if setting == "Setting2" and not self.folds.test_classes:
            raise DataError("Setting2 requires the fold plan to name test classes")
        return replace(self, folds=replace(self.folds, setting=setting))

    def test_classes(self) -> list[str]:
        return list(self.folds.test_classes) or self.classes

    def train_pool(self, fold: int) -> list[SliceSample]:
        cases = set(self.folds.train_cases(fold))
        return [
            s
            for s in self.samples
            if s.case_id in cases and not self.folds.banned_from_training(s.class_label)
        ]

    def test_pool(self, fold: int, label: Optional[str] = None) -> list[SliceSample]:
        cases = set(self.folds.test_cases(fold))
        labels = {label} if label is not None else set(self.test_classes())
        return [s for s in self.samples if s.case_id in cases and s.class_label in labels]

    def eval_support(self, fold: int, label: str) -> SliceSample:
        """Middle slice of the middle training-fold case that carries ``label``."""
        cases = set(self.folds.train_cases(fold))
        by_case = defaultdict(list)
        for s in self.samples:
            if s.class_label == label and s.case_id in cases:
                by_case[s.case_id].append(s)
        if not by_case:
            raise DataError(f"no training-fold case carries class {label!r} for support")
        ordered = sorted(by_case)
        slices = sorted(by_case[ordered[len(ordered) // 2]], key=lambda s: s.slice_index)
        return slices[len(slices) // 2]
