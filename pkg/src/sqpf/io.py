"""Prepared-dataset directories.

Layout::

    <root>/
      manifest.json     # kind, seed, samples[{case_id, class_label, slice_index, image, mask}]
      folds.json        # FoldPlan
      samples/<case>_<class>_<slice>.tiff   # float32 normalized image (lossless)
      samples/<case>_<class>_<slice>.png    # 8-bit mask, 0 / 255
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .data import FewShotDataset, FoldPlan, SliceSample
from .errors import DataError

MANIFEST = "manifest.json"
FOLDS = "folds.json"


def save_image(path, image: np.ndarray):
    Image.fromarray(np.asarray(image, dtype=np.float32), mode="F").save(path, format="TIFF")


def save_mask(path, mask: np.ndarray):
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA"):
            im = im.convert("L")
        return np.asarray(im, dtype=np.float32)


def load_mask(path) -> np.ndarray:
    return (load_image(path) > 127).astype(np.uint8)


def write_dataset(root, dataset: FewShotDataset) -> list[Path]:
    """Write ``dataset`` under ``root``; returns the files written."""
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    entries, written = [], []
    for s in dataset.samples:
        stem = f"{s.case_id}_{s.class_label}_{s.slice_index:04d}"
        img_rel, mask_rel = f"samples/{stem}.tiff", f"samples/{stem}.png"
        save_image(root / img_rel, s.image)
        save_mask(root / mask_rel, s.mask)
        written += [root / img_rel, root / mask_rel]
        entries.append(
            {
                "case_id": s.case_id,
                "class_label": s.class_label,
                "slice_index": s.slice_index,
                "image": img_rel,
                "mask": mask_rel,
            }
        )
    manifest = {**dataset.meta, "samples": entries}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (root / FOLDS).write_text(dataset.folds.to_json())
    return written + [root / MANIFEST, root / FOLDS]


def read_dataset(root) -> FewShotDataset:
    root = Path(root)
    for name in (MANIFEST, FOLDS):
        if not (root / name).exists():
            raise DataError(f"{root} is not a prepared dataset: missing {name}")
    manifest = json.loads((root / MANIFEST).read_text())
    samples = tuple(
        SliceSample(
            case_id=e["case_id"],
            slice_index=int(e["slice_index"]),
            image=load_image(root / e["image"]),
            mask=load_mask(root / e["mask"]),
            class_label=e["class_label"],
        )
        for e in manifest.pop("samples")
    )
    folds = FoldPlan.from_json((root / FOLDS).read_text())
    return FewShotDataset(samples=samples, folds=folds, meta=manifest)
