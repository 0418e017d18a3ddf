"""Command-line entry point: prepare, train, eval, ablate, predict.

Configuration comes from an INI file whose sections map onto the config
dataclasses (``[train]``, ``[encoder]``, ``[synthetic]``, ``[ablate]``).
Command-line flags win over file values. Every command that writes a run
directory leaves a ``run.json`` manifest in it.

Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, NumericalError

log = logging.getLogger("sqpf")

RUN_MANIFEST = "run.json"
OUTPUT_ROOT_ENV = "SQPF_OUTPUT_ROOT"

SABS_LABELS = {
    1: "Spleen", 2: "RK", 3: "LK", 4: "Gallbladder", 5: "Esophagus", 6: "Liver",
    7: "Stomach", 8: "Aorta", 9: "IVC", 10: "Veins", 11: "Pancreas", 12: "RAG", 13: "LAG",
}
SABS_CLASSES = ("LK", "RK", "Spleen", "Liver")
CMR_LABELS = {1: "LV-MYO", 2: "LV-BP", 3: "RV"}
# held-out group for Setting2 on abdominal data; training sees the kidneys only
SABS_TEST_CLASSES = ("Liver", "Spleen")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config files


def _coerce(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config(path) -> dict[str, dict]:
    """Parse an INI file into ``{section: {key: python value}}``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc
    return {name: {k: _coerce(v) for k, v in parser[name].items()} for name in parser.sections()}


def _dataclass_from(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"[{section}] unknown keys {unknown}")
    return cls(**values)


def train_config_from(sections: dict, overrides: Optional[dict] = None):
    from .encoder import EncoderSpec
    from .training import TrainConfig

    train = dict(sections.get("train", {}))
    train["encoder"] = _dataclass_from(EncoderSpec, sections.get("encoder", {}), "encoder")
    train.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = _dataclass_from(TrainConfig, train, "train")
    return cfg


def synthetic_config_from(sections: dict, overrides: Optional[dict] = None):
    from .synthetic import SyntheticConfig

    values = {k: v for k, v in sections.get("synthetic", {}).items() if k not in ("held_out",)}
    for key in ("shape_families",):
        if key in values and isinstance(values[key], list):
            values[key] = tuple(values[key])
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return _dataclass_from(SyntheticConfig, values, "synthetic")


def parse_setting(text) -> Optional[str]:
    if text is None:
        return None
    aliases = {"1": "Setting1", "2": "Setting2", "setting1": "Setting1", "setting2": "Setting2"}
    key = str(text).strip().lower()
    if key not in aliases:
        raise UsageError(f"unknown setting {text!r}; use 1 or 2")
    return aliases[key]


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in _csv_list(text)]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


# ---------------------------------------------------------------------------
# run directories


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    config: dict
    config_hash: str
    seed: Optional[int]
    output_dir: str
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    artifacts: list = field(default_factory=list)

    def verify(self) -> bool:
        from .training import config_hash

        return config_hash(self.config) == self.config_hash

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    def finish(self, artifacts):
        root = Path(self.output_dir)
        self.artifacts = sorted(str(Path(a).relative_to(root)) for a in artifacts)
        self.finished = _now()
        (root / RUN_MANIFEST).write_text(self.to_json())


def _new_manifest(command, args, config: dict, seed, out_dir: Path) -> RunManifest:
    from .training import config_hash

    cfg_path = getattr(args, "config", None)
    return RunManifest(
        command=command,
        config_path=str(cfg_path) if cfg_path else None,
        config=config,
        config_hash=config_hash(config),
        seed=seed,
        output_dir=str(out_dir),
    )


def resolve_output_dir(args, command: str, tag: str) -> Path:
    if args.output_dir:
        return Path(args.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{command}-{tag}"


def claim_output_dir(path: Path, overwrite: bool) -> Path:
    """Create ``path`` for a fresh run, refusing to clobber existing output."""
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise UsageError(f"output directory {path} is not empty; pass --overwrite")
        if not (path / RUN_MANIFEST).exists():
            raise UsageError(f"refusing to overwrite {path}: it holds no {RUN_MANIFEST}")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


class _RunLog:
    """Mirror the package log into the run directory while a command runs."""

    def __init__(self, path: Path):
        self.handler = logging.FileHandler(path, mode="w")
        self.handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))

    def __enter__(self):
        logging.getLogger("sqpf").addHandler(self.handler)
        return self

    def __exit__(self, *exc):
        logging.getLogger("sqpf").removeHandler(self.handler)
        self.handler.close()


# ---------------------------------------------------------------------------
# prepare


def _prepare_volumes(args, label_map, keep, modality, test_classes):
    from .data import FewShotDataset, load_volume, make_folds, slice_and_resize

    if not args.input_dir:
        raise UsageError(f"--input-dir is required for kind {args.kind}")
    image_dir = Path(args.input_dir) / "images"
    if not image_dir.is_dir():
        raise DataError(f"{args.input_dir} has no images/ directory")
    paths = sorted(p for p in image_dir.iterdir() if p.name.endswith((".nii", ".nii.gz")))
    if not paths:
        raise DataError(f"no NIfTI volumes under {image_dir}")
    samples, cases = [], []
    for p in paths:
        vol = load_volume(p, label_map, keep=keep, modality=modality)
        samples += slice_and_resize(vol, args.plane, args.size)
        cases.append(vol.case_id)
        log.info("%s: %d slices kept", vol.case_id, sum(s.case_id == vol.case_id for s in samples))
    present = sorted({s.class_label for s in samples})
    split = None
    if test_classes:
        split = (tuple(c for c in present if c not in test_classes), tuple(test_classes))
    folds = make_folds(cases, args.k_folds, "Setting1", split, seed=args.seed or 0)
    meta = {"kind": args.kind, "plane": args.plane, "image_size": args.size}
    return FewShotDataset(samples=tuple(samples), folds=folds, meta=meta)


def cmd_prepare(args) -> int:
    from .benchmark import BENCH_SYNTH, HELD_OUT, synthetic_dataset
    from .io import write_dataset
    from .synthetic import SyntheticConfig

    sections = read_config(args.config) if args.config else {}
    test_classes = _csv_list(args.test_classes) if args.test_classes else None
    if args.kind == "synthetic":
        base = asdict(BENCH_SYNTH) if not sections.get("synthetic") else {}
        base.update(sections.get("synthetic", {}))
        base.pop("held_out", None)
        overrides = {"seed": args.seed, "image_size": args.size, "k_folds": args.k_folds}
        cfg = synthetic_config_from({"synthetic": base}, overrides)
        held = test_classes or [sections.get("synthetic", {}).get("held_out", HELD_OUT)]
        if len(held) != 1:
            raise UsageError("synthetic data holds out exactly one family")
        resolved = {"kind": "synthetic", "synthetic": asdict(cfg), "held_out": held[0]}
        seed = cfg.seed
    else:
        plane = args.plane
        if args.kind == "cmr_like" and plane != "short_axis":
            raise DataError("cmr_like data must use --plane short_axis")
        if args.kind == "sabs_like" and plane != "axial":
            raise DataError("sabs_like data must use --plane axial")
        resolved = {
            "kind": args.kind,
            "input_dir": str(args.input_dir),
            "plane": plane,
            "size": args.size,
            "k_folds": args.k_folds,
            "seed": args.seed or 0,
            "test_classes": test_classes,
        }
        seed = args.seed or 0

    from .training import config_hash

    out = claim_output_dir(resolve_output_dir(args, "prepare", config_hash(resolved)[:8]), args.overwrite)
    manifest = _new_manifest("prepare", args, resolved, seed, out)
    with _RunLog(out / "prepare.log"):
        if args.kind == "synthetic":
            dataset = synthetic_dataset(cfg, held_out=held[0])
        elif args.kind == "sabs_like":
            tc = test_classes if test_classes is not None else list(SABS_TEST_CLASSES)
            dataset = _prepare_volumes(args, SABS_LABELS, SABS_CLASSES, "CT", tc)
        else:
            dataset = _prepare_volumes(args, CMR_LABELS, None, "MR", test_classes)
        files = write_dataset(out, dataset)
        log.info("wrote %d samples to %s", len(dataset.samples), out)
    manifest.finish(files + [out / "prepare.log"])
    print(out)
    return 0


# ---------------------------------------------------------------------------
# train / eval


def _load_dataset(path):
    from .io import read_dataset

    if not path:
        raise UsageError("--dataset-dir is required")
    return read_dataset(path)


def cmd_train(args) -> int:
    from .training import train_fold

    sections = read_config(args.config)
    overrides = {
        "fold_index": args.fold,
        "setting": parse_setting(args.setting),
        "epochs": args.epochs,
        "episodes_per_epoch": args.episodes,
        "seed": args.seed,
    }
    try:
        cfg = train_config_from(sections, overrides)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise UsageError(f"invalid training config: {exc}") from exc
    dataset = _load_dataset(args.dataset_dir or sections.get("data", {}).get("dataset_dir"))
    out = claim_output_dir(resolve_output_dir(args, "train", cfg.config_hash()[:8]), args.overwrite)
    manifest = _new_manifest("train", args, cfg.to_dict(), cfg.seed, out)
    with _RunLog(out / "train.log"):
        ckpt = train_fold(cfg, dataset)
        path = out / "checkpoint.pt"
        ckpt.save(path)
        (out / "history.json").write_text(json.dumps(ckpt.history))
        log.info("saved %s after %d episodes", path, len(ckpt.history))
    manifest.finish([path, out / "history.json", out / "train.log"])
    print(path)
    return 0


def cmd_eval(args) -> int:
    from .training import Checkpoint, evaluate

    ckpt = Checkpoint.load(args.checkpoint)
    cfg = ckpt.config
    setting = parse_setting(args.setting)
    if setting is not None:
        cfg = replace(cfg, setting=setting)
    if args.fold is not None:
        cfg = replace(cfg, fold_index=args.fold)
    dataset = _load_dataset(args.dataset_dir)
    out = claim_output_dir(resolve_output_dir(args, "eval", cfg.config_hash()[:8]), args.overwrite)
    manifest = _new_manifest("eval", args, cfg.to_dict(), cfg.seed, out)
    with _RunLog(out / "eval.log"):
        report = evaluate(ckpt, dataset, config=cfg)
        files = report.write(out)
        log.info("mean Dice %.2f", report.mean)
    manifest.finish(files + [out / "eval.log"])
    print(f"mean Dice {report.mean:.2f}")
    return 0


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    from .ablation import MODES, RunCache, ablate

    sections = read_config(args.config)
    section = sections.get("ablate", {})
    modes = _csv_list(args.modes) if args.modes is not None else list(section.get("modes", []))
    if not modes:
        raise UsageError("no ablation modes given")
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise UsageError(f"unknown modes {bad}; choose from {sorted(MODES)}")
    if args.alpha_grid is not None:
        grid = _float_list(args.alpha_grid)
    else:
        grid = [float(a) for a in section.get("alpha_grid", [])]
    folds = section.get("folds")
    if args.folds is not None:
        folds = [int(f) for f in _csv_list(args.folds)]
    try:
        cfg = train_config_from(sections, {"seed": args.seed})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise UsageError(f"invalid training config: {exc}") from exc
    dataset = _load_dataset(args.dataset_dir or sections.get("data", {}).get("dataset_dir"))
    resolved = {"train": cfg.to_dict(), "modes": modes, "alpha_grid": grid, "folds": folds}

    from .training import config_hash

    out = claim_output_dir(resolve_output_dir(args, "ablate", config_hash(resolved)[:8]), args.overwrite)
    manifest = _new_manifest("ablate", args, resolved, cfg.seed, out)
    cache = RunCache(args.cache_dir) if args.cache_dir else RunCache(out / "runs")
    with _RunLog(out / "ablate.log"):
        try:
            table = ablate(dataset, cfg, modes, grid, folds=folds, cache=cache)
        except ValueError as exc:
            if isinstance(exc, DataError):
                raise
            raise UsageError(str(exc)) from exc
        files = table.write(out)
    runs = sorted((out / "runs").glob("*.json")) if not args.cache_dir else []
    manifest.finish(files + runs + [out / "ablate.log"])
    sys.stdout.write(table.table_csv())
    if grid:
        sys.stdout.write(table.sweep_csv())
    return 0


# ---------------------------------------------------------------------------
# predict


def _read_pair_image(path) -> np.ndarray:
    from .data import normalize_slice
    from .io import load_image

    path = Path(path)
    img = np.load(path) if path.suffix == ".npy" else load_image(path)
    if img.ndim != 2:
        raise DataError(f"{path}: expected a 2-D image, got shape {img.shape}")
    return normalize_slice(img)


def _read_pair_mask(path) -> np.ndarray:
    from .io import load_image

    path = Path(path)
    m = np.load(path) if path.suffix == ".npy" else load_image(path)
    return (m > (0.5 if m.max() <= 1 else 127)).astype(np.uint8)


def _side_by_side(path, support, support_mask, query, coarse, final):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = [
        ("support", support, support_mask),
        ("coarse", query, coarse),
        ("final", query, final),
    ]
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2), dpi=110)
    for ax, (title, img, mask) in zip(axes, panels):
        ax.imshow(img, cmap="gray")
        ax.imshow(np.ma.masked_where(mask == 0, mask), cmap="autumn", alpha=0.45, vmin=0, vmax=1)
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_predict(args) -> int:
    import torch

    from .data import SliceSample
    from .io import save_mask
    from .training import Checkpoint, binarize, run_episode, upsample_nearest

    out_mask = Path(args.out_mask)
    trace_json = out_mask.with_suffix(".trace.json")
    trace_png = out_mask.with_suffix(".trace.png")
    targets = [out_mask] + ([trace_json, trace_png] if args.trace else [])
    clash = [str(p) for p in targets if p.exists()]
    if clash and not args.overwrite:
        raise UsageError(f"refusing to overwrite {clash}; pass --overwrite")

    ckpt = Checkpoint.load(args.checkpoint)
    s_img, q_img = _read_pair_image(args.support_image), _read_pair_image(args.query_image)
    s_mask = _read_pair_mask(args.support_mask)
    if s_img.shape != s_mask.shape:
        raise DataError(f"support image {s_img.shape} and mask {s_mask.shape} differ in size")
    if s_img.shape != q_img.shape:
        raise DataError(f"support {s_img.shape} and query {q_img.shape} differ in size")
    if not s_mask.any():
        raise DataError("support mask has no foreground")

    support = SliceSample("support", 0, s_img, s_mask, "target")
    query = SliceSample("query", 0, q_img, np.zeros_like(s_mask), "target")
    model = ckpt.build_model()
    with torch.no_grad():
        out, _ = run_episode(model, [support], query, ckpt.config.sqpf)
    final = upsample_nearest(binarize(out.final), q_img.shape)
    coarse = upsample_nearest(binarize(out.coarse), q_img.shape)
    out_mask.parent.mkdir(parents=True, exist_ok=True)
    save_mask(out_mask, final)
    if args.trace:
        diag = dict(out.diagnostics)
        diag.update(
            {
                "coarse_fg_pixels": int(coarse.sum()),
                "final_fg_pixels": int(final.sum()),
                "config_hash": ckpt.config.config_hash(),
            }
        )
        trace_json.write_text(json.dumps(diag, indent=2, sort_keys=True))
        _side_by_side(trace_png, s_img, s_mask, q_img, coarse, final)
    print(out_mask)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sqpf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="INI config file")
        sp.add_argument("--output-dir", help=f"run directory (default under ${OUTPUT_ROOT_ENV})")
        sp.add_argument("--overwrite", action="store_true")

    sp = sub.add_parser("prepare", help="slice volumes or render synthetic data")
    common(sp)
    sp.add_argument("--kind", required=True, choices=["sabs_like", "cmr_like", "synthetic"])
    sp.add_argument("--input-dir")
    sp.add_argument("--plane", choices=["axial", "short_axis"], default=None)
    sp.add_argument("--size", type=int, default=None)
    sp.add_argument("--k-folds", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--test-classes", help="comma-separated held-out classes")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="episodic training on one fold")
    common(sp, config_required=True)
    sp.add_argument("--dataset-dir")
    sp.add_argument("--fold", type=int)
    sp.add_argument("--setting")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--episodes", type=int, help="episodes per epoch")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="Dice report for a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset-dir", required=True)
    sp.add_argument("--fold", type=int)
    sp.add_argument("--setting")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="module ablation and alpha sweep")
    common(sp, config_required=True)
    sp.add_argument("--dataset-dir")
    sp.add_argument("--modes", help="comma-separated subset of SSP,MSP,SSP+QP,MSP+QP")
    sp.add_argument("--alpha-grid", help="comma-separated alphas")
    sp.add_argument("--folds", help="comma-separated fold indices (default all)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--cache-dir", help="share trained-run reports across invocations")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("predict", help="segment one query from one support")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--support-image", required=True)
    sp.add_argument("--support-mask", required=True)
    sp.add_argument("--query-image", required=True)
    sp.add_argument("--out-mask", required=True)
    sp.add_argument("--trace", action="store_true", help="write diagnostics JSON and a side-by-side PNG")
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_predict)
    return p


def _apply_prepare_defaults(args):
    if args.command != "prepare":
        return
    if args.plane is None:
        args.plane = "short_axis" if args.kind == "cmr_like" else "axial"
    if args.kind != "synthetic":
        args.size = 256 if args.size is None else args.size
        args.k_folds = 5 if args.k_folds is None else args.k_folds


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        logging.getLogger("sqpf").setLevel(logging.INFO)
        _apply_prepare_defaults(args)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
