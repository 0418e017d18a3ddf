"""Episodic training, Dice evaluation and cross-validation."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .data import Episode, FewShotDataset, SliceSample, sample_episode
from .encoder import EncoderSpec, build_encoder, downsample_mask, encode
from .errors import DataError, DivergenceError
from .prototypes import ProbabilityMask, SQPFConfig, SQPFOutput, sqpf_forward

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SNAPSHOT_EVERY = 50


@dataclass(frozen=True)
class TrainConfig:
    episodes_per_epoch: int = 1000
    epochs: int = 2
    learning_rate: float = 1e-3
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_step_episodes: int = 1000
    lr_gamma: float = 0.5
    n_regions: int = 4
    alpha: float = 0.5
    beta: Optional[float] = None
    temperature: float = 20.0
    t_b: float = 0.5
    setting: str = "Setting1"
    fold_index: int = 0
    seed: int = 0
    n_way: int = 1
    k_shot: int = 1
    lambda_coarse: float = 1.0
    lambda_final: float = 1.0
    augment: bool = False
    encoder: EncoderSpec = field(default_factory=EncoderSpec)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("episodes_per_epoch", "n_regions", "n_way", "k_shot", "lr_step_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("epochs", "learning_rate", "temperature", "lambda_coarse", "lambda_final"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def sqpf(self) -> SQPFConfig:
        return SQPFConfig(
            n_regions=self.n_regions,
            temperature=self.temperature,
            alpha=self.alpha,
            beta=self.beta,
            t_b=self.t_b,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if isinstance(d.get("encoder"), dict):
            d["encoder"] = EncoderSpec(**d["encoder"])
        return cls(**d)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# metrics and loss


def dice_score(pred, gt) -> float:
    """Dice overlap in percent; two empty masks agree perfectly (100)."""
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DataError(f"dice shapes differ: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 100.0
    return 200.0 * int((pred & gt).sum()) / total


def episode_loss(
    coarse: ProbabilityMask,
    final: ProbabilityMask,
    gt: torch.Tensor,
    lambda_coarse: float = 1.0,
    lambda_final: float = 1.0,
) -> torch.Tensor:
    """Weighted pixel-mean binary cross-entropy of both prediction heads."""
    if lambda_coarse < 0 or lambda_final < 0:
        raise ValueError("loss weights must be non-negative")
    for pm in (coarse, final):
        p = pm.fg.detach()
        if p.shape != gt.shape:
            raise DataError(f"prediction {tuple(p.shape)} vs target {tuple(gt.shape)}")
        if bool((p < 0).any() or (p > 1).any()):
            raise ValueError("probabilities outside [0, 1]")
    gt = gt.to(final.fg.dtype)
    loss = final.fg.new_zeros(())
    if lambda_final:
        loss = loss + lambda_final * F.binary_cross_entropy(final.fg, gt)
    if lambda_coarse:
        loss = loss + lambda_coarse * F.binary_cross_entropy(coarse.fg, gt)
    return loss


def binarize(pm: ProbabilityMask, threshold: float = 0.5) -> np.ndarray:
    return (pm.fg.detach().cpu().numpy() >= threshold).astype(np.uint8)


def upsample_nearest(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    fy, fx = shape[0] // mask.shape[0], shape[1] // mask.shape[1]
    return np.repeat(np.repeat(mask, fy, axis=0), fx, axis=1)


# ---------------------------------------------------------------------------
# episode forward


def _tensor(a: np.ndarray, dtype) -> torch.Tensor:
    return torch.tensor(np.asarray(a), dtype=dtype)


def augment_pair(image, mask, rng: np.random.Generator):
    """Random flips, a small rotation and intensity jitter (training only)."""
    if rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if rng.random() < 0.5:
        image, mask = image[::-1], mask[::-1]
    angle = rng.uniform(-15, 15)
    image = ndimage.rotate(image, angle, reshape=False, order=1, mode="nearest")
    rotated = ndimage.rotate(mask.astype(np.float32), angle, reshape=False, order=0)
    mask = (rotated > 0.5).astype(np.uint8)
    image = image * rng.uniform(0.9, 1.1) + rng.uniform(-0.1, 0.1)
    if not mask.any():
        return None
    return image, mask


def run_episode(
    model: torch.nn.Module,
    support: Sequence[SliceSample],
    query: SliceSample,
    cfg: SQPFConfig,
    pairs: Optional[Sequence[tuple[np.ndarray, np.ndarray]]] = None,
    selection=None,
) -> tuple[SQPFOutput, torch.Tensor]:
    """Encode one support set + query and run the prototype pipeline.

    ``pairs`` optionally replaces the raw (image, mask) arrays, support first
    and query last (used for augmentation). Returns the pipeline output and the
    query ground truth at feature resolution.
    """
    if pairs is None:
        pairs = [(s.image, s.mask) for s in support] + [(query.image, query.mask)]
    dtype = next(model.parameters()).dtype
    images = torch.stack([_tensor(img, dtype) for img, _ in pairs])
    masks = torch.stack([_tensor(m, dtype) for _, m in pairs])
    feats = encode(images, model)
    small = downsample_mask(masks, tuple(feats.shape[-2:]))
    shots = [(feats[i], small[i]) for i in range(len(pairs) - 1)]
    out = sqpf_forward(shots, feats[-1], cfg, selection=selection)
    return out, small[-1]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict
    config: TrainConfig
    epoch: int
    rng_state: dict
    history: list = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    def build_model(self) -> torch.nn.Module:
        model = build_encoder(self.config.encoder)
        model.load_state_dict(self.params)
        model.eval()
        return model

    def save(self, path):
        torch.save(
            {
                "version": self.version,
                "params": self.params,
                "config": self.config.to_dict(),
                "epoch": self.epoch,
                "rng_state": self.rng_state,
                "history": self.history,
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        blob = torch.load(path, map_location="cpu", weights_only=False)
        version = blob.get("version") if isinstance(blob, dict) else None
        if version != CHECKPOINT_VERSION:
            raise DataError(
                f"checkpoint version {version!r} unsupported; expected {CHECKPOINT_VERSION}"
            )
        return cls(
            params=blob["params"],
            config=TrainConfig.from_dict(blob["config"]),
            epoch=blob["epoch"],
            rng_state=blob["rng_state"],
            history=blob.get("history", []),
        )


def _snapshot(model, config, epoch, rng, history) -> Checkpoint:
    return Checkpoint(
        params=copy.deepcopy(model.state_dict()),
        config=config,
        epoch=epoch,
        rng_state={"numpy": copy.deepcopy(rng.bit_generator.state), "torch": torch.get_rng_state()},
        history=list(history),
    )


def _make_optimizer(model, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(
            model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
        )
    return torch.optim.SGD(
        model.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def train_fold(config: TrainConfig, dataset: FewShotDataset) -> Checkpoint:
    """Episodic training on one fold's training pool."""
    dataset = dataset.for_setting(config.setting)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = build_encoder(config.encoder)
    pool = dataset.train_pool(config.fold_index)
    banned = [c for c in dataset.classes if dataset.folds.banned_from_training(c)]
    log.info(
        "fold %d %s: %d training slices, classes %s, excluded %s",
        config.fold_index,
        dataset.folds.setting,
        len(pool),
        sorted({s.class_label for s in pool}),
        banned,
    )
    history: list[float] = []
    if config.epochs == 0:
        return _snapshot(model, config, 0, rng, history)

    model.train()
    opt = _make_optimizer(model, config)
    sched = torch.optim.lr_scheduler.StepLR(opt, config.lr_step_episodes, config.lr_gamma)
    sqpf_cfg = config.sqpf
    last_good = _snapshot(model, config, 0, rng, history)
    for epoch in range(config.epochs):
        for step in range(config.episodes_per_epoch):
            ep = sample_episode(pool, config.n_way, config.k_shot, rng)
            support = ep.support_for(ep.class_label)
            pairs = None
            if config.augment:
                pairs = []
                for s in [*support, ep.query]:
                    aug = augment_pair(s.image, s.mask, rng)
                    pairs.append(aug if aug is not None else (s.image, s.mask))
            out, gt = run_episode(model, support, ep.query, sqpf_cfg, pairs=pairs)
            loss = episode_loss(
                out.coarse, out.final, gt, config.lambda_coarse, config.lambda_final
            )
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} episode {step}", checkpoint=last_good
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            history.append(float(loss.detach()))
            if (step + 1) % SNAPSHOT_EVERY == 0:
                last_good = _snapshot(model, config, epoch, rng, history)
            if (step + 1) % 250 == 0:
                log.info(
                    "epoch %d episode %d loss %.4f", epoch, step + 1, np.mean(history[-250:])
                )
    model.eval()
    return _snapshot(model, config, config.epochs, rng, history)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class DiceReport:
    per_class: dict
    per_fold: list
    mean: float
    config_hash: str
    dice_level: str = "volume"
    counts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DiceReport":
        return cls(**json.loads(text))

    def to_csv(self) -> str:
        """One row per class; one column per fold plus the class mean."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        folds = [f"Fold{r['fold'] + 1}" for r in self.per_fold]
        writer.writerow(["class", *folds, "Mean"])
        for label in sorted(self.per_class):
            row = [f"{r['per_class'][label]:.2f}" for r in self.per_fold]
            writer.writerow([label, *row, f"{self.per_class[label]:.2f}"])
        return buf.getvalue()

    def write(self, directory, stem: str = "report") -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = [directory / f"{stem}.json", directory / f"{stem}.csv"]
        paths[0].write_text(self.to_json())
        paths[1].write_text(self.to_csv())
        return paths


def _volume_dice(stats: dict) -> float:
    inter, pred, gt = stats["inter"], stats["pred"], stats["gt"]
    return 100.0 if pred + gt == 0 else 200.0 * inter / (pred + gt)


@torch.no_grad()
def evaluate(
    checkpoint: Checkpoint,
    dataset: FewShotDataset,
    fold: Optional[int] = None,
    classes: Optional[Iterable[str]] = None,
    config: Optional[TrainConfig] = None,
) -> DiceReport:
    """Per-volume Dice on a fold's test cases with one fixed support per class.

    Every test slice becomes one query. Binarized predictions are upsampled to
    image resolution and accumulated per case before computing Dice.
    """
    config = config or checkpoint.config
    dataset = dataset.for_setting(config.setting)
    fold = config.fold_index if fold is None else fold
    model = checkpoint.build_model()
    sqpf_cfg = config.sqpf
    labels = list(classes) if classes is not None else dataset.test_classes()

    per_class, counts = {}, {}
    for label in labels:
        queries = dataset.test_pool(fold, label)
        if not queries:
            raise DataError(f"test class {label!r} absent from fold {fold}")
        support = dataset.eval_support(fold, label)
        volumes = defaultdict(lambda: {"inter": 0, "pred": 0, "gt": 0})
        fallbacks = 0
        for q in sorted(queries, key=lambda s: s.key):
            out, _ = run_episode(model, [support], q, sqpf_cfg)
            fallbacks += out.diagnostics["fg_fallback"]
            pred = upsample_nearest(binarize(out.final), q.mask.shape).astype(bool)
            gt = q.mask.astype(bool)
            v = volumes[q.case_id]
            v["inter"] += int((pred & gt).sum())
            v["pred"] += int(pred.sum())
            v["gt"] += int(gt.sum())
        scores = [_volume_dice(volumes[c]) for c in sorted(volumes)]
        per_class[label] = float(np.mean(scores))
        counts[label] = {"queries": len(queries), "volumes": len(volumes), "fallbacks": fallbacks}

    mean = float(np.mean(list(per_class.values())))
    return DiceReport(
        per_class=per_class,
        per_fold=[{"fold": fold, "per_class": dict(per_class), "mean": mean}],
        mean=mean,
        config_hash=config.config_hash(),
        counts=counts,
    )


def aggregate_reports(reports: Sequence[DiceReport]) -> DiceReport:
    if not reports:
        raise ValueError("no reports to aggregate")
    if len(reports) == 1:
        return reports[0]
    per_fold = [r.per_fold[0] for r in reports]
    labels = sorted(reports[0].per_class)
    per_class = {c: float(np.mean([r.per_class[c] for r in reports])) for c in labels}
    counts = {f"fold{r.per_fold[0]['fold']}": r.counts for r in reports}
    return DiceReport(
        per_class=per_class,
        per_fold=per_fold,
        mean=float(np.mean([r.mean for r in reports])),
        config_hash=reports[0].config_hash,
        counts=counts,
    )


def cross_validate(
    config: TrainConfig,
    dataset: FewShotDataset,
    folds: Optional[Sequence[int]] = None,
    out_dir=None,
) -> DiceReport:
    """Train and evaluate each fold; aggregate as the mean of fold means."""
    folds = range(dataset.folds.k_folds) if folds is None else folds
    reports = []
    for k in folds:
        cfg = replace(config, fold_index=k)
        ckpt = train_fold(cfg, dataset)
        report = evaluate(ckpt, dataset, fold=k)
        report.config_hash = config.config_hash()
        if out_dir is not None:
            report.write(out_dir, stem=f"fold{k + 1}")
        reports.append(report)
    agg = aggregate_reports(reports)
    if out_dir is not None:
        agg.write(out_dir, stem="aggregate")
    return agg
