"""Module ablation (single vs multi-region support prototype, with and without
query prototypes) and the fusion-weight sweep."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .data import FewShotDataset
from .training import DiceReport, TrainConfig, aggregate_reports, evaluate, train_fold

log = logging.getLogger(__name__)

# mode -> (multi-region support prototype, query prototype)
MODES = {
    "SSP": (False, False),
    "MSP": (True, False),
    "SSP+QP": (False, True),
    "MSP+QP": (True, True),
}
DEFAULT_ALPHA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)


def mode_config(base: TrainConfig, mode: str) -> TrainConfig:
    if mode not in MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; choose from {sorted(MODES)}")
    msp, qp = MODES[mode]
    if msp and base.n_regions < 2:
        raise ValueError(f"{mode} needs n_regions > 1 in the base config")
    if qp and base.alpha >= 1.0:
        raise ValueError(f"{mode} needs alpha < 1 in the base config")
    return replace(
        base,
        n_regions=base.n_regions if msp else 1,
        alpha=base.alpha if qp else 1.0,
        beta=None,
    )


class RunCache:
    """Fold reports keyed by the hash of the fold-specific config.

    Ablation rows and sweep points often coincide (MSP is the sweep's alpha=1
    point), so identical configs are trained once. With a directory the
    reports persist across invocations.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        self._mem: dict[str, DiceReport] = {}
        self.hits = 0

    def _path(self, key: str) -> Optional[Path]:
        return None if self.directory is None else self.directory / f"{key}.json"

    def get(self, key: str) -> Optional[DiceReport]:
        if key in self._mem:
            return self._mem[key]
        path = self._path(key)
        if path is not None and path.exists():
            self._mem[key] = DiceReport.from_json(path.read_text())
            return self._mem[key]
        return None

    def put(self, key: str, report: DiceReport):
        self._mem[key] = report
        path = self._path(key)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(report.to_json())

    def run(self, config: TrainConfig, dataset: FewShotDataset) -> DiceReport:
        key = config.config_hash()
        hit = self.get(key)
        if hit is not None:
            self.hits += 1
            log.info("cache hit %s (fold %d)", key, config.fold_index)
            return hit
        report = evaluate(train_fold(config, dataset), dataset, fold=config.fold_index)
        self.put(key, report)
        return report


def run_folds(
    config: TrainConfig, dataset: FewShotDataset, folds: Sequence[int], cache: RunCache
) -> DiceReport:
    reports = [cache.run(replace(config, fold_index=k), dataset) for k in folds]
    agg = aggregate_reports(reports)
    if len(reports) > 1:
        agg = replace(agg, config_hash=replace(config, fold_index=0).config_hash())
    return agg


@dataclass
class AblationTable:
    rows: dict  # mode -> DiceReport, insertion order preserved
    sweep: list = field(default_factory=list)  # [(alpha, DiceReport)]
    base_hash: str = ""

    def _folds(self, report: DiceReport) -> list[str]:
        return [f"Fold{r['fold'] + 1}" for r in report.per_fold]

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        first = next(iter(self.rows.values()), None)
        folds = self._folds(first) if first else []
        w.writerow(["SSP", "MSP", "QP", *folds, "Mean"])
        for mode, rep in self.rows.items():
            msp, qp = MODES[mode]
            marks = ["" if msp else "x", "x" if msp else "", "x" if qp else ""]
            w.writerow([*marks, *(f"{r['mean']:.2f}" for r in rep.per_fold), f"{rep.mean:.2f}"])
        return buf.getvalue()

    def sweep_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        folds = self._folds(self.sweep[0][1]) if self.sweep else []
        w.writerow(["alpha", *folds, "Mean"])
        for alpha, rep in self.sweep:
            w.writerow([f"{alpha:g}", *(f"{r['mean']:.2f}" for r in rep.per_fold), f"{rep.mean:.2f}"])
        return buf.getvalue()

    def means(self) -> dict[str, float]:
        return {mode: rep.mean for mode, rep in self.rows.items()}

    def sweep_means(self) -> dict[float, float]:
        return {alpha: rep.mean for alpha, rep in self.sweep}

    def plot_sweep(self, path):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        xs = [a for a, _ in self.sweep]
        ys = [r.mean for _, r in self.sweep]
        fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=120)
        ax.plot(xs, ys, marker="o", color="tab:blue")
        for x, y in zip(xs, ys):
            ax.annotate(f"{y:.2f}", (x, y), textcoords="offset points", xytext=(0, 6), ha="center", fontsize=8)
        ax.set_xlabel("alpha")
        ax.set_ylabel("mean Dice (%)")
        ax.set_xlim(-0.05, 1.05)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        return Path(path)

    def write(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        out = []
        if self.rows:
            out.append(directory / "ablation.csv")
            out[-1].write_text(self.table_csv())
        if self.sweep:
            out.append(directory / "alpha_sweep.csv")
            out[-1].write_text(self.sweep_csv())
            out.append(self.plot_sweep(directory / "alpha_sweep.png"))
        return out


def ablate(
    dataset: FewShotDataset,
    base_config: TrainConfig,
    modes: Iterable[str] = ("SSP", "MSP", "MSP+QP"),
    alpha_grid: Iterable[float] = (),
    folds: Optional[Sequence[int]] = None,
    cache: Optional[RunCache] = None,
    out_dir=None,
) -> AblationTable:
    """Train and evaluate each ablation mode, then sweep the fusion weight.

    Sweep points keep the base config's region count and vary only alpha.
    Every run is cross-validated over ``folds`` (all folds by default).
    """
    folds = list(range(dataset.folds.k_folds)) if folds is None else list(folds)
    cache = cache or RunCache()
    modes, grid = list(modes), [float(a) for a in alpha_grid]
    for a in grid:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha {a} outside [0, 1]")
    configs = {m: mode_config(base_config, m) for m in modes}

    rows = {}
    for mode, cfg in configs.items():
        log.info("ablation %s: n_regions=%d alpha=%g", mode, cfg.n_regions, cfg.alpha)
        rows[mode] = run_folds(cfg, dataset, folds, cache)
    sweep = []
    for a in grid:
        log.info("sweep alpha=%g", a)
        sweep.append((a, run_folds(replace(base_config, alpha=a, beta=None), dataset, folds, cache)))

    table = AblationTable(rows=rows, sweep=sweep, base_hash=base_config.config_hash())
    if out_dir is not None:
        table.write(out_dir)
    return table
