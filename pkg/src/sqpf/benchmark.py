"""Desk-scale synthetic benchmark shared by the scripts and the acceptance tests.

Three shape families, one held out (Setting2): the encoder is trained on
episodes from two families and evaluated on the third with a fixed support.
"""

from __future__ import annotations

from dataclasses import replace

from .data import FewShotDataset, make_folds
from .synthetic import SyntheticConfig, synth_generate
from .training import TrainConfig

FAMILIES = ("ellipse", "rectangle", "crescent")
HELD_OUT = "crescent"

# 1000 cases over 5 folds leaves 200 held-out queries in the test fold.
BENCH_SYNTH = SyntheticConfig(
    n_cases=1000,
    image_size=64,
    shape_families=FAMILIES,
    noise_sigma=0.08,
    min_scale=0.15,
    max_scale=0.32,
    # unlabeled clutter inside the foreground intensity band
    n_distractors=3,
    k_folds=5,
    seed=7,
)

BENCH_TRAIN = TrainConfig(
    episodes_per_epoch=2000,
    epochs=1,
    learning_rate=1e-3,
    # SGD stalled at the 2 ln 2 plateau on some folds; Adam did not
    optimizer="adam",
    momentum=0.9,
    weight_decay=1e-4,
    lr_step_episodes=1500,
    lr_gamma=0.1,
    n_regions=4,
    alpha=0.5,
    setting="Setting2",
    fold_index=0,
    seed=0,
)


def synthetic_dataset(
    config: SyntheticConfig = BENCH_SYNTH, held_out: str = HELD_OUT, setting: str = "Setting2"
) -> FewShotDataset:
    samples = tuple(synth_generate(config))
    train_classes = tuple(f for f in config.shape_families if f != held_out)
    folds = make_folds(
        sorted({s.case_id for s in samples}),
        k=config.k_folds,
        setting=setting,
        class_split=(train_classes, (held_out,)),
        seed=config.seed,
    )
    meta = {"kind": "synthetic", "seed": config.seed, "image_size": config.image_size}
    return FewShotDataset(samples=samples, folds=folds, meta=meta)


def bench_config(**overrides) -> TrainConfig:
    return replace(BENCH_TRAIN, **overrides)
