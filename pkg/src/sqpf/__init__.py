"""Few-shot segmentation with support-query prototype fusion."""

from .ablation import ablate
from .data import (
    Episode,
    FewShotDataset,
    FoldPlan,
    SliceSample,
    VolumeRecord,
    load_volume,
    make_folds,
    sample_episode,
    slice_and_resize,
)
from .encoder import EncoderSpec, build_encoder, downsample_mask, encode
from .prototypes import SQPFConfig, sqpf_forward
from .synthetic import SyntheticConfig, synth_generate
from .training import Checkpoint, DiceReport, TrainConfig, cross_validate, evaluate, train_fold

__version__ = "0.1.0"
