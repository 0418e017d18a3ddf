"""Feature extractors and mask downsampling.

Two backbones share one contract: a ``(B, 1, H, W)`` image batch maps to a
``(B, C, H/4, W/4)`` feature batch.

* ``TinyEncoder``: four conv blocks, trainable from scratch in seconds.
* ``ResNetEncoder``: ResNet-101 trunk, the DeepLabV3 backbone with its ASPP
  head removed. The first two residual stages are dilated, so every exposed
  layer sits at stride 4.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, NumericalError

RESNET_LAYER_CHANNELS = {"layer1": 256, "layer2": 512, "layer3": 1024}


@dataclass(frozen=True)
class EncoderSpec:
    kind: Literal["tiny", "pretrained_deep"] = "tiny"
    feature_channels: int = 32
    stride: int = 4
    weights_source: Optional[str] = None
    # pretrained_deep only: which residual stage feeds the prototypes
    layer: str = "layer3"
    width: int = 32  # tiny only: hidden channels

    def __post_init__(self):
        if self.kind not in ("tiny", "pretrained_deep"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.feature_channels < 8:
            raise ValueError(f"feature_channels must be >= 8, got {self.feature_channels}")
        if self.stride != 4:
            raise ValueError(f"only stride 4 is supported, got {self.stride}")
        if self.kind == "pretrained_deep":
            if self.layer not in RESNET_LAYER_CHANNELS:
                raise ValueError(f"layer must be one of {sorted(RESNET_LAYER_CHANNELS)}")
            if self.feature_channels != RESNET_LAYER_CHANNELS[self.layer]:
                raise ValueError(
                    f"{self.layer} has {RESNET_LAYER_CHANNELS[self.layer]} channels, "
                    f"spec says {self.feature_channels}"
                )


def conv_block(in_ch: int, out_ch: int, stride: int = 1, act: bool = True) -> nn.Sequential:
    layers = [
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(num_groups=min(8, out_ch), num_channels=out_ch),
    ]
    if act:
        layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class TinyEncoder(nn.Module):
    def __init__(self, spec: EncoderSpec = EncoderSpec()):
        super().__init__()
        self.spec = spec
        w = spec.width
        self.body = nn.Sequential(
            conv_block(1, w),
            conv_block(w, w, stride=2),
            conv_block(w, w, stride=2),
            # no trailing ReLU: all-zero pixel vectors would make cosine undefined
            conv_block(w, spec.feature_channels, act=False),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class ResNetEncoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        from torchvision.models import resnet101

        self.spec = spec
        trunk = resnet101(weights=None, replace_stride_with_dilation=[True, True, False])
        stages = ["layer1", "layer2", "layer3"]
        keep = stages[: stages.index(spec.layer) + 1]
        self.stem = nn.Sequential(trunk.conv1, trunk.bn1, trunk.relu, trunk.maxpool)
        self.stages = nn.Sequential(*[getattr(trunk, name) for name in keep])
        if spec.weights_source:
            self.load_weights(spec.weights_source)

    def load_weights(self, source: str):
        """Load backbone weights from a state-dict file or ``torchvision:<name>``.

        ``<name>`` is a DeepLabV3-ResNet101 weights identifier for torchvision
        (``DEFAULT`` if empty); it is downloaded on first use.

        DeepLabV3 checkpoints are accepted as-is: the ``backbone.`` prefix is
        stripped and the ASPP/auxiliary heads are discarded.
        """
        if source.startswith("torchvision:"):
            from torchvision.models.segmentation import deeplabv3_resnet101

            name = source.split(":", 1)[1] or "DEFAULT"
            state = deeplabv3_resnet101(weights=name).state_dict()
        else:
            path = Path(source)
            if not path.exists():
                raise FileNotFoundError(f"encoder weights not found: {path}")
            state = torch.load(path, map_location="cpu", weights_only=True)
        trunk_state = {}
        for key, value in state.items():
            if key.startswith(("classifier.", "aux_classifier.")):
                continue
            trunk_state[key.removeprefix("backbone.")] = value
        # remap flat resnet keys onto stem/stages
        remapped = {}
        stem_names = {"conv1": "stem.0", "bn1": "stem.1"}
        stage_names = {name: f"stages.{i}" for i, name in enumerate(["layer1", "layer2", "layer3"])}
        for key, value in trunk_state.items():
            head, _, rest = key.partition(".")
            if head in stem_names:
                remapped[f"{stem_names[head]}.{rest}"] = value
            elif head in stage_names:
                remapped[f"{stage_names[head]}.{rest}"] = value
        own = self.state_dict()
        missing = [k for k in own if k not in remapped]
        if missing:
            raise DataError(f"weights from {source} lack {len(missing)} keys, e.g. {missing[0]}")
        self.load_state_dict({k: remapped[k] for k in own})

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return self.stages(self.stem(x))


def build_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.kind == "tiny":
        return TinyEncoder(spec)
    return ResNetEncoder(spec)


def encode(image: torch.Tensor, model: nn.Module) -> torch.Tensor:
    """Run ``model`` on an image, image batch, or channel batch.

    Accepts ``(H, W)``, ``(B, H, W)`` or ``(B, 1, H, W)``; a 2-D input returns
    a single ``(C, H/4, W/4)`` map, otherwise the batch dimension is kept.
    """
    squeeze = image.dim() == 2
    if image.dim() == 2:
        x = image[None, None]
    elif image.dim() == 3:
        x = image[:, None]
    elif image.dim() == 4:
        x = image
    else:
        raise DataError(f"unsupported image shape {tuple(image.shape)}")
    stride = model.spec.stride
    h, w = x.shape[-2:]
    if h % stride or w % stride:
        raise DataError(f"input {h}x{w} not divisible by stride {stride}")
    if not bool(torch.isfinite(x).all()):
        raise NumericalError("non-finite values in encoder input")
    feats = model(x)
    expected = (h // stride, w // stride)
    if tuple(feats.shape[-2:]) != expected:
        raise DataError(f"encoder produced {tuple(feats.shape[-2:])}, expected {expected}")
    return feats[0] if squeeze else feats


def downsample_mask(mask: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Area-average a binary ``(H, W)`` (or ``(B, H, W)``) mask to ``target``."""
    h, w = mask.shape[-2:]
    th, tw = target
    if th <= 0 or tw <= 0 or h % th or w % tw:
        raise DataError(f"cannot block-average {h}x{w} onto {th}x{tw}")
    kh, kw = h // th, w // tw
    if (kh, kw) == (1, 1):
        return mask.clone()
    if not mask.is_floating_point():
        mask = mask.to(torch.get_default_dtype())
    lead = mask.shape[:-2]
    x = mask.reshape(-1, 1, h, w)
    out = F.avg_pool2d(x, kernel_size=(kh, kw), stride=(kh, kw))
    return out.reshape(*lead, th, tw)
