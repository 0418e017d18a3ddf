"""Prototype construction and support-query fusion.

Every function here works on single (unbatched) tensors:

* feature maps are ``(C, H', W')``
* masks and probability grids are ``(H', W')``
* prototype vectors are ``(C,)``

All ops are differentiable with respect to the feature maps except the hard
selection, whose binary masks are produced detached from the graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .errors import DataError, NumericalError

ROLES = ("support_fg", "support_bg", "query_fg", "query_bg", "fused_fg", "fused_bg")

DEFAULT_TEMPERATURE = 20.0
DEFAULT_BG_THRESHOLD = 0.5


@dataclass(frozen=True)
class Prototype:
    vector: torch.Tensor
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown prototype role {self.role!r}")
        if self.vector.dim() != 1:
            raise ValueError(f"prototype must be 1-D, got shape {tuple(self.vector.shape)}")

    @property
    def side(self) -> str:
        """'fg' or 'bg'."""
        return self.role.rsplit("_", 1)[1]


@dataclass(frozen=True)
class ProbabilityMask:
    fg: torch.Tensor
    bg: torch.Tensor


@dataclass(frozen=True)
class HardSelection:
    fg: torch.Tensor
    bg: torch.Tensor
    t_f: float
    t_b: float


@dataclass(frozen=True)
class RegionPartition:
    regions: tuple[torch.Tensor, ...]
    source_mask: torch.Tensor

    def __len__(self):
        return len(self.regions)


@dataclass(frozen=True)
class SQPFConfig:
    """Hyper-parameters of one forward pass."""

    n_regions: int = 4
    temperature: float = DEFAULT_TEMPERATURE
    alpha: float = 0.5
    beta: Optional[float] = None  # defaults to 1 - alpha
    t_b: float = DEFAULT_BG_THRESHOLD

    @property
    def fusion_beta(self) -> float:
        return 1.0 - self.alpha if self.beta is None else self.beta


@dataclass
class SQPFOutput:
    coarse: ProbabilityMask
    final: ProbabilityMask
    selection: HardSelection
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# support side


def _grid_shape(n_regions: int) -> tuple[int, int]:
    # cols = ceil(sqrt(n)), rows = n // cols: a g x g grid for perfect squares
    # and never more than n cells otherwise.
    cols = math.ceil(math.sqrt(n_regions))
    rows = max(1, n_regions // cols)
    return rows, cols


def _split_edges(start: int, stop: int, parts: int) -> list[int]:
    length = stop - start
    parts = min(parts, length)
    return [start + (length * i) // parts for i in range(parts + 1)]


def partition_foreground(mask: torch.Tensor, n_regions: int) -> RegionPartition:
    """Split a soft foreground mask into at most ``n_regions`` local regions.

    The mask's bounding box is cut by a regular grid; each region is the mask
    restricted to one grid cell, and cells carrying no mass are dropped. The
    regions therefore sum exactly to ``mask``.
    """
    if n_regions < 1:
        raise ValueError(f"n_regions must be >= 1, got {n_regions}")
    if mask.dim() != 2:
        raise ValueError(f"mask must be 2-D, got shape {tuple(mask.shape)}")
    support = mask.detach() > 0
    if not bool(support.any()):
        raise DataError("cannot partition an empty foreground mask")
    if n_regions == 1:
        return RegionPartition(regions=(mask,), source_mask=mask)

    rows = torch.nonzero(support.any(dim=1)).flatten()
    cols = torch.nonzero(support.any(dim=0)).flatten()
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    c0, c1 = int(cols[0]), int(cols[-1]) + 1
    n_rows, n_cols = _grid_shape(n_regions)
    row_edges = _split_edges(r0, r1, n_rows)
    col_edges = _split_edges(c0, c1, n_cols)

    regions = []
    for ra, rb in zip(row_edges[:-1], row_edges[1:]):
        for ca, cb in zip(col_edges[:-1], col_edges[1:]):
            cell = torch.zeros_like(mask)
            cell[ra:rb, ca:cb] = 1
            region = mask * cell
            if float(region.detach().sum()) > 0:
                regions.append(region)
    return RegionPartition(regions=tuple(regions), source_mask=mask)


def masked_average_pool(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mask-weighted mean of a ``(C, H, W)`` feature map; returns ``(C,)``."""
    if features.shape[-2:] != mask.shape:
        raise DataError(
            f"feature grid {tuple(features.shape[-2:])} and mask {tuple(mask.shape)} disagree"
        )
    mass = mask.sum()
    if float(mass.detach()) <= 0:
        raise NumericalError("masked average pooling over a zero-mass mask")
    return (features * mask).sum(dim=(-2, -1)) / mass


def support_prototype(features: torch.Tensor, partition: RegionPartition) -> Prototype:
    """Unweighted mean of the regional MAP prototypes."""
    regional = torch.stack([masked_average_pool(features, u) for u in partition.regions])
    return Prototype(regional.mean(dim=0), "support_fg")


def background_prototype(features: torch.Tensor, fg_mask: torch.Tensor) -> Prototype:
    bg_mask = 1 - fg_mask
    if float(bg_mask.detach().sum()) <= 0:
        raise DataError("support mask is all foreground; no background to pool")
    return Prototype(masked_average_pool(features, bg_mask), "support_bg")


def average_prototypes(prototypes: Sequence[Prototype]) -> Prototype:
    """Combine per-shot prototypes of a K-shot support set."""
    roles = {p.role for p in prototypes}
    if len(roles) != 1:
        raise ValueError(f"cannot average prototypes with mixed roles {sorted(roles)}")
    return Prototype(torch.stack([p.vector for p in prototypes]).mean(dim=0), roles.pop())


# ---------------------------------------------------------------------------
# query side


def cosine_map(features: torch.Tensor, prototype: torch.Tensor) -> torch.Tensor:
    """Per-pixel cosine similarity between ``(C, H, W)`` features and a ``(C,)`` vector."""
    if features.shape[0] != prototype.shape[0]:
        raise DataError(
            f"feature channels {features.shape[0]} != prototype dim {prototype.shape[0]}"
        )
    pixel_norm = features.norm(dim=0)
    proto_norm = prototype.norm()
    if bool((pixel_norm.detach() == 0).any()):
        raise NumericalError("zero-norm feature vector; cosine similarity undefined")
    if float(proto_norm.detach()) == 0:
        raise NumericalError("zero-norm prototype; cosine similarity undefined")
    dot = torch.einsum("chw,c->hw", features, prototype)
    return dot / (pixel_norm * proto_norm)


def _check_finite(p: Prototype):
    if not bool(torch.isfinite(p.vector.detach()).all()):
        raise NumericalError(f"non-finite entries in {p.role} prototype")


def coarse_query_mask(
    query_features: torch.Tensor,
    p_fg: Prototype,
    p_bg: Prototype,
    temperature: float = DEFAULT_TEMPERATURE,
) -> ProbabilityMask:
    """Two-way softmax over scaled cosine similarities to the fg/bg prototypes."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    _check_finite(p_fg)
    _check_finite(p_bg)
    logits = temperature * torch.stack(
        [cosine_map(query_features, p_fg.vector), cosine_map(query_features, p_bg.vector)]
    )
    fg = torch.softmax(logits, dim=0)[0]
    return ProbabilityMask(fg=fg, bg=1 - fg)


def foreground_threshold(fg: torch.Tensor) -> float:
    """Adaptive foreground threshold: midpoint of the grid's max and mean."""
    if fg.numel() == 0:
        raise ValueError("foreground threshold of an empty grid")
    fg = fg.detach().double()
    top = fg.max()
    # rounded means of near-constant grids can step an ulp outside [min, max]
    return float((top + fg.mean().clamp(fg.min(), top)) / 2)


def hard_select(
    pm: ProbabilityMask, t_f: float, t_b: float = DEFAULT_BG_THRESHOLD
) -> HardSelection:
    if not (0.0 <= t_f <= 1.0 and 0.0 <= t_b <= 1.0):
        raise ValueError(f"thresholds must lie in [0, 1], got T_f={t_f}, T_b={t_b}")
    fg = (pm.fg.detach() >= t_f).to(pm.fg.dtype)
    bg = (pm.bg.detach() >= t_b).to(pm.bg.dtype)
    return HardSelection(fg=fg, bg=bg, t_f=t_f, t_b=t_b)


def query_prototype(
    query_features: torch.Tensor, sel: HardSelection
) -> tuple[Optional[Prototype], Optional[Prototype]]:
    """Pool the query features under the hard-selected masks.

    A side whose selection is empty comes back as ``None``; callers treat that
    as "no confident pixels" and fall back to the support prototype.
    """
    out = []
    for mask, role in ((sel.fg, "query_fg"), (sel.bg, "query_bg")):
        if float(mask.sum()) == 0:
            out.append(None)
        else:
            out.append(Prototype(masked_average_pool(query_features, mask), role))
    return out[0], out[1]


def fuse_prototypes(p_s: Prototype, p_q: Prototype, alpha: float, beta: float) -> Prototype:
    if p_s.vector.shape != p_q.vector.shape:
        raise DataError(
            f"prototype dims differ: {tuple(p_s.vector.shape)} vs {tuple(p_q.vector.shape)}"
        )
    if p_s.side != p_q.side:
        raise ValueError(f"cannot fuse {p_s.role} with {p_q.role}")
    if alpha < 0 or beta < 0:
        raise ValueError(f"fusion weights must be non-negative, got alpha={alpha}, beta={beta}")
    return Prototype(alpha * p_s.vector + beta * p_q.vector, f"fused_{p_s.side}")


def final_prediction(
    query_features: torch.Tensor,
    p_final_fg: Prototype,
    p_final_bg: Prototype,
    temperature: float = DEFAULT_TEMPERATURE,
) -> ProbabilityMask:
    return coarse_query_mask(query_features, p_final_fg, p_final_bg, temperature)


# ---------------------------------------------------------------------------
# full pipeline


def sqpf_forward(
    support: Sequence[tuple[torch.Tensor, torch.Tensor]],
    query_features: torch.Tensor,
    cfg: SQPFConfig = SQPFConfig(),
    selection: Optional[HardSelection] = None,
) -> SQPFOutput:
    """Segment one query from K (features, soft fg mask) support shots.

    ``selection`` overrides the hard selection computed from the coarse mask.
    Gradient checks use it to hold the step-function thresholding fixed.
    """
    if not support:
        raise DataError("support set is empty")
    fg_protos, bg_protos = [], []
    n_regions_used = []
    for feats, mask in support:
        partition = partition_foreground(mask, cfg.n_regions)
        n_regions_used.append(len(partition))
        fg_protos.append(support_prototype(feats, partition))
        bg_protos.append(background_prototype(feats, mask))
    p_s_fg = average_prototypes(fg_protos)
    p_s_bg = average_prototypes(bg_protos)

    coarse = coarse_query_mask(query_features, p_s_fg, p_s_bg, cfg.temperature)
    if selection is None:
        t_f = foreground_threshold(coarse.fg)
        selection = hard_select(coarse, t_f, cfg.t_b)
    q_fg, q_bg = query_prototype(query_features, selection)

    diagnostics = {
        "T_f": selection.t_f,
        "T_b": selection.t_b,
        "n_regions": n_regions_used,
        "selected_fg": int(selection.fg.sum()),
        "selected_bg": int(selection.bg.sum()),
        "fg_fallback": q_fg is None,
        "bg_fallback": q_bg is None,
    }
    if q_fg is None:
        return SQPFOutput(coarse=coarse, final=coarse, selection=selection, diagnostics=diagnostics)

    beta = cfg.fusion_beta
    p_fg = fuse_prototypes(p_s_fg, q_fg, cfg.alpha, beta)
    p_bg = fuse_prototypes(p_s_bg, q_bg, cfg.alpha, beta) if q_bg is not None else p_s_bg
    final = final_prediction(query_features, p_fg, p_bg, cfg.temperature)
    return SQPFOutput(coarse=coarse, final=final, selection=selection, diagnostics=diagnostics)
