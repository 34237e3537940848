"""Low-rank adapters on the q/k/v/o projections of one attention branch."""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .attention import BRANCHES, PROJECTIONS, SPATIAL, TEMPORAL
from .numerics import ConfigError, DimensionError, StateError

SPATIAL_STAGE = "spatial-stage"
TEMPORAL_STAGE = "temporal-stage"
STAGE_BRANCH = {SPATIAL_STAGE: SPATIAL, TEMPORAL_STAGE: TEMPORAL, SPATIAL: SPATIAL, TEMPORAL: TEMPORAL}


class LoraAdapter(nn.Module):
    """``delta(x) = scale * (x @ A) @ B`` with ``A: [in, r]`` and ``B: [r, out]``."""

    def __init__(self, in_dim: int, out_dim: int, rank: int, branch: str, proj: str,
                 scale: float = 1.0, generator: torch.Generator | None = None):
        super().__init__()
        if rank < 1 or rank > min(in_dim, out_dim):
            raise ConfigError(f"rank {rank} invalid for a {in_dim}->{out_dim} projection")
        if branch not in BRANCHES or proj not in PROJECTIONS:
            raise ConfigError(f"bad adapter target {branch}/{proj}")
        self.rank = rank
        self.branch = branch
        self.proj = proj
        self.scale = float(scale)
        self.trainable = True
        self.A = nn.Parameter(torch.randn(in_dim, rank, generator=generator) / math.sqrt(rank))
        self.B = nn.Parameter(torch.zeros(rank, out_dim))

    @property
    def in_dim(self) -> int:
        return self.A.shape[0]

    @property
    def out_dim(self) -> int:
        return self.B.shape[1]

    def delta(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"adapter expects {self.in_dim} input channels, got {x.shape[-1]}")
        return self.scale * ((x @ self.A) @ self.B)

    def dense(self) -> Tensor:
        """The adapter as a ``[out, in]`` weight increment."""
        return self.scale * (self.A @ self.B).T


def lora_init(in_dim: int, out_dim: int, rank: int, seed: int, branch: str = SPATIAL,
              proj: str = "q", scale: float = 1.0) -> LoraAdapter:
    gen = torch.Generator().manual_seed(seed)
    return LoraAdapter(in_dim, out_dim, rank, branch, proj, scale, gen)


def lora_forward(x: Tensor, weight: Tensor, adapter: LoraAdapter | None) -> Tensor:
    """``x @ W.T`` plus the adapter path; ``weight`` is ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"input has {x.shape[-1]} channels, weight expects {weight.shape[1]}")
    y = x @ weight.T
    if adapter is None:
        return y
    if adapter.out_dim != weight.shape[0]:
        raise DimensionError("adapter output extent does not match host projection")
    return y + adapter.delta(x)


def adapter_key(layer: int, branch: str, proj: str, factor: str) -> str:
    return f"lora/{layer}/{branch}/{proj}/{factor}"


def select_trainable(model, stage: str) -> list[tuple[str, nn.Parameter]]:
    """Adapter factors of the branch the stage tunes, as ``(archive name, param)``."""
    if stage not in STAGE_BRANCH:
        raise ConfigError(f"unknown stage {stage!r}")
    branch = STAGE_BRANCH[stage]
    out = []
    for layer, block in enumerate(model.blocks):
        for proj in PROJECTIONS:
            ad = block.attn.adapter(branch, proj)
            if ad is not None:
                out.append((adapter_key(layer, branch, proj, "A"), ad.A))
                out.append((adapter_key(layer, branch, proj, "B"), ad.B))
    if not out:
        raise StateError(f"no {branch} adapters installed for {stage} (does the manifest label any head {branch}?)")
    return out


def merge_adapters(model, branch: str) -> None:
    """Fold a branch's adapters into its host weights and remove them."""
    with torch.no_grad():
        for block in model.blocks:
            attn = block.attn
            for proj in PROJECTIONS:
                ad = attn.adapter(branch, proj)
                if ad is None:
                    continue
                w = attn.branch_weight(branch, proj)
                w.add_(ad.dense())
                attn.remove_adapter(branch, proj)
