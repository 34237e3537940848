"""Factorized 3D rotary embeddings over (frame, height, width) tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from .numerics import ConfigError, DimensionError


def default_axis_split(head_dim: int) -> tuple[int, int, int]:
    """Frame gets half the head channels, height and width a quarter each (even)."""
    if head_dim % 2:
        raise ConfigError(f"head dim must be even, got {head_dim}")
    hw = 2 * (head_dim // 8)
    return head_dim - 2 * hw, hw, hw


@dataclass
class RopePlan:
    pos_f: Tensor
    pos_h: Tensor
    pos_w: Tensor
    grid: tuple[int, int, int]
    axis_dims: tuple[int, int, int] | None = None
    base: float = 10_000.0

    @property
    def num_tokens(self) -> int:
        return self.pos_f.numel()

    def with_frame_positions(self, frame_positions: Sequence[float]) -> "RopePlan":
        f, h, w = self.grid
        if len(frame_positions) != f:
            raise DimensionError(f"{len(frame_positions)} frame positions for {f} frames")
        fp = torch.as_tensor(list(frame_positions), dtype=torch.float64)
        return RopePlan(fp.repeat_interleave(h * w), self.pos_h, self.pos_w, self.grid,
                        self.axis_dims, self.base)

    def zeroed(self) -> "RopePlan":
        z = torch.zeros_like(self.pos_f)
        return RopePlan(z, z.clone(), z.clone(), self.grid, self.axis_dims, self.base)


def build_positions(frames: int, height: int, width: int,
                    frame_positions: Sequence[float] | None = None,
                    axis_dims: tuple[int, int, int] | None = None,
                    base: float = 10_000.0) -> RopePlan:
    """Frame-major token grid: token ``f*H*W + h*W + w`` sits at ``(f, h, w)``."""
    if min(frames, height, width) < 1:
        raise DimensionError("grid extents must be >= 1")
    f, h, w = torch.meshgrid(torch.arange(frames, dtype=torch.float64),
                             torch.arange(height, dtype=torch.float64),
                             torch.arange(width, dtype=torch.float64), indexing="ij")
    plan = RopePlan(f.reshape(-1), h.reshape(-1), w.reshape(-1), (frames, height, width),
                    axis_dims, base)
    if frame_positions is not None:
        plan = plan.with_frame_positions(frame_positions)
    return plan


def adaptive_temporal_positions(frames: int, sampled: int) -> list[float]:
    """Positions that stretch ``sampled`` frames over the ``[0, frames]`` range.

    ``pos(i) = F/2 + (F/F_samp) * (i - F_samp/2)``; identity when the counts agree.
    """
    if sampled < 1:
        raise DimensionError("sampled frame count must be >= 1")
    if sampled > frames:
        raise DimensionError(f"cannot sample {sampled} of {frames} frames")
    if sampled == frames:
        return [float(i) for i in range(frames)]
    stride = frames / sampled
    return [frames / 2 + stride * (i - sampled / 2) for i in range(sampled)]


def _axis_angles(pos: Tensor, dim: int, base: float) -> Tensor:
    # [S, dim/2]
    c = torch.arange(dim // 2, dtype=torch.float64)
    theta = base ** (-2.0 * c / dim)
    return pos[:, None] * theta[None, :]


def rope_angles(plan: RopePlan, head_dim: int) -> Tensor:
    dims = plan.axis_dims or default_axis_split(head_dim)
    if any(d % 2 for d in dims) or sum(dims) != head_dim:
        raise ConfigError(f"axis channel split {dims} must be even and sum to {head_dim}")
    return torch.cat([_axis_angles(plan.pos_f, dims[0], plan.base),
                      _axis_angles(plan.pos_h, dims[1], plan.base),
                      _axis_angles(plan.pos_w, dims[2], plan.base)], dim=-1)


def apply_rope(x: Tensor, plan: RopePlan) -> Tensor:
    """Rotate adjacent channel pairs of ``x[..., S, D]`` by their token's angles."""
    s, d = x.shape[-2], x.shape[-1]
    if s != plan.num_tokens:
        raise DimensionError(f"sequence length {s} != plan tokens {plan.num_tokens}")
    ang = rope_angles(plan, d)
    cos = torch.cos(ang).to(x.dtype)
    sin = torch.sin(ang).to(x.dtype)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = torch.stack((xe * cos - xo * sin, xe * sin + xo * cos), dim=-1)
    return out.flatten(-2)
