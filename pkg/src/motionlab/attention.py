"""3D full self-attention and its temporal/spatial two-branch rearrangement.

Weights follow the ``[out, in]`` layout, so the q/k/v rows of head ``h`` are
``h*D:(h+1)*D`` and the matching columns of ``o``. Projections carry no bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor

from .numerics import ConfigError, DimensionError, rms_norm, softmax_lastdim
from .rope import RopePlan, apply_rope

SPATIAL = "spatial"
TEMPORAL = "temporal"
BRANCHES = (TEMPORAL, SPATIAL)
PROJECTIONS = ("q", "k", "v", "o")

# (x, weight[out, in], branch, projection) -> x @ weight.T (+ adapter delta)
Projector = Callable[[Tensor, Tensor, str, str], Tensor]


def plain_projection(x: Tensor, weight: Tensor, branch: str, proj: str) -> Tensor:
    return x @ weight.T


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    gq: Tensor
    gk: Tensor
    heads: int
    head_dim: int

    def __post_init__(self):
        inner = self.heads * self.head_dim
        for name in ("wq", "wk", "wv"):
            if getattr(self, name).shape[0] != inner:
                raise DimensionError(f"{name} has {getattr(self, name).shape[0]} rows, expected {inner}")
        if self.wo.shape[1] != inner:
            raise DimensionError(f"wo has {self.wo.shape[1]} columns, expected {inner}")
        if self.gq.shape != (inner,) or self.gk.shape != (inner,):
            raise DimensionError("q/k norm gains must span all head channels")

    @classmethod
    def random(cls, model_dim: int, heads: int, head_dim: int, gen: torch.Generator | None = None,
               std: float | None = None) -> "AttentionParams":
        inner = heads * head_dim
        std = std if std is not None else 1.0 / math.sqrt(model_dim)

        def w(o, i):
            return torch.randn(o, i, generator=gen) * std

        return cls(w(inner, model_dim), w(inner, model_dim), w(inner, model_dim),
                   w(model_dim, inner) * math.sqrt(model_dim / inner),
                   1.0 + 0.1 * torch.randn(inner, generator=gen),
                   1.0 + 0.1 * torch.randn(inner, generator=gen), heads, head_dim)


@dataclass
class BranchParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    gq: Tensor
    gk: Tensor
    heads: list[int]

    @property
    def width(self) -> int:
        return self.wq.shape[0]


@dataclass
class DualAttentionParams:
    temporal: BranchParams
    spatial: BranchParams
    order: list[int]
    head_dim: int

    @property
    def heads(self) -> int:
        return len(self.order)

    @property
    def d_temp(self) -> int:
        return self.temporal.width

    def branch(self, name: str) -> BranchParams:
        return self.temporal if name == TEMPORAL else self.spatial


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int, head_dim: int, plan: RopePlan,
            capture: bool) -> tuple[Tensor, Tensor | None]:
    # q, k, v: [..., S, heads*head_dim] -> [..., S, heads*head_dim]
    *lead, s, _ = q.shape
    if s != plan.num_tokens:
        raise DimensionError(f"sequence of {s} tokens does not match plan of {plan.num_tokens}")

    def split(t):
        return t.reshape(*lead, s, heads, head_dim).transpose(-2, -3)

    qh, kh, vh = split(q), split(k), split(v)
    qh, kh = apply_rope(qh, plan), apply_rope(kh, plan)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(head_dim)
    maps = softmax_lastdim(scores, check=False)
    out = (maps @ vh).transpose(-2, -3).reshape(*lead, s, heads * head_dim)
    return out, (maps.detach() if capture else None)


def full_attention_forward(x: Tensor, params: AttentionParams, plan: RopePlan,
                           capture: bool = False, eps: float = 1e-6):
    """Multi-head attention over all tokens with q/k RMS norm and 3D RoPE.

    Returns the output, or ``(output, maps)`` with ``maps[..., head, S, S]``
    when ``capture`` is set.
    """
    q = rms_norm(x @ params.wq.T, params.gq, eps)
    k = rms_norm(x @ params.wk.T, params.gk, eps)
    v = x @ params.wv.T
    att, maps = _attend(q, k, v, params.heads, params.head_dim, plan, capture)
    y = att @ params.wo.T
    return (y, maps) if capture else y


def _head_rows(head: int, head_dim: int) -> slice:
    return slice(head * head_dim, (head + 1) * head_dim)


def _gather(weight: Tensor, heads: Sequence[int], head_dim: int, dim: int) -> Tensor:
    if not heads:
        shape = list(weight.shape)
        shape[dim] = 0
        return weight.new_zeros(shape)
    idx = torch.cat([torch.arange(h * head_dim, (h + 1) * head_dim) for h in heads])
    return weight.index_select(dim, idx)


def partition_heads(params: AttentionParams, head_types: Sequence[str]) -> DualAttentionParams:
    """Split head channel blocks into a temporal branch and a spatial branch."""
    if len(head_types) != params.heads:
        raise ConfigError(f"{len(head_types)} head labels for {params.heads} heads")
    bad = set(head_types) - {SPATIAL, TEMPORAL}
    if bad:
        raise ConfigError(f"unknown head types {sorted(bad)}")
    d = params.head_dim
    temporal = [i for i, t in enumerate(head_types) if t == TEMPORAL]
    spatial = [i for i, t in enumerate(head_types) if t == SPATIAL]

    def branch(heads):
        return BranchParams(
            wq=_gather(params.wq, heads, d, 0),
            wk=_gather(params.wk, heads, d, 0),
            wv=_gather(params.wv, heads, d, 0),
            wo=_gather(params.wo, heads, d, 1),
            gq=_gather(params.gq, heads, d, 0),
            gk=_gather(params.gk, heads, d, 0),
            heads=list(heads),
        )

    return DualAttentionParams(branch(temporal), branch(spatial), temporal + spatial, d)


def merge_heads(dual: DualAttentionParams) -> AttentionParams:
    """Inverse of :func:`partition_heads`."""
    d = dual.head_dim
    h = dual.heads
    t, s = dual.temporal, dual.spatial
    fused = {name: torch.cat([getattr(t, name), getattr(s, name)], dim=1 if name == "wo" else 0)
             for name in ("wq", "wk", "wv", "wo", "gq", "gk")}
    inverse = [0] * h
    for pos, head in enumerate(dual.order):
        inverse[head] = pos
    out = {name: _gather(w, inverse, d, 1 if name == "wo" else 0) for name, w in fused.items()}
    return AttentionParams(heads=h, head_dim=d, **out)


def dual_attention_forward(x: Tensor, dual: DualAttentionParams, plan: RopePlan,
                           project: Projector = plain_projection, capture: bool = False,
                           eps: float = 1e-6):
    """Fused two-branch attention.

    Branch q/k/v outputs are concatenated along channels (temporal first),
    normalized, rotated and attended jointly; the attended features are split at
    ``d_temp`` and each half goes through its own output projection. Captured
    maps are returned in original head order.
    """
    t, s = dual.temporal, dual.spatial

    def cat(proj):
        w = "w" + proj
        return torch.cat([project(x, getattr(t, w), TEMPORAL, proj),
                          project(x, getattr(s, w), SPATIAL, proj)], dim=-1)

    q = rms_norm(cat("q"), torch.cat([t.gq, s.gq]), eps)
    k = rms_norm(cat("k"), torch.cat([t.gk, s.gk]), eps)
    v = cat("v")
    att, maps = _attend(q, k, v, dual.heads, dual.head_dim, plan, capture)
    d_temp = dual.d_temp
    y = project(att[..., :d_temp], t.wo, TEMPORAL, "o") + project(att[..., d_temp:], s.wo, SPATIAL, "o")
    if not capture:
        return y
    inverse = [0] * dual.heads
    for pos, head in enumerate(dual.order):
        inverse[head] = pos
    return y, maps[..., inverse, :, :]
