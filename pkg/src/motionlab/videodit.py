"""A small video diffusion transformer trained with flow matching.

Convention: ``x_t = (1 - t) * data + t * noise`` and the velocity target is
``noise - data``; ``t = 0`` is data, ``t = 1`` is pure noise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import (BRANCHES, SPATIAL, TEMPORAL, AttentionParams, BranchParams,
                        DualAttentionParams, dual_attention_forward, full_attention_forward,
                        merge_heads, partition_heads)
from .lora import LoraAdapter
from .numerics import (ConfigError, DimensionError, RandomSource, StateError, check_finite)
from .rope import RopePlan, build_positions


@dataclass
class VideoLatent:
    grid: Tensor  # [F, H, W, C]
    frame_positions: list[float] | None = None
    condition_id: int = 0

    def __post_init__(self):
        if self.grid.dim() != 4 or self.grid.shape[0] < 1:
            raise DimensionError(f"latent grid must be [F, H, W, C], got {tuple(self.grid.shape)}")
        if self.frame_positions is None:
            self.frame_positions = [float(i) for i in range(self.frames)]
        self.frame_positions = [float(p) for p in self.frame_positions]
        if len(self.frame_positions) != self.frames:
            raise DimensionError("one frame position per frame required")
        if any(b <= a for a, b in zip(self.frame_positions, self.frame_positions[1:])):
            raise ConfigError("frame positions must be strictly increasing")

    @property
    def frames(self) -> int:
        return self.grid.shape[0]

    def select_frames(self, indices: Sequence[int], positions: Sequence[float] | None = None) -> "VideoLatent":
        idx = list(indices)
        pos = positions if positions is not None else [self.frame_positions[i] for i in idx]
        return VideoLatent(self.grid[idx], list(pos), self.condition_id)


@dataclass
class ModelConfig:
    model_dim: int = 64
    heads: int = 4
    head_dim: int = 16
    blocks: int = 2
    mlp_ratio: int = 4
    channels: int = 4
    num_conditions: int = 2
    grid: tuple[int, int, int] = (9, 6, 6)
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if self.model_dim != self.heads * self.head_dim:
            raise ConfigError(f"model_dim {self.model_dim} != heads*head_dim {self.heads * self.head_dim}")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")

    def to_json(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10_000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class AttentionLayer(nn.Module):
    """Holds full-attention weights, or the two branches once partitioned."""

    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        p = AttentionParams.random(cfg.model_dim, cfg.heads, cfg.head_dim, gen)
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.weights = nn.ParameterDict({n: nn.Parameter(getattr(p, n))
                                         for n in ("wq", "wk", "wv", "wo", "gq", "gk")})
        self.order: list[int] | None = None
        self.branch_heads: dict[str, list[int]] = {}
        self.adapters = nn.ModuleDict()

    @property
    def partitioned(self) -> bool:
        return self.order is not None

    def full_params(self) -> AttentionParams:
        if self.partitioned:
            return merge_heads(self.dual_params())
        w = self.weights
        return AttentionParams(w["wq"], w["wk"], w["wv"], w["wo"], w["gq"], w["gk"], self.heads, self.head_dim)

    def dual_params(self) -> DualAttentionParams:
        if not self.partitioned:
            raise StateError("attention layer is not partitioned")
        w = self.weights

        def branch(b):
            return BranchParams(*(w[f"{b}_{n}"] for n in ("wq", "wk", "wv", "wo", "gq", "gk")),
                                heads=self.branch_heads[b])

        return DualAttentionParams(branch(TEMPORAL), branch(SPATIAL), self.order, self.head_dim)

    def partition(self, head_types: Sequence[str]) -> None:
        if self.adapters:
            raise StateError("cannot repartition a layer with adapters installed")
        with torch.no_grad():
            dual = partition_heads(self.full_params(), head_types)
        new = {}
        for b in BRANCHES:
            bp = dual.branch(b)
            for n in ("wq", "wk", "wv", "wo", "gq", "gk"):
                new[f"{b}_{n}"] = nn.Parameter(getattr(bp, n).clone())
            self.branch_heads[b] = list(bp.heads)
        self.weights = nn.ParameterDict(new)
        self.order = list(dual.order)

    def branch_weight(self, branch: str, proj: str) -> nn.Parameter:
        return self.weights[f"{branch}_w{proj}"]

    def adapter(self, branch: str, proj: str) -> LoraAdapter | None:
        key = f"{branch}_{proj}"
        return self.adapters[key] if key in self.adapters else None

    def add_adapter(self, adapter: LoraAdapter) -> None:
        if not self.partitioned:
            raise StateError("adapters attach to partitioned branches")
        w = self.branch_weight(adapter.branch, adapter.proj)
        if (adapter.out_dim, adapter.in_dim) != tuple(w.shape):
            raise DimensionError(f"adapter {adapter.in_dim}->{adapter.out_dim} does not fit host {tuple(w.shape)}")
        self.adapters[f"{adapter.branch}_{adapter.proj}"] = adapter

    def remove_adapter(self, branch: str, proj: str) -> None:
        del self.adapters[f"{branch}_{proj}"]

    def _project(self, x: Tensor, weight: Tensor, branch: str, proj: str) -> Tensor:
        y = x @ weight.T
        key = f"{branch}_{proj}"
        if key in self.adapters:
            y = y + self.adapters[key].delta(x)
        return y

    def forward(self, x: Tensor, plan: RopePlan, capture: bool = False):
        if not self.partitioned:
            return full_attention_forward(x, self.full_params(), plan, capture=capture)
        return dual_attention_forward(x, self.dual_params(), plan, project=self._project, capture=capture)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        d = cfg.model_dim
        self.attn = AttentionLayer(cfg, gen)
        self.fc1 = nn.Linear(d, cfg.mlp_ratio * d)
        self.fc2 = nn.Linear(cfg.mlp_ratio * d, d)
        self.ada = nn.Linear(d, 6 * d)

    def forward(self, x: Tensor, c: Tensor, plan: RopePlan, capture: bool = False):
        d = x.shape[-1]
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(F.silu(c))[:, None, :].chunk(6, dim=-1)
        h = F.layer_norm(x, (d,), eps=1e-6) * (1 + scale1) + shift1
        att = self.attn(h, plan, capture=capture)
        maps = None
        if capture:
            att, maps = att
        x = x + gate1 * att
        h = F.layer_norm(x, (d,), eps=1e-6) * (1 + scale2) + shift2
        x = x + gate2 * self.fc2(F.gelu(self.fc1(h), approximate="tanh"))
        return x, maps


CELL_EMBED_STD = 0.5


class VideoDiT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        d = cfg.model_dim
        self.embed = nn.Linear(cfg.channels, d)
        # learned per-cell offset; frames get no absolute embedding, only rotary phases
        self.cell_embed = nn.Parameter(torch.zeros(cfg.grid[1] * cfg.grid[2], d))
        self.t_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.cond = nn.Embedding(cfg.num_conditions, d)
        self.blocks = nn.ModuleList([Block(cfg, gen) for _ in range(cfg.blocks)])
        self.final_ada = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, cfg.channels)
        self._init_weights(gen)

    def _init_weights(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            for name, mod in self.named_modules():
                if isinstance(mod, nn.Linear):
                    std = 0.02 if ("ada" in name) else 1.0 / math.sqrt(mod.in_features)
                    mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * std)
                    mod.bias.zero_()
            self.cond.weight.copy_(torch.randn(self.cond.weight.shape, generator=gen))
            self.cell_embed.copy_(torch.randn(self.cell_embed.shape, generator=gen) * CELL_EMBED_STD)

    # -- structure -----------------------------------------------------------------

    def apply_manifest(self, manifest) -> None:
        if len(manifest.layers) != len(self.blocks):
            raise ConfigError(f"manifest has {len(manifest.layers)} layers, model has {len(self.blocks)}")
        for i, block in enumerate(self.blocks):
            types = manifest.types(i)
            if len(types) != self.cfg.heads:
                raise ConfigError(f"layer {i}: manifest lists {len(types)} heads, model has {self.cfg.heads}")
            block.attn.partition(types)

    def base_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if ".adapters." not in n]

    def base_state(self) -> dict[str, Tensor]:
        """Base weights with attention in unpartitioned (original head) form."""
        out = {}
        for name, p in self.named_parameters():
            if ".attn." in name:
                continue
            out[f"base/{name}"] = p.detach().clone()
        for i, block in enumerate(self.blocks):
            fp = block.attn.full_params()
            for n in ("wq", "wk", "wv", "wo", "gq", "gk"):
                out[f"base/blocks.{i}.attn.{n}"] = getattr(fp, n).detach().clone()
        return out

    def load_base_state(self, state: dict[str, Tensor]) -> None:
        if any(b.attn.partitioned for b in self.blocks):
            raise StateError("load base weights before partitioning")
        with torch.no_grad():
            for name, p in self.named_parameters():
                if ".attn." in name:
                    i = name.split(".")[1]
                    key = f"base/blocks.{i}.attn.{name.rsplit('.', 1)[1]}"
                else:
                    key = f"base/{name}"
                if key not in state:
                    raise ConfigError(f"checkpoint is missing {key}")
                if state[key].shape != p.shape:
                    raise DimensionError(f"{key}: checkpoint {tuple(state[key].shape)} vs model {tuple(p.shape)}")
                p.copy_(state[key])

    # -- forward ---------------------------------------------------------------

    def conditioning(self, t: Tensor, cond: Tensor) -> Tensor:
        return self.t_mlp(timestep_embedding(t, self.cfg.model_dim)) + self.cond(cond)

    def forward(self, x: Tensor, t, condition_id, frame_positions: Sequence[float] | None = None,
                plan: RopePlan | None = None, capture: bool = False):
        """Velocity for ``x[..., F, H, W, C]`` (optional leading batch dim).

        ``t`` and ``condition_id`` are scalars or per-batch tensors. With
        ``capture`` the per-layer attention maps ``[..., heads, S, S]`` are also
        returned.
        """
        squeeze = x.dim() == 4
        if squeeze:
            x = x[None]
        if x.dim() != 5:
            raise DimensionError(f"expected [B, F, H, W, C], got {tuple(x.shape)}")
        b, f, h, w, c = x.shape
        _, gh, gw = self.cfg.grid
        if (h, w, c) != (gh, gw, self.cfg.channels):
            raise DimensionError(f"grid {(h, w, c)} does not match model {(gh, gw, self.cfg.channels)}")
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(b)
        if ((t < 0) | (t > 1)).any():
            raise ValueError("t must lie in [0, 1]")
        cond = torch.as_tensor(condition_id, dtype=torch.long).reshape(-1).expand(b)
        if plan is None:
            plan = build_positions(f, h, w, frame_positions)
        elif plan.grid != (f, h, w):
            raise DimensionError(f"plan grid {plan.grid} does not match input {(f, h, w)}")

        tokens = self.embed(x.reshape(b, f, h * w, c)) + self.cell_embed
        tokens = tokens.reshape(b, f * h * w, -1)
        emb = self.conditioning(t, cond)
        maps = []
        for block in self.blocks:
            tokens, m = block(tokens, emb, plan, capture=capture)
            maps.append(m[0] if squeeze and capture else m)
        shift, scale = self.final_ada(F.silu(emb))[:, None, :].chunk(2, dim=-1)
        tokens = F.layer_norm(tokens, (tokens.shape[-1],), eps=1e-6) * (1 + scale) + shift
        out = check_finite(self.head(tokens), "model output").reshape(b, f, h, w, c)
        if squeeze:
            out = out[0]
        return (out, maps) if capture else out


def model_forward(model: VideoDiT, x_t: VideoLatent, t: float, condition_id: int | None = None) -> Tensor:
    cond = x_t.condition_id if condition_id is None else condition_id
    return model(x_t.grid, t, cond, frame_positions=x_t.frame_positions)


# -- objectives ------------------------------------------------------------------

def flow_interpolate(x_data: Tensor, noise: Tensor, t) -> tuple[Tensor, Tensor]:
    if x_data.shape != noise.shape:
        raise DimensionError("data and noise shapes differ")
    t = torch.as_tensor(t, dtype=x_data.dtype)
    if t.dim() > 0:
        t = t.reshape(-1, *([1] * (x_data.dim() - 1)))
    return (1 - t) * x_data + t * noise, noise - x_data


def mse(pred: Tensor, target: Tensor) -> Tensor:
    return (pred - target).pow(2).mean()


def denoise_loss(model: Callable, latent: VideoLatent, t: float, seed: int | RandomSource) -> Tensor:
    src = seed if isinstance(seed, RandomSource) else RandomSource(seed)
    noise = src.normal(latent.grid.shape)
    x_t, v = flow_interpolate(latent.grid, noise, t)
    pred = model(x_t, t, latent.condition_id, frame_positions=latent.frame_positions)
    return mse(pred, v)


def motion_loss(v_target: Tensor, v_pred: Tensor) -> Tensor:
    """Mean over consecutive-frame pairs of ``1 - cos`` between frame differences.

    Frame axis is the first axis of ``[F, ...]`` (or second with a batch dim
    ``[B, F, ...]`` when ``batched``-shaped 5D input is given). A pair where
    both differences vanish contributes 0; where one vanishes, 1.
    """
    if v_target.shape != v_pred.shape:
        raise DimensionError("motion loss arguments differ in shape")
    if v_target.dim() == 5:
        return torch.stack([motion_loss(a, b) for a, b in zip(v_target, v_pred)]).mean()
    if v_target.shape[0] < 2:
        raise DimensionError("motion loss needs at least two frames")
    da = (v_target[1:] - v_target[:-1]).reshape(v_target.shape[0] - 1, -1)
    db = (v_pred[1:] - v_pred[:-1]).reshape(v_pred.shape[0] - 1, -1)
    return (1 - cosine_rows(da, db, both_zero=1.0)).mean()


def cosine_rows(a: Tensor, b: Tensor, both_zero: float) -> Tensor:
    """Row-wise cosine; 0 when exactly one row is zero, ``both_zero`` when both are."""
    na = a.pow(2).sum(-1)
    nb = b.pow(2).sum(-1)
    dot = (a * b).sum(-1)
    ok = (na > 0) & (nb > 0)
    denom = torch.sqrt(torch.where(ok, na * nb, torch.ones_like(na)))
    cos = torch.where(ok, dot / denom, torch.zeros_like(dot))
    return torch.where((na == 0) & (nb == 0), torch.full_like(cos, both_zero), cos)


def euler_sample(model: Callable, shape: Sequence[int], steps: int, condition_id: int, seed: int,
                 frame_positions: Sequence[float] | None = None) -> VideoLatent:
    """Integrate from noise at ``t=1`` down to ``t=0`` with uniform Euler steps."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    x = RandomSource(seed).normal(shape)
    dt = 1.0 / steps
    with torch.no_grad():
        for k in range(steps):
            t = 1.0 - k * dt
            x = x - dt * model(x, t, condition_id, frame_positions=frame_positions)
    return VideoLatent(x, list(frame_positions) if frame_positions is not None else None, condition_id)
