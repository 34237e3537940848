"""Stage 1: label each attention head spatial or temporal from its attention map.

A head's captured map is scored against two binary reference patterns: a
same-frame block-diagonal mask and a same-position cross-frame lattice. The
score is the mean of the elementwise product over all ``S*S`` entries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch import Tensor

from .attention import SPATIAL, TEMPORAL
from .numerics import ConfigError, DimensionError, RandomSource


def _frame_and_cell(frames: int, height: int, width: int) -> tuple[Tensor, Tensor]:
    if min(frames, height, width) < 1:
        raise DimensionError("grid extents must be >= 1")
    idx = torch.arange(frames * height * width)
    hw = height * width
    return idx // hw, idx % hw


def gen_spatial_maps(frames: int, height: int, width: int) -> Tensor:
    """1 where two tokens share a frame."""
    f, _ = _frame_and_cell(frames, height, width)
    return (f[:, None] == f[None, :]).to(torch.get_default_dtype())


def gen_temporal_maps(frames: int, height: int, width: int) -> Tensor:
    """1 where two tokens share a spatial cell (any frame)."""
    _, c = _frame_and_cell(frames, height, width)
    return (c[:, None] == c[None, :]).to(torch.get_default_dtype())


@dataclass
class PseudoMasks:
    spatial: Tensor
    temporal: Tensor
    grid: tuple[int, int, int]

    @classmethod
    def for_grid(cls, frames: int, height: int, width: int) -> "PseudoMasks":
        return cls(gen_spatial_maps(frames, height, width),
                   gen_temporal_maps(frames, height, width), (frames, height, width))


def head_similarities(maps: Tensor, masks: PseudoMasks, tol: float = 1e-3) -> Tensor:
    """``maps[head, S, S]`` -> ``[head, 2]`` of (sim_s, sim_t)."""
    s = masks.spatial.shape[0]
    if maps.dim() != 3 or maps.shape[1:] != (s, s):
        raise DimensionError(f"maps of shape {tuple(maps.shape)} do not match {s}x{s} masks")
    rows = maps.sum(dim=-1)
    if (rows - 1).abs().max() > tol:
        raise ValueError("attention maps are not row-stochastic")
    maps = maps.to(masks.spatial.dtype)
    sim_s = (maps * masks.spatial).mean(dim=(1, 2))
    sim_t = (maps * masks.temporal).mean(dim=(1, 2))
    return torch.stack([sim_s, sim_t], dim=-1)


@dataclass
class ClassifierConfig:
    alpha: float = 1.25
    timesteps: list[float] = field(default_factory=lambda: [0.5])
    layers: list[int] | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if not self.timesteps:
            raise ConfigError("need at least one capture timestep")


def classify_heads(sims: Sequence[Sequence[float]] | Tensor, alpha: float) -> list[str]:
    """Temporal iff ``sim_s < alpha * sim_t``; ties go spatial."""
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    return [TEMPORAL if float(ss) < alpha * float(st) else SPATIAL for ss, st in sims]


@dataclass
class HeadRecord:
    index: int
    type: str
    sim_s: float
    sim_t: float


@dataclass
class HeadManifest:
    alpha: float
    grid: tuple[int, int, int]
    layers: list[list[HeadRecord]]

    def types(self, layer: int) -> list[str]:
        return [h.type for h in self.layers[layer]]

    def counts(self) -> dict[str, int]:
        out = {SPATIAL: 0, TEMPORAL: 0}
        for layer in self.layers:
            for h in layer:
                out[h.type] += 1
        return out

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "grid": list(self.grid),
            "layers": [{"layer": i, "heads": [{"index": h.index, "type": h.type,
                                               "sim_s": h.sim_s, "sim_t": h.sim_t} for h in heads]}
                       for i, heads in enumerate(self.layers)],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HeadManifest":
        layers = sorted(obj["layers"], key=lambda l: l["layer"])
        if [l["layer"] for l in layers] != list(range(len(layers))):
            raise ConfigError("manifest layers must be numbered 0..N-1")
        recs = []
        for l in layers:
            heads = sorted(l["heads"], key=lambda h: h["index"])
            if [h["index"] for h in heads] != list(range(len(heads))):
                raise ConfigError(f"layer {l['layer']} head indices must be 0..H-1")
            for h in heads:
                if h["type"] not in (SPATIAL, TEMPORAL):
                    raise ConfigError(f"unknown head type {h['type']!r}")
            recs.append([HeadRecord(int(h["index"]), h["type"], float(h["sim_s"]), float(h["sim_t"]))
                         for h in heads])
        return cls(float(obj["alpha"]), tuple(int(g) for g in obj["grid"]), recs)

    def save(self, path: str | Path) -> None:
        # repr-precision floats keep the round trip exact
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "HeadManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


def manifest_from_maps(maps_per_layer: Sequence[Tensor], grid: tuple[int, int, int],
                       alpha: float) -> HeadManifest:
    masks = PseudoMasks.for_grid(*grid)
    layers = []
    for maps in maps_per_layer:
        sims = head_similarities(maps, masks)
        types = classify_heads(sims.tolist(), alpha)
        layers.append([HeadRecord(i, ty, float(ss), float(st))
                       for i, (ty, (ss, st)) in enumerate(zip(types, sims.tolist()))])
    return HeadManifest(alpha, tuple(grid), layers)


def run_stage1(model, reference, cfg: ClassifierConfig | None = None, seed: int = 0) -> HeadManifest:
    """Capture maps on the noised reference, average over timesteps, classify.

    Layers outside ``cfg.layers`` are labelled spatial with their scores kept.
    """
    cfg = cfg or ClassifierConfig()
    grid = tuple(reference.grid.shape[:3])
    src = RandomSource(seed)
    noise = src.normal(reference.grid.shape)
    total = None
    with torch.no_grad():
        for t in cfg.timesteps:
            x_t = (1 - t) * reference.grid + t * noise
            _, maps = model(x_t, t, reference.condition_id, frame_positions=reference.frame_positions,
                            capture=True)
            maps = [m.to(torch.float64) for m in maps]
            total = maps if total is None else [a + b for a, b in zip(total, maps)]
    avg = [m / len(cfg.timesteps) for m in total]
    manifest = manifest_from_maps(avg, grid, cfg.alpha)
    if cfg.layers is not None:
        keep = set(cfg.layers)
        for i, layer in enumerate(manifest.layers):
            if i not in keep:
                for h in layer:
                    h.type = SPATIAL
    return manifest


def probe_model(grid: tuple[int, int, int] = (3, 2, 2), gain: float = 20.0, channels: int = 4):
    """One-block, two-head model whose head 0 attends within frames and head 1 across them.

    Every token embeds to the same vector, so queries and keys are constant and
    the maps are set by the rotary phases alone: head 0 puts all its q/k mass on
    the fastest frame-axis channel pair, head 1 on the fastest height and width
    pairs. Sharp only for grids with extents up to 3 per axis.
    """
    from .videodit import ModelConfig, VideoDiT

    cfg = ModelConfig(model_dim=16, heads=2, head_dim=8, blocks=1, mlp_ratio=1, channels=channels,
                      num_conditions=1, grid=grid)
    model = VideoDiT(cfg)
    n_in = torch.linspace(-1.0, 1.0, cfg.model_dim)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        model.embed.bias.copy_(n_in)
        n = torch.nn.functional.layer_norm(n_in, (cfg.model_dim,), eps=1e-6)
        target = torch.zeros(cfg.model_dim)
        target[0] = 1.0           # head 0, frame pair 0
        target[8 + 4] = 1.0       # head 1, height pair 0
        target[8 + 6] = 1.0       # head 1, width pair 0
        w = torch.outer(target, n) / n.dot(n)
        attn = model.blocks[0].attn.weights
        attn["wq"].copy_(w)
        attn["wk"].copy_(w)
        attn["gq"].fill_(gain)
        attn["gk"].fill_(gain)
        attn["wv"].copy_(torch.eye(cfg.model_dim))
        attn["wo"].copy_(torch.eye(cfg.model_dim))
    return model
