"""Synthetic latent videos, the motion-correlation proxy and latency measurement."""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch import Tensor

from .numerics import ConfigError, DimensionError, RandomSource
from .videodit import VideoLatent, cosine_rows

# Latent channel layout: 0-2 carry the object's colour, 3 its presence.
PRESENCE = 2.0


@dataclass
class SceneSpec:
    shape: str = "square"
    color: tuple[float, float, float] = (1.0, 0.0, 0.0)
    size: float = 2.0
    position: tuple[float, float] = (0.0, 0.0)  # (row, col) of the object centre at frame 0
    velocity: tuple[float, float] = (0.0, 0.0)  # cells per frame, (row, col)
    background: str = "flat"
    background_level: float = 0.0
    pan: tuple[float, float] = (0.0, 0.0)
    frames: int = 9
    height: int = 6
    width: int = 6
    channels: int = 4
    condition_id: int = 0
    noise: float = 0.0

    def __post_init__(self):
        self.color = tuple(float(c) for c in self.color)
        self.position = tuple(float(p) for p in self.position)
        self.velocity = tuple(float(v) for v in self.velocity)
        self.pan = tuple(float(p) for p in self.pan)
        if self.shape not in ("square", "circle"):
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.background not in ("flat", "gradient", "texture"):
            raise ConfigError(f"unknown background {self.background!r}")
        if len(self.color) != 3:
            raise ConfigError("color must be a triple")
        if min(self.frames, self.height, self.width) < 1 or self.channels < 4:
            raise ConfigError("need positive extents and at least 4 channels")
        if self.size <= 0:
            raise ConfigError("size must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    def center(self, frame: int) -> tuple[float, float]:
        return ((self.position[0] + frame * self.velocity[0]) % self.height,
                (self.position[1] + frame * self.velocity[1]) % self.width)


def _wrap_dist(coord: Tensor, center: float, extent: int) -> Tensor:
    d = (coord - center).abs() % extent
    return torch.minimum(d, extent - d)


def _coverage(spec: SceneSpec, frame: int) -> Tensor:
    rows = torch.arange(spec.height, dtype=torch.float64)[:, None]
    cols = torch.arange(spec.width, dtype=torch.float64)[None, :]
    cy, cx = spec.center(frame)
    dy = _wrap_dist(rows, cy, spec.height)
    dx = _wrap_dist(cols, cx, spec.width)
    half = spec.size / 2
    if spec.shape == "square":
        return (half + 0.5 - dy).clamp(0, 1) * (half + 0.5 - dx).clamp(0, 1)
    return (half + 0.5 - torch.sqrt(dy**2 + dx**2)).clamp(0, 1)


def static_texture(height: int, width: int, channels: int, level: float, src: RandomSource) -> Tensor:
    """Per-cell colour noise, identical in every frame."""
    tex = torch.zeros(height, width, channels, dtype=torch.float64)
    tex[..., :3] = level * src.normal((height, width, 3), dtype=torch.float64)
    return tex


def _background(spec: SceneSpec, frame: int, seed: int) -> Tensor:
    bg = torch.zeros(spec.height, spec.width, spec.channels, dtype=torch.float64)
    if spec.background == "flat":
        bg[..., :3] = spec.background_level
        return bg
    if spec.background == "texture":
        tex = static_texture(spec.height, spec.width, spec.channels, spec.background_level, RandomSource(seed))
        shift = (round(frame * spec.pan[0]), round(frame * spec.pan[1]))
        return torch.roll(tex, shifts=shift, dims=(0, 1))
    rows = torch.arange(spec.height, dtype=torch.float64)[:, None]
    cols = torch.arange(spec.width, dtype=torch.float64)[None, :]
    phase = (2 * math.pi * (rows - frame * spec.pan[0]) / spec.height
             + 2 * math.pi * (cols - frame * spec.pan[1]) / spec.width)
    bg[..., :3] = (spec.background_level * torch.cos(phase))[..., None]
    return bg


def synth_video(spec: SceneSpec, seed: int = 0) -> VideoLatent:
    """Rasterize the scene into an ``[F, H, W, C]`` latent (float32).

    ``seed`` only matters for the texture background and additive noise.
    """
    obj = torch.zeros(spec.channels, dtype=torch.float64)
    obj[:3] = torch.tensor(spec.color, dtype=torch.float64)
    obj[3] = PRESENCE
    frames = []
    for f in range(spec.frames):
        cov = _coverage(spec, f)[..., None]
        frames.append((1 - cov) * _background(spec, f, seed) + cov * obj)
    grid = torch.stack(frames)
    if spec.noise > 0:
        grid = grid + spec.noise * RandomSource(seed + 1).normal(grid.shape, dtype=torch.float64)
    return VideoLatent(grid.to(torch.float32), None, spec.condition_id)


@dataclass
class ConditionAppearance:
    shape: str
    color: tuple[float, float, float]
    size: float = 2.0


@dataclass
class CorpusSpec:
    """Cross product of appearances (one per condition id) and motions."""

    conditions: list[ConditionAppearance] = field(default_factory=lambda: [
        ConditionAppearance("square", (1.0, 0.0, 0.0)),
        ConditionAppearance("circle", (0.0, 0.0, 1.0)),
    ])
    velocities: list[tuple[float, float]] = field(default_factory=lambda: [
        (0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0)])
    positions: list[tuple[float, float]] = field(default_factory=lambda: [(3.0, 3.0)])
    frames: int = 9
    height: int = 6
    width: int = 6
    channels: int = 4
    # fraction of training clips drawn over a fresh static texture, and its amplitude
    texture_fraction: float = 1.0
    texture_level: float = 0.25

    def __post_init__(self):
        self.conditions = [c if isinstance(c, ConditionAppearance) else ConditionAppearance(**c)
                           for c in self.conditions]
        self.velocities = [tuple(v) for v in self.velocities]
        self.positions = [tuple(p) for p in self.positions]
        if len(self.conditions) < 2:
            raise ConfigError("corpus needs at least two condition ids")

    def scene(self, condition_id: int, velocity: Sequence[float], position: Sequence[float]) -> SceneSpec:
        app = self.conditions[condition_id]
        return SceneSpec(shape=app.shape, color=app.color, size=app.size, position=tuple(position),
                         velocity=tuple(velocity), frames=self.frames, height=self.height,
                         width=self.width, channels=self.channels, condition_id=condition_id)

    def scenes(self) -> list[SceneSpec]:
        return [self.scene(c, v, p) for c in range(len(self.conditions))
                for v in self.velocities for p in self.positions]

    def render(self) -> tuple[Tensor, Tensor, Tensor]:
        """Flat-background corpus videos ``[N, F, H, W, C]``, condition ids, object coverage ``[N, F, H, W, 1]``."""
        scenes = self.scenes()
        videos = torch.stack([synth_video(s).grid for s in scenes])
        conds = torch.tensor([s.condition_id for s in scenes], dtype=torch.long)
        cover = torch.stack([torch.stack([_coverage(s, f) for f in range(s.frames)]) for s in scenes])
        return videos, conds, cover[..., None].to(videos.dtype)

    def sample(self, rendered: tuple[Tensor, Tensor, Tensor], batch: int, src: RandomSource) -> tuple[Tensor, Tensor]:
        """Random batch of clips; some get a fresh static texture behind the object."""
        videos, conds, cover = rendered
        idx = src.integers(len(videos), batch)
        x = videos[idx]
        tex = torch.zeros(batch, 1, self.height, self.width, self.channels, dtype=x.dtype)
        tex[..., :3] = self.texture_level * src.normal((batch, 1, self.height, self.width, 3))
        use = (src.uniform((batch,)) < self.texture_fraction).to(x.dtype).reshape(batch, 1, 1, 1, 1)
        return x + (1 - cover[idx]) * tex * use, conds[idx]

    def to_json(self) -> dict:
        d = asdict(self)
        d["velocities"] = [list(v) for v in self.velocities]
        d["positions"] = [list(p) for p in self.positions]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CorpusSpec":
        return cls(**d)


def load_scene_specs(path: str | Path) -> list[SceneSpec]:
    obj = json.loads(Path(path).read_text())
    items = obj if isinstance(obj, list) else obj.get("scenes", [obj])
    return [SceneSpec.from_json(s) for s in items]


def _as_grid(v) -> Tensor:
    return v.grid if isinstance(v, VideoLatent) else v


def motion_proxy(a, b) -> float:
    """Mean cosine between consecutive-frame differences of two videos, in [-1, 1]."""
    ga, gb = _as_grid(a), _as_grid(b)
    if ga.shape != gb.shape:
        raise DimensionError(f"video shapes differ: {tuple(ga.shape)} vs {tuple(gb.shape)}")
    if ga.shape[0] < 2:
        raise DimensionError("motion proxy needs at least two frames")
    ga = ga.to(torch.float64)
    gb = gb.to(torch.float64)
    da = (ga[1:] - ga[:-1]).reshape(ga.shape[0] - 1, -1)
    db = (gb[1:] - gb[:-1]).reshape(gb.shape[0] - 1, -1)
    return float(cosine_rows(da, db, both_zero=1.0).mean())


def color_signature(video, threshold: float = 0.5) -> Tensor:
    """Mean latent of foreground cells, pooled over frames.

    A cell is foreground when its distance from the frame's per-channel median
    exceeds ``threshold`` times the frame's largest such distance.
    """
    g = _as_grid(video).to(torch.float64)
    f, h, w, c = g.shape
    cells = g.reshape(f, h * w, c)
    med = cells.median(dim=1, keepdim=True).values
    dist = (cells - med).norm(dim=-1)
    mask = dist > threshold * dist.amax(dim=1, keepdim=True).clamp_min(1e-12)
    picked = cells[mask]
    if picked.numel() == 0:
        return torch.zeros(c, dtype=torch.float64)
    return picked.mean(dim=0)


def appearance_match(signature: Tensor, corpus: CorpusSpec) -> tuple[int, list[float]]:
    """Nearest condition by colour (channels 0-2) and the distances to each."""
    dists = [float((signature[:3] - torch.tensor(app.color, dtype=torch.float64)).norm())
             for app in corpus.conditions]
    return min(range(len(dists)), key=dists.__getitem__), dists


def measure_stage_latency(f_samps: Sequence[int], frames: int = 9, warmup: int = 3, steps: int = 10,
                          profile: str = "desk", seed: int = 0, model_config=None) -> list[tuple[int, float]]:
    """Median wall-clock ms per temporal-tuning step for each sampled frame count."""
    from . import pipeline

    out = []
    for fs in f_samps:
        trainer = pipeline.latency_trainer(frames, fs, profile=profile, seed=seed, model_config=model_config)
        for _ in range(warmup):
            trainer.step()
        times = []
        for _ in range(steps):
            t0 = time.perf_counter()
            trainer.step()
            times.append((time.perf_counter() - t0) * 1000.0)
        out.append((int(fs), statistics.median(times)))
    return out


def latency_csv(rows: Sequence[tuple[int, float]]) -> str:
    lines = ["f_samp,ms_per_step"] + [f"{fs},{ms:.4f}" for fs, ms in rows]
    return "\n".join(lines) + "\n"
