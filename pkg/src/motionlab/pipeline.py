"""Base pretraining and the three tuning stages: head labels, appearance, motion."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import torch
from torch import Tensor

from .archive import Checkpoint
from .attention import PROJECTIONS, SPATIAL, TEMPORAL
from .headclass import HeadManifest
from .lora import (SPATIAL_STAGE, TEMPORAL_STAGE, LoraAdapter, adapter_key, select_trainable)
from .numerics import AdamW, ConfigError, NumericError, RandomSource, StateError
from .rope import adaptive_temporal_positions
from .videodit import (ModelConfig, VideoDiT, VideoLatent, euler_sample, flow_interpolate,
                       motion_loss, mse)
from .workbench import CorpusSpec, SceneSpec, synth_video

log = logging.getLogger(__name__)


# -- configuration -------------------------------------------------------------------

@dataclass
class StageSettings:
    steps: int
    lr: float
    weight_decay: float
    batch: int = 1


@dataclass
class Profile:
    name: str
    model: ModelConfig
    pretrain_steps: int
    pretrain_lr: float
    pretrain_batch: int
    spatial: StageSettings
    temporal: StageSettings
    rank: int
    frames: int
    f_samp: int
    motion_weight: float = 1.0
    sample_steps: int = 20
    image_fraction: float = 0.25


PROFILES = {
    # hyperparameters reported for the full-size model
    "paper": Profile(
        name="paper",
        model=ModelConfig(model_dim=512, heads=16, head_dim=32, blocks=2, grid=(81, 6, 6)),
        pretrain_steps=2000, pretrain_lr=1e-4, pretrain_batch=8,
        spatial=StageSettings(3000, 1e-5, 0.1),
        temporal=StageSettings(2000, 1e-5, 0.99),
        rank=128, frames=81, f_samp=17,
    ),
    # scaled to finish on one CPU core in minutes
    "desk": Profile(
        name="desk",
        model=ModelConfig(heads=8, head_dim=8),
        pretrain_steps=2000, pretrain_lr=2e-3, pretrain_batch=8,
        spatial=StageSettings(300, 1e-3, 0.1, batch=4),
        temporal=StageSettings(1500, 3e-3, 0.01, batch=4),
        rank=8, frames=9, f_samp=5, image_fraction=0.1,
    ),
}


def get_profile(name: str) -> Profile:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return copy.deepcopy(PROFILES[name])


@dataclass
class TuningRun:
    stage: str
    steps: int
    lr: float
    weight_decay: float
    seed: int
    loss_weights: tuple[float, float] = (1.0, 1.0)  # (denoise, motion)
    f_samp: int | None = None
    rank: int = 8
    scale: float = 1.0
    batch: int = 1
    log_every: int = 10
    adaptive_rope: bool = True
    resample: bool = False
    skip_spatial: bool = False
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_profile(cls, profile: Profile, stage: str, seed: int, **overrides) -> "TuningRun":
        s = profile.spatial if stage == SPATIAL else profile.temporal
        run = cls(stage=stage, steps=s.steps, lr=s.lr, weight_decay=s.weight_decay, seed=seed, batch=s.batch,
                  loss_weights=(1.0, profile.motion_weight),
                  f_samp=profile.f_samp if stage == TEMPORAL else None, rank=profile.rank)
        return replace(run, **overrides)

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = {"denoise": self.loss_weights[0], "motion": self.loss_weights[1]}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TuningRun":
        d = dict(d)
        lw = d.pop("loss_weights", {"denoise": 1.0, "motion": 1.0})
        d["loss_weights"] = (float(lw["denoise"]), float(lw["motion"]))
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown run config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossLog:
    rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def add(self, step: int, denoise: float, motion: float, total: float, wall_ms: float) -> None:
        self.rows.append((step, denoise, motion, total, wall_ms))

    def totals(self) -> list[float]:
        return [r[3] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "denoise", "motion", "total", "wall_ms"])
        for step, d, m, t, ms in self.rows:
            w.writerow([step, repr(d), repr(m), repr(t), f"{ms:.3f}"])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def smoothed(values: Sequence[float], window: int = 100) -> list[float]:
    """Exponential moving average with span ``window``."""
    a = 2.0 / (window + 1)
    out, acc = [], None
    for v in values:
        acc = v if acc is None else (1 - a) * acc + a * v
        out.append(acc)
    return out


# -- checkpoints -----------------------------------------------------------------------

def base_checkpoint(model: VideoDiT, **extra) -> Checkpoint:
    return Checkpoint(model.base_state(), {"kind": "base", "config": model.cfg.to_json(), **extra})


def adapter_checkpoint(model: VideoDiT, branch: str, **extra) -> Checkpoint:
    tensors, rank, scale = {}, None, None
    for layer, block in enumerate(model.blocks):
        for proj in PROJECTIONS:
            ad = block.attn.adapter(branch, proj)
            if ad is None:
                continue
            tensors[adapter_key(layer, branch, proj, "A")] = ad.A.detach().clone()
            tensors[adapter_key(layer, branch, proj, "B")] = ad.B.detach().clone()
            rank, scale = ad.rank, ad.scale
    return Checkpoint(tensors, {"kind": "lora", "branch": branch, "rank": rank, "scale": scale, **extra})


def load_model(base: Checkpoint) -> VideoDiT:
    if base.kind != "base":
        raise StateError(f"expected a base checkpoint, got {base.kind or 'unknown'!r}")
    model = VideoDiT(ModelConfig.from_json(base.meta["config"]))
    model.load_base_state(base.tensors)
    return model


def install_adapters(model: VideoDiT, branch: str, rank: int, seed: int, scale: float = 1.0) -> None:
    """Fresh zero-output adapters on every projection of one branch (empty branches skipped)."""
    gen = torch.Generator().manual_seed(seed)
    for block in model.blocks:
        attn = block.attn
        for proj in PROJECTIONS:
            out_dim, in_dim = attn.branch_weight(branch, proj).shape
            if min(out_dim, in_dim) == 0:
                continue
            attn.add_adapter(LoraAdapter(in_dim, out_dim, min(rank, in_dim, out_dim), branch, proj,
                                         scale, gen))


def load_adapters(model: VideoDiT, ckpt: Checkpoint) -> None:
    if ckpt.kind != "lora":
        raise StateError(f"expected an adapter checkpoint, got {ckpt.kind or 'unknown'!r}")
    branch = ckpt.meta["branch"]
    scale = float(ckpt.meta.get("scale") or 1.0)
    for layer, block in enumerate(model.blocks):
        for proj in PROJECTIONS:
            ka = adapter_key(layer, branch, proj, "A")
            if ka not in ckpt.tensors:
                continue
            a = ckpt.tensors[ka]
            b = ckpt.tensors[adapter_key(layer, branch, proj, "B")]
            ad = LoraAdapter(a.shape[0], b.shape[1], a.shape[1], branch, proj, scale)
            with torch.no_grad():
                ad.A.copy_(a)
                ad.B.copy_(b)
            block.attn.add_adapter(ad)


def prepare_model(base: Checkpoint, manifest: HeadManifest, *adapters: Checkpoint | None) -> VideoDiT:
    model = load_model(base)
    model.apply_manifest(manifest)
    for ck in adapters:
        if ck is not None:
            load_adapters(model, ck)
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# -- pretraining --------------------------------------------------------------------

def pretrain_base(corpus: CorpusSpec, cfg: ModelConfig, steps: int, seed: int, batch: int = 8,
                  lr: float = 1e-3, weight_decay: float = 0.0, image_fraction: float = 0.25,
                  log_every: int = 10, cosine: bool = True) -> tuple[Checkpoint, LossLog]:
    """Flow-matching training of the base model on the synthetic corpus.

    With probability ``image_fraction`` a step trains on single frames so the
    model also knows the one-frame setting used for appearance tuning. With
    ``cosine`` the learning rate decays to zero over ``steps``.
    """
    if corpus.frames > cfg.grid[0] or (corpus.height, corpus.width) != cfg.grid[1:]:
        raise ConfigError("corpus grid does not fit the model config")
    cfg = replace(cfg, seed=seed)
    model = VideoDiT(cfg)
    rendered = corpus.render()
    src = RandomSource(seed)
    params = [p for _, p in model.base_parameters()]
    names = [n for n, _ in model.base_parameters()]
    opt = AdamW(params, lr=lr, weight_decay=weight_decay, names=names)
    loss_log = LossLog()
    for step in range(steps):
        t0 = time.perf_counter()
        if cosine:
            opt.state.lr = 0.5 * lr * (1 + math.cos(math.pi * step / steps))
        x, c = corpus.sample(rendered, batch, src)
        if float(src.uniform()) < image_fraction:
            frame = src.integers(x.shape[1], batch)
            x = x[torch.arange(batch), frame][:, None]
        t = src.uniform((batch,))
        noise = src.normal(x.shape)
        x_t, v = flow_interpolate(x, noise, t)
        loss = mse(model(x_t, t, c), v)
        if not torch.isfinite(loss):
            raise NumericError(f"pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            val = loss.item()
            loss_log.add(step, val, 0.0, val, (time.perf_counter() - t0) * 1000)
    return base_checkpoint(model, corpus=corpus.to_json(), steps=steps, seed=seed), loss_log


def pretrain_from_profile(profile: Profile, seed: int, steps: int | None = None,
                          corpus: CorpusSpec | None = None, lr: float | None = None) -> tuple[Checkpoint, LossLog]:
    f, h, w = profile.model.grid
    corpus = corpus or CorpusSpec(frames=min(f, profile.frames), height=h, width=w)
    return pretrain_base(corpus, profile.model, profile.pretrain_steps if steps is None else steps, seed,
                         batch=profile.pretrain_batch, lr=profile.pretrain_lr if lr is None else lr,
                         image_fraction=profile.image_fraction)


# -- stage 3 sampling ---------------------------------------------------------------

@dataclass
class SamplingPlan:
    frames: int
    f_samp: int
    indices: list[int]
    positions: list[float]


def make_sampling_plan(frames: int, f_samp: int, adaptive: bool = True) -> SamplingPlan:
    """Uniform-stride frame subset with positions spread over ``[0, frames]``."""
    if f_samp < 2:
        raise ConfigError("need at least two sampled frames")
    if f_samp > frames:
        raise ConfigError(f"cannot sample {f_samp} of {frames} frames")
    idx = [int(math.floor(k * (frames - 1) / (f_samp - 1) + 0.5)) for k in range(f_samp)]
    pos = adaptive_temporal_positions(frames, f_samp) if adaptive else [float(k) for k in range(f_samp)]
    return SamplingPlan(frames, f_samp, idx, pos)


def window_plan(frames: int, f_samp: int, src: RandomSource, adaptive: bool = True) -> SamplingPlan:
    """Random contiguous window; the experimental alternative to the strided plan."""
    start = src.randint(frames - f_samp + 1)
    pos = adaptive_temporal_positions(frames, f_samp) if adaptive else [float(k) for k in range(f_samp)]
    return SamplingPlan(frames, f_samp, list(range(start, start + f_samp)), pos)


# -- tuning stages --------------------------------------------------------------------

class _Trainer:
    def __init__(self, model: VideoDiT, reference: VideoLatent, run: TuningRun, stage: str):
        self.model = model
        self.reference = reference
        self.run = run
        self.src = RandomSource(run.seed)
        named = select_trainable(model, stage)
        for _, p in named:
            p.requires_grad_(True)
        self.opt = AdamW([p for _, p in named], lr=run.lr, weight_decay=run.weight_decay,
                         names=[n for n, _ in named])
        self.step_index = 0
        self.log = LossLog()

    def _latent(self) -> VideoLatent:
        raise NotImplementedError

    def losses(self, latent: VideoLatent) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def step(self) -> float:
        t0 = time.perf_counter()
        latent = self._latent()
        denoise, motion = self.losses(latent)
        wd, wm = self.run.loss_weights
        total = wd * denoise + wm * motion
        if not torch.isfinite(total):
            raise NumericError(f"{self.run.stage} tuning diverged at step {self.step_index}")
        self.opt.zero_grad()
        total.backward()
        self.opt.step()
        if self.step_index % self.run.log_every == 0 or self.step_index == self.run.steps - 1:
            self.log.add(self.step_index, denoise.item(), motion.item(), total.item(),
                         (time.perf_counter() - t0) * 1000)
        self.step_index += 1
        return total.item()

    def _noised(self, grid: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        b = self.run.batch
        x = grid.expand(b, *grid.shape)
        t = self.src.uniform((b,))
        noise = self.src.normal(x.shape)
        x_t, v = flow_interpolate(x, noise, t)
        return x_t, t, v


class SpatialTrainer(_Trainer):
    """Single random frame per step, denoising loss only."""

    def __init__(self, model, reference, run):
        super().__init__(model, reference, run, SPATIAL_STAGE)

    def _latent(self) -> VideoLatent:
        i = self.src.randint(self.reference.frames)
        return VideoLatent(self.reference.grid[i:i + 1], [0.0], self.reference.condition_id)

    def losses(self, latent):
        x_t, t, v = self._noised(latent.grid)
        pred = self.model(x_t, t, latent.condition_id, frame_positions=latent.frame_positions)
        return mse(pred, v), torch.zeros((), dtype=pred.dtype)


class TemporalTrainer(_Trainer):
    """Sampled-frame clip with rescaled positions; denoising plus motion loss."""

    def __init__(self, model, reference, run):
        super().__init__(model, reference, run, TEMPORAL_STAGE)
        frames = reference.frames
        f_samp = run.f_samp or frames
        if frames < 2:
            raise ConfigError("temporal tuning needs at least two frames")
        self.plan = make_sampling_plan(frames, f_samp, run.adaptive_rope)

    def _latent(self) -> VideoLatent:
        plan = self.plan
        if self.run.resample:
            plan = window_plan(plan.frames, plan.f_samp, self.src, self.run.adaptive_rope)
        return self.reference.select_frames(plan.indices, plan.positions)

    def losses(self, latent):
        x_t, t, v = self._noised(latent.grid)
        pred = self.model(x_t, t, latent.condition_id, frame_positions=latent.frame_positions)
        return mse(pred, v), motion_loss(v, pred)


def _train(trainer: _Trainer) -> LossLog:
    for _ in range(trainer.run.steps):
        trainer.step()
    return trainer.log


def _check_manifest(model: VideoDiT, manifest: HeadManifest) -> None:
    if len(manifest.layers) != model.cfg.blocks or any(len(l) != model.cfg.heads for l in manifest.layers):
        raise ConfigError("head manifest does not match the model")


def run_stage2(base: Checkpoint, manifest: HeadManifest, reference: VideoLatent,
               run: TuningRun, on_trained: Callable[[VideoDiT], None] | None = None) -> tuple[Checkpoint, LossLog]:
    """Appearance tuning: spatial-branch adapters on single frames.

    ``on_trained`` sees the tuned model before it is discarded.
    """
    model = prepare_model(base, manifest)
    _check_manifest(model, manifest)
    install_adapters(model, SPATIAL, run.rank, run.seed, run.scale)
    trainer = SpatialTrainer(model, reference, run)
    loss_log = _train(trainer)
    if on_trained is not None:
        on_trained(model)
    return adapter_checkpoint(model, SPATIAL, seed=run.seed, steps=run.steps), loss_log


def run_stage3(base: Checkpoint, manifest: HeadManifest, spatial: Checkpoint | None,
               reference: VideoLatent, run: TuningRun,
               on_trained: Callable[[VideoDiT], None] | None = None) -> tuple[Checkpoint, LossLog]:
    if spatial is None and not run.skip_spatial:
        raise StateError("temporal tuning needs the spatial adapters (or skip_spatial)")
    model = prepare_model(base, manifest, spatial)
    _check_manifest(model, manifest)
    install_adapters(model, TEMPORAL, run.rank, run.seed + 1, run.scale)
    trainer = TemporalTrainer(model, reference, run)
    loss_log = _train(trainer)
    if on_trained is not None:
        on_trained(model)
    return adapter_checkpoint(model, TEMPORAL, seed=run.seed, steps=run.steps,
                              f_samp=trainer.plan.f_samp), loss_log


def generate(base: Checkpoint, manifest: HeadManifest, spatial: Checkpoint | None,
             temporal: Checkpoint | None, mode: str, condition_id: int, steps: int, seed: int,
             frames: int | None = None, keep_spatial: bool = False) -> VideoLatent:
    """``reconstruct`` uses both adapter sets; ``transfer`` only the temporal ones by default."""
    if temporal is None:
        raise StateError("generation needs the temporal adapters")
    if mode == "reconstruct":
        if spatial is None:
            raise StateError("reconstruct mode needs the spatial adapters")
        model = prepare_model(base, manifest, spatial, temporal)
    elif mode == "transfer":
        model = prepare_model(base, manifest, spatial if keep_spatial else None, temporal)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    f, h, w = model.cfg.grid
    f = frames or f
    return euler_sample(model, (f, h, w, model.cfg.channels), steps, condition_id, seed,
                        [float(i) for i in range(f)])


# -- convenience ---------------------------------------------------------------------

def reference_scene(profile: Profile | None = None, condition_id: int = 0,
                    velocity: tuple[float, float] = (0.0, 1.0)) -> SceneSpec:
    corpus = CorpusSpec(frames=(profile.frames if profile else 9))
    return corpus.scene(condition_id, velocity, corpus.positions[0])


def latency_trainer(frames: int, f_samp: int, profile: str = "desk", seed: int = 0,
                    model_config: ModelConfig | None = None) -> TemporalTrainer:
    """A ready stage-3 trainer on a random model, used for timing only."""
    prof = get_profile(profile)
    cfg = model_config or prof.model
    cfg = replace(cfg, grid=(frames, *cfg.grid[1:]))
    model = VideoDiT(cfg)
    layer_types = [TEMPORAL if i % 2 == 0 else SPATIAL for i in range(cfg.heads)]
    manifest = HeadManifest(1.25, cfg.grid, [[_record(i, t) for i, t in enumerate(layer_types)]
                                             for _ in range(cfg.blocks)])
    model.apply_manifest(manifest)
    for p in model.parameters():
        p.requires_grad_(False)
    install_adapters(model, SPATIAL, prof.rank, seed)
    install_adapters(model, TEMPORAL, prof.rank, seed + 1)
    corpus = CorpusSpec(frames=frames, height=cfg.grid[1], width=cfg.grid[2], channels=cfg.channels)
    ref = synth_video(corpus.scene(0, corpus.velocities[0], corpus.positions[0]))
    run = TuningRun.from_profile(prof, TEMPORAL, seed, f_samp=f_samp, steps=10**9, log_every=10**9)
    return TemporalTrainer(model, ref, run)


def _record(i, t):
    from .headclass import HeadRecord
    return HeadRecord(i, t, 0.0, 0.0)
