"""Command-line entry point: ``motionlab <subcommand> --seed N --out DIR [...]``.

Results go to files under ``--out`` and, as JSON, to stdout. Diagnostics go to
stderr. Exit codes: 0 ok, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import torch

from .archive import Checkpoint, FormatError
from .attention import SPATIAL, TEMPORAL
from .headclass import ClassifierConfig, HeadManifest, probe_model, run_stage1
from .numerics import ConfigError, DimensionError, NumericError, StateError, float64_mode, gradient_check
from .pipeline import (PROFILES, TuningRun, generate, get_profile, pretrain_from_profile,
                       reference_scene, run_stage2, run_stage3)
from .videodit import VideoDiT, VideoLatent, flow_interpolate, mse, motion_loss
from .workbench import (CorpusSpec, appearance_match, color_signature, latency_csv, load_scene_specs,
                        measure_stage_latency, motion_proxy, synth_video)

log = logging.getLogger("motionlab")

RUNTIME_ERRORS = (ConfigError, DimensionError, NumericError, StateError, FormatError, OSError,
                  KeyError, json.JSONDecodeError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- video archives ---------------------------------------------------------------------

def save_videos(path: Path, videos: Sequence[VideoLatent], **meta) -> None:
    tensors = {f"video/{i}": v.grid for i, v in enumerate(videos)}
    meta = {"kind": "videos", "condition_ids": [v.condition_id for v in videos],
            "frame_positions": [v.frame_positions for v in videos], **meta}
    Checkpoint(tensors, meta).save(path)


def load_video(path: str | Path, index: int = 0) -> VideoLatent:
    ck = Checkpoint.load(path)
    if ck.kind != "videos":
        raise StateError(f"{path} is not a video archive")
    key = f"video/{index}"
    if key not in ck.tensors:
        raise ConfigError(f"{path} has no video {index}")
    return VideoLatent(ck.tensors[key], ck.meta["frame_positions"][index], ck.meta["condition_ids"][index])


# -- helpers ----------------------------------------------------------------------------------

def read_config(path: str | None) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def emit(result: dict) -> None:
    print(json.dumps(result, sort_keys=True))


def write_manifest(out: Path, args: argparse.Namespace, config: dict, outputs: dict) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {"command": args.command, "seed": args.seed, "profile": args.profile,
                "args": resolved, "config": config, "outputs": outputs}
    (out / f"run-{args.command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def reference_from(args, profile) -> VideoLatent:
    if args.reference:
        return load_video(args.reference, args.reference_index)
    return synth_video(reference_scene(profile))


def path_arg(args, config: dict, name: str, required: bool = True) -> str | None:
    value = getattr(args, name, None) or config.get("paths", {}).get(name)
    if required and not value:
        raise ConfigError(f"--{name} is required (flag or config paths.{name})")
    return value


# -- subcommands -----------------------------------------------------------------------------

def cmd_gen_data(args, config, out):
    if args.scenes:
        specs = load_scene_specs(args.scenes)
    else:
        corpus = CorpusSpec.from_json(config["corpus"]) if "corpus" in config else CorpusSpec()
        specs = corpus.scenes()
    videos = [synth_video(s, seed=args.seed + i) for i, s in enumerate(specs)]
    path = out / "videos.tarc"
    save_videos(path, videos, scenes=[s.to_json() for s in specs])
    return {"videos": str(path), "count": len(videos)}


def cmd_pretrain(args, config, out):
    profile = get_profile(args.profile)
    corpus = CorpusSpec.from_json(config["corpus"]) if "corpus" in config else None
    steps = args.steps if args.steps is not None else config.get("steps", profile.pretrain_steps)
    ck, loss_log = pretrain_from_profile(profile, args.seed, steps, corpus, lr=config.get("lr"))
    ck.save(out / "base.tarc")
    loss_log.save(out / "pretrain_loss.csv")
    totals = loss_log.totals()
    return {"base": str(out / "base.tarc"), "steps": steps,
            "first_loss": totals[0] if totals else None, "last_loss": totals[-1] if totals else None}


def cmd_classify_heads(args, config, out):
    profile = get_profile(args.profile)
    cfg = ClassifierConfig(alpha=args.alpha, timesteps=args.timesteps or [0.5], layers=args.layers)
    if args.probe:
        grid = (3, 2, 2)
        model = probe_model(grid)
        reference = VideoLatent(torch.randn(*grid, 4, generator=torch.Generator().manual_seed(args.seed)))
    else:
        from .pipeline import load_model
        model = load_model(Checkpoint.load(path_arg(args, config, "base")))
        reference = reference_from(args, profile)
    manifest = run_stage1(model, reference, cfg, seed=args.seed)
    manifest.save(out / "manifest.json")
    return {"manifest": str(out / "manifest.json"), "counts": manifest.counts(),
            "types": [manifest.types(i) for i in range(len(manifest.layers))]}


def tuning_run(args, config, stage: str) -> TuningRun:
    profile = get_profile(args.profile)
    run = TuningRun.from_profile(profile, stage, args.seed)
    if config:
        fields = {k: v for k, v in config.items() if k not in ("stage", "seed")}
        run = TuningRun.from_json({**run.to_json(), **fields, "stage": stage, "seed": args.seed})
    if args.steps is not None:
        run = replace(run, steps=args.steps)
    if getattr(args, "f_samp", None) is not None:
        run = replace(run, f_samp=args.f_samp)
    if getattr(args, "skip_spatial", False):
        run = replace(run, skip_spatial=True)
    return run


def cmd_tune_spatial(args, config, out):
    run = tuning_run(args, config, SPATIAL)
    base = Checkpoint.load(path_arg(args, config, "base"))
    manifest = HeadManifest.load(path_arg(args, config, "manifest"))
    ck, loss_log = run_stage2(base, manifest, reference_from(args, get_profile(args.profile)), run)
    ck.save(out / "spatial.tarc")
    loss_log.save(out / "spatial_loss.csv")
    return {"spatial": str(out / "spatial.tarc"), "run": run.to_json(), "last_loss": loss_log.totals()[-1]
            if loss_log.rows else None}


def cmd_tune_temporal(args, config, out):
    run = tuning_run(args, config, TEMPORAL)
    base = Checkpoint.load(path_arg(args, config, "base"))
    manifest = HeadManifest.load(path_arg(args, config, "manifest"))
    sp_path = path_arg(args, config, "spatial", required=False)
    spatial = Checkpoint.load(sp_path) if sp_path else None
    ck, loss_log = run_stage3(base, manifest, spatial, reference_from(args, get_profile(args.profile)), run)
    ck.save(out / "temporal.tarc")
    loss_log.save(out / "temporal_loss.csv")
    return {"temporal": str(out / "temporal.tarc"), "run": run.to_json(), "last_loss": loss_log.totals()[-1]
            if loss_log.rows else None}


def cmd_generate(args, config, out):
    profile = get_profile(args.profile)
    base = Checkpoint.load(path_arg(args, config, "base"))
    manifest = HeadManifest.load(path_arg(args, config, "manifest"))
    sp_path = path_arg(args, config, "spatial", required=False)
    spatial = Checkpoint.load(sp_path) if sp_path else None
    tp_path = path_arg(args, config, "temporal", required=False)
    temporal = Checkpoint.load(tp_path) if tp_path else None
    steps = args.steps if args.steps is not None else profile.sample_steps
    video = generate(base, manifest, spatial, temporal, args.mode, args.condition, steps, args.seed,
                     keep_spatial=args.keep_spatial)
    path = out / "generated.tarc"
    save_videos(path, [video], mode=args.mode, steps=steps, seed=args.seed)
    return {"video": str(path), "mode": args.mode, "condition_id": args.condition}


def cmd_eval(args, config, out):
    video = load_video(args.video, args.video_index)
    reference = load_video(args.reference, args.reference_index) if args.reference else synth_video(
        reference_scene(get_profile(args.profile)))
    corpus = CorpusSpec.from_json(config["corpus"]) if "corpus" in config else CorpusSpec()
    sig = color_signature(video)
    match, dists = appearance_match(sig, corpus)
    result = {"motion_proxy": motion_proxy(video, reference), "color_signature": sig.tolist(),
              "appearance_match": match, "appearance_distances": dists}
    (out / "eval.json").write_text(json.dumps(result, indent=2))
    return result


def cmd_bench_latency(args, config, out):
    rows = measure_stage_latency(args.f_samps, frames=args.frames, warmup=args.warmup, steps=args.timed,
                                 profile=args.profile, seed=args.seed)
    (out / "latency.csv").write_text(latency_csv(rows))
    return {"latency_csv": str(out / "latency.csv"), "rows": [list(r) for r in rows]}


def gradcheck_error(profile_name: str, seed: int, coords: int, frames: int | None = None) -> float:
    """Backprop vs central differences for denoise + motion loss on the profile's model, 64-bit."""
    profile = get_profile(profile_name)
    cfg = profile.model
    if frames is not None:
        cfg = replace(cfg, grid=(frames, *cfg.grid[1:]))
    with float64_mode():
        model = VideoDiT(replace(cfg, seed=seed)).double()
        gen = torch.Generator().manual_seed(seed)
        f, h, w = cfg.grid
        data = torch.randn(f, h, w, cfg.channels, generator=gen, dtype=torch.float64)
        noise = torch.randn(f, h, w, cfg.channels, generator=gen, dtype=torch.float64)
        x_t, v = flow_interpolate(data, noise, 0.4)

        def loss():
            pred = model(x_t, 0.4, 0)
            return mse(pred, v) + motion_loss(v, pred)

        params = [p for _, p in model.base_parameters()]
        return gradient_check(loss, params, n_coords=coords, seed=seed)


def cmd_gradcheck(args, config, out):
    err = gradcheck_error(args.profile, args.seed, args.coords, args.frames)
    result = {"max_relative_error": err, "coords": args.coords, "passed": err <= 1e-5}
    (out / "gradcheck.json").write_text(json.dumps(result, indent=2))
    return result


# -- parser -------------------------------------------------------------------------------------

def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, required=True)
    common.add_argument("--out", type=Path, required=True)
    common.add_argument("--config", type=str, default=None)
    common.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = Parser(prog="motionlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    def reference_flags(p):
        p.add_argument("--reference", type=str, default=None, help="video archive (default: toy scene)")
        p.add_argument("--reference-index", type=int, default=0)

    p = add("gen-data", cmd_gen_data, "render SceneSpec JSON (or the corpus) into a video archive")
    p.add_argument("--scenes", type=str, default=None)

    p = add("pretrain", cmd_pretrain, "train the base model on the synthetic corpus")
    p.add_argument("--steps", type=int, default=None)

    p = add("classify-heads", cmd_classify_heads, "label attention heads spatial/temporal")
    p.add_argument("--base", type=str, default=None)
    p.add_argument("--probe", action="store_true", help="use the hand-built two-head model")
    p.add_argument("--alpha", type=float, default=1.25)
    p.add_argument("--timesteps", type=float, nargs="+", default=None)
    p.add_argument("--layers", type=int, nargs="+", default=None)
    reference_flags(p)

    for name, func, help_text in (("tune-spatial", cmd_tune_spatial, "appearance LoRA on single frames"),
                                  ("tune-temporal", cmd_tune_temporal, "motion LoRA on sampled frames")):
        p = add(name, func, help_text)
        p.add_argument("--base", type=str, default=None)
        p.add_argument("--manifest", type=str, default=None)
        p.add_argument("--steps", type=int, default=None)
        reference_flags(p)
        if name == "tune-temporal":
            p.add_argument("--spatial", type=str, default=None)
            p.add_argument("--f-samp", type=int, default=None)
            p.add_argument("--skip-spatial", action="store_true")

    p = add("generate", cmd_generate, "sample a video with the tuned adapters")
    p.add_argument("--mode", choices=["reconstruct", "transfer"], required=True)
    p.add_argument("--base", type=str, default=None)
    p.add_argument("--manifest", type=str, default=None)
    p.add_argument("--spatial", type=str, default=None)
    p.add_argument("--temporal", type=str, default=None)
    p.add_argument("--condition", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--keep-spatial", action="store_true")

    p = add("eval", cmd_eval, "motion proxy and colour signature of a generated video")
    p.add_argument("--video", type=str, required=True)
    p.add_argument("--video-index", type=int, default=0)
    reference_flags(p)

    p = add("bench-latency", cmd_bench_latency, "stage-3 ms/step per sampled frame count")
    p.add_argument("--f-samps", type=int, nargs="+", default=[2, 3, 5, 7, 9])
    p.add_argument("--frames", type=int, default=9)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--timed", type=int, default=10)

    p = add("gradcheck", cmd_gradcheck, "backprop vs finite differences on the toy model")
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--frames", type=int, default=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"motionlab: error: {err}", file=sys.stderr)
        return 1
    except SystemExit as err:  # --help
        return 0 if err.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = read_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        result = args.func(args, config, args.out)
        write_manifest(args.out, args, config, result)
    except RUNTIME_ERRORS as err:
        print(f"motionlab: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
