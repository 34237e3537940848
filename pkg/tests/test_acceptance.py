"""The nine acceptance criteria, each at its stated tolerance and runtime budget.

Run alone with ``pytest tests/test_acceptance.py -v``; a summary with one
PASS/FAIL line per criterion is printed at the end of the session.
"""

import contextlib
import math
import time
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import ACCEPTANCE
from motionlab.archive import decode_archive, encode_archive
from motionlab.attention import (SPATIAL, TEMPORAL, AttentionParams, dual_attention_forward,
                                 full_attention_forward, partition_heads)
from motionlab.cli import gradcheck_error
from motionlab.headclass import (ClassifierConfig, HeadManifest, HeadRecord, classify_heads,
                                 gen_spatial_maps, gen_temporal_maps, manifest_from_maps, probe_model,
                                 run_stage1)
from motionlab.numerics import float64_mode
from motionlab.pipeline import (TuningRun, generate, get_profile, load_model, pretrain_from_profile,
                                reference_scene, run_stage2, run_stage3, smoothed)
from motionlab.rope import adaptive_temporal_positions, build_positions
from motionlab.videodit import VideoLatent, euler_sample, motion_loss
from motionlab.workbench import (PRESENCE, CorpusSpec, appearance_match, color_signature,
                                 measure_stage_latency, motion_proxy, synth_video)

GOLDEN = Path(__file__).parent / "data" / "golden.tarc"

# Frozen end-to-end thresholds. The proxy floor is the stated one. The colour
# band is measured against the workbench oracle: a clean target clip has
# presence-normalised colour exactly colour / PRESENCE, and the half-distance
# between the two condition colours in that space is 0.35; the band keeps
# generated clips within 0.1 of the target and nearest to it.
PROXY_FLOOR = 0.5
COLOR_BAND = 0.1
TRANSFER_SEEDS = (0, 1, 2)


@contextlib.contextmanager
def criterion(num: int, name: str, budget_s: float):
    """Record PASS/FAIL for the summary; fails on error or on an over-budget runtime."""
    info = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as err:
        ACCEPTANCE[num] = (False, name, f"{info['detail']} {type(err).__name__}: {err}".strip().splitlines()[0])
        raise
    elapsed = time.perf_counter() - t0
    ok = elapsed <= budget_s
    ACCEPTANCE[num] = (ok, name, f"{info['detail']} ({elapsed:.1f} s, budget {budget_s:.0f} s)".strip())
    assert ok, f"criterion {num} took {elapsed:.1f} s, budget {budget_s} s"


# -- 1 ----------------------------------------------------------------------------------------

def _fusion_case(i: int):
    gen = torch.Generator().manual_seed(1000 + i)
    heads = (2, 4, 8)[i % 3]
    head_dim = (4, 8)[(i // 3) % 2]
    while True:
        grid = tuple(int(torch.randint(1, 9, (1,), generator=gen)) for _ in range(3))
        if math.prod(grid) <= 256:
            break
    p = AttentionParams.random(heads * head_dim, heads, head_dim, gen)
    x = torch.randn(math.prod(grid), heads * head_dim, generator=gen)
    types = [TEMPORAL if b else SPATIAL for b in (torch.rand(heads, generator=gen) < 0.5).tolist()]
    return p, x, build_positions(*grid), types


def test_criterion_1_dual_fusion_equivalence():
    with criterion(1, "dual-fusion equivalence", 60) as c:
        worst = {torch.float32: 0.0, torch.float64: 0.0}
        cases = 102
        for dtype in worst:
            ctx = float64_mode() if dtype == torch.float64 else contextlib.nullcontext()
            with ctx:
                for i in range(cases):
                    p, x, plan, types = _fusion_case(i)
                    assert x.dtype == dtype
                    full = full_attention_forward(x, p, plan)
                    dual = dual_attention_forward(x, partition_heads(p, types), plan)
                    worst[dtype] = max(worst[dtype], float((full - dual).abs().max()))
        c["detail"] = (f"{cases} pairs, max-abs {worst[torch.float32]:.2e} (32-bit) "
                       f"{worst[torch.float64]:.2e} (64-bit)")
        assert worst[torch.float32] <= 1e-5
        assert worst[torch.float64] <= 1e-10


# -- 2 ----------------------------------------------------------------------------------------

def _pure_maps(grid):
    maps = []
    for m in (gen_spatial_maps(*grid), gen_temporal_maps(*grid)):
        maps.append(m / m.sum(-1, keepdim=True))
    return torch.stack(maps)


PROBE_GRIDS = [(f, h, w) for f in (2, 3) for h in (1, 2, 3) for w in (1, 2, 3) if h * w >= 2]
MAP_GRIDS = [(9, 6, 6), (5, 4, 4), (4, 3, 5), (2, 1, 7)]


def test_criterion_2_head_classifier_oracle():
    with criterion(2, "head-classifier oracle", 60) as c:
        correct = total = 0
        records = []
        for grid in PROBE_GRIDS:
            ref = VideoLatent(torch.randn(*grid, 4, generator=torch.Generator().manual_seed(1)))
            man = run_stage1(probe_model(grid), ref, ClassifierConfig(alpha=1.25), seed=0)
            correct += sum(a == b for a, b in zip(man.types(0), [SPATIAL, TEMPORAL]))
            total += 2
            records += man.layers[0]
        for grid in MAP_GRIDS:
            man = manifest_from_maps([_pure_maps(grid)], grid, 1.25)
            correct += sum(a == b for a, b in zip(man.types(0), [SPATIAL, TEMPORAL]))
            total += 2
            records += man.layers[0]
        sims = [(h.sim_s, h.sim_t) for h in records]
        alphas = [10 ** (-2 + 4 * k / 19) for k in range(20)]
        sweep = [classify_heads(sims, a) for a in alphas]
        monotone = all(not (lo == TEMPORAL and hi == SPATIAL)
                       for a, b in zip(sweep, sweep[1:]) for lo, hi in zip(a, b))
        c["detail"] = f"accuracy {correct}/{total} at alpha 1.25, monotone over 20 alphas: {monotone}"
        assert correct == total
        assert monotone


# -- 3 ----------------------------------------------------------------------------------------

def test_criterion_3_adaptive_rope():
    with criterion(3, "adaptive rope positions", 1) as c:
        pos = adaptive_temporal_positions(81, 17)
        steps = [b - a for a, b in zip(pos, pos[1:])]
        err = max([abs(pos[0])] + [abs(s - 81 / 17) for s in steps]
                  + [abs(p - (40.5 + (81 / 17) * (i - 8.5))) for i, p in enumerate(pos)])
        ident = all(adaptive_temporal_positions(f, f) == [float(i) for i in range(f)] for f in range(1, 100))
        plan_ident = torch.equal(build_positions(9, 2, 2).pos_f,
                                 build_positions(9, 2, 2, frame_positions=adaptive_temporal_positions(9, 9)).pos_f)
        c["detail"] = f"max deviation {err:.1e}, identity bitwise: {ident and plan_ident}"
        assert len(pos) == 17 and err <= 1e-9
        assert ident and plan_ident


# -- 4 ----------------------------------------------------------------------------------------

def test_criterion_4_gradient_fidelity():
    with criterion(4, "gradient fidelity", 300) as c:
        cfg = get_profile("desk").model
        err = gradcheck_error("desk", seed=0, coords=256)
        c["detail"] = f"{cfg.blocks}-block model, 256 coords, max relative error {err:.2e}"
        assert cfg.blocks == 2
        assert err <= 1e-5


# -- 5 ----------------------------------------------------------------------------------------

def test_criterion_5_motion_loss_invariants():
    with criterion(5, "motion-loss invariants", 10) as c:
        gen = torch.Generator().manual_seed(5)
        worst = [0.0, 0.0, 0.0]
        for _ in range(50):
            shape = [int(torch.randint(2, 10, (1,), generator=gen))] + \
                    [int(torch.randint(1, 7, (1,), generator=gen)) for _ in range(3)]
            a = torch.randn(shape, generator=gen)
            b = torch.randn(shape, generator=gen)
            ca, cb = torch.randn(shape[-1], generator=gen) * 5, torch.randn(shape[-1], generator=gen) * 5
            worst[0] = max(worst[0], abs(float(motion_loss(a, a))))
            worst[1] = max(worst[1], abs(float(motion_loss(a, -a)) - 2.0))
            worst[2] = max(worst[2], abs(float(motion_loss(a + ca, b + cb)) - float(motion_loss(a, b))))
        c["detail"] = (f"50 instances, |L(v,v)| {worst[0]:.1e}, |L(v,-v)-2| {worst[1]:.1e}, "
                       f"offset drift {worst[2]:.1e}")
        assert max(worst) <= 1e-6


# -- 6 and 7 share one desk-scale run ---------------------------------------------------------

def _adapter_tensors(model, branch):
    out = {}
    for layer, block in enumerate(model.blocks):
        for proj in ("q", "k", "v", "o"):
            ad = block.attn.adapter(branch, proj)
            if ad is not None:
                out[f"{layer}/{proj}/A"] = ad.A.detach().clone()
                out[f"{layer}/{proj}/B"] = ad.B.detach().clone()
    return out


def _same(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def desk_run():
    t0 = time.perf_counter()
    prof = get_profile("desk")
    base, pre_log = pretrain_from_profile(prof, seed=0)
    ref = synth_video(reference_scene(prof, condition_id=0))
    manifest = run_stage1(load_model(base), ref, ClassifierConfig(), seed=0)
    seen = {}

    def after2(model):
        seen["base2"] = model.base_state()
        seen["temporal2"] = _adapter_tensors(model, TEMPORAL)

    def after3(model):
        seen["base3"] = model.base_state()
        seen["spatial3"] = _adapter_tensors(model, SPATIAL)

    sp, log2 = run_stage2(base, manifest, ref, TuningRun.from_profile(prof, SPATIAL, 0), on_trained=after2)
    tp, log3 = run_stage3(base, manifest, sp, ref, TuningRun.from_profile(prof, TEMPORAL, 0), on_trained=after3)
    return dict(profile=prof, base=base, reference=ref, manifest=manifest, spatial=sp, temporal=tp,
                seen=seen, pretrain_log=pre_log, elapsed=time.perf_counter() - t0)


def test_criterion_6_stage_isolation(desk_run):
    with criterion(6, "stage isolation and reproducibility", 600) as c:
        r = desk_run
        prof, base, man, ref = r["profile"], r["base"], r["manifest"], r["reference"]
        seen = r["seen"]
        sp_keys = {f"{k.split('/')[1]}/{k.split('/')[3]}/{k.split('/')[4]}": v
                   for k, v in r["spatial"].tensors.items()}
        base_ok = _same(seen["base2"], base.tensors) and _same(seen["base3"], base.tensors)
        other_ok = seen["temporal2"] == {} and _same(seen["spatial3"], sp_keys)
        branch_ok = (all(k.split("/")[2] == SPATIAL for k in r["spatial"].tensors)
                     and all(k.split("/")[2] == TEMPORAL for k in r["temporal"].tensors))
        sp2, _ = run_stage2(base, man, ref, TuningRun.from_profile(prof, SPATIAL, 0))
        tp2, _ = run_stage3(base, man, sp2, ref, TuningRun.from_profile(prof, TEMPORAL, 0))
        repro = sp2.equal(r["spatial"]) and tp2.equal(r["temporal"])
        c["detail"] = (f"base unchanged {base_ok}, other branch unchanged {other_ok and branch_ok}, "
                       f"bitwise re-run {repro}")
        assert base_ok and other_ok and branch_ok
        assert repro


def test_criterion_7_end_to_end_transfer(desk_run):
    with criterion(7, "end-to-end desk transfer", 900) as c:
        r = desk_run
        prof = r["profile"]
        target = 1
        corpus = CorpusSpec()
        want = torch.tensor(corpus.conditions[target].color, dtype=torch.float64) / PRESENCE
        oracle = color_signature(synth_video(reference_scene(prof, condition_id=target)))
        assert torch.allclose(oracle[:3] / oracle[3], want)
        t0 = time.perf_counter()
        results = []
        for seed in TRANSFER_SEEDS:
            out = generate(r["base"], r["manifest"], r["spatial"], r["temporal"], "transfer", target,
                           prof.sample_steps, seed=seed)
            sig = color_signature(out)
            band = float((sig[:3] / sig[3] - want).norm())
            results.append((motion_proxy(out, r["reference"]), band, appearance_match(sig, corpus)[0]))
        elapsed = r["elapsed"] + time.perf_counter() - t0
        c["detail"] = "; ".join(f"seed {s}: proxy {p:.3f} colour dist {d:.3f} match {m}"
                                for s, (p, d, m) in zip(TRANSFER_SEEDS, results))
        c["detail"] += f"; pipeline {elapsed:.0f} s"
        assert prof.pretrain_steps <= 2000 and len(corpus.conditions) == 2
        assert all(p >= PROXY_FLOOR for p, _, _ in results)
        assert all(d <= COLOR_BAND and m == target for _, d, m in results)
        assert elapsed <= 900


# -- measured thresholds on the same trained run (not criteria) -------------------------------

def test_trained_pretrain_loss_halves(desk_run):
    running = smoothed(desk_run["pretrain_log"].totals(), window=10)
    # measured 1.75 -> 0.12
    assert running[-1] <= 0.5 * running[0]


def test_trained_stage2_loss_on_static_video(desk_run):
    r = desk_run
    static = synth_video(CorpusSpec().scene(0, (0.0, 0.0), (3.0, 3.0)))
    run = TuningRun.from_profile(r["profile"], SPATIAL, 0, steps=1000)
    _, log = run_stage2(r["base"], r["manifest"], static, run)
    running = smoothed(log.totals(), window=10)
    # measured 95% decrease
    assert running[-1] <= 0.7 * running[0]


def test_trained_stage3_loss_800_steps(desk_run):
    r = desk_run
    _, log = run_stage3(r["base"], r["manifest"], r["spatial"], r["reference"],
                        TuningRun.from_profile(r["profile"], TEMPORAL, 0, steps=800))
    totals = log.totals()
    # measured 85% decrease of the running loss from the step-0 value
    assert smoothed(totals, window=10)[-1] <= 0.5 * totals[0]


def test_trained_euler_step_count_consistency(desk_run):
    model = load_model(desk_run["base"])
    for p in model.parameters():
        p.requires_grad_(False)
    shape = (9, 6, 6, 4)
    for seed in range(3):
        a = euler_sample(model, shape, 10, 1, seed=seed).grid
        b = euler_sample(model, shape, 100, 1, seed=seed).grid
        # measured mean-abs 0.020-0.026 over seeds 0-2; a few cells reach 0.4
        assert (a - b).abs().mean().item() <= 0.05


# -- 8 ----------------------------------------------------------------------------------------

def test_criterion_8_sparse_sampling_speedup():
    with criterion(8, "sparse-sampling speed-up", 300) as c:
        rows = measure_stage_latency([2, 3, 5, 7, 9], frames=9, warmup=3, steps=15)
        ms = dict(rows)
        speedup = ms[9] / ms[5]
        monotone = all(b >= 0.9 * a for (_, a), (_, b) in zip(rows, rows[1:]))
        c["detail"] = (f"F_samp 5 vs 9 speed-up {speedup:.2f}x, ms/step "
                       + ", ".join(f"{f}: {m:.1f}" for f, m in rows))
        assert speedup >= 1.8
        assert monotone


# -- 9 ----------------------------------------------------------------------------------------

_names = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), max_size=12)
_shapes = st.lists(st.integers(0, 4), max_size=4)
_tensors = st.dictionaries(_names, st.tuples(_shapes, st.sampled_from([torch.float32, torch.float64]),
                                             st.integers(0, 2**31)), max_size=5)
_floats = st.floats(allow_nan=False, allow_infinity=False)
_manifests = st.builds(
    lambda alpha, grid, layers: HeadManifest(alpha, grid, [
        [HeadRecord(i, ty, ss, stv) for i, (ty, ss, stv) in enumerate(layer)] for layer in layers]),
    st.floats(1e-6, 1e6),
    st.tuples(st.integers(1, 99), st.integers(1, 9), st.integers(1, 9)),
    st.lists(st.lists(st.tuples(st.sampled_from([SPATIAL, TEMPORAL]), _floats, _floats), min_size=1,
                      max_size=8), min_size=1, max_size=4),
)

_quick = settings(max_examples=100, deadline=None, derandomize=True,
                  suppress_health_check=[HealthCheck.too_slow])


def test_criterion_9_format_stability(tmp_path_factory):
    with criterion(9, "format stability", 10) as c:
        counts = {"archive": 0, "manifest": 0}

        @_quick
        @given(_tensors)
        def archive_round_trip(spec):
            tensors = {n: torch.randn(tuple(shape), generator=torch.Generator().manual_seed(seed), dtype=dt)
                       for n, (shape, dt, seed) in spec.items()}
            data = encode_archive(tensors)
            back = decode_archive(data)
            assert list(back) == list(tensors)
            for k, t in tensors.items():
                assert back[k].dtype == t.dtype and back[k].numpy().tobytes() == t.numpy().tobytes()
            assert encode_archive(back) == data
            counts["archive"] += 1

        @_quick
        @given(_manifests)
        def manifest_round_trip(man):
            back = HeadManifest.from_json(man.to_json())
            assert back == man and back.to_json() == man.to_json()
            counts["manifest"] += 1

        archive_round_trip()
        manifest_round_trip()
        golden = GOLDEN.read_bytes()
        want = {"w": torch.tensor([[-1.0, -0.5, 0.0], [0.5, 1.0, 1.5]]), "s": torch.tensor(3.25),
                "lora/0/temporal/q/A": torch.tensor([[1e-3, -7.0]])}
        golden_ok = encode_archive(want) == golden and encode_archive(decode_archive(golden)) == golden
        c["detail"] = (f"{counts['archive']} archive and {counts['manifest']} manifest round-trips, "
                       f"golden byte match {golden_ok}")
        assert counts["archive"] >= 100 and counts["manifest"] >= 100
        assert golden_ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
