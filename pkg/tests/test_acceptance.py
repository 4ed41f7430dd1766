"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The lines are printed as the test runs and collected into a summary section
at the end of the pytest session.
"""
import builtins
import math
import random

import mpmath
import numpy as np
import pytest
import torch

import golden_pipeline as gp
from conftest import ACCEPTANCE_LINES, GOLDEN
from hcplayer.analysis import AttentionGrid, AttentionTrace, TraceRecorder
from hcplayer.attention import CrossAttentionConfig, CrossAttentionWeights, HcPKey, hcp_cross_attention
from hcplayer.backbone import HcPHook, NoiseSchedule, toy_backbone
from hcplayer.metrics import clip_score, fid, kid
from hcplayer.objectives import alignment_loss, stage_weight
from hcplayer.priors import PriorStackCache, make_extractor
from hcplayer.sampling import SamplerConfig, attach_hcp, ddim_step, generate
from hcplayer.tokens import PromptEncoder
from hcplayer.training import (
    TrainingConfig,
    evaluate_alignment,
    load_checkpoint,
    load_records,
    param_digest,
    read_manifest,
    run_training,
)

T = 1000
MID_UP = ("mid", "up")


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# -- shared runs ----------------------------------------------------------------

@pytest.fixture(scope="module")
def full_run(fixture_manifest, tmp_path_factory):
    """200 steps on the shipped fixture with default hyper-parameters and seed 0."""
    cfg = TrainingConfig(batch_size=4, max_steps=200, seed=0)
    _, history, state = run_training(cfg, fixture_manifest, tmp_path_factory.mktemp("full_run"))
    return history, state


@pytest.fixture(scope="module")
def golden_run(tmp_path_factory):
    work = tmp_path_factory.mktemp("golden_run")
    return work, gp.train_checkpoint(work)


def _fixture_records(manifest, descriptor):
    return load_records(read_manifest(manifest), manifest.parent, descriptor, PromptEncoder(),
                        PriorStackCache(make_extractor("toy")))


# -- 1 ----------------------------------------------------------------------------

PROMPTS = ["a young woman doing yoga on beach", "a man running in the park", "two people dancing",
           "a boy playing football", "a girl sitting on a bench"]


def test_criterion_01_gating_identity():
    rng = random.Random(0)
    mismatches = []
    for k in range(20):
        bseed, hseed, sseed = rng.randrange(10_000), rng.randrange(10_000), rng.randrange(10_000)
        prompt = rng.choice(PROMPTS)
        control = rng.choice([0, 2])
        cfg = SamplerConfig(steps=rng.randint(2, 5), guidance_scale=rng.choice([1.0, 3.0, 7.5]),
                            eta=rng.choice([0.0, 0.5]), seed=sseed)
        ctrl = None if not control else torch.randn(1, control, 16, 16, generator=torch.Generator().manual_seed(k))
        base = generate(prompt, cfg, toy_backbone(seed=bseed, control_channels=control), control=ctrl)["latents"]
        bb = toy_backbone(seed=bseed, control_channels=control)
        width = rng.choice([16, 64])
        for i, layer in enumerate(bb.descriptor.layers):
            key = HcPKey(bb.descriptor.embed_dim, layer.d, hidden_width=width, seed=hseed + i,
                         final_std=rng.choice([1e-3, 0.5]))
            bb.attach(layer.id, HcPHook(key, 1.0))
        hooked = generate(prompt, cfg, bb, control=ctrl)["latents"]
        if not torch.equal(base, hooked):
            mismatches.append(k)
    report(1, not mismatches, f"gamma=1 bit-identical on {20 - len(mismatches)}/20 random toy configurations")


# -- 2 ----------------------------------------------------------------------------

def test_criterion_02_row_stochastic():
    rng = np.random.default_rng(2)
    worst, negatives = 0.0, 0
    for k in range(1000):
        heads = int(rng.choice([1, 2, 4, 8]))
        d = heads * int(rng.integers(1, 5))
        n, p, emb, ch = (int(v) for v in rng.integers(1, 12, size=4))
        g = torch.Generator().manual_seed(k)
        scale = float(rng.choice([0.1, 1.0, 10.0]))
        cfg = CrossAttentionConfig(d, heads, n, emb, p, in_channels=ch)
        w = CrossAttentionWeights(*(torch.randn(d, i, generator=g) * scale for i in (ch, emb, emb)))
        z, c = torch.randn(p, ch, generator=g), torch.randn(n, emb, generator=g)
        key = HcPKey(emb, d, hidden_width=8, seed=k, final_std=float(rng.choice([1e-3, 1.0])))
        with torch.no_grad():
            _, maps = hcp_cross_attention(z, c, key, float(rng.random()), cfg, w)
        for m in (maps.base, maps.human_centric, maps.combined):
            worst = max(worst, float((m.double().sum(-1) - 1).abs().max()))
            negatives += int((m < 0).sum())
    report(2, worst <= 1e-5 and negatives == 0,
           f"1000 evaluations, max |row sum - 1| = {worst:.2e}, negative entries = {negatives}")


# -- 3 ----------------------------------------------------------------------------

def mp_stage_weight(stage, t, T):
    mpmath.mp.dps = 50
    t, T = mpmath.mpf(t), mpmath.mpf(T)
    arg = {"down": t / T, "mid": (t - T) / T, "up": (2 * t - T) / T}[stage]
    return min(mpmath.mpf(1), max(mpmath.mpf(0), mpmath.cos(arg * mpmath.pi / 2)))


def test_criterion_03_schedule_table():
    worst = 0.0
    for stage in ("down", "mid", "up"):
        for t in (0, T // 4, T // 2, 3 * T // 4, T):
            worst = max(worst, abs(stage_weight(stage, t, T) - float(mp_stage_weight(stage, t, T))))
    ts = np.linspace(0, T, 1001)
    down = [stage_weight("down", t, T) for t in ts]
    mid = [stage_weight("mid", t, T) for t in ts]
    up = [stage_weight("up", t, T) for t in ts]
    mono = (all(b <= a for a, b in zip(down, down[1:])) and all(b >= a for a, b in zip(mid, mid[1:]))
            and all(b >= a for a, b in zip(up[:501], up[1:501])) and all(b <= a for a, b in zip(up[500:], up[501:]))
            and max(up) == up[500] == 1.0)
    report(3, worst <= 1e-9 and mono,
           f"max |lambda - oracle| = {worst:.1e} over 15 table entries, 1001-point monotonicity {'holds' if mono else 'broken'}")


# -- 4 ----------------------------------------------------------------------------

def test_criterion_04_gradient_correctness():
    rng = np.random.default_rng(4)
    step = 1e-5
    worst_rel, leaked = 0.0, 0
    for k in range(50):
        heads, p, n = int(rng.integers(1, 5)), int(rng.integers(2, 13)), int(rng.integers(2, 7))
        idx = sorted(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist())
        h = torch.from_numpy(rng.random((heads, p)) + 0.05)
        m0 = torch.softmax(torch.from_numpy(rng.standard_normal((heads, p, n))), -1)
        m = m0.clone().requires_grad_(True)
        alignment_loss(h, m, idx).backward()
        grad = m.grad
        fd = torch.zeros_like(m0)
        with torch.no_grad():
            for pos in np.ndindex(*m0.shape):
                plus, minus = m0.clone(), m0.clone()
                plus[pos] += step
                minus[pos] -= step
                fd[pos] = (alignment_loss(h, plus, idx) - alignment_loss(h, minus, idx)) / (2 * step)
        rel = float((grad - fd).abs().max() / fd.abs().max())
        worst_rel = max(worst_rel, rel)
        outside = [j for j in range(n) if j not in idx]
        leaked += int(torch.count_nonzero(grad[:, :, outside]))
    report(4, worst_rel <= 1e-4 and leaked == 0,
           f"50 instances, max relative error {worst_rel:.1e}, nonzero gradients outside I_h = {leaked}")


# -- 5, 6 ----------------------------------------------------------------------------

def test_criterion_05_frozenness(full_run):
    history, state = full_run
    reference = toy_backbone(seed=0)
    base_same = all(param_digest(p) == param_digest(q)
                    for p, q in zip(state.backbone.parameters(), reference.parameters()))
    state.guard.verify()
    changed = state.guard.changed_hcp()
    names = [n for n, _ in state.hcp.named_parameters()]
    ok = len(history) == 200 and base_same and set(changed) == set(names)
    report(5, ok, f"after {len(history)} steps base digests unchanged={base_same}, "
                  f"HcP tensors changed {len(changed)}/{len(names)}")


def test_criterion_06_learning_signal(full_run):
    history, _ = full_run
    first = float(np.mean([h.mean_hca for h in history[:10]]))
    last = float(np.mean([h.mean_hca for h in history[190:200]]))
    drop = 1 - last / first
    report(6, drop >= 0.30, f"mean L_hca steps 1-10 = {first:.4f}, steps 191-200 = {last:.4f}, drop {drop:.1%}")


# -- 7 ----------------------------------------------------------------------------

def test_criterion_07_ablation_direction(fixture_manifest, tmp_path):
    """Late window [900, 1000) against early window [0, 100), scored on a common timestep grid."""
    scores = {}
    for name, window in (("late", (900, 1000)), ("early", (0, 100))):
        cfg = TrainingConfig(batch_size=4, max_steps=200, seed=0, window=window)
        _, _, state = run_training(cfg, fixture_manifest, tmp_path / name)
        per_layer = evaluate_alignment(state, _fixture_records(fixture_manifest, state.descriptor))
        stages = state.descriptor.partition()
        scores[name] = float(np.mean([v for l, v in per_layer.items() if stages[l] in MID_UP]))
    report(7, scores["late"] < scores["early"],
           f"mid/up L_hca after window [900,1000) = {scores['late']:.4f}, after [0,100) = {scores['early']:.4f}")


# -- 8 ----------------------------------------------------------------------------

def test_criterion_08_inference_purity(golden_run, monkeypatch):
    import PIL.Image

    import hcplayer.priors as priors
    import hcplayer.training as training

    work, ckpt = golden_run
    reads = []
    real_open, real_image_open = builtins.open, PIL.Image.open

    def guarded_open(file, *a, **k):
        if "priors" in str(file):
            reads.append(str(file))
        return real_open(file, *a, **k)

    def guarded_image_open(fp, *a, **k):
        reads.append(f"image:{fp}")
        return real_image_open(fp, *a, **k)

    def forbidden(name):
        def wrapped(*a, **k):
            reads.append(name)
            raise AssertionError(f"{name} called during sampling")
        return wrapped

    for mod in (priors, training):
        for fn in ("load_prior_image", "build_prior_stack", "extract_stage_features"):
            if hasattr(mod, fn):
                monkeypatch.setattr(mod, fn, forbidden(f"{mod.__name__}.{fn}"))
    monkeypatch.setattr(builtins, "open", guarded_open)
    monkeypatch.setattr(PIL.Image, "open", guarded_image_open)
    out = gp.sample_with_trace(ckpt, work / "purity_trace")
    ok = not reads and torch.isfinite(out["latents"]).all().item()
    report(8, ok, f"prior reads during golden sampling: {len(reads)}")


# -- 9 ----------------------------------------------------------------------------

def brute_mmd2(x, y):
    m, f = len(x), len(x[0])

    def k(a, b):
        return (sum(p * q for p, q in zip(a, b)) / f + 1.0) ** 3

    pairs = [(i, j) for i in range(m) for j in range(m) if i != j]
    return (sum(k(x[i], x[j]) + k(y[i], y[j]) - 2 * k(x[i], y[j]) for i, j in pairs)) / (m * (m - 1))


def test_criterion_09_metrics():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((100, 6))
    fid_aa = fid(a, a)
    one_d = rng.standard_normal((40, 1))
    fid_1d_err = max(abs(fid(one_d, one_d + d) - d * d) for d in (0.25, 1.0, 2.0))
    x, y = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    kid_err = abs(kid(x, y, subset_size=4, subsets=1)[0] - brute_mmd2(x.tolist(), y.tolist()))
    img = np.array([[2.0, 0, 0, 0], [1.0, 0, 0, 0], [1.0, 0, 0, 0]])
    txt = np.array([[3.0, 0, 0, 0], [1.0, 1, 1, 1], [0.0, 1, 0, 0]])
    cs = clip_score(img, txt)
    ok = fid_aa <= 1e-6 and fid_1d_err <= 1e-8 and kid_err <= 1e-10 and cs == 50.0
    report(9, ok, f"FID(A,A)={fid_aa:.1e}, 1-D FID error {fid_1d_err:.1e}, KID oracle error {kid_err:.1e}, "
                  f"CLIP angle fixture {cs!r}")


# -- 10 -----------------------------------------------------------------------------

def test_criterion_10_ddim(golden_run):
    _, ckpt = golden_run
    cfg = SamplerConfig(steps=10, eta=0.0, seed=0)
    bb = attach_hcp(toy_backbone(), load_checkpoint(ckpt))
    repeat = torch.equal(generate(gp.PROMPT, cfg, bb)["latents"], generate(gp.PROMPT, cfg, bb)["latents"])
    sched = NoiseSchedule()
    z = torch.randn(2, 4, 16, 16, generator=torch.Generator().manual_seed(10), dtype=torch.float64)
    worst = 0.0
    for t, tp in [(999, 979), (500, 480), (300, 100), (20, 0)]:
        expected = math.sqrt(sched.alpha_bar(tp) / sched.alpha_bar(t)) * z
        worst = max(worst, float((ddim_step(z, torch.zeros_like(z), t, tp, sched) - expected).abs().max()))
    report(10, repeat and worst <= 1e-9, f"eta=0 repeat bit-identical={repeat}, zero-eps step error {worst:.1e}")


# -- 11 -----------------------------------------------------------------------------

def test_criterion_11_analysis_roundtrip(golden_run):
    work, ckpt = golden_run
    trace_dir = work / "trace"
    rec = TraceRecorder()
    bb = attach_hcp(toy_backbone(), load_checkpoint(ckpt))
    generate(gp.PROMPT, SamplerConfig(**gp.SAMPLER), bb, recorder=rec)
    rec.trace.save(work / "memory_trace")
    back = AttentionTrace.load(work / "memory_trace")
    exact = set(back.maps) == set(rec.trace.maps) and all(np.array_equal(back.maps[k], m)
                                                         for k, m in rec.trace.maps.items())
    gp.sample_with_trace(ckpt, trace_dir)
    _, averaged, grid = gp.analysis_products(trace_dir)
    ref = np.load(GOLDEN / "averaged_maps.npz")
    avg_err = max(float(np.abs(averaged[k] - ref[k]).max()) for k in ref.files)
    ref_grid = AttentionGrid.load(GOLDEN / "grid_yoga")
    grid_err = float(np.abs(grid.cells - ref_grid.cells).max())
    ok = exact and set(ref.files) == set(averaged) and avg_err <= 1e-6 and grid_err <= 1e-6
    report(11, ok, f"trace round-trip exact={exact}, averaged-map golden error {avg_err:.1e}, "
                   f"grid golden error {grid_err:.1e}")
