import json

import numpy as np
import pytest
import torch

from hcplayer.backbone import BackboneDescriptor, LayerSpec, toy_backbone
from hcplayer.exceptions import CompatibilityError, FreezeGuardError, ValidationError
from hcplayer.priors import PriorFeatureStack, PriorStackCache, ToyExtractor
from hcplayer.tokens import PromptEncoder
from hcplayer.training import (
    Batch,
    TrainingConfig,
    TrainingState,
    TripletRecord,
    check_compatibility,
    compute_losses,
    epoch_order,
    evaluate_alignment,
    freeze_guard,
    iterate_batches,
    load_checkpoint,
    load_records,
    read_manifest,
    restore_state,
    run_training,
    save_checkpoint,
    training_step,
)

FAST = dict(hidden_width=64, batch_size=4)


def records_for(manifest, backbone=None):
    bb = backbone or toy_backbone()
    return load_records(read_manifest(manifest), manifest.parent, bb.descriptor, PromptEncoder(),
                        PriorStackCache(ToyExtractor()), "pose")


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainingConfig(window=(500, 100))
    with pytest.raises(ValidationError):
        TrainingConfig(window=(0, 1001))
    with pytest.raises(ValidationError):
        TrainingConfig(alpha=-1)
    with pytest.raises(ValidationError):
        TrainingConfig(gamma=1.5)
    assert TrainingConfig.from_dict(TrainingConfig().to_dict()) == TrainingConfig()


def test_defaults():
    cfg = TrainingConfig()
    assert (cfg.alpha, cfg.gamma, cfg.learning_rate, cfg.weight_decay, cfg.epochs, cfg.T) == (
        0.1, 0.9, 1e-4, 0.01, 10, 1000)
    assert cfg.window == (0, 1000)


def test_alpha_zero_gamma_one_zero_hcp_gradients(small_fixture):
    bb = toy_backbone()
    state = TrainingState(bb, TrainingConfig(alpha=0.0, gamma=1.0, **FAST))
    batch = Batch.from_records(records_for(small_fixture, bb)[:2])
    bd = compute_losses(state, batch, 300, torch.randn(batch.z0.shape))
    bd.graph.backward()
    grads = [p.grad for p in state.hcp.parameters()]
    assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)


def test_prior_equal_to_maps_gives_zero_alignment():
    # one layer per side so each prior scale can be set to that layer's map
    desc = BackboneDescriptor([LayerSpec("down_0", "down", 16), LayerSpec("mid_0", "mid", 8),
                               LayerSpec("up_0", "up", 32)])
    bb = toy_backbone(desc)
    state = TrainingState(bb, TrainingConfig(**FAST))
    bundle = PromptEncoder().encode("a woman", require_human=True)
    assert bundle.human_indices == [2]
    z0 = torch.randn(1, 4, 16, 16, generator=torch.Generator().manual_seed(0))
    eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(1))
    from hcplayer.backbone import forward_noise

    z_t = forward_noise(z0, 200, eps, state.noise)
    with torch.no_grad():
        _, maps = bb(z_t, 200, bundle.embeddings.unsqueeze(0), hooks=state.hooks())
    col = {l: maps[l].human_centric[0, :, :, 2] for l in desc.layer_ids}
    per_scale = [col["up_0"].reshape(8, 32, 32), col["up_0"].reshape(8, 32, 32),
                 col["down_0"].reshape(8, 16, 16), col["mid_0"].reshape(8, 8, 8)]
    per_scale[0] = torch.ones(8, 64, 64)
    prior = PriorFeatureStack([p / p.reshape(8, -1).norm(dim=1)[:, None, None] for p in per_scale])
    batch = Batch.from_records([TripletRecord("r", z0[0], bundle, prior)])
    bd = compute_losses(state, batch, 200, eps)
    assert all(abs(v) < 1e-6 for v in bd.l_hca_per_layer.values())
    assert bd.total == pytest.approx(bd.l_ldm, abs=1e-6)


def test_fifty_steps_reduce_alignment(fixture_manifest, tmp_path):
    _, history, _ = run_training(TrainingConfig(max_steps=50, batch_size=4), fixture_manifest, tmp_path)
    first = np.mean([h.mean_hca for h in history[:10]])
    last = np.mean([h.mean_hca for h in history[-10:]])
    assert last < first


def test_empty_manifest(tmp_path):
    m = tmp_path / "m.jsonl"
    m.write_text("\n")
    with pytest.raises(ValidationError):
        run_training(TrainingConfig(**FAST), m, tmp_path / "out")
    assert not (tmp_path / "out" / "metrics.jsonl").exists()


def test_manifest_missing_fields(tmp_path):
    m = tmp_path / "m.jsonl"
    m.write_text(json.dumps({"id": "a", "prompt": "x"}) + "\n")
    with pytest.raises(ValidationError, match="missing fields"):
        read_manifest(m)


def test_bad_records_skipped_then_abort(small_fixture, tmp_path):
    entries = read_manifest(small_fixture)
    bb = toy_backbone()
    enc, cache = PromptEncoder(), PriorStackCache(ToyExtractor())
    many = entries * 2  # 12 entries, one bad record is 8.3%
    bad = dict(entries[0], id="bad", prior_image="priors/missing.png")
    recs = load_records(many[:-1] + [bad], small_fixture.parent, bb.descriptor, enc, cache)
    assert len(recs) == 11 and "bad" not in [r.id for r in recs]
    with pytest.raises(ValidationError, match="aborting"):
        load_records(entries[:-1] + [bad], small_fixture.parent, bb.descriptor, enc, cache)


def test_records_without_human_words_rejected(small_fixture):
    entries = [dict(e, prompt="a photo of a mountain") for e in read_manifest(small_fixture)]
    with pytest.raises(ValidationError):
        load_records(entries, small_fixture.parent, toy_backbone().descriptor, PromptEncoder(),
                     PriorStackCache(ToyExtractor()))


def test_deterministic_metrics(small_fixture, tmp_path):
    cfg = TrainingConfig(max_steps=6, **FAST)
    run_training(cfg, small_fixture, tmp_path / "a")
    run_training(cfg, small_fixture, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_resume_matches_uninterrupted(small_fixture, tmp_path):
    cfg = TrainingConfig(max_steps=8, checkpoint_every=4, **FAST)
    _, full, _ = run_training(cfg, small_fixture, tmp_path / "full")
    run_training(cfg, small_fixture, tmp_path / "part", stop_after=4)
    _, rest, _ = run_training(cfg, small_fixture, tmp_path / "part",
                              resume_from=tmp_path / "part" / "checkpoint.npz")
    assert [h.to_record() for h in full[4:]] == [h.to_record() for h in rest]
    full_log = (tmp_path / "full" / "metrics.jsonl").read_text()
    part_log = (tmp_path / "part" / "metrics.jsonl").read_text()
    assert full_log == part_log
    assert (tmp_path / "full" / "checkpoints" / "step_000004.npz").exists()


def test_checkpoint_reproduces_loss(small_fixture, tmp_path):
    bb = toy_backbone()
    cfg = TrainingConfig(**FAST)
    state = TrainingState(bb, cfg)
    recs = records_for(small_fixture, bb)
    batch = Batch.from_records(recs[:3])
    for _ in range(2):
        training_step(batch, state)
    path = save_checkpoint(state, tmp_path / "c.npz")
    eps = torch.randn(batch.z0.shape, generator=torch.Generator().manual_seed(9))
    before = compute_losses(state, batch, 123, eps).total
    restored = restore_state(load_checkpoint(path), toy_backbone())
    assert restored.step == 2
    assert compute_losses(restored, batch, 123, eps).total == before
    a = state.optimizer.state_dict()["state"]
    b = restored.optimizer.state_dict()["state"]
    assert all(torch.equal(a[i]["exp_avg_sq"], b[i]["exp_avg_sq"]) for i in a)


def test_compatibility_report(small_fixture, tmp_path):
    state = TrainingState(toy_backbone(), TrainingConfig(**FAST))
    ckpt = load_checkpoint(save_checkpoint(state, tmp_path / "c.npz"))
    other = BackboneDescriptor([LayerSpec("down_0", "down", 16), LayerSpec("mid_0", "mid", 8),
                                LayerSpec("up_x", "up", 16)])
    with pytest.raises(CompatibilityError) as err:
        check_compatibility(ckpt, other)
    assert any("up_0" in m for m in err.value.mismatches)
    aliased = BackboneDescriptor([LayerSpec("down_0", "down", 16), LayerSpec("mid_0", "mid", 8),
                                  LayerSpec("up_0", "up", 8), LayerSpec("up_b", "up", 16)])
    assert check_compatibility(ckpt, aliased, {"up_1": "up_b"})["up_1"] == "up_b"


def test_freeze_guard_contract(small_fixture):
    bb = toy_backbone()
    state = TrainingState(bb, TrainingConfig(**FAST))
    guard = freeze_guard(bb, state.hcp)
    guard.verify()
    assert guard.changed_hcp() == []
    recs = records_for(small_fixture, bb)
    for step, batch in iterate_batches(recs, TrainingConfig(max_steps=100, **FAST)):
        training_step(batch, state)
    guard.verify()
    assert set(guard.changed_hcp()) == {n for n, _ in state.hcp.named_parameters()}


def test_freeze_guard_fault_injection(small_fixture):
    bb = toy_backbone()
    state = TrainingState(bb, TrainingConfig(**FAST))
    batch = Batch.from_records(records_for(small_fixture, bb)[:2])
    bb.mixers["mid_0"].weight.requires_grad_(True)
    with pytest.raises(FreezeGuardError) as err:
        training_step(batch, state)
    assert err.value.block == "mixers.mid_0.weight"
    bb.mixers["mid_0"].weight.requires_grad_(False)
    with torch.no_grad():
        bb.head.bias.add_(1e-3)
    with pytest.raises(FreezeGuardError) as err:
        state.guard.verify()
    assert err.value.block == "head.bias"


def test_only_hcp_parameters_receive_gradients(small_fixture):
    bb = toy_backbone()
    state = TrainingState(bb, TrainingConfig(**FAST))
    batch = Batch.from_records(records_for(small_fixture, bb)[:2])
    bd = compute_losses(state, batch, 100, torch.randn(batch.z0.shape))
    bd.graph.backward()
    assert all(p.grad is None for p in bb.parameters())
    assert all(p.grad is not None and torch.count_nonzero(p.grad) > 0 for p in state.hcp.parameters())


def test_window_respected(small_fixture, tmp_path):
    _, history, _ = run_training(TrainingConfig(max_steps=12, window=(900, 1000), **FAST), small_fixture, tmp_path)
    assert all(900 <= h.t < 1000 for h in history)


def test_no_cosine_condition_logged(small_fixture, tmp_path):
    cfg = TrainingConfig(max_steps=3, cosine={"down": False, "mid": False, "up": False}, **FAST)
    _, history, _ = run_training(cfg, small_fixture, tmp_path)
    assert all(v == 1.0 for h in history for v in h.lambdas.values())
    meta = load_checkpoint(tmp_path / "checkpoint.npz").metadata
    assert meta["config"]["cosine"] == {"down": False, "mid": False, "up": False}


def test_epoch_order_deterministic():
    assert np.array_equal(epoch_order(10, 3, 2), epoch_order(10, 3, 2))
    assert not np.array_equal(epoch_order(10, 3, 2), epoch_order(10, 3, 3))


def test_evaluate_alignment_per_layer(small_fixture):
    bb = toy_backbone()
    state = TrainingState(bb, TrainingConfig(**FAST))
    res = evaluate_alignment(state, records_for(small_fixture, bb), timesteps=[0, 500])
    assert set(res) == set(bb.descriptor.layer_ids)
    assert all(0 <= v <= 2 for v in res.values())
