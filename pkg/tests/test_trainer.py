import json
import math

import numpy as np
import pytest
import torch
from scipy.stats import kstest

from conftest import small_config
from tabms import TabularICLModel
from tabms.scm_datagen import ScmConfig, generate_episodes
from tabms.trainer import (
    FROZEN_STAGE3, CheckpointError, EpisodePool, Prefetcher, SizeSampler, StageConfig, SyntheticSource,
    TrainingDiverged, TrainLog, accumulate_gradients, batch_loss, clip_gradients, desk_curriculum, load_checkpoint,
    lr_schedule, full_curriculum, pretrain, save_checkpoint, step_batches, train_stage,
)


@pytest.fixture(scope="module")
def pool():
    return EpisodePool(generate_episodes(ScmConfig(n_samples=48), 12, seed=3))


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return TabularICLModel(small_config(window=1, random_links=1, c_max=10))


def tiny_curriculum():
    return [
        StageConfig(1, 4, 4, 2, SizeSampler("fixed", 24, 24), 1e-3),
        StageConfig(2, 3, 2, 1, SizeSampler("log_uniform", 16, 40), 1e-4),
        StageConfig(3, 2, 2, 1, SizeSampler("uniform", 30, 40), 1e-4, frozen=FROZEN_STAGE3),
    ]


# schedules


def test_cosine_endpoint():
    assert lr_schedule(1, 100, 100, 1e-3) == pytest.approx(0.0, abs=1e-18)


def test_constant_stage3():
    assert all(lr_schedule(3, s, 50, 2e-5) == 2e-5 for s in range(51))


def test_cosine_midpoint_closed_form():
    total, base = 200, 1e-3
    warm = 10
    mid = warm + (total - warm) // 2
    expect = base * math.cos(math.pi * (mid - warm) / (total - warm) / 2) ** 2
    assert lr_schedule(1, mid, total, base) == pytest.approx(expect, rel=1e-12)
    assert lr_schedule(1, 5, total, base) == pytest.approx(base / 2)


def test_polynomial_stage2():
    assert lr_schedule(2, 0, 40, 1.0) == 1.0
    assert lr_schedule(2, 40, 40, 1.0) == pytest.approx(0.1)
    assert lr_schedule(2, 20, 40, 1.0) == pytest.approx(0.55)
    with pytest.raises(ValueError):
        lr_schedule(2, 41, 40, 1.0)


# clipping


def _params(*grads):
    out = []
    for g in grads:
        p = torch.nn.Parameter(torch.zeros(len(g), dtype=torch.float64))
        p.grad = torch.tensor(g, dtype=torch.float64)  # copy: clipping is in place
        out.append(p)
    return out


def test_clip_small_norm_unchanged():
    ps = _params([0.3, 0.4])
    assert clip_gradients(ps) == pytest.approx(0.5)
    assert ps[0].grad.tolist() == [0.3, 0.4]


def test_clip_scales_half():
    ps = _params([1.2, 1.6])
    assert clip_gradients(ps) == pytest.approx(2.0)
    np.testing.assert_allclose(ps[0].grad.numpy(), [0.6, 0.8], atol=1e-15)


def test_clip_random_oracle(rng):
    gs = [rng.normal(size=k) * 3 for k in (4, 7, 2)]
    ps = _params(*gs)
    norm = np.sqrt(sum((g**2).sum() for g in gs))
    assert clip_gradients(ps, 1.0) == pytest.approx(norm, rel=1e-12)
    for p, g in zip(ps, gs):
        np.testing.assert_allclose(p.grad.numpy(), g / norm, atol=1e-12)
    assert math.sqrt(sum(float((p.grad**2).sum()) for p in ps)) <= 1.0 + 1e-9


# samplers and batches


def test_log_uniform_sampler_ks():
    s = SizeSampler("log_uniform", 1024, 40000)
    rng = np.random.default_rng(0)
    draws = np.array([s.sample(rng) for _ in range(10_000)])
    assert draws.min() >= 1024 and draws.max() <= 40000
    u = (np.log(draws) - math.log(1024)) / (math.log(40000) - math.log(1024))
    assert kstest(u, "uniform").pvalue > 0.01


def test_uniform_and_fixed_sampler():
    rng = np.random.default_rng(1)
    assert {SizeSampler("fixed", 7, 7).sample(rng) for _ in range(5)} == {7}
    d = [SizeSampler("uniform", 3, 5).sample(rng) for _ in range(300)]
    assert set(d) == {3, 4, 5}
    with pytest.raises(ValueError):
        SizeSampler("normal").sample(rng)


def test_curricula():
    p = full_curriculum()
    assert [s.steps for s in p] == [25_000, 2_000, 50]
    assert p[0].sizes.lo == 1024 and p[0].micro_batches == 8 and p[0].datasets_per_step == 2048
    assert p[1].sizes.kind == "log_uniform" and (p[1].sizes.lo, p[1].sizes.hi) == (1024, 40000)
    assert p[2].frozen == FROZEN_STAGE3 and p[0].base_lr == 1e-4 and p[1].base_lr == 1e-5
    d = desk_curriculum()
    assert [s.stage for s in d] == [1, 2, 3] and d[2].frozen == FROZEN_STAGE3
    with pytest.raises(ValueError):
        StageConfig(1, 1, 5, 2, SizeSampler(), 1e-3)


def test_micro_batches_share_size(pool):
    stage = StageConfig(2, 5, 6, 3, SizeSampler("log_uniform", 10, 40), 1e-4)
    batches = step_batches(pool, stage, 2, seed=4)
    assert len(batches) == 3
    for mb in batches:
        assert len(mb) == 2 and len({(t.n, t.n_train) for t in mb}) == 1
    again = step_batches(pool, stage, 2, seed=4)
    assert all(np.array_equal(a.X, b.X) for x, y in zip(batches, again) for a, b in zip(x, y))


def test_synthetic_source():
    tasks = SyntheticSource(ScmConfig()).sample(2, 30, 20, np.random.default_rng(2))
    assert all(t.n == 30 and t.n_train == 20 for t in tasks)
    assert all(len(np.unique(t.y_train)) == t.K for t in tasks)


def test_prefetcher_order(pool):
    stage = StageConfig(1, 6, 2, 1, SizeSampler("fixed", 16, 16), 1e-3)
    fetch = Prefetcher(pool, stage, 0, 1, 5, depth=1)
    steps = [fetch.get()[0] for _ in range(4)]
    fetch.close()
    assert steps == [1, 2, 3, 4]


# gradient accumulation


def test_accumulation_equivalence(pool):
    model = tiny_model()
    rng = np.random.default_rng(5)
    mbs = [pool.sample(2, 20, 12, rng), pool.sample(3, 20, 12, rng)]
    accumulate_gradients(model, mbs)
    acc = [p.grad.clone() for p in model.parameters()]
    model.zero_grad()
    batch_loss(model, mbs[0] + mbs[1]).backward()
    for a, p in zip(acc, model.parameters()):
        torch.testing.assert_close(a, p.grad, atol=1e-8, rtol=0)


# training


def test_train_stage_logs_every_step(pool):
    model = tiny_model()
    log = TrainLog()
    train_stage(model, tiny_curriculum()[0], pool, seed=0, log_sink=log)
    assert [r["step"] for r in log.records] == [0, 1, 2, 3]
    assert all(set(r) >= {"step", "stage", "lr", "loss", "grad_norm"} for r in log.records)


def test_stage3_freezes_exactly(pool):
    model = tiny_model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train_stage(model, tiny_curriculum()[2], pool, seed=0)
    after = model.state_dict()
    for k, v in before.items():
        if k.split(".")[0] in FROZEN_STAGE3:
            assert torch.equal(v, after[k]), k
    assert any(not torch.equal(v, after[k]) for k, v in before.items() if k.startswith("icl."))
    assert all(p.requires_grad for p in model.parameters())


def test_smoke_loss_decreases(pool):
    model = tiny_model()
    log = TrainLog()
    stage = StageConfig(1, 40, 4, 1, SizeSampler("fixed", 32, 32), 3e-3)
    train_stage(model, stage, pool, seed=1, log_sink=log)
    losses = [r["loss"] for r in log.records]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_divergence_dump(pool, tmp_path):
    model = tiny_model()
    with torch.no_grad():
        model.icl.decoder.fc2.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged):
        train_stage(model, tiny_curriculum()[0], pool, out_dir=tmp_path)
    assert "loss" in json.loads((tmp_path / "divergence.json").read_text())


# checkpoints


def test_checkpoint_roundtrip(tmp_path, rng):
    model = tiny_model()
    save_checkpoint(tmp_path / "c", model)
    loaded = load_checkpoint(tmp_path / "c")
    X = torch.as_tensor(rng.normal(size=(1, 9, 3)))
    y = torch.as_tensor([[0, 1, 0, 1, 1]])
    assert torch.equal(model(X, y), loaded(X, y))
    assert json.loads((tmp_path / "c" / "config.json").read_text())["d"] == 8


def test_corrupt_checkpoint(tmp_path):
    save_checkpoint(tmp_path / "c", tiny_model())
    (tmp_path / "c" / "model.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
    torch.save({"format": "other"}, tmp_path / "c" / "model.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")


def test_pretrain_layout_and_resume(pool, tmp_path):
    full = tiny_model()
    pretrain(full, tiny_curriculum(), pool, tmp_path / "full", seed=7)
    for sub in ("stage1", "stage2", "stage3", "final"):
        assert (tmp_path / "full" / sub / "model.pt").exists()
    full_log = [json.loads(line) for line in (tmp_path / "full" / "train_log.jsonl").read_text().splitlines()]

    part = tiny_model()
    pretrain(part, tiny_curriculum(), pool, tmp_path / "part", seed=7, stop_after=(2, 1))
    assert (tmp_path / "part" / "latest" / "trainer.pt").exists()
    resumed = tiny_model(seed=99)  # weights come from the checkpoint, not this init
    pretrain(resumed, tiny_curriculum(), pool, tmp_path / "part", seed=7)
    part_log = [json.loads(line) for line in (tmp_path / "part" / "train_log.jsonl").read_text().splitlines()]
    assert [(r["stage"], r["step"], r["loss"]) for r in part_log] == [(r["stage"], r["step"], r["loss"]) for r in full_log]
    for a, b in zip(full.state_dict().values(), resumed.state_dict().values()):
        assert torch.equal(a, b)
