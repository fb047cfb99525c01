import dataclasses
import hashlib
import json

import numpy as np
import pytest
import torch

from lesion_decomp.errors import ArchMismatchError, CorruptCheckpointError, DivergedError
from lesion_decomp.losses import LossConfig, critic_loss
from lesion_decomp.model import ArchConfig, compose_roi
from lesion_decomp.phantom import PreparedSet
from lesion_decomp.trainer import (
    TrainConfig,
    TrainData,
    critic_step,
    generator_step,
    init_state,
    load_checkpoint,
    sample_batches,
    save_checkpoint,
    train,
    train_step,
)

ARCH = ArchConfig(base_channels=8, depth=2, critic_channels=4, image_size=16)


def _hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def _hashes(bundle):
    return {
        "gen": _hash(bundle.generator_parameters()),
        "critic": _hash(bundle.critic_parameters()),
    }


def _prepared(labels, size=16, seed=0) -> PreparedSet:
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(n, 1, size, size)).astype(np.float32)
    rois = np.ones((n, 1, size, size), dtype=bool)
    return PreparedSet(images=images, rois=rois, labels=labels,
                       raw=np.zeros((n, size, size), np.float32))


@pytest.fixture
def data(tiny_sets):
    return TrainData(tiny_sets.train)


def _state(**kw):
    return init_state(ARCH, TrainConfig(**kw))


# --- sample_batches ---------------------------------------------------------


def test_sample_batches_statistics():
    ds = _prepared([0] * 75 + [1] * 25)
    rng = np.random.default_rng(0)
    labels = ds.labels
    fracs, real_ok = [], True
    for _ in range(10_000):
        mixed, real = sample_batches(ds, 8, rng)
        fracs.append((labels[mixed] == 0).mean())
        real_ok &= bool((labels[real] == 0).all())
    assert abs(np.mean(fracs) - 0.75) <= 0.02
    assert real_ok


def test_sample_batches_deterministic():
    ds = _prepared([0, 0, 1, 1, 0])
    a = [sample_batches(ds, 3, np.random.default_rng(5)) for _ in range(2)]
    assert all(np.array_equal(x, y) for x, y in zip(a[0], a[1]))


def test_sample_batches_all_normal_and_small_pool():
    ds = _prepared([0, 0, 0])
    mixed, real = sample_batches(ds, 8, np.random.default_rng(0))
    assert len(mixed) == len(real) == 8
    assert set(mixed) <= {0, 1, 2} and set(real) <= {0, 1, 2}


def test_sample_batches_without_replacement_when_possible():
    ds = _prepared([0] * 20)
    mixed, real = sample_batches(ds, 8, np.random.default_rng(0))
    assert len(set(mixed)) == 8 and len(set(real)) == 8


def test_sample_batches_requires_normals():
    with pytest.raises(ValueError):
        sample_batches(_prepared([1, 1]), 2, np.random.default_rng(0))


# --- critic / generator steps -------------------------------------------------


def test_critic_step_isolation_and_no_leakage(data):
    state = _state()
    before = _hashes(state.bundle)
    mixed, real = sample_batches(data, 8, state.rng)
    value = critic_step(state, data, mixed, real)
    after = _hashes(state.bundle)
    assert np.isfinite(value)
    assert after["gen"] == before["gen"]
    assert after["critic"] != before["critic"]
    assert all(p.grad is None for p in state.bundle.generator_parameters())


def test_generator_step_isolation_and_no_leakage(data):
    state = _state()
    before = _hashes(state.bundle)
    mixed, _ = sample_batches(data, 8, state.rng)
    values = generator_step(state, data, mixed)
    after = _hashes(state.bundle)
    assert after["critic"] == before["critic"]
    assert after["gen"] != before["gen"]
    assert all(p.grad is None for p in state.bundle.critic_parameters())
    assert all(p.requires_grad for p in state.bundle.critic_parameters())
    assert set(values) == {"L_r", "L_n", "L_a", "L_gen"}


def test_zero_learning_rate(data):
    state = _state(learning_rate=0.0)
    before = _hashes(state.bundle)
    mixed, real = sample_batches(data, 8, state.rng)
    value = critic_step(state, data, mixed, real)
    generator_step(state, data, mixed)
    assert np.isfinite(value)
    assert _hashes(state.bundle) == before


def test_zero_objective_leaves_generator_unchanged(data):
    state = _state(loss=LossConfig(alpha1=0.0, alpha2=0.0, alpha3=0.0))
    before = _hashes(state.bundle)
    mixed, _ = sample_batches(data, 8, state.rng)
    generator_step(state, data, mixed)
    assert _hashes(state.bundle) == before


def test_batch_without_normals(data):
    state = _state()
    lesioned = np.flatnonzero(data.labels.numpy() == 1)[:4]
    values = generator_step(state, data, lesioned)
    assert values["L_n"] == 0.0
    assert np.isfinite(values["L_gen"])


def test_critic_step_descends(data):
    state = _state()
    cfg = state.config
    wins = 0
    for _ in range(50):
        mixed, real = sample_batches(data, cfg.batch_size, state.rng)
        gp_state = state.gp_generator.get_state()
        pre = critic_step(state, data, mixed, real)
        x_mix, roi_mix, _ = data.batch(mixed)
        x_real, _, _ = data.batch(real)
        with torch.no_grad():
            fake = compose_roi(state.bundle.normal_estimate(x_mix), x_mix, roi_mix)
        gen = torch.Generator()
        gen.set_state(gp_state)
        post = float(critic_loss(state.bundle, x_real, fake, cfg.loss.lambda_gp, generator=gen).detach())
        wins += post <= pre
    assert wins >= 45


def test_alternation_ratio(data):
    state = _state(n_critic=3)
    for _ in range(4):
        train_step(state, data)
    assert state.step == 4
    assert state.critic_updates == 12


def test_no_discriminator_skips_critic(data):
    state = _state(train_critic=False, loss=LossConfig(alpha1=0.0))
    before = _hashes(state.bundle)["critic"]
    rec = train_step(state, data)
    assert rec["L_c"] is None and rec["L_a"] == 0.0
    assert _hashes(state.bundle)["critic"] == before


def test_diverged():
    ds = _prepared([0, 0, 1, 1])
    ds.images[:] = np.nan
    state = _state()
    with pytest.raises(DivergedError, match="diverged"):
        train_step(state, TrainData(ds))


# --- train loop -----------------------------------------------------------------


def _metrics(path):
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    for r in rows:
        r.pop("wall_time")
    return rows


def test_zero_steps_equals_initialization(tiny_sets, tmp_path):
    cfg = TrainConfig(total_steps=0, seed=4)
    state = train(tiny_sets.train, cfg, ARCH, out_dir=tmp_path)
    fresh = init_state(ARCH, cfg)
    assert _hashes(state.bundle) == _hashes(fresh.bundle)
    loaded = load_checkpoint(tmp_path / "checkpoint.zip")
    assert _hashes(loaded.bundle) == _hashes(fresh.bundle)
    assert (tmp_path / "metrics.jsonl").read_text() == ""


def test_first_ten_steps_reproducible(tiny_sets, tmp_path):
    cfg = TrainConfig(total_steps=10, seed=1, checkpoint_interval=5)
    train(tiny_sets.train, cfg, ARCH, out_dir=tmp_path / "a")
    train(tiny_sets.train, cfg, ARCH, out_dir=tmp_path / "b")
    a, b = _metrics(tmp_path / "a" / "metrics.jsonl"), _metrics(tmp_path / "b" / "metrics.jsonl")
    assert len(a) == 10 and a == b
    assert [r["step"] for r in a] == list(range(1, 11))
    assert set(a[0]) == {"step", "L_r", "L_n", "L_c", "L_a", "L_gen"}
    for name in ("checkpoint_0.zip", "checkpoint_5.zip", "checkpoint_10.zip", "checkpoint.zip"):
        assert (tmp_path / "a" / name).is_file()


def test_checkpoint_round_trip(data, tmp_path):
    state = _state(seed=2)
    for _ in range(2):
        train_step(state, data)
    path = save_checkpoint(state, tmp_path / "ck.zip")
    loaded = load_checkpoint(path, ARCH)
    probe = torch.from_numpy(np.random.default_rng(0).normal(size=(1, 1, 16, 16)).astype(np.float32))
    with torch.no_grad():
        a, b = state.bundle.decompose(probe), loaded.bundle.decompose(probe)
        assert torch.equal(a.normal_est, b.normal_est) and torch.equal(a.lesion_est, b.lesion_est)
        assert torch.equal(state.bundle.score(probe), loaded.bundle.score(probe))
    for opt_a, opt_b in ((state.opt_gen, loaded.opt_gen), (state.opt_critic, loaded.opt_critic)):
        sa, sb = opt_a.state_dict()["state"], opt_b.state_dict()["state"]
        assert sa.keys() == sb.keys()
        for k in sa:
            assert torch.equal(sa[k]["exp_avg"], sb[k]["exp_avg"])
            assert torch.equal(sa[k]["exp_avg_sq"], sb[k]["exp_avg_sq"])
    assert loaded.step == 2 and loaded.critic_updates == 10 and loaded.history == state.history


def test_arch_mismatch(data, tmp_path):
    path = save_checkpoint(_state(), tmp_path / "ck.zip")
    with pytest.raises(ArchMismatchError, match="arch-mismatch"):
        load_checkpoint(path, dataclasses.replace(ARCH, base_channels=16))


def test_corrupt_and_missing_checkpoint(tmp_path):
    bad = tmp_path / "bad.zip"
    bad.write_bytes(b"not a zip")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(bad)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.zip")


def test_resume_equivalence(tiny_sets, tmp_path):
    full_cfg = TrainConfig(total_steps=8, seed=6)
    full = train(tiny_sets.train, full_cfg, ARCH)

    first = train(tiny_sets.train, dataclasses.replace(full_cfg, total_steps=3), ARCH, out_dir=tmp_path)
    resumed = load_checkpoint(tmp_path / "checkpoint.zip", ARCH)
    assert resumed.step == first.step == 3
    resumed = train(tiny_sets.train, full_cfg, state=resumed)
    assert _hashes(resumed.bundle) == _hashes(full.bundle)
    assert resumed.history == full.history
