import json
import math

import numpy as np
import pytest
import torch

from tabdiff import numerics as nx
from tabdiff.annotations import StructureConstraints, StructureMask, random_structure, render_mask
from tabdiff.autoencoder import LatentCache, cache_latents
from tabdiff.diffusion import (TrainConfig, check_cache, ddim_step, estimate_z0, latest_checkpoint, load_checkpoint,
                               noise_draws, sample, sample_batch, save_checkpoint, timestep_subsequence, train_loop,
                               training_loss)
from tabdiff.dit import DiT, DiTConfig
from tabdiff.errors import CacheFormatError, ConfigError, MissingArtifactError, ScheduleError, ShapeError
from tabdiff.runlog import RunLog, read_metrics
from tabdiff.schedule import build_schedule, q_sample

from conftest import TINY_T

SMALL = StructureConstraints(height=16, width=16, rows=(1, 1), cols=(1, 1), margin=2, min_gap=2)


@pytest.fixture(scope="module")
def schedule():
    return build_schedule(1000)


def _masks(n, seed=0):
    return [render_mask(random_structure(nx.derive_seed(seed, i), SMALL), 16, 16) for i in range(n)]


def _oracle_eps(z, z0, t, schedule):
    ab = schedule.alpha_bar(t)
    return (z - math.sqrt(ab) * z0) / math.sqrt(1 - ab)

# -----------------------------------------------------------------------------
# Objective

def test_fresh_model_loss_is_about_one(tiny_config, schedule):
    config = DiTConfig(**{**tiny_config.to_dict(), "latent_size": 8, "max_T": 1000})
    model = DiT(config, seed=0)
    z0 = nx.random_normal((400, 4, 8, 8), 1)  # 102400 elements
    m = nx.random_normal((400, 4, 8, 8), 2)
    with torch.no_grad():
        loss = float(training_loss(z0, m, 5, model, schedule))
    assert abs(loss - 1) < 0.05


def test_true_noise_gives_zero_loss(schedule):
    z0 = nx.random_normal((8, 4, 2, 2), 0)
    ids = list(range(8))
    oracle = lambda z_t, m, ts, model: noise_draws(z0.shape[1:], 11, ids, schedule.T)[1]
    assert float(training_loss(z0, None, 11, None, schedule, predictor=oracle)) == 0.0


def test_noise_draws_are_keyed_by_sample_id():
    ts, eps = noise_draws((4, 2, 2), 3, [5, 9], 1000)
    ts2, eps2 = noise_draws((4, 2, 2), 3, [9, 5], 1000)
    assert ts.tolist() == ts2[::-1].tolist()
    assert torch.equal(eps[0], eps2[1])
    assert np.all((ts >= 1) & (ts <= 1000))


def test_loss_does_not_depend_on_batch_order(tiny_config, randomize):
    schedule = build_schedule(TINY_T)
    model = randomize(DiT(tiny_config), seed=2)
    z0, m = nx.random_normal((6, 4, 2, 2), 0), nx.random_normal((6, 4, 2, 2), 1)
    perm = [4, 0, 5, 2, 1, 3]
    with torch.no_grad():
        a = training_loss(z0, m, 7, model, schedule)
        b = training_loss(z0[perm], m[perm], 7, model, schedule, ids=perm)
    assert torch.allclose(a, b, rtol=1e-6)


def test_training_loss_shape_errors(schedule):
    with pytest.raises(ShapeError):
        training_loss(torch.zeros(2, 4, 2, 2), torch.zeros(2, 4, 4, 4), 0, None, schedule)
    with pytest.raises(ShapeError):
        training_loss(torch.zeros(2, 4, 2, 2), None, 0, None, schedule, ids=[1])

# -----------------------------------------------------------------------------
# Reverse process

def test_estimate_z0_inverts_q_sample(schedule):
    with nx.float64_mode():
        z0 = nx.random_normal((1000, 4, 2, 2), 0)
        eps = nx.random_normal((1000, 4, 2, 2), 1)
        ts = nx.random_integers(1, 1000, 1000, seed=2)
        z_t = q_sample(z0, ts, eps, schedule)
        assert (estimate_z0(z_t, eps, ts, schedule) - z0).abs().max() < 1e-5


def test_estimate_z0_with_zero_noise_rescales(schedule):
    z_t = torch.tensor([[1.0, -2.0]], dtype=torch.float64)
    out = estimate_z0(z_t, torch.zeros_like(z_t), 500, schedule)
    assert torch.allclose(out, z_t / math.sqrt(schedule.alpha_bar(500)))
    with pytest.raises(ShapeError):
        estimate_z0(z_t, torch.zeros(2, 1), 500, schedule)


def test_ddim_last_step_returns_the_estimate(schedule):
    z, e = nx.random_normal((2, 4), 0), nx.random_normal((2, 4), 1)
    assert torch.equal(ddim_step(z, e, 7, 0, schedule), estimate_z0(z, e, 7, schedule))


@pytest.mark.parametrize("t,t_prev", [(5, 5), (5, 9), (5, -1)])
def test_ddim_step_order(schedule, t, t_prev):
    with pytest.raises(ScheduleError):
        ddim_step(torch.zeros(3), torch.zeros(3), t, t_prev, schedule)


def test_stochastic_step_needs_noise(schedule):
    with pytest.raises(ShapeError):
        ddim_step(torch.zeros(3), torch.zeros(3), 10, 5, schedule, eta=1.0)
    out = ddim_step(torch.zeros(3), torch.zeros(3), 10, 5, schedule, eta=1.0, noise=torch.ones(3))
    assert torch.all(out > 0)


@pytest.mark.parametrize("steps", [1, 10, 750])
def test_ddim_with_oracle_noise_recovers_z0(schedule, steps):
    with nx.float64_mode():
        z0 = nx.random_normal((4, 3, 3), 0)
        z = nx.random_normal((4, 3, 3), 1)
        ts = timestep_subsequence(1000, steps)
        for k, t in enumerate(ts):
            t_prev = ts[k + 1] if k + 1 < len(ts) else 0
            z = ddim_step(z, _oracle_eps(z, z0, t, schedule), t, t_prev, schedule)
    assert torch.allclose(z, z0, atol=1e-6)


def test_timestep_subsequence():
    assert timestep_subsequence(1000, 10) == [1000, 889, 778, 667, 556, 445, 334, 223, 112, 1]
    assert timestep_subsequence(1000, 1) == [1000]
    assert timestep_subsequence(20, 20) == list(range(20, 0, -1))
    assert timestep_subsequence(20, 5) == [20, 15, 11, 6, 1]
    seq = timestep_subsequence(1000, 750)
    assert len(seq) == 750 and seq[0] == 1000 and seq[-1] == 1
    assert all(a > b for a, b in zip(seq, seq[1:]))
    for bad in (0, 1001):
        with pytest.raises(ScheduleError):
            timestep_subsequence(1000, bad)

# -----------------------------------------------------------------------------
# Sampling

def test_sampling_is_seeded(tiny_checkpoint, randomize):
    ckpt = tiny_checkpoint(conditional=True)
    randomize(ckpt.dit, seed=1, scale=0.1)
    masks = _masks(2)
    a, traj = sample_batch(masks, ckpt, [1, 2], steps=5)
    b, _ = sample_batch(masks, ckpt, [1, 2], steps=5)
    assert a.shape == (2, 3, 16, 16) and a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)
    assert not np.array_equal(a[0], a[1])
    assert len(traj) == 5 and traj[0].shape == (2, 4, 2, 2)
    single, single_traj = sample(masks[1], ckpt, steps=5, seed=2)
    assert np.allclose(single, a[1], atol=1e-5)
    assert len(single_traj) == 5 and single_traj[-1].shape == (4, 2, 2)


def test_stochastic_sampling_is_seeded(tiny_checkpoint):
    ckpt = tiny_checkpoint(conditional=False)
    a, _ = sample_batch(None, ckpt, [3], steps=4, eta=1.0)
    b, _ = sample_batch(None, ckpt, [3], steps=4, eta=1.0)
    assert np.array_equal(a, b)


def test_sampling_errors(tiny_checkpoint):
    cond, uncond = tiny_checkpoint(True), tiny_checkpoint(False)
    with pytest.raises(ConfigError):
        sample(None, cond, steps=2)
    with pytest.raises(ConfigError):
        sample(_masks(1)[0], uncond, steps=2)
    with pytest.raises(ShapeError):
        sample_batch(_masks(1), cond, [1, 2], steps=2)
    with pytest.raises(ShapeError, match="mask size"):
        sample(StructureMask(32, 32, np.zeros((32, 32))), cond, steps=2)
    with pytest.raises(ScheduleError):
        sample(None, uncond, steps=TINY_T + 1)

# -----------------------------------------------------------------------------
# Checkpoints

def test_checkpoint_round_trip(tmp_path, tiny_checkpoint, randomize):
    ckpt = tiny_checkpoint(conditional=True, seed=9)
    randomize(ckpt.dit, seed=4)
    params = list(ckpt.dit.parameters())
    ckpt.adam = nx.AdamState.for_params(params, lr=1e-3)
    nx.adam_step(params, [torch.ones_like(p) for p in params], ckpt.adam)
    ckpt.iteration = 1
    path = save_checkpoint(ckpt, tmp_path / "ckpt")
    manifest = json.loads((path / "manifest.json").read_text())
    assert manifest["rng"] == {"seed": 9, "next_iteration": 1}
    assert manifest["schedule"]["T"] == TINY_T
    save_checkpoint(ckpt, tmp_path / "ckpt")  # replacing an existing checkpoint
    back = load_checkpoint(path)
    assert back.iteration == 1 and back.seed == 9 and back.conditional
    assert back.adam.step == 1 and back.schedule == ckpt.schedule
    assert back.scale_factor == ckpt.scale_factor and back.image_size == 16
    for p, q in zip(back.dit.parameters(), params):
        assert torch.equal(p, q)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt"]


def test_load_checkpoint_errors(tmp_path, tiny_checkpoint):
    with pytest.raises(MissingArtifactError, match="train-dit"):
        load_checkpoint(tmp_path / "nope")
    path = save_checkpoint(tiny_checkpoint(), tmp_path / "ckpt")
    (path / "manifest.json").write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(CacheFormatError):
        load_checkpoint(path)

# -----------------------------------------------------------------------------
# Training

@pytest.fixture
def small_cache(tmp_path, toy_tables, tiny_vae):
    def make(with_masks=True):
        images, _, masks = toy_tables(6, seed=3, constraints=SMALL)
        path = tmp_path / f"lat{int(with_masks)}.tdlc"
        return LatentCache(cache_latents(images, masks if with_masks else None, tiny_vae, path))
    return make


def _train_config(**kw):
    return TrainConfig(**{**dict(iterations=4, batch_size=4, lr=1e-3, T=TINY_T, seed=3, checkpoint_every=2,
                                 samples=6), **kw})


def test_train_loop_writes_checkpoints_and_metrics(tmp_path, small_cache, tiny_vae, tiny_config):
    log = RunLog(tmp_path, console=False)
    out = tmp_path / "dit"
    final = train_loop(_train_config(), small_cache(), tiny_vae, out, build_schedule(TINY_T), tiny_config, log=log)
    assert final.iteration == 4
    assert sorted(p.name for p in out.glob("ckpt-*")) == ["ckpt-0000002", "ckpt-0000004"]
    assert latest_checkpoint(out).name == "ckpt-0000004"
    rows = read_metrics(out / "metrics.csv")
    assert [r[0] for r in rows] == [1, 2, 3, 4] and all(math.isfinite(r[1]) for r in rows)
    text = log.logfile.read_text()
    assert "step:1/4 train_loss:" in text and "step_avg:" in text
    assert latest_checkpoint(tmp_path / "empty") is None


def test_resumed_training_matches_uninterrupted(tmp_path, small_cache, tiny_vae, tiny_config):
    schedule = build_schedule(TINY_T)
    cache = small_cache()
    whole = train_loop(_train_config(), cache, tiny_vae, tmp_path / "a", schedule, tiny_config)
    train_loop(_train_config(iterations=2), cache, tiny_vae, tmp_path / "b", schedule, tiny_config)
    resumed = train_loop(_train_config(), cache, tiny_vae, tmp_path / "b", schedule, tiny_config,
                         resume=load_checkpoint(tmp_path / "b" / "ckpt-0000002"))
    losses = lambda d: [(it, loss) for it, loss, _ in read_metrics(d / "metrics.csv")]
    assert losses(tmp_path / "a") == losses(tmp_path / "b")
    for p, q in zip(whole.dit.parameters(), resumed.dit.parameters()):
        assert torch.equal(p, q)


def test_train_loop_rejects_mismatched_inputs(tmp_path, small_cache, tiny_vae, tiny_config):
    schedule = build_schedule(TINY_T)
    with pytest.raises(ConfigError, match="conditional"):
        train_loop(_train_config(conditional=False), small_cache(), tiny_vae, tmp_path, schedule, tiny_config)
    with pytest.raises(ConfigError, match="T disagrees"):
        train_loop(_train_config(T=30), small_cache(), tiny_vae, tmp_path, schedule, tiny_config)


def test_check_cache(small_cache, tiny_config):
    uncond = DiTConfig(**{**tiny_config.to_dict(), "in_channels": 4})
    bigger = DiTConfig(**{**tiny_config.to_dict(), "latent_size": 4})
    check_cache(small_cache(), tiny_config)
    with pytest.raises(ConfigError, match="mask latents"):
        check_cache(small_cache(with_masks=False), tiny_config)
    with pytest.raises(ConfigError, match="unconditional"):
        check_cache(small_cache(), uncond)
    with pytest.raises(ConfigError, match="do not match"):
        check_cache(small_cache(), bigger)


@pytest.mark.parametrize("kw", [dict(preset="nope"), dict(iterations=0), dict(lr=0.0), dict(batch_size=0),
                                dict(checkpoint_every=-1)])
def test_train_config_errors(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)
