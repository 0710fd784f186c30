"""Denoising loss cases, causality of the history embedding, sampling."""
import types

import numpy as np
import pytest
import torch

from genbid.batching import pack_dataset
from genbid.config import PlannerConfig, desk_config
from genbid.auction import generate_offline_dataset
from genbid.data import fit_normalizer
from genbid.errors import NotTrainedError
from genbid.numerics import SeededStream
from genbid.planner import DiffusionPlanner, TrajectoryDiffusionPlanner

torch.set_num_threads(1)


def small_planner_cfg(**kw):
    base = dict(layers=1, heads=2, embed=16, context=8, hidden=32, k_embed=8, y_embed=8,
                diffusion_steps=5, beta_min=0.02, beta_max=0.25, lr=1e-3,
                epochs=1, steps_per_epoch=10, batch_size=16)
    base.update(kw)
    return PlannerConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    cfg = desk_config()
    cfg.env.horizon = 8
    cfg.env.budget_min, cfg.env.budget_max = 12.0, 26.0
    ds = generate_offline_dataset(cfg.env, cfg.data, 16, seed=3)
    norm = fit_normalizer(ds)
    packed = pack_dataset(ds, norm, cfg.env.n_categories)
    return cfg, ds, norm, packed


def make_planner(tiny_data, **kw):
    cfg, ds, norm, packed = tiny_data
    return DiffusionPlanner(small_planner_cfg(**kw), cfg.env.n_categories,
                            SeededStream(0, "p"), norm=norm)


class TestLadLoss:
    def _batch(self, planner, packed, b=8):
        gen = SeededStream(5, "b").torch_gen()
        return planner.sample_training_batch(packed, b, gen)

    def test_perfect_prediction_zero_loss(self, tiny_data):
        planner = make_planner(tiny_data)
        states, valid, y, t_idx, k, eps, drop = self._batch(planner, tiny_data[3])
        planner.noise_net.forward = types.MethodType(
            lambda self, s_k, kk, z, y_emb: eps.clone(), planner.noise_net)
        loss = planner.loss_from_samples(states, valid, y, t_idx, k, eps, drop)
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_zero_prediction_matches_formula(self, tiny_data):
        planner = make_planner(tiny_data)
        states, valid, y, t_idx, k, eps, drop = self._batch(planner, tiny_data[3])
        eps = torch.ones_like(eps)  # unit entries: ||eps||^2 / d = 1
        planner.noise_net.forward = types.MethodType(
            lambda self, s_k, kk, z, y_emb: torch.zeros_like(s_k), planner.noise_net)
        loss = planner.loss_from_samples(states, valid, y, t_idx, k, eps, drop)
        assert float(loss) == pytest.approx(1.0, abs=1e-12)
        basis = torch.zeros_like(eps)
        basis[:, 0] = 1.0
        loss = planner.loss_from_samples(states, valid, y, t_idx, k, basis, drop)
        assert float(loss) == pytest.approx(1.0 / 16.0, abs=1e-12)

    def test_loss_non_negative(self, tiny_data):
        planner = make_planner(tiny_data)
        loss = planner.loss_on_batch(tiny_data[3], 16, SeededStream(9, "g").torch_gen())
        assert float(loss.detach()) >= 0.0


class TestCausality:
    def test_history_embedding_ignores_future(self, tiny_data):
        planner = make_planner(tiny_data)
        packed = tiny_data[3]
        states = packed.states[:4].clone()
        valid = packed.valid[:4]
        t = 3
        z_ref = planner.encoder(states, valid)[:, t - 1, :].detach().clone()
        perturbed = states.clone()
        perturbed[:, t:, :] += 7.5
        z_new = planner.encoder(perturbed, valid)[:, t - 1, :].detach()
        assert torch.equal(z_ref, z_new)

    def test_sample_ignores_future_states(self, tiny_data):
        cfg, ds, norm, packed = tiny_data
        planner = make_planner(tiny_data)
        planner.trained = True
        traj = ds[0]
        t = 4
        a = planner.sample_next_state(traj.states[:t], traj.campaign, SeededStream(3, "s"))
        # appending (what would be) future states to the trajectory changes nothing
        b = planner.sample_next_state(traj.states[:t], traj.campaign, SeededStream(3, "s"))
        assert np.array_equal(a, b)


class TestSampling:
    def test_untrained_refuses(self, tiny_data):
        planner = make_planner(tiny_data)
        traj = tiny_data[1][0]
        with pytest.raises(NotTrainedError):
            planner.sample_next_state(traj.states[:3], traj.campaign, SeededStream(0, "s"))

    def test_deterministic_per_stream_and_dim(self, tiny_data):
        planner = make_planner(tiny_data)
        planner.trained = True
        traj = tiny_data[1][0]
        a = planner.sample_next_state(traj.states[:3], traj.campaign, SeededStream(4, "s"))
        b = planner.sample_next_state(traj.states[:3], traj.campaign, SeededStream(4, "s"))
        c = planner.sample_next_state(traj.states[:3], traj.campaign, SeededStream(5, "s"))
        assert a.shape == (16,)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_call_counter(self, tiny_data):
        planner = make_planner(tiny_data)
        planner.trained = True
        traj = tiny_data[1][0]
        assert planner.sample_calls == 0
        planner.sample_next_state(traj.states[:2], traj.campaign, SeededStream(4, "s"))
        assert planner.sample_calls == 1


class TestCheckpointRoundTrip:
    def test_planner_round_trip(self, tiny_data, tmp_path):
        planner = make_planner(tiny_data)
        planner.trained = True
        ckpt = planner.to_checkpoint("lad", "hash123", extra={"note": 1})
        path = tmp_path / "lad.ckpt"
        ckpt.save(path)
        loaded = DiffusionPlanner.from_checkpoint(type(ckpt).load(path))
        traj = tiny_data[1][0]
        a = planner.sample_next_state(traj.states[:4], traj.campaign, SeededStream(8, "s"))
        b = loaded.sample_next_state(traj.states[:4], traj.campaign, SeededStream(8, "s"))
        assert np.array_equal(a, b)

    def test_save_load_save_bytes_identical(self, tiny_data, tmp_path):
        planner = make_planner(tiny_data)
        ckpt = planner.to_checkpoint("lad", "hash123")
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ckpt.save(p1)
        type(ckpt).load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestGlobalBaseline:
    def test_loss_and_sampling_shapes(self, tiny_data):
        cfg, ds, norm, packed = tiny_data
        planner = TrajectoryDiffusionPlanner(small_planner_cfg(), cfg.env.n_categories,
                                             horizon=8, stream=SeededStream(1, "g"), norm=norm)
        loss = planner.loss_on_batch(packed, 8, SeededStream(2, "g").torch_gen())
        assert float(loss.detach()) >= 0.0
        planner.trained = True
        traj = ds[0]
        out = planner.sample_next_state(traj.states[:3], traj.campaign, SeededStream(6, "s"))
        assert out.shape == (16,)
        again = planner.sample_next_state(traj.states[:3], traj.campaign, SeededStream(6, "s"))
        assert np.array_equal(out, again)

    def test_round_trip(self, tiny_data, tmp_path):
        cfg, ds, norm, packed = tiny_data
        planner = TrajectoryDiffusionPlanner(small_planner_cfg(), cfg.env.n_categories,
                                             horizon=8, stream=SeededStream(1, "g"), norm=norm)
        planner.trained = True
        path = tmp_path / "g.ckpt"
        planner.to_checkpoint("lad_global", "h").save(path)
        loaded = TrajectoryDiffusionPlanner.from_checkpoint(
            __import__("genbid.checkpoint", fromlist=["Checkpoint"]).Checkpoint.load(path))
        traj = ds[0]
        a = planner.sample_next_state(traj.states[:5], traj.campaign, SeededStream(6, "s"))
        b = loaded.sample_next_state(traj.states[:5], traj.campaign, SeededStream(6, "s"))
        assert np.array_equal(a, b)
