"""Score metric, rotation protocol, inference wiring, ablations, and reports."""
from pathlib import Path

import numpy as np
import pytest
import torch

import genbid.evaluation as evaluation
from genbid.auction import ConstantLambdaBidder, EpisodeTotals
from genbid.config import desk_config
from genbid.errors import CheckpointError, ConfigError
from genbid.evaluation import (EvalRecord, PolicyBidder, RolloutHistory, RotationConfig,
                               emit_report, evaluate_candidate, infer_step, make_agent_pool,
                               record_from_totals, rotation_eval, run_ablations,
                               score, score_episode, sign_test_p)
from genbid.numerics import SeededStream
from genbid.pipeline import run_pipeline
from tests.test_pipeline import micro_cfg

torch.set_num_threads(1)


class TestScore:
    def test_unpenalized_when_cpa_met(self):
        # 10 value, CPA = spend/conversions = 8 <= target 8
        assert score_episode(10.0, 16.0, 2, 8.0) == pytest.approx(10.0)

    def test_quadratic_penalty_at_double_cpa(self):
        # CPA = 16, target 8 -> factor (1/2)^2
        assert score_episode(10.0, 32.0, 2, 8.0) == pytest.approx(2.5)

    def test_no_wins_zero(self):
        assert score_episode(0.0, 0.0, 0, 8.0) == 0.0

    def test_spend_without_conversions_fully_penalized(self):
        assert score_episode(5.0, 10.0, 0, 8.0) == 0.0

    def test_zero_spend_unpenalized(self):
        assert score_episode(3.0, 0.0, 0, 8.0) == pytest.approx(3.0)

    def test_score_bounded_by_conv_value(self):
        rng = np.random.Generator(np.random.PCG64(0))
        for _ in range(200):
            cv, sp = rng.uniform(0, 20), rng.uniform(0, 50)
            conv, tgt = int(rng.integers(0, 6)), rng.uniform(1, 12)
            s = score_episode(cv, sp, conv, tgt)
            assert 0.0 <= s <= cv + 1e-12

    def test_monotone_in_value_and_cpa(self):
        base = score_episode(10.0, 32.0, 2, 8.0)
        assert score_episode(12.0, 32.0, 2, 8.0) >= base      # more value, same factor
        assert score_episode(10.0, 40.0, 2, 8.0) <= base      # worse CPA, same value

    def test_record_wrapper(self):
        rec = record_from_totals(
            EpisodeTotals(value_won=12.0, conv_value=10.0, conversions=2, spend=32.0),
            campaign=_campaign(), agent_id="x", seed=3)
        assert rec.score == pytest.approx(2.5)
        assert rec.realized_cpa == pytest.approx(16.0)
        assert score(rec) == pytest.approx(2.5)

    def test_infinite_cpa_convention(self):
        rec = EvalRecord(conv_value=1.0, spend=4.0, conversions=0, target_cpa=8.0, score=0.0)
        assert rec.realized_cpa == np.inf


def _campaign(**kw):
    from genbid.auction import CampaignSpec
    base = dict(budget=20.0, cpa_target=8.0, horizon=8, opportunities_per_step=12)
    base.update(kw)
    return CampaignSpec(**base)


class TestSignTest:
    def test_closed_values(self):
        assert sign_test_p(5, 5) == pytest.approx(1 / 32)
        assert sign_test_p(4, 5) == pytest.approx(6 / 32)
        assert sign_test_p(0, 5) == pytest.approx(1.0)
        assert sign_test_p(0, 0) == 1.0


class TestRotationEval:
    def test_top_k_mean(self, monkeypatch):
        counter = {"i": 0}

        def fake_rollout(env_cfg, campaign, bidder, stream):
            counter["i"] = counter["i"] % 30 + 1
            totals = EpisodeTotals(conv_value=float(counter["i"]), spend=0.0,
                                   conversions=0, value_won=0.0)
            return [], [], [], totals

        monkeypatch.setattr(evaluation, "rollout_episode", fake_rollout)
        cfg = desk_config()
        pool = make_agent_pool(cfg.env, 1, SeededStream(0, "p"))
        summary = rotation_eval(pool, ConstantLambdaBidder(1.0),
                                RotationConfig(1, 30, 5, 1.0), cfg.env, SeededStream(0, "e"))
        assert summary.mean == pytest.approx(28.0)  # mean of {26..30}

    def test_pool_size_validated(self):
        cfg = desk_config()
        pool = make_agent_pool(cfg.env, 3, SeededStream(0, "p"))
        with pytest.raises(ConfigError):
            rotation_eval(pool, ConstantLambdaBidder(1.0), RotationConfig(4, 4, 2, 1.0),
                          cfg.env, SeededStream(0, "e"))

    def test_top_k_versus_inits_validated(self):
        cfg = desk_config()
        pool = make_agent_pool(cfg.env, 2, SeededStream(0, "p"))
        with pytest.raises(ConfigError):
            rotation_eval(pool, ConstantLambdaBidder(1.0), RotationConfig(2, 3, 5, 1.0),
                          cfg.env, SeededStream(0, "e"))

    def test_identical_agents_symmetry(self):
        """With an identical pool, the candidate scores exactly as an incumbent
        evaluated the same way (same seeded episodes)."""
        cfg = desk_config()
        cfg.env.horizon = 8
        cfg.env.budget_min, cfg.env.budget_max = 12.0, 26.0
        rot = RotationConfig(3, 3, 2, 1.0)
        pool = [ConstantLambdaBidder(1.1, 0.1) for _ in range(3)]
        cand = rotation_eval(pool, ConstantLambdaBidder(1.1, 0.1), rot, cfg.env,
                             SeededStream(5, "e"))
        incumbent = rotation_eval(pool, pool[0], rot, cfg.env, SeededStream(5, "e"))
        assert cand.mean == pytest.approx(incumbent.mean)

    def test_deterministic_per_stream(self):
        cfg = desk_config()
        cfg.env.horizon = 8
        rot = RotationConfig(2, 2, 1, 1.0)
        pool = make_agent_pool(cfg.env, 2, SeededStream(1, "p"))
        a = rotation_eval(pool, ConstantLambdaBidder(1.0), rot, cfg.env, SeededStream(2, "e"))
        b = rotation_eval(pool, ConstantLambdaBidder(1.0), rot, cfg.env, SeededStream(2, "e"))
        assert a.rotation_scores == b.rotation_scores


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("evalrun") / "run"
    cfg = micro_cfg(out)
    paths = run_pipeline(cfg)
    return cfg, paths


def _history(traj, upto=3, rtg0=5.0):
    return RolloutHistory(
        states=[traj.states[i] for i in range(upto)],
        actions=[traj.actions[i] for i in range(upto - 1)],
        rtgs=[rtg0 - i for i in range(upto)],
        rewards=[],
    )


class TestInferStep:
    def test_deterministic(self, trained_run):
        cfg, paths = trained_run
        bidder = PolicyBidder.from_paths(paths["policy_final"], paths["lad"])
        from genbid.data import load_jsonl
        traj = load_jsonl(paths["dataset"], gamma=cfg.data.gamma)[0]
        from genbid.auction import CampaignSpec
        campaign = _campaign(budget=traj.campaign.budget, cpa_target=traj.campaign.cpa_target)
        h = _history(traj)
        a1 = infer_step(bidder.planner, bidder.policy, h, "mean", SeededStream(3, "i"),
                        "planner", campaign)
        a2 = infer_step(bidder.planner, bidder.policy, h, "mean", SeededStream(3, "i"),
                        "planner", campaign)
        assert a1 == a2

    def test_zero_foresight_never_calls_planner(self, trained_run):
        cfg, paths = trained_run
        bidder = PolicyBidder.from_paths(paths["policy_final"], paths["lad"])
        from genbid.data import load_jsonl
        traj = load_jsonl(paths["dataset"], gamma=cfg.data.gamma)[0]
        campaign = _campaign()
        h = _history(traj)
        before = bidder.planner.sample_calls
        infer_step(bidder.planner, bidder.policy, h, "mean", SeededStream(3, "i"),
                   "zero", campaign)
        assert bidder.planner.sample_calls == before
        infer_step(bidder.planner, bidder.policy, h, "mean", SeededStream(3, "i"),
                   "planner", campaign)
        assert bidder.planner.sample_calls == before + 1

    def test_identical_histories_for_all_modes(self, trained_run):
        """Foresight is the only varying input across ablation modes."""
        cfg, paths = trained_run
        bidder = PolicyBidder.from_paths(paths["policy_final"], paths["lad"])
        from genbid.data import load_jsonl
        traj = load_jsonl(paths["dataset"], gamma=cfg.data.gamma)[0]
        campaign = _campaign()
        h1, h2 = _history(traj), _history(traj)
        infer_step(bidder.planner, bidder.policy, h1, "mean", SeededStream(3, "i"), "planner", campaign)
        infer_step(bidder.planner, bidder.policy, h2, "mean", SeededStream(3, "i"), "zero", campaign)
        assert all(np.array_equal(a, b) for a, b in zip(h1.states, h2.states))
        assert h1.rtgs == h2.rtgs and h1.actions == h2.actions

    def test_mixed_run_checkpoints_refused(self, trained_run, tmp_path):
        cfg, paths = trained_run
        other = micro_cfg(tmp_path / "other", seed=9)
        other.evolve.kl_beta = 0.33  # different experimental identity
        other_paths = run_pipeline(other)
        with pytest.raises(CheckpointError, match="hash"):
            PolicyBidder.from_paths(paths["policy_final"], other_paths["lad"])


class TestPolicyBidderEpisode:
    def test_full_episode_runs_and_scores(self, trained_run):
        cfg, paths = trained_run
        cfg.eval.n_agents, cfg.eval.n_inits, cfg.eval.top_k = 2, 2, 1
        bidder = PolicyBidder.from_paths(paths["policy_final"], paths["lad"],
                                         gamma=cfg.data.gamma)
        summary = evaluate_candidate(bidder, cfg, seed=0)
        assert len(summary.rotation_scores) == 2
        assert all(np.isfinite(s) for s in summary.rotation_scores)


class TestAblationTable:
    def test_missing_variants_skipped_with_notice(self, trained_run, caplog):
        cfg, paths = trained_run
        cfg.eval.n_agents, cfg.eval.n_inits, cfg.eval.top_k = 2, 2, 1
        with caplog.at_level("WARNING"):
            rows = run_ablations(cfg, paths["run_dir"], seeds=(0,))
        variants = {r["variant"] for r in rows}
        assert variants == {"full", "wo_grpo"}  # ablation arms were never built
        assert any("skipping" in rec.message for rec in caplog.records)

    def test_wo_grpo_uses_pretrained_exactly(self, trained_run):
        cfg, paths = trained_run
        cfg.eval.n_agents, cfg.eval.n_inits, cfg.eval.top_k = 2, 2, 1
        rows = run_ablations(cfg, paths["run_dir"], seeds=(0,))
        row = next(r for r in rows if r["variant"] == "wo_grpo")
        assert Path(row["policy_path"]).read_bytes() == Path(paths["policy_pre"]).read_bytes()
        assert row["policy_stage"] == "policy_pre"

    def test_csv_written_and_deterministic(self, trained_run):
        cfg, paths = trained_run
        cfg.eval.n_agents, cfg.eval.n_inits, cfg.eval.top_k = 2, 2, 1
        run_ablations(cfg, paths["run_dir"], seeds=(0,))
        first = (Path(paths["run_dir"]) / "ablation" / "ablation.csv").read_bytes()
        run_ablations(cfg, paths["run_dir"], seeds=(0,))
        second = (Path(paths["run_dir"]) / "ablation" / "ablation.csv").read_bytes()
        assert first == second


class TestReport:
    def test_report_standalone_and_no_data_sections(self, tmp_path):
        out = tmp_path / "empty_run"
        out.mkdir()
        path = emit_report(out)
        html = path.read_text()
        assert "no data" in html
        assert "http://" not in html and "https://" not in html

    def test_report_with_artifacts(self, trained_run):
        cfg, paths = trained_run
        path = emit_report(paths["run_dir"])
        html = path.read_text()
        assert "data:image/png;base64," in html
        assert "http://" not in html and "https://" not in html
