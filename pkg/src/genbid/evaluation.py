"""Inference wiring, the score metric, rotation-based tournament evaluation,
ablation variants, and report emission.
"""
from __future__ import annotations

import base64
import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .auction import (AuctionEnv, Bidder, BudgetPacingBidder, CampaignSpec,
                      ClearingPriceBidder, ConstantLambdaBidder, EpisodeTotals,
                      rollout_episode, sample_campaign)
from .checkpoint import Checkpoint
from .config import EnvConfig, EvalConfig, RunConfig
from .errors import CheckpointError, ConfigError, StageGateError
from .numerics import SeededStream
from .pipeline import (ABLATION_STAGES, STAGE_GLOBAL, STAGE_LAD, STAGE_POLICY_FINAL,
                       STAGE_POLICY_PRE, latest_checkpoint, load_planner)
from .policy import SequencePolicy, build_context

logger = logging.getLogger(__name__)

SCORE_BETA = 2.0


# --- score metric -------------------------------------------------------------


@dataclass
class EvalRecord:
    """Per-episode totals and the resulting score."""

    conv_value: float          # sum of values over converted wins
    spend: float
    conversions: int
    target_cpa: float
    score: float
    agent_id: str = ""
    seed: int = 0

    @property
    def realized_cpa(self) -> float:
        if self.conversions > 0:
            return self.spend / self.conversions
        return math.inf if self.spend > 0 else 0.0


def score_episode(conv_value: float, spend: float, conversions: int,
                  target_cpa: float, beta: float = SCORE_BETA) -> float:
    """Conversion value, quadratically penalized for CPA overrun.

    Zero conversions with positive spend count as infinite CPA (factor 0);
    zero spend leaves the value unpenalized.
    """
    if spend <= 0:
        factor = 1.0
    elif conversions <= 0:
        factor = 0.0
    else:
        cpa = spend / conversions
        factor = min((target_cpa / cpa) ** beta, 1.0)
    return conv_value * factor


def score(records) -> float:
    """Spec surface: the score of one completed episode's records."""
    if isinstance(records, EvalRecord):
        records = [records]
    total = 0.0
    for rec in records:
        total += score_episode(rec.conv_value, rec.spend, rec.conversions, rec.target_cpa)
    return total


def record_from_totals(totals: EpisodeTotals, campaign: CampaignSpec,
                       agent_id: str, seed: int) -> EvalRecord:
    return EvalRecord(
        conv_value=totals.conv_value,
        spend=totals.spend,
        conversions=totals.conversions,
        target_cpa=campaign.cpa_target,
        score=score_episode(totals.conv_value, totals.spend, totals.conversions,
                            campaign.cpa_target),
        agent_id=agent_id,
        seed=seed,
    )


# --- model-backed bidder ------------------------------------------------------


@dataclass
class RolloutHistory:
    """Running episode record consumed by ``infer_step``."""

    states: list
    actions: list
    rtgs: list
    rewards: list

    @property
    def t(self) -> int:
        return len(self.states) - 1


def infer_step(planner, policy: SequencePolicy, history: RolloutHistory, mode: str,
               stream: SeededStream, foresight_mode: str = "planner",
               campaign: CampaignSpec | None = None) -> float:
    """Plan one step ahead, then act on the enriched context."""
    t = history.t
    if foresight_mode == "zero":
        s_hat = None
    else:
        if planner is None:
            raise StageGateError(f"foresight mode {foresight_mode!r} needs a planner")
        s_hat = planner.sample_next_state(np.asarray(history.states), campaign,
                                          stream.child(f"plan{t}"))
    context = build_context(
        rtgs=np.asarray(history.rtgs),
        states=np.asarray(history.states),
        actions=np.asarray(history.actions),
        timesteps=np.arange(len(history.states)),
        s_hat=s_hat,
        context_len=policy.cfg.context,
    )
    return policy.act(context, mode, stream.child(f"act{t}"))


class PolicyBidder(Bidder):
    """Wraps trained checkpoints behind the scripted-bidder interface."""

    def __init__(self, policy: SequencePolicy, planner=None, foresight_mode: str = "planner",
                 mode: str = "mean", rtg_target: float = 0.0, gamma: float = 0.99,
                 rtg_budget_scaling: bool = True, agent_id: str = "policy"):
        if foresight_mode != "zero" and planner is None:
            raise ConfigError(f"foresight mode {foresight_mode!r} needs a planner")
        self.policy = policy
        self.planner = planner
        self.foresight_mode = foresight_mode
        self.mode = mode
        self.rtg_target = rtg_target
        self.gamma = gamma
        self.rtg_budget_scaling = rtg_budget_scaling
        self.agent_id = agent_id
        self.aggressiveness = 1.0

    @classmethod
    def from_paths(cls, policy_path, planner_path=None, foresight_mode="planner",
                   mode="mean", gamma=0.99, rtg_scale=1.0, agent_id="policy"):
        policy_ckpt = Checkpoint.load(policy_path)
        policy = SequencePolicy.from_checkpoint(policy_ckpt)
        planner = None
        if planner_path is not None:
            planner_ckpt = Checkpoint.load(planner_path)
            if planner_ckpt.config_hash != policy_ckpt.config_hash:
                raise CheckpointError(
                    f"planner config hash {planner_ckpt.config_hash} does not match "
                    f"policy config hash {policy_ckpt.config_hash}; refusing to mix runs")
            planner = load_planner(planner_path)
        target = float(policy_ckpt.extra.get("rtg_quantile_value", 0.0)) * rtg_scale
        return cls(policy, planner, foresight_mode, mode, rtg_target=target,
                   gamma=gamma, agent_id=agent_id)

    def reset(self, campaign: CampaignSpec, stream: SeededStream, env: AuctionEnv | None = None):
        self.campaign = campaign
        self._stream = stream
        target = self.rtg_target
        if self.rtg_budget_scaling and self.rtg_target > 0 and self.policy.norm is not None:
            # achievable return scales roughly with the deliverable budget
            ref_budget = max(self.policy.norm.budget_mean, 1e-9)
            target = self.rtg_target * campaign.budget / ref_budget
        self._history = RolloutHistory(states=[], actions=[], rtgs=[], rewards=[])
        self._rtg = target

    def act(self, state, t: int) -> float:
        self._history.states.append(np.asarray(state, dtype=np.float64))
        self._history.rtgs.append(self._rtg)
        action = infer_step(self.planner, self.policy, self._history, self.mode,
                            self._stream, self.foresight_mode, self.campaign)
        self._history.actions.append(action)
        return action

    def observe_step(self, reward: float) -> None:
        self._history.rewards.append(reward)
        self._rtg = (self._rtg - reward) / self.gamma


# --- rotation evaluation ---------------------------------------------------------


@dataclass
class RotationConfig:
    n_agents: int = 48
    n_inits: int = 30
    top_k: int = 5
    budget_multiplier: float = 1.0

    @classmethod
    def from_eval(cls, ev: EvalConfig) -> "RotationConfig":
        return cls(ev.n_agents, ev.n_inits, ev.top_k, ev.budget_multiplier)


@dataclass
class RotationSummary:
    mean: float
    std: float
    rotation_scores: list
    records: list

    def __str__(self):
        return f"rotation score {self.mean:.3f} +- {self.std:.3f} over {len(self.rotation_scores)} rotations"


def make_agent_pool(env_cfg: EnvConfig, n_agents: int, stream: SeededStream) -> list[Bidder]:
    """Deterministic pool of scripted incumbents with varied aggressiveness."""
    pool: list[Bidder] = []
    rng = stream.child("pool").numpy()
    kinds = ["constant", "pacer", "oracle"]
    for i in range(n_agents):
        kind = kinds[i % len(kinds)]
        if kind == "constant":
            pool.append(ConstantLambdaBidder(base=float(rng.uniform(0.6, 2.0)), noise_sigma=0.15))
        elif kind == "pacer":
            pool.append(BudgetPacingBidder(init=float(rng.uniform(0.8, 1.6)),
                                           gain=float(rng.uniform(0.5, 1.5))))
        else:
            pool.append(ClearingPriceBidder(env_cfg, noise_sigma=0.05))
    return pool


def rotation_eval(agents: list[Bidder], candidate: Bidder, rotcfg: RotationConfig,
                  env_cfg: EnvConfig, stream: SeededStream) -> RotationSummary:
    """Candidate replaces each incumbent in turn; per-rotation score is the mean
    of the top-k episode scores over the seeded initializations.

    The competitive landscape of a slot is shaped by the incumbents that were
    not replaced: their mean aggressiveness (relative to the whole pool) scales
    the competitor price level.
    """
    if len(agents) != rotcfg.n_agents:
        raise ConfigError(f"agent pool size {len(agents)} != n_agents {rotcfg.n_agents}")
    if rotcfg.top_k > rotcfg.n_inits:
        raise ConfigError(f"top_k {rotcfg.top_k} > n_inits {rotcfg.n_inits}")
    pool_mean = float(np.mean([b.aggressiveness for b in agents])) if agents else 1.0
    rotation_scores, all_records = [], []
    for r in range(rotcfg.n_agents):
        others = [b for i, b in enumerate(agents) if i != r]
        if others and pool_mean > 0:
            scale = float(np.mean([b.aggressiveness for b in others])) / pool_mean
        else:
            scale = 1.0
        env_r = dataclasses.replace(
            env_cfg,
            competitor=dataclasses.replace(env_cfg.competitor,
                                           base_scale=env_cfg.competitor.base_scale * scale),
        )
        episode_scores = []
        for i in range(rotcfg.n_inits):
            ep_stream = stream.child(f"rot{r}/init{i}")
            campaign = sample_campaign(env_r, ep_stream.child("campaign"),
                                       budget_multiplier=rotcfg.budget_multiplier)
            _, _, _, totals = rollout_episode(env_r, campaign, candidate, ep_stream)
            rec = record_from_totals(totals, campaign, candidate.agent_id, seed=i)
            episode_scores.append(rec.score)
            all_records.append(rec)
        top = sorted(episode_scores, reverse=True)[:rotcfg.top_k]
        rotation_scores.append(float(np.mean(top)))
    arr = np.asarray(rotation_scores)
    return RotationSummary(float(arr.mean()), float(arr.std()), rotation_scores, all_records)


def sign_test_p(wins: int, n: int) -> float:
    """One-sided sign test: P(Binomial(n, 1/2) >= wins)."""
    if n == 0:
        return 1.0
    return sum(math.comb(n, i) for i in range(wins, n + 1)) / 2.0 ** n


# --- ablation table ----------------------------------------------------------------


VARIANTS = ("full", "wo_lad", "wo_s", "wo_grpo")


def _variant_paths(run_dir: Path) -> dict[str, dict]:
    return {
        "full": {"policy": latest_checkpoint(run_dir / STAGE_POLICY_FINAL),
                 "planner": latest_checkpoint(run_dir / STAGE_LAD), "foresight": "planner"},
        "wo_lad": {"policy": latest_checkpoint(run_dir / ABLATION_STAGES["wo_lad"]["final"]),
                   "planner": latest_checkpoint(run_dir / STAGE_GLOBAL), "foresight": "global"},
        "wo_s": {"policy": latest_checkpoint(run_dir / ABLATION_STAGES["wo_s"]["final"]),
                 "planner": None, "foresight": "zero"},
        "wo_grpo": {"policy": latest_checkpoint(run_dir / STAGE_POLICY_PRE),
                    "planner": latest_checkpoint(run_dir / STAGE_LAD), "foresight": "planner"},
    }


def evaluate_candidate(candidate: Bidder, cfg: RunConfig, seed: int) -> RotationSummary:
    rotcfg = RotationConfig.from_eval(cfg.eval)
    stream = SeededStream(seed, "eval")
    pool = make_agent_pool(cfg.env, rotcfg.n_agents, stream.child("agents"))
    return rotation_eval(pool, candidate, rotcfg, cfg.env, stream.child("episodes"))


def run_ablations(cfg: RunConfig, run_dir: str | Path | None = None,
                  seeds=(0, 1, 2, 3, 4)) -> list[dict]:
    """Evaluate the four variants on identical seed lists; emit a table.

    Missing variant checkpoints are skipped with a notice.  Each surviving row
    records the mean/std of per-seed rotation means plus a one-sided sign test
    against the full variant.
    """
    run_dir = Path(run_dir if run_dir is not None else cfg.out)
    paths = _variant_paths(run_dir)
    per_variant: dict[str, list[float]] = {}
    rows = []
    for variant in VARIANTS:
        entry = paths[variant]
        if entry["policy"] is None:
            logger.warning("ablation: missing checkpoint for variant %r; skipping", variant)
            continue
        candidate = PolicyBidder.from_paths(
            entry["policy"], entry["planner"], foresight_mode=entry["foresight"],
            mode=cfg.eval.mode, gamma=cfg.data.gamma, rtg_scale=cfg.eval.rtg_scale,
            agent_id=variant)
        means = []
        for seed in seeds:
            summary = evaluate_candidate(candidate, cfg, seed)
            means.append(summary.mean)
        per_variant[variant] = means
        ckpt = Checkpoint.load(entry["policy"])
        rows.append({
            "variant": variant,
            "score_mean": float(np.mean(means)),
            "score_std": float(np.std(means)),
            "n_seeds": len(seeds),
            "policy_path": str(entry["policy"]),
            "policy_stage": ckpt.stage,
        })
    if "full" in per_variant:
        full = np.asarray(per_variant["full"])
        for row in rows:
            if row["variant"] == "full":
                row["wins_vs_full"], row["sign_test_p"] = "", ""
                continue
            other = np.asarray(per_variant[row["variant"]])
            wins = int(np.sum(full > other))
            ties = int(np.sum(full == other))
            row["wins_vs_full"] = wins
            row["sign_test_p"] = sign_test_p(wins, len(seeds) - ties)
    out_dir = run_dir / "ablation"
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "ablation.csv"
    if rows:
        with open(table_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        seeds_path = out_dir / "ablation_by_seed.csv"
        with open(seeds_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "seed", "rotation_mean"])
            for variant, means in per_variant.items():
                for seed, m in zip(seeds, means):
                    writer.writerow([variant, seed, repr(m)])
    return rows


def evaluate_to_csv(cfg: RunConfig, run_dir: str | Path, stage: str = STAGE_POLICY_FINAL,
                    seeds=(0,)) -> Path:
    """Rotation-evaluate one trained stage; write per-seed summaries."""
    run_dir = Path(run_dir)
    policy_path = latest_checkpoint(run_dir / stage)
    if policy_path is None:
        raise StageGateError(f"no checkpoint under {run_dir / stage}")
    planner_path = latest_checkpoint(run_dir / STAGE_LAD)
    foresight = "zero" if planner_path is None else "planner"
    candidate = PolicyBidder.from_paths(policy_path, planner_path, foresight_mode=foresight,
                                        mode=cfg.eval.mode, gamma=cfg.data.gamma,
                                        rtg_scale=cfg.eval.rtg_scale, agent_id=stage)
    out_dir = run_dir / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / f"scores_{stage.replace('/', '_')}.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "rotation_mean", "rotation_std", "n_rotations"])
        for seed in seeds:
            summary = evaluate_candidate(candidate, cfg, seed)
            writer.writerow([seed, repr(summary.mean), repr(summary.std),
                             len(summary.rotation_scores)])
    return out


# --- report ------------------------------------------------------------------------


def _png_b64(fig) -> str:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110)
    return base64.b64encode(buf.getvalue()).decode()


def _section(title: str, body: str) -> str:
    return f"<h2>{title}</h2>\n{body}\n"


def _csv_table(path: Path) -> str:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return "<p>no data</p>"
    head = "".join(f"<th>{c}</th>" for c in rows[0])
    body = "\n".join("<tr>" + "".join(f"<td>{c}</td>" for c in row) + "</tr>" for row in rows[1:])
    return f"<table border=1 cellpadding=4><tr>{head}</tr>\n{body}</table>"


def emit_report(run_dir: str | Path) -> Path:
    """Single self-contained HTML (inline PNGs, no external fetches) plus the
    summary CSVs it is rendered from."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    report_dir = run_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    sections = []

    metrics_path = run_dir / "metrics.csv"
    if metrics_path.exists():
        with open(metrics_path) as fh:
            rows = list(csv.DictReader(fh))
    else:
        rows = []
    if rows:
        by_curve: dict[tuple, list] = {}
        for row in rows:
            by_curve.setdefault((row["stage"], row["metric"]), []).append(
                (int(row["epoch"]), float(row["value"])))
        summary_path = report_dir / "summary_losses.csv"
        with open(summary_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "metric", "first", "last", "n_epochs"])
            for (stage, metric), pts in sorted(by_curve.items()):
                pts.sort()
                writer.writerow([stage, metric, repr(pts[0][1]), repr(pts[-1][1]), len(pts)])
        fig, ax = plt.subplots(figsize=(7, 4))
        for (stage, metric), pts in sorted(by_curve.items()):
            if "loss" not in metric:
                continue
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=f"{stage}:{metric}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7)
        sections.append(_section("Training curves",
                                 f'<img src="data:image/png;base64,{_png_b64(fig)}"/>'))
        plt.close(fig)
    else:
        sections.append(_section("Training curves", "<p>no data</p>"))

    eval_dir = run_dir / "eval"
    eval_csvs = sorted(eval_dir.glob("*.csv")) if eval_dir.is_dir() else []
    if eval_csvs:
        body = "\n".join(f"<h3>{p.name}</h3>\n{_csv_table(p)}" for p in eval_csvs)
        sections.append(_section("Rotation scores", body))
    else:
        sections.append(_section("Rotation scores", "<p>no data</p>"))

    ablation_path = run_dir / "ablation" / "ablation.csv"
    if ablation_path.exists():
        sections.append(_section("Ablation table", _csv_table(ablation_path)))
    else:
        sections.append(_section("Ablation table", "<p>no data</p>"))

    gsweep_path = run_dir / "gsweep" / "gsweep.csv"
    if gsweep_path.exists():
        with open(gsweep_path) as fh:
            rows = list(csv.DictReader(fh))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        xs = [int(r["group_size"]) for r in rows]
        ys = [float(r["score_mean"]) for r in rows]
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel("group size")
        ax.set_ylabel("rotation score")
        sections.append(_section(
            "Group-size sweep",
            _csv_table(gsweep_path) + f'<br/><img src="data:image/png;base64,{_png_b64(fig)}"/>'))
        plt.close(fig)
    else:
        sections.append(_section("Group-size sweep", "<p>no data</p>"))

    html = ("<!DOCTYPE html><html><head><meta charset='utf-8'>"
            "<title>genbid run report</title></head><body>\n"
            f"<h1>Run report: {run_dir.name}</h1>\n" + "\n".join(sections) + "</body></html>\n")
    out = run_dir / "report.html"
    out.write_text(html)
    return out


def gsweep_to_csv(cfg: RunConfig, run_dir: str | Path, groups=(2, 4, 8),
                  seeds=(0, 1)) -> Path:
    """Evaluate the per-group evolved policies; one curve row per group size."""
    run_dir = Path(run_dir)
    planner_path = latest_checkpoint(run_dir / STAGE_LAD)
    out_dir = run_dir / "gsweep"
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / "gsweep.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group_size", "score_mean", "score_std"])
        for g in groups:
            path = latest_checkpoint(run_dir / f"gsweep/policy_final_g{g}")
            if path is None:
                logger.warning("gsweep: missing policy for G=%d; skipping", g)
                continue
            candidate = PolicyBidder.from_paths(path, planner_path, foresight_mode="planner",
                                                mode=cfg.eval.mode, gamma=cfg.data.gamma,
                                                rtg_scale=cfg.eval.rtg_scale, agent_id=f"g{g}")
            means = [evaluate_candidate(candidate, cfg, seed).mean for seed in seeds]
            writer.writerow([g, repr(float(np.mean(means))), repr(float(np.std(means)))])
    return out
