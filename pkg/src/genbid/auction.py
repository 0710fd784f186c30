"""Synthetic constrained auction environment.

Second-price auctions with ties losing, a linear-programming-style bid rule,
48-step episodes (configurable), and scripted behavior policies for offline
dataset generation.  Competitor prices follow a per-episode latent phase and
intensity on top of a sinusoidal within-episode curve, so price levels are
inferable from history but not from the clock alone.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .config import DataConfig, EnvConfig
from .data import CampaignAttrs, Dataset, STATE_DIM, Trajectory, Transition, compute_rtg
from .errors import ConfigError, InvalidInputError
from .numerics import SeededStream

logger = logging.getLogger(__name__)


# --- domain types -----------------------------------------------------------


@dataclass(frozen=True)
class ImpressionOpportunity:
    value: float                      # expected impression value, >= 0
    conv_prob: np.ndarray             # (J,) conversion probability per constraint
    cost_weight: np.ndarray           # (J,) cost attribution weight per constraint
    competitor_top_bid: float
    conv_draw: np.ndarray | None = None  # pre-drawn uniforms deciding realized conversions

    def validate(self):
        if not math.isfinite(self.value) or self.value < 0:
            raise InvalidInputError(f"opportunity value must be finite and >= 0, got {self.value}")
        p = np.asarray(self.conv_prob, dtype=float)
        if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise InvalidInputError("conv_prob entries must be finite and in [0, 1]")
        if not math.isfinite(self.competitor_top_bid) or self.competitor_top_bid < 0:
            raise InvalidInputError("competitor_top_bid must be finite and >= 0")


@dataclass(frozen=True)
class CampaignSpec:
    budget: float
    cpa_target: float
    n_constraints: int = 1
    horizon: int = 48
    category_id: int = 0
    opportunities_per_step: int = 25

    def validate(self):
        if not (math.isfinite(self.budget) and self.budget > 0):
            raise InvalidInputError(f"budget must be > 0, got {self.budget}")
        if not (math.isfinite(self.cpa_target) and self.cpa_target > 0):
            raise InvalidInputError(f"cpa_target must be > 0, got {self.cpa_target}")
        if self.horizon < 1 or self.opportunities_per_step < 1 or self.n_constraints < 0:
            raise InvalidInputError("horizon/opportunities must be >= 1, n_constraints >= 0")

    def attrs(self) -> CampaignAttrs:
        return CampaignAttrs(self.budget, self.cpa_target, self.category_id)


@dataclass(frozen=True)
class BidParams:
    lambda0: float
    lambdas: np.ndarray               # (J,)

    def validate(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if not math.isfinite(self.lambda0) or self.lambda0 < 0:
            raise InvalidInputError(f"lambda0 must be finite and >= 0, got {self.lambda0}")
        if np.any(~np.isfinite(lam)) or np.any(lam < 0):
            raise InvalidInputError("lambdas must be finite and >= 0")


@dataclass(frozen=True)
class AuctionOutcome:
    won: int
    cost: float
    realized_value: float
    realized_conversion: np.ndarray   # (J,) indicators


# --- core operations --------------------------------------------------------


def compute_bid(params: BidParams, opp: ImpressionOpportunity, cpa_target: float = 1.0) -> float:
    """lambda0 * v + k * sum_j lambda_j * p_j, with k the campaign CPA target."""
    params.validate()
    opp.validate()
    if not (math.isfinite(cpa_target) and cpa_target >= 0):
        raise InvalidInputError(f"cpa_target must be finite and >= 0, got {cpa_target}")
    lam = np.asarray(params.lambdas, dtype=float)
    p = np.asarray(opp.conv_prob, dtype=float)
    if lam.shape != p.shape:
        raise InvalidInputError(f"lambdas shape {lam.shape} != conv_prob shape {p.shape}")
    return float(params.lambda0 * opp.value + cpa_target * float(lam @ p))


def run_auction(bid: float, opp: ImpressionOpportunity, remaining_budget: float) -> AuctionOutcome:
    """Second price, ties lose; wins only when the price is affordable."""
    opp.validate()
    j = np.asarray(opp.conv_prob).shape[0]
    comp = opp.competitor_top_bid
    degenerate = not math.isfinite(bid) or bid < 0
    won = (not degenerate) and bid > comp and comp <= remaining_budget
    if not won:
        return AuctionOutcome(0, 0.0, 0.0, np.zeros(j, dtype=int))
    draw = opp.conv_draw if opp.conv_draw is not None else np.full(j, 0.5)
    conv = (np.asarray(draw, dtype=float) < np.asarray(opp.conv_prob, dtype=float)).astype(int)
    return AuctionOutcome(1, float(comp), float(opp.value), conv)


# --- environment ------------------------------------------------------------


@dataclass
class StepOutcome:
    """Aggregates of one environment step, used for features and eval records."""

    n_opps: int = 0
    wins: int = 0
    cost: float = 0.0
    value: float = 0.0
    conversions: int = 0
    conv_value: float = 0.0
    mean_competitor_bid: float = 0.0


@dataclass
class EpisodeTotals:
    value_won: float = 0.0            # sum of realized values over wins (= sum of rewards)
    conv_value: float = 0.0           # sum of values over converted wins (score numerator)
    conversions: int = 0
    spend: float = 0.0
    steps: int = 0


class AuctionEnv:
    """One campaign's bidding episode against stochastic competition."""

    total_env_steps = 0               # class-level counter, audited by the evolution stage

    def __init__(self, cfg: EnvConfig, campaign: CampaignSpec, stream: SeededStream):
        campaign.validate()
        self.cfg = cfg
        self.campaign = campaign
        self.stream = stream
        self.clamp_warnings = 0
        self.reset()

    def reset(self) -> np.ndarray:
        cfg = self.cfg
        rng = self.stream.child("latents").numpy()
        comp = cfg.competitor
        self.phase = rng.uniform(0.0, 2.0 * math.pi) if comp.random_phase else 0.0
        self.intensity = float(np.exp(rng.normal(0.0, comp.intensity_sigma)
                                      - 0.5 * comp.intensity_sigma ** 2)) if comp.intensity_sigma > 0 else 1.0
        self._opp_rng = self.stream.child("opps").numpy()
        self.t = 0
        self.remaining = self.campaign.budget
        self.spent = 0.0
        self.cum_value = 0.0
        self.cum_conversions = 0
        self.ema_win_rate = 0.0
        self.ema_cost_per_win = 0.0
        self.last = StepOutcome()
        self.last_action = 0.0
        self.done = False
        self.totals = EpisodeTotals()
        return self.state()

    # price multiplier of the within-episode cycle at step t
    def daypart(self, t: int) -> float:
        comp = self.cfg.competitor
        frac = t / max(1, self.campaign.horizon)
        return 1.0 + comp.daypart_amplitude * math.sin(2.0 * math.pi * comp.daypart_cycles * frac + self.phase)

    def gen_opportunities(self, t: int) -> dict:
        """Draw one step's opportunities as parallel arrays."""
        cfg, rng = self.cfg, self._opp_rng
        n = max(1, int(rng.poisson(self.campaign.opportunities_per_step)))
        values = rng.uniform(0.0, 1.0, size=n)
        conv_probs = np.tile((cfg.conv_prob_max * values)[:, None], (1, max(1, cfg.n_constraints)))
        comp = cfg.competitor
        noise = np.exp(rng.normal(0.0, comp.sigma, size=n) - 0.5 * comp.sigma ** 2)
        comps = comp.base_scale * self.daypart(t) * self.intensity * noise
        draws = rng.uniform(0.0, 1.0, size=conv_probs.shape)
        return {"values": values, "conv_probs": conv_probs, "comps": comps, "draws": draws,
                "cost_weights": np.ones_like(conv_probs)}

    def opportunity_list(self, opps: dict) -> list[ImpressionOpportunity]:
        return [
            ImpressionOpportunity(
                value=float(opps["values"][i]),
                conv_prob=opps["conv_probs"][i].copy(),
                cost_weight=opps["cost_weights"][i].copy(),
                competitor_top_bid=float(opps["comps"][i]),
                conv_draw=opps["draws"][i].copy(),
            )
            for i in range(len(opps["values"]))
        ]

    def clamp_action(self, action: float) -> float:
        if not math.isfinite(action):
            raise InvalidInputError(f"action must be finite, got {action}")
        if action < 0.0 or action > self.cfg.action_max:
            self.clamp_warnings += 1
            logger.debug("action %.4f clamped to [0, %.4f]", action, self.cfg.action_max)
            return min(max(action, 0.0), self.cfg.action_max)
        return action

    def bid_params(self, action: float) -> BidParams:
        j = max(1, self.cfg.n_constraints) if self.cfg.n_constraints > 0 else 0
        return BidParams(lambda0=action, lambdas=np.full(j, self.cfg.lambda_ratio * action))

    def step(self, action: float, opportunities=None) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise InvalidInputError("episode is finished; call reset()")
        AuctionEnv.total_env_steps += 1
        action = self.clamp_action(action)

        if opportunities is None:
            opps = self.gen_opportunities(self.t)
            out = self._run_step_arrays(action, opps)
        elif isinstance(opportunities, dict):
            out = self._run_step_arrays(action, opportunities)
        else:
            out = self._run_step_list(action, list(opportunities))

        self.spent += out.cost
        self.remaining = self.campaign.budget - self.spent
        self.cum_value += out.value
        self.cum_conversions += out.conversions
        alpha = self.cfg.ema_alpha
        win_rate = out.wins / out.n_opps if out.n_opps else 0.0
        self.ema_win_rate = alpha * win_rate + (1 - alpha) * self.ema_win_rate
        if out.wins:
            self.ema_cost_per_win = alpha * (out.cost / out.wins) + (1 - alpha) * self.ema_cost_per_win
        self.last = out
        self.last_action = action
        self.t += 1
        self.done = self.t >= self.campaign.horizon or self.remaining <= self.cfg.min_budget

        self.totals.value_won += out.value
        self.totals.conv_value += out.conv_value
        self.totals.conversions += out.conversions
        self.totals.spend += out.cost
        self.totals.steps += 1
        return self.state(), out.value, self.done

    def _run_step_arrays(self, action: float, opps: dict) -> StepOutcome:
        params = self.bid_params(action)
        values, comps = opps["values"], opps["comps"]
        lam_dot_p = opps["conv_probs"] @ np.asarray(params.lambdas) if params.lambdas.size else 0.0
        bids = params.lambda0 * values + self.campaign.cpa_target * lam_dot_p
        candidate = bids > comps
        costs = np.where(candidate, comps, 0.0)
        total_cost = float(np.sum(costs))
        if total_cost <= self.remaining:
            won = candidate
        else:
            # budget boundary: replay sequentially so unaffordable wins are rejected
            won = np.zeros_like(candidate)
            rem = self.remaining
            for i in range(len(bids)):
                if candidate[i] and comps[i] <= rem:
                    won[i] = True
                    rem -= comps[i]
        conv = (opps["draws"][:, 0] < opps["conv_probs"][:, 0]) & won if opps["conv_probs"].size else np.zeros(0, bool)
        return StepOutcome(
            n_opps=len(values),
            wins=int(won.sum()),
            cost=float(comps[won].sum()),
            value=float(values[won].sum()),
            conversions=int(conv.sum()),
            conv_value=float(values[conv].sum()) if conv.size else 0.0,
            mean_competitor_bid=float(comps.mean()) if len(comps) else 0.0,
        )

    def _run_step_list(self, action: float, opportunities: list[ImpressionOpportunity]) -> StepOutcome:
        params = self.bid_params(action)
        out = StepOutcome(n_opps=len(opportunities))
        rem = self.remaining
        comp_sum = 0.0
        for opp in opportunities:
            comp_sum += opp.competitor_top_bid
            bid = compute_bid(params, opp, self.campaign.cpa_target)
            res = run_auction(bid, opp, rem)
            if res.won:
                rem -= res.cost
                out.wins += 1
                out.cost += res.cost
                out.value += res.realized_value
                converted = bool(res.realized_conversion.size and res.realized_conversion[0])
                out.conversions += int(converted)
                out.conv_value += res.realized_value if converted else 0.0
        out.mean_competitor_bid = comp_sum / len(opportunities) if opportunities else 0.0
        return out

    def state(self) -> np.ndarray:
        """The 16 observation features exposed to policies."""
        c, t, horizon = self.campaign, self.t, self.campaign.horizon
        time_frac = t / horizon
        spent_frac = self.spent / c.budget
        pacing = spent_frac / time_frac if t > 0 else 0.0
        conversions = self.cum_conversions
        cpa_ratio = (self.spent / conversions) / c.cpa_target if conversions > 0 else 0.0
        feats = np.array([
            time_frac,
            self.remaining / c.budget,
            pacing,
            self.last_action,
            self.last.wins / self.last.n_opps if self.last.n_opps else 0.0,
            self.last.cost,
            self.last.value,
            spent_frac,
            self.cum_value,
            float(conversions),
            cpa_ratio,
            self.last.mean_competitor_bid,
            self.last.n_opps / self.cfg.opportunities_per_step,
            self.ema_win_rate,
            self.ema_cost_per_win,
            1.0,
        ], dtype=np.float64)
        assert feats.shape == (STATE_DIM,)
        return feats


def sample_campaign(cfg: EnvConfig, stream: SeededStream, budget_multiplier: float = 1.0) -> CampaignSpec:
    rng = stream.numpy()
    return CampaignSpec(
        budget=float(rng.uniform(cfg.budget_min, cfg.budget_max)) * budget_multiplier,
        cpa_target=float(rng.uniform(cfg.cpa_min, cfg.cpa_max)),
        n_constraints=cfg.n_constraints,
        horizon=cfg.horizon,
        category_id=int(rng.integers(0, cfg.n_categories)),
        opportunities_per_step=cfg.opportunities_per_step,
    )


# --- scripted behavior policies ----------------------------------------------


class Bidder:
    """Minimal agent interface shared by scripted and model-backed bidders."""

    agent_id = "bidder"
    aggressiveness = 1.0

    def reset(self, campaign: CampaignSpec, stream: SeededStream, env: AuctionEnv | None = None):
        raise NotImplementedError

    def act(self, state: np.ndarray, t: int) -> float:
        raise NotImplementedError

    def observe_step(self, reward: float) -> None:
        pass


class ConstantLambdaBidder(Bidder):
    """Fixed multiplier with per-step multiplicative noise."""

    agent_id = "constant"

    def __init__(self, base: float, noise_sigma: float = 0.15):
        self.base = base
        self.noise_sigma = noise_sigma
        self.aggressiveness = base

    def reset(self, campaign, stream, env=None):
        self._rng = stream.numpy()

    def act(self, state, t):
        noise = math.exp(self._rng.normal(0.0, self.noise_sigma)) if self.noise_sigma > 0 else 1.0
        return self.base * noise


class BudgetPacingBidder(Bidder):
    """Proportional feedback controller tracking uniform budget delivery."""

    agent_id = "pacer"

    def __init__(self, init: float = 1.0, gain: float = 1.0):
        self.init = init
        self.gain = gain
        self.aggressiveness = init

    def reset(self, campaign, stream, env=None):
        self.level = self.init
        self.horizon = campaign.horizon

    def act(self, state, t):
        spent_frac = state[7]
        target = t / self.horizon
        adjust = 1.0 + self.gain * (target - spent_frac)
        self.level *= min(max(adjust, 0.7), 1.4)
        return self.level


class ClearingPriceBidder(Bidder):
    """Scripted expert: each step it solves for the multiplier that is expected
    to clear the remaining budget over the remaining steps.

    It reads the episode's latent price curve from the env handle (information
    a learned policy must instead infer from history), so its actions are a
    function of the latents plus the observable remaining budget.
    """

    agent_id = "oracle"

    def __init__(self, cfg: EnvConfig, spend_target: float = 0.98, noise_sigma: float = 0.05):
        self.cfg = cfg
        self.spend_target = spend_target
        self.noise_sigma = noise_sigma
        self.aggressiveness = 1.0
        self._v_grid = (np.arange(24) + 0.5) / 24.0

    def reset(self, campaign, stream, env=None):
        self.campaign = campaign
        self._rng = stream.numpy()
        if env is None:
            raise InvalidInputError("clearing-price bidder needs the env handle")
        comp = self.cfg.competitor
        # per-step median price levels for this episode's latents
        self._levels = np.array([
            comp.base_scale * env.daypart(s) * env.intensity for s in range(campaign.horizon)
        ])
        self._kappa = 1.0 + campaign.cpa_target * self.cfg.lambda_ratio * self.cfg.conv_prob_max \
            if self.cfg.n_constraints > 0 else 1.0
        self._sigma = comp.sigma
        self._n_bar = campaign.opportunities_per_step

    def _expected_spend(self, action: float, t: int, remaining_steps_levels: np.ndarray) -> float:
        """E[sum of second prices won per step] for bid = action * kappa * v."""
        if action <= 0:
            return 0.0
        a = remaining_steps_levels[:, None]          # (S, 1) price scales
        bids = action * self._kappa * self._v_grid[None, :]  # (1, V)
        sigma = max(self._sigma, 1e-9)
        # E[c * 1(c < b)] for c ~ mean-one lognormal scaled by a
        z = (np.log(np.maximum(bids, 1e-300) / a) - 0.5 * sigma ** 2) / sigma
        phi = _norm_cdf(z)
        per_opp = (a * phi).mean(axis=1)
        return float(self._n_bar * per_opp.sum())

    def act(self, state, t):
        remaining = state[1] * self.campaign.budget
        future = self._levels[t:]
        target = self.spend_target * remaining
        if target <= 0 or len(future) == 0:
            return 0.0
        lo, hi = 0.0, self.cfg.action_max
        if self._expected_spend(hi, t, future) <= target:
            level = hi
        else:
            for _ in range(30):
                mid = 0.5 * (lo + hi)
                if self._expected_spend(mid, t, future) < target:
                    lo = mid
                else:
                    hi = mid
            level = 0.5 * (lo + hi)
        noise = math.exp(self._rng.normal(0.0, self.noise_sigma)) if self.noise_sigma > 0 else 1.0
        return level * noise


def _norm_cdf(z: np.ndarray) -> np.ndarray:
    import torch

    return 0.5 * (1.0 + torch.erf(torch.from_numpy(np.asarray(z) / math.sqrt(2.0))).numpy())


def rollout_episode(cfg: EnvConfig, campaign: CampaignSpec, bidder: Bidder,
                    stream: SeededStream) -> tuple[list, list, list, EpisodeTotals]:
    """Play one episode; returns (states, actions, rewards, totals).

    ``states[i]`` is the observation the bidder saw before ``actions[i]``.
    """
    env = AuctionEnv(cfg, campaign, stream.child("env"))
    bidder.reset(campaign, stream.child("bidder"), env=env)
    states, actions, rewards = [], [], []
    state = env.state()
    done = False
    while not done:
        action = env.clamp_action(bidder.act(state, env.t))
        next_state, reward, done = env.step(action)
        bidder.observe_step(reward)
        states.append(state)
        actions.append(action)
        rewards.append(reward)
        state = next_state
    return states, actions, rewards, env.totals


def _behavior_pool(data_cfg: DataConfig):
    weights = {
        "constant": data_cfg.behavior_constant,
        "pacer": data_cfg.behavior_pacer,
        "oracle": data_cfg.behavior_oracle,
    }
    weights = {k: w for k, w in weights.items() if w > 0}
    if not weights:
        raise ConfigError("behavior mix is empty: all weights are zero")
    return weights


def make_behavior_bidder(kind: str, stream: SeededStream, env_cfg: EnvConfig) -> Bidder:
    rng = stream.numpy()
    if kind == "constant":
        return ConstantLambdaBidder(base=float(rng.uniform(0.5, 2.2)), noise_sigma=0.15)
    if kind == "pacer":
        return BudgetPacingBidder(init=float(rng.uniform(0.8, 1.6)), gain=float(rng.uniform(0.5, 1.5)))
    if kind == "oracle":
        return ClearingPriceBidder(env_cfg, noise_sigma=0.05)
    raise ConfigError(f"unknown behavior kind: {kind}")


def generate_offline_dataset(env_cfg: EnvConfig, data_cfg: DataConfig, n_episodes: int,
                             seed: int | SeededStream) -> Dataset:
    """Roll scripted behaviors over sampled campaigns; deterministic per seed."""
    if n_episodes < 1:
        raise InvalidInputError(f"n_episodes must be >= 1, got {n_episodes}")
    weights = _behavior_pool(data_cfg)
    kinds = sorted(weights)
    probs = np.array([weights[k] for k in kinds], dtype=float)
    probs /= probs.sum()
    root = seed if isinstance(seed, SeededStream) else SeededStream(seed, "dataset")

    trajectories = []
    for ep in range(n_episodes):
        ep_stream = root.child(f"ep{ep}")
        campaign = sample_campaign(env_cfg, ep_stream.child("campaign"))
        kind = kinds[int(ep_stream.child("behavior").numpy().choice(len(kinds), p=probs))]
        bidder = make_behavior_bidder(kind, ep_stream.child("params"), env_cfg)
        states, actions, rewards, _ = rollout_episode(env_cfg, campaign, bidder, ep_stream)
        rtgs = compute_rtg(rewards, data_cfg.gamma)
        transitions = [
            Transition(t=i, state=states[i], action=actions[i], reward=rewards[i],
                       rtg=rtgs[i], done=(i == len(states) - 1))
            for i in range(len(states))
        ]
        trajectories.append(Trajectory(ep, campaign.attrs(), transitions))
    ds = Dataset(trajectories)
    ds.validate(gamma=data_cfg.gamma)
    return ds
