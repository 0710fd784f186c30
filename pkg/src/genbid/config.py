"""Run configuration: schema, defaults, YAML loading, and hashing.

Top-level defaults carry the full-scale reference settings; ``desk_config``
shrinks everything so the whole pipeline runs on a laptop CPU in minutes.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class CompetitorConfig:
    base_scale: float = 0.55          # median top competing bid at multiplier 1
    sigma: float = 0.45               # lognormal per-opportunity noise
    daypart_amplitude: float = 0.55   # price swing over the episode cycle
    daypart_cycles: float = 1.0       # full sine cycles per episode
    random_phase: bool = True         # per-episode latent phase of the price curve
    intensity_sigma: float = 0.25     # per-episode lognormal price-level latent


@dataclass
class EnvConfig:
    horizon: int = 48
    opportunities_per_step: int = 25
    budget_min: float = 120.0
    budget_max: float = 260.0
    cpa_min: float = 6.0
    cpa_max: float = 12.0
    n_constraints: int = 1
    n_categories: int = 4
    lambda_ratio: float = 0.5         # lambda_j = ratio * action
    action_max: float = 10.0
    conv_prob_max: float = 0.12       # conv_prob = conv_prob_max * value
    min_budget: float = 0.0           # episode ends early below this remainder
    ema_alpha: float = 0.3
    competitor: CompetitorConfig = field(default_factory=CompetitorConfig)


@dataclass
class DataConfig:
    n_episodes: int = 400
    gamma: float = 0.99
    train_frac: float = 0.9
    behavior_constant: float = 0.25   # mix weights, renormalized
    behavior_pacer: float = 0.35
    behavior_oracle: float = 0.4


@dataclass
class PlannerConfig:
    layers: int = 8
    heads: int = 16
    embed: int = 512
    context: int = 48
    hidden: int = 512                 # noise-net MLP width
    k_embed: int = 32
    y_embed: int = 32
    diffusion_steps: int = 38
    beta_min: float = 1e-4
    beta_max: float = 0.02
    omega: float = 0.2                # guidance strength
    cond_dropout: float = 0.2
    lr: float = 1e-5
    epochs: int = 20
    steps_per_epoch: int = 200
    batch_size: int = 256
    patience: int = 5


@dataclass
class PolicyConfig:
    layers: int = 6
    heads: int = 8
    embed: int = 512
    context: int = 28
    dropout: float = 0.1
    lr: float = 3e-5
    epochs: int = 20
    steps_per_epoch: int = 200
    batch_size: int = 256
    patience: int = 5
    log_std_init: float = -1.0
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    foresight: str = "planner"        # planner | truth | zero | global
    joint_loss: bool = False          # optimize planner+policy simultaneously


@dataclass
class CriticConfig:
    layers: int = 6
    heads: int = 8
    embed: int = 512
    tau: float = 0.8                  # expectile
    lr: float = 3e-5
    epochs: int = 20
    steps_per_epoch: int = 200
    batch_size: int = 256
    patience: int = 5
    use_target_net: bool = False      # stability experiment flag


@dataclass
class EvolveConfig:
    group_size: int = 4
    clip_eps: float = 0.1
    kl_beta: float = 0.1
    lr: float = 3e-5
    epochs: int = 5
    steps_per_epoch: int = 50
    batch_size: int = 64
    normalize_advantages: bool = True


@dataclass
class OptimConfig:
    weight_decay: float = 0.01
    grad_clip: float = 1.0


@dataclass
class EvalConfig:
    n_agents: int = 48
    n_inits: int = 30
    top_k: int = 5
    budget_multiplier: float = 1.0
    rtg_quantile: float = 0.9
    rtg_scale: float = 1.0
    mode: str = "mean"                # action head mode at inference


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    evolve: EvolveConfig = field(default_factory=EvolveConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of the experimental identity (the output path is excluded)."""
        payload = self.to_dict()
        payload.pop("out", None)
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def desk_config(seed: int = 0, out: str = "runs/desk") -> RunConfig:
    """Small sizes for CPU-scale runs; large-scale values stay valid points."""
    cfg = RunConfig(seed=seed, out=out)
    cfg.env.horizon = 24
    cfg.env.opportunities_per_step = 12
    cfg.env.budget_min = 35.0
    cfg.env.budget_max = 80.0
    cfg.data.n_episodes = 200
    # betas rescaled for the short K=10 chain (the full-scale endpoints assume
    # a much longer one); per-step noise then carries comparable total mass
    cfg.planner = PlannerConfig(
        layers=2, heads=4, embed=64, context=24, hidden=256, k_embed=16, y_embed=16,
        diffusion_steps=10, beta_min=0.02, beta_max=0.25, lr=1e-3,
        epochs=8, steps_per_epoch=150, batch_size=128,
    )
    cfg.policy = PolicyConfig(
        layers=2, heads=2, embed=32, context=8, dropout=0.0, lr=1e-3,
        epochs=8, steps_per_epoch=150, batch_size=128,
    )
    cfg.critic = CriticConfig(
        layers=2, heads=2, embed=32, lr=1e-3, epochs=8, steps_per_epoch=150, batch_size=128,
    )
    cfg.evolve = EvolveConfig(lr=1e-4, epochs=4, steps_per_epoch=40, batch_size=64)
    cfg.eval = EvalConfig(n_agents=8, n_inits=10, top_k=3)
    return cfg


def _update_dataclass(obj, values: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, val in values.items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{path}{key}'")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur):
            if not isinstance(val, dict):
                raise ConfigError(f"'{path}{key}' must be a mapping")
            _update_dataclass(cur, val, f"{path}{key}.")
        else:
            if isinstance(cur, bool):
                if not isinstance(val, bool):
                    raise ConfigError(f"'{path}{key}' must be a boolean")
            elif isinstance(cur, int) and not isinstance(val, bool):
                if not isinstance(val, int):
                    raise ConfigError(f"'{path}{key}' must be an integer")
            elif isinstance(cur, float):
                if not isinstance(val, (int, float)) or isinstance(val, bool):
                    raise ConfigError(f"'{path}{key}' must be a number")
                val = float(val)
            elif isinstance(cur, str):
                if not isinstance(val, str):
                    raise ConfigError(f"'{path}{key}' must be a string")
            setattr(obj, key, val)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    """Load a YAML config block over defaults (or ``base``) and validate."""
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping")
    cfg = base if base is not None else RunConfig()
    if raw.get("profile") == "desk":
        cfg = desk_config()
        raw = {k: v for k, v in raw.items() if k != "profile"}
    _update_dataclass(cfg, raw, "")
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    """Schema check run before any stage; raises ConfigError with field names."""
    def require(cond, msg):
        if not cond:
            raise ConfigError(msg)

    e = cfg.env
    require(e.horizon >= 1, "env.horizon must be >= 1")
    require(e.opportunities_per_step >= 1, "env.opportunities_per_step must be >= 1")
    require(0 < e.budget_min <= e.budget_max, "env budget range must satisfy 0 < min <= max")
    require(0 < e.cpa_min <= e.cpa_max, "env CPA range must satisfy 0 < min <= max")
    require(e.n_constraints >= 0, "env.n_constraints must be >= 0")
    require(e.n_categories >= 1, "env.n_categories must be >= 1")
    require(e.lambda_ratio >= 0, "env.lambda_ratio must be >= 0")
    require(e.action_max > 0, "env.action_max must be > 0")
    require(0 <= e.conv_prob_max <= 1, "env.conv_prob_max must be in [0, 1]")
    require(0 < e.ema_alpha <= 1, "env.ema_alpha must be in (0, 1]")
    require(e.competitor.base_scale > 0, "env.competitor.base_scale must be > 0")
    require(e.competitor.sigma >= 0, "env.competitor.sigma must be >= 0")
    require(0 <= e.competitor.daypart_amplitude < 1, "env.competitor.daypart_amplitude must be in [0, 1)")

    d = cfg.data
    require(d.n_episodes >= 1, "data.n_episodes must be >= 1")
    require(0 < d.gamma <= 1, "data.gamma must be in (0, 1]")
    require(0 < d.train_frac <= 1, "data.train_frac must be in (0, 1]")
    mix = d.behavior_constant + d.behavior_pacer + d.behavior_oracle
    require(mix > 0, "data behavior mix weights must not all be zero")
    require(min(d.behavior_constant, d.behavior_pacer, d.behavior_oracle) >= 0,
            "data behavior mix weights must be >= 0")

    p = cfg.planner
    require(p.layers >= 1 and p.heads >= 1 and p.embed >= p.heads, "planner sizes invalid")
    require(p.embed % p.heads == 0, "planner.embed must be divisible by planner.heads")
    require(p.context >= 1, "planner.context must be >= 1")
    require(p.diffusion_steps >= 1, "planner.diffusion_steps must be >= 1")
    require(0 < p.beta_min <= p.beta_max < 1, "planner beta range must satisfy 0 < min <= max < 1")
    require(p.omega >= 0, "planner.omega must be >= 0")
    require(0 <= p.cond_dropout < 1, "planner.cond_dropout must be in [0, 1)")

    po = cfg.policy
    require(po.embed % po.heads == 0, "policy.embed must be divisible by policy.heads")
    require(po.context >= 1, "policy.context must be >= 1")
    require(po.log_std_min < po.log_std_max, "policy log-std bounds inverted")
    require(po.foresight in ("planner", "truth", "zero", "global"),
            "policy.foresight must be one of planner|truth|zero|global")

    c = cfg.critic
    require(c.embed % c.heads == 0, "critic.embed must be divisible by critic.heads")
    require(0 < c.tau < 1, "critic.tau must be in (0, 1)")

    g = cfg.evolve
    require(g.group_size >= 2, "evolve.group_size must be >= 2")
    require(0 < g.clip_eps < 1, "evolve.clip_eps must be in (0, 1)")
    require(g.kl_beta >= 0, "evolve.kl_beta must be >= 0")

    ev = cfg.eval
    require(ev.n_agents >= 1, "eval.n_agents must be >= 1")
    require(ev.n_inits >= 1, "eval.n_inits must be >= 1")
    require(1 <= ev.top_k <= ev.n_inits, "eval.top_k must be in [1, eval.n_inits]")
    require(ev.budget_multiplier > 0, "eval.budget_multiplier must be > 0")
    require(ev.mode in ("mean", "sample"), "eval.mode must be mean|sample")


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
