"""Trajectory data model: return-to-go, normalization, JSONL serialization,
and ingestion of externally produced trajectory files.
"""
from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, IngestError, InvalidInputError
from .numerics import SeededStream

logger = logging.getLogger(__name__)

STATE_DIM = 16
STD_FLOOR = 1e-6


def compute_rtg(rewards, gamma: float):
    """Discounted suffix sums: out[t] = sum_{i>=t} gamma^(i-t) * r_i."""
    if not 0 < gamma <= 1:
        raise InvalidInputError(f"gamma must be in (0, 1], got {gamma}")
    rewards = list(rewards)
    out = [0.0] * len(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = float(rewards[t]) + gamma * acc
        out[t] = acc
    return out


@dataclass(frozen=True)
class CampaignAttrs:
    """Campaign-level conditional attributes carried with every trajectory."""

    budget: float
    cpa_target: float
    category_id: int


@dataclass
class Transition:
    t: int
    state: np.ndarray
    action: float
    reward: float
    rtg: float
    done: bool

    def validate(self):
        state = np.asarray(self.state, dtype=float)
        if state.shape != (STATE_DIM,):
            raise InvalidInputError(f"state must have shape ({STATE_DIM},), got {state.shape}")
        if not np.all(np.isfinite(state)):
            raise InvalidInputError(f"non-finite state at t={self.t}")
        for name in ("action", "reward", "rtg"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidInputError(f"non-finite {name} at t={self.t}")


@dataclass
class Trajectory:
    episode_id: int
    campaign: CampaignAttrs
    transitions: list[Transition]

    def __len__(self):
        return len(self.transitions)

    @property
    def states(self) -> np.ndarray:
        return np.stack([tr.state for tr in self.transitions]).astype(np.float64)

    @property
    def actions(self) -> np.ndarray:
        return np.array([tr.action for tr in self.transitions], dtype=np.float64)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([tr.reward for tr in self.transitions], dtype=np.float64)

    @property
    def rtgs(self) -> np.ndarray:
        return np.array([tr.rtg for tr in self.transitions], dtype=np.float64)

    def validate(self, gamma: float | None = None, rtg_tol: float = 1e-9):
        if not self.transitions:
            raise InvalidInputError(f"episode {self.episode_id}: empty trajectory")
        for i, tr in enumerate(self.transitions):
            tr.validate()
            if tr.t != i:
                raise InvalidInputError(
                    f"episode {self.episode_id}: non-contiguous t at record {i} (got {tr.t})"
                )
            if tr.done != (i == len(self.transitions) - 1):
                raise InvalidInputError(
                    f"episode {self.episode_id}: done flag must mark exactly the last transition"
                )
        if gamma is not None:
            expect = compute_rtg(self.rewards, gamma)
            err = float(np.max(np.abs(np.asarray(expect) - self.rtgs)))
            if err > rtg_tol:
                raise InvalidInputError(
                    f"episode {self.episode_id}: stored rtg deviates from recomputation by {err:.3e}"
                )


@dataclass
class Dataset:
    trajectories: list[Trajectory] = field(default_factory=list)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    @property
    def n_transitions(self) -> int:
        return sum(len(tr) for tr in self.trajectories)

    def validate(self, gamma: float | None = None):
        for traj in self.trajectories:
            traj.validate(gamma=gamma)

    def split(self, train_frac: float, stream: SeededStream) -> tuple["Dataset", "Dataset"]:
        """Deterministic shuffle-split; the held-out part may be empty."""
        idx = stream.child("split").numpy().permutation(len(self.trajectories))
        n_train = max(1, int(round(train_frac * len(self.trajectories))))
        train = [self.trajectories[i] for i in sorted(idx[:n_train])]
        val = [self.trajectories[i] for i in sorted(idx[n_train:])]
        return Dataset(train), Dataset(val)

    def episode_returns(self) -> np.ndarray:
        return np.array([traj.rtgs[0] for traj in self.trajectories], dtype=np.float64)


# --- normalization ---------------------------------------------------------


@dataclass
class NormStats:
    """Per-feature mean/std for states plus scalar stats for the other fields.

    Stds are floored at ``STD_FLOOR``; floored entries are recorded so
    constant features are visible in logs and checkpoints.
    """

    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: float
    action_std: float
    reward_mean: float
    reward_std: float
    rtg_mean: float
    rtg_std: float
    budget_mean: float
    budget_std: float
    cpa_mean: float
    cpa_std: float
    floored: list[str] = field(default_factory=list)

    def norm_state(self, x):
        return (np.asarray(x, dtype=np.float64) - self.state_mean) / self.state_std

    def denorm_state(self, x):
        return np.asarray(x, dtype=np.float64) * self.state_std + self.state_mean

    def norm_action(self, a):
        return (a - self.action_mean) / self.action_std

    def denorm_action(self, a):
        return a * self.action_std + self.action_mean

    def norm_rtg(self, r):
        return (r - self.rtg_mean) / self.rtg_std

    def norm_reward(self, r):
        return (r - self.reward_mean) / self.reward_std

    def campaign_vector(self, campaign: CampaignAttrs, n_categories: int) -> np.ndarray:
        """Conditioning vector: normalized budget/CPA target plus category one-hot."""
        one_hot = np.zeros(n_categories)
        one_hot[int(campaign.category_id) % n_categories] = 1.0
        return np.concatenate([
            [(campaign.budget - self.budget_mean) / self.budget_std],
            [(campaign.cpa_target - self.cpa_mean) / self.cpa_std],
            one_hot,
        ])

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"state_mean": self.state_mean, "state_std": self.state_std}
        for name in ("action", "reward", "rtg", "budget", "cpa"):
            out[f"{name}_ms"] = np.array(
                [getattr(self, f"{name}_mean"), getattr(self, f"{name}_std")]
            )
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, floored: list[str] | None = None) -> "NormStats":
        kw = {"state_mean": np.asarray(arrays["state_mean"]), "state_std": np.asarray(arrays["state_std"])}
        for name in ("action", "reward", "rtg", "budget", "cpa"):
            ms = np.asarray(arrays[f"{name}_ms"])
            kw[f"{name}_mean"], kw[f"{name}_std"] = float(ms[0]), float(ms[1])
        return cls(floored=list(floored or []), **kw)


def apply_normalizer(stats: NormStats, states):
    """Normalize a state array (the inverse of :func:`invert_normalizer`)."""
    return stats.norm_state(states)


def invert_normalizer(stats: NormStats, states):
    return stats.denorm_state(states)


def _floored_std(values, label, floored):
    std = float(np.std(values))
    if std < STD_FLOOR:
        floored.append(label)
        return STD_FLOOR
    return std


def fit_normalizer(dataset: Dataset) -> NormStats:
    if len(dataset) == 0:
        raise InvalidInputError("cannot fit a normalizer on an empty dataset")
    states = np.concatenate([traj.states for traj in dataset], axis=0)
    actions = np.concatenate([traj.actions for traj in dataset])
    rewards = np.concatenate([traj.rewards for traj in dataset])
    rtgs = np.concatenate([traj.rtgs for traj in dataset])
    budgets = np.array([traj.campaign.budget for traj in dataset], dtype=np.float64)
    cpas = np.array([traj.campaign.cpa_target for traj in dataset], dtype=np.float64)

    floored: list[str] = []
    state_std = np.std(states, axis=0)
    for j in np.nonzero(state_std < STD_FLOOR)[0]:
        floored.append(f"state[{j}]")
    state_std = np.maximum(state_std, STD_FLOOR)
    stats = NormStats(
        state_mean=np.mean(states, axis=0),
        state_std=state_std,
        action_mean=float(np.mean(actions)),
        action_std=_floored_std(actions, "action", floored),
        reward_mean=float(np.mean(rewards)),
        reward_std=_floored_std(rewards, "reward", floored),
        rtg_mean=float(np.mean(rtgs)),
        rtg_std=_floored_std(rtgs, "rtg", floored),
        budget_mean=float(np.mean(budgets)),
        budget_std=_floored_std(budgets, "budget", floored),
        cpa_mean=float(np.mean(cpas)),
        cpa_std=_floored_std(cpas, "cpa", floored),
        floored=floored,
    )
    if floored:
        logger.warning("normalizer floored std for constant features: %s", ", ".join(floored))
    return stats


# --- serialization ---------------------------------------------------------


def _record_from_transition(traj: Trajectory, tr: Transition) -> dict:
    return {
        "episode_id": traj.episode_id,
        "t": tr.t,
        "state": [float(x) for x in np.asarray(tr.state, dtype=np.float64)],
        "action": float(tr.action),
        "reward": float(tr.reward),
        "rtg": float(tr.rtg),
        "done": bool(tr.done),
        "campaign": {
            "budget": float(traj.campaign.budget),
            "cpa_target": float(traj.campaign.cpa_target),
            "category_id": int(traj.campaign.category_id),
        },
    }


def save_jsonl(path: str | Path, dataset: Dataset) -> None:
    """Canonical JSONL: one transition per line, sorted keys, shortest floats."""
    dataset.validate()
    lines = []
    for traj in dataset:
        for tr in traj.transitions:
            lines.append(json.dumps(_record_from_transition(traj, tr),
                                    sort_keys=True, separators=(",", ":"), allow_nan=False))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def _reject_constant(name):
    raise IngestError(f"non-finite JSON constant {name!r}")


def load_jsonl(path: str | Path, gamma: float | None = None) -> Dataset:
    records = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                records.append((i, json.loads(line, parse_constant=_reject_constant)))
            except json.JSONDecodeError as exc:
                raise IngestError(f"record {i}: invalid JSON ({exc})") from exc
    return _dataset_from_records(records, gamma=gamma)


def _dataset_from_records(records, gamma=None) -> Dataset:
    by_episode: dict[int, list] = {}
    campaigns: dict[int, CampaignAttrs] = {}
    for idx, rec in records:
        try:
            ep = int(rec["episode_id"])
            camp = rec["campaign"]
            tr = Transition(
                t=int(rec["t"]),
                state=np.asarray(rec["state"], dtype=np.float64),
                action=float(rec["action"]),
                reward=float(rec["reward"]),
                rtg=float(rec["rtg"]),
                done=bool(rec["done"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"record {idx}: malformed fields ({exc})") from exc
        try:
            tr.validate()
        except InvalidInputError as exc:
            raise IngestError(f"record {idx}: {exc}") from exc
        attrs = CampaignAttrs(float(camp["budget"]), float(camp["cpa_target"]), int(camp["category_id"]))
        campaigns.setdefault(ep, attrs)
        by_episode.setdefault(ep, []).append((idx, tr))

    trajectories = []
    for ep in sorted(by_episode):
        items = sorted(by_episode[ep], key=lambda it: it[1].t)
        for pos, (idx, tr) in enumerate(items):
            if tr.t != pos:
                raise IngestError(f"record {idx}: episode {ep} t jumps to {tr.t} (expected {pos})")
        trajectories.append(Trajectory(ep, campaigns[ep], [tr for _, tr in items]))
    ds = Dataset(trajectories)
    ds.validate(gamma=gamma)
    return ds


_INGEST_REQUIRED = ("episode_id", "t", "state", "action", "reward", "done",
                    "budget", "cpa_target", "category_id")


def ingest_external(path: str | Path, schema_map) -> Dataset:
    """Map an external JSONL trajectory file onto the native schema.

    ``schema_map`` is a dict (or a YAML/JSON file path) with:
      fields:       {native field -> external column name}; ``rtg`` optional
      action_range: [lo, hi] declared valid action range
      state_dim:    expected state vector length (must be 16)
      gamma:        discount used to recompute rtg when absent (default 0.99)
    External states are treated as opaque 16-vectors.
    """
    if isinstance(schema_map, (str, Path)):
        schema_map = yaml.safe_load(Path(schema_map).read_text())
    if not isinstance(schema_map, dict) or "fields" not in schema_map:
        raise ConfigError("schema map must be a mapping with a 'fields' section")
    fields = schema_map["fields"]
    missing = [f for f in _INGEST_REQUIRED if f not in fields]
    if missing:
        raise ConfigError(f"schema map missing field mappings: {', '.join(missing)}")
    state_dim = int(schema_map.get("state_dim", STATE_DIM))
    if state_dim != STATE_DIM:
        raise ConfigError(f"state_dim must be {STATE_DIM}, got {state_dim}")
    lo, hi = schema_map.get("action_range", (-math.inf, math.inf))
    gamma = float(schema_map.get("gamma", 0.99))
    has_rtg = "rtg" in fields

    records = []
    with open(path) as fh:
        for idx, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line, parse_constant=_reject_constant)
            except json.JSONDecodeError as exc:
                raise IngestError(f"record {idx}: invalid JSON ({exc})") from exc
            try:
                rec = {
                    "episode_id": raw[fields["episode_id"]],
                    "t": raw[fields["t"]],
                    "state": raw[fields["state"]],
                    "action": raw[fields["action"]],
                    "reward": raw[fields["reward"]],
                    "rtg": raw[fields["rtg"]] if has_rtg else 0.0,
                    "done": raw[fields["done"]],
                    "campaign": {
                        "budget": raw[fields["budget"]],
                        "cpa_target": raw[fields["cpa_target"]],
                        "category_id": raw[fields["category_id"]],
                    },
                }
            except KeyError as exc:
                raise IngestError(f"record {idx}: missing column {exc}") from exc
            action = float(rec["action"])
            if not lo <= action <= hi:
                raise IngestError(
                    f"record {idx}: action {action} outside declared range [{lo}, {hi}]"
                )
            records.append((idx, rec))

    ds = _dataset_from_records(records, gamma=None)
    if not has_rtg:
        for traj in ds:
            for tr, rtg in zip(traj.transitions, compute_rtg(traj.rewards, gamma)):
                tr.rtg = rtg
    ds.validate(gamma=gamma if has_rtg else None)
    return ds


@contextmanager
def audit_reward_reads():
    """Count reads of ``Transition.reward`` (used to audit the evolution stage)."""
    counter = {"reads": 0}

    def getter(self):
        counter["reads"] += 1
        return self.__dict__["reward"]

    def setter(self, value):
        self.__dict__["reward"] = value

    Transition.reward = property(getter, setter)
    try:
        yield counter
    finally:
        del Transition.reward
