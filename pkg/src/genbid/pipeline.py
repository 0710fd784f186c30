"""End-to-end training orchestration: dataset, supervised pre-training
(planner then policy), critic, and policy evolution, with versioned immutable
checkpoints, append-only metrics, and seed discipline that makes resumed runs
byte-identical to uninterrupted ones.
"""
from __future__ import annotations

import csv
import logging
import re
from pathlib import Path

import numpy as np
import torch

from .auction import generate_offline_dataset
from .batching import PackedData, pack_dataset
from .checkpoint import (Checkpoint, STAGE_CRITIC, STAGE_LAD, STAGE_POLICY_FINAL,
                         STAGE_POLICY_PRE)
from .config import RunConfig, save_config, validate_config
from .critic import CriticPair
from .data import Dataset, NormStats, fit_normalizer, load_jsonl, save_jsonl
from .errors import CheckpointError, StageGateError
from .evolve import evolve
from .numerics import SeededStream
from .planner import DiffusionPlanner, TrajectoryDiffusionPlanner
from .policy import SequencePolicy

logger = logging.getLogger(__name__)

STAGE_FORESIGHT = "foresight"
STAGE_GLOBAL = "lad_global"

_CKPT_RE = re.compile(r"v(\d{3})\.ckpt$")


class MetricsLog:
    """Append-only CSV: every row carries (stage, epoch, metric, value, seed, hash)."""

    COLUMNS = ("stage", "epoch", "metric", "value", "seed", "config_hash")

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.COLUMNS)

    def append(self, stage: str, epoch: int, metric: str, value: float,
               seed: int, config_hash: str) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([stage, epoch, metric, repr(float(value)), seed, config_hash])

    def rows(self) -> list[dict]:
        with open(self.path) as fh:
            return list(csv.DictReader(fh))


def latest_checkpoint(stage_dir: Path) -> Path | None:
    if not stage_dir.is_dir():
        return None
    versions = sorted(p for p in stage_dir.iterdir() if _CKPT_RE.search(p.name))
    return versions[-1] if versions else None


def next_version_path(stage_dir: Path) -> Path:
    stage_dir.mkdir(parents=True, exist_ok=True)
    existing = [int(_CKPT_RE.search(p.name).group(1))
                for p in stage_dir.iterdir() if _CKPT_RE.search(p.name)]
    return stage_dir / f"v{max(existing, default=-1) + 1:03d}.ckpt"


class Run:
    """A run directory plus the derived streams and cached dataset views."""

    def __init__(self, cfg: RunConfig, run_dir: str | Path | None = None):
        validate_config(cfg)
        self.cfg = cfg
        self.dir = Path(run_dir if run_dir is not None else cfg.out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.hash = cfg.config_hash()
        self.root_stream = SeededStream(cfg.seed, "run")
        self.metrics = MetricsLog(self.dir / "metrics.csv")
        config_path = self.dir / "config.yaml"
        if not config_path.exists():
            save_config(cfg, config_path)
        self._dataset = None
        self._train = None
        self._norm = None
        self._packed = None

    def log_cb(self, stage: str):
        def cb(epoch: int, metrics: dict):
            for name, value in metrics.items():
                self.metrics.append(stage, epoch, name, value, self.cfg.seed, self.hash)
        return cb

    # --- data ---------------------------------------------------------------

    def dataset(self) -> Dataset:
        if self._dataset is None:
            path = self.dir / "dataset.jsonl"
            if path.exists():
                self._dataset = load_jsonl(path, gamma=self.cfg.data.gamma)
            else:
                self._dataset = generate_offline_dataset(
                    self.cfg.env, self.cfg.data, self.cfg.data.n_episodes,
                    self.root_stream.child("data"))
                save_jsonl(path, self._dataset)
            logger.info("dataset: %d episodes, %d transitions",
                        len(self._dataset), self._dataset.n_transitions)
        return self._dataset

    def train_split(self) -> Dataset:
        if self._train is None:
            train, _ = self.dataset().split(self.cfg.data.train_frac,
                                            self.root_stream.child("split"))
            self._train = train
        return self._train

    def norm(self) -> NormStats:
        if self._norm is None:
            self._norm = fit_normalizer(self.train_split())
        return self._norm

    def packed(self) -> PackedData:
        if self._packed is None:
            self._packed = pack_dataset(self.train_split(), self.norm(),
                                        self.cfg.env.n_categories)
        return self._packed

    # --- checkpoint plumbing ---------------------------------------------------

    def stage_dir(self, stage: str) -> Path:
        return self.dir / stage

    def existing(self, stage: str) -> Path | None:
        path = latest_checkpoint(self.stage_dir(stage))
        if path is not None:
            Checkpoint.load(path).require_hash(self.hash)
        return path

    def save_stage(self, stage: str, ckpt: Checkpoint) -> Path:
        path = next_version_path(self.stage_dir(stage))
        ckpt.save(path)
        logger.info("stage %s -> %s", stage, path)
        return path


# --- individual stages ------------------------------------------------------


def stage_lad(run: Run, resume: bool = True) -> Path:
    if resume:
        path = run.existing(STAGE_LAD)
        if path is not None:
            return path
    cfg = run.cfg
    planner = DiffusionPlanner(cfg.planner, cfg.env.n_categories,
                               run.root_stream.child("lad_init"), norm=run.norm())
    planner.fit(run.packed(), cfg.optim, run.root_stream.child("lad_fit"),
                log_cb=run.log_cb(STAGE_LAD))
    return run.save_stage(STAGE_LAD, planner.to_checkpoint(STAGE_LAD, run.hash))


def stage_global_planner(run: Run, resume: bool = True) -> Path:
    if resume:
        path = run.existing(STAGE_GLOBAL)
        if path is not None:
            return path
    cfg = run.cfg
    planner = TrajectoryDiffusionPlanner(cfg.planner, cfg.env.n_categories,
                                         horizon=run.packed().horizon,
                                         stream=run.root_stream.child("global_init"),
                                         norm=run.norm())
    planner.fit(run.packed(), cfg.optim, run.root_stream.child("global_fit"),
                log_cb=run.log_cb(STAGE_GLOBAL))
    return run.save_stage(STAGE_GLOBAL, planner.to_checkpoint(STAGE_GLOBAL, run.hash))


def load_planner(path: Path):
    ckpt = Checkpoint.load(path)
    if ckpt.module == DiffusionPlanner.module_name:
        return DiffusionPlanner.from_checkpoint(ckpt)
    if ckpt.module == TrajectoryDiffusionPlanner.module_name:
        return TrajectoryDiffusionPlanner.from_checkpoint(ckpt)
    raise CheckpointError(f"not a planner checkpoint: {path} ({ckpt.module})")


def compute_foresight(planner, dataset: Dataset, norm: NormStats, n_categories: int,
                      stream: SeededStream) -> np.ndarray:
    """Predicted next state for every (episode, t), batched by prefix length.

    Entry [i, t] conditions on states up to and including t (raw units).
    """
    n = len(dataset)
    t_max = max(len(traj) for traj in dataset)
    out = np.zeros((n, t_max, 16))
    states = np.zeros((n, t_max, 16))
    lengths = np.array([len(traj) for traj in dataset])
    ys = np.zeros((n, 2 + n_categories))
    for i, traj in enumerate(dataset):
        states[i, :lengths[i]] = norm.norm_state(traj.states)
        ys[i] = norm.campaign_vector(traj.campaign, n_categories)
    states_t = torch.from_numpy(states).to(torch.float32)
    ys_t = torch.from_numpy(ys).to(torch.float32)
    for t in range(t_max):
        alive = np.nonzero(lengths > t)[0]
        if len(alive) == 0:
            continue
        gen = stream.child(f"t{t}").torch_gen()
        pred_norm = planner.sample_batch(states_t[alive, :t + 1], ys_t[alive], gen)
        out[alive, t] = norm.denorm_state(pred_norm.numpy())
    return out


def truth_foresight(packed: PackedData, norm: NormStats) -> np.ndarray:
    """Teacher forcing: the recorded next state (the last step repeats itself)."""
    states = norm.denorm_state(packed.states.numpy().reshape(-1, 16)).reshape(packed.states.shape)
    out = np.zeros_like(states)
    out[:, :-1] = states[:, 1:]
    out[:, -1] = states[:, -1]
    return out


def stage_foresight(run: Run, planner_path: Path | None, resume: bool = True,
                    stage: str = STAGE_FORESIGHT, mode: str | None = None) -> Path | None:
    """Attach predicted next states to the training split as an artifact."""
    mode = mode if mode is not None else run.cfg.policy.foresight
    if mode == "zero":
        return None
    if resume:
        path = run.existing(stage)
        if path is not None:
            return path
    if mode == "truth":
        array = truth_foresight(run.packed(), run.norm())
        source = "truth"
    else:
        if planner_path is None:
            raise StageGateError(f"foresight mode {mode!r} needs a planner checkpoint")
        planner = load_planner(planner_path)
        array = compute_foresight(planner, run.train_split(), run.norm(),
                                  run.cfg.env.n_categories, run.root_stream.child(stage))
        source = planner.module_name
    ckpt = Checkpoint(module="foresight", stage=stage, config_hash=run.hash,
                      config={"source": source, "mode": mode},
                      arrays={"foresight": array}, trained=True)
    return run.save_stage(stage, ckpt)


def load_foresight(path: Path | None, norm: NormStats) -> torch.Tensor | None:
    if path is None:
        return None
    ckpt = Checkpoint.load(path)
    raw = ckpt.arrays["foresight"]
    normed = norm.norm_state(raw.reshape(-1, 16)).reshape(raw.shape)
    return torch.from_numpy(normed).to(torch.float32)


def _policy_extra(run: Run, mode: str) -> dict:
    returns = run.train_split().episode_returns()
    return {
        "rtg_quantile_value": float(np.quantile(returns, run.cfg.eval.rtg_quantile)),
        "return_mean": float(returns.mean()),
        "foresight_mode": mode,
    }


def stage_policy_pre(run: Run, foresight_path: Path | None, resume: bool = True,
                     stage: str = STAGE_POLICY_PRE, mode: str | None = None) -> Path:
    mode = mode if mode is not None else run.cfg.policy.foresight
    if resume:
        path = run.existing(stage)
        if path is not None:
            return path
    cfg = run.cfg
    if mode in ("planner", "global", "truth") and foresight_path is None:
        raise StageGateError(
            f"policy pre-training with foresight={mode!r} "
            "needs the planner stage to have run first")
    policy = SequencePolicy(cfg.policy, horizon=run.packed().horizon,
                            action_max=cfg.env.action_max,
                            stream=run.root_stream.child(f"{stage}_init"), norm=run.norm())
    foresight = load_foresight(foresight_path, run.norm())
    policy.fit(run.packed(), foresight, cfg.optim,
               run.root_stream.child(f"{stage}_fit"), log_cb=run.log_cb(stage))
    return run.save_stage(stage, policy.to_checkpoint(stage, run.hash,
                                                      extra=_policy_extra(run, mode)))


def stage_critic(run: Run, resume: bool = True) -> Path:
    if resume:
        path = run.existing(STAGE_CRITIC)
        if path is not None:
            return path
    cfg = run.cfg
    critic = CriticPair(cfg.critic, context=cfg.policy.context, horizon=run.packed().horizon,
                        gamma=cfg.data.gamma, stream=run.root_stream.child("critic_init"),
                        norm=run.norm())
    critic.fit(run.packed(), run.root_stream.child("critic_fit"), cfg.optim,
               log_cb=run.log_cb(STAGE_CRITIC))
    return run.save_stage(STAGE_CRITIC, critic.to_checkpoint(STAGE_CRITIC, run.hash))


def stage_evolve(run: Run, policy_pre_path: Path, critic_path: Path,
                 foresight_path: Path | None, resume: bool = True,
                 stage: str = STAGE_POLICY_FINAL, group_size: int | None = None) -> Path:
    if resume:
        path = run.existing(stage)
        if path is not None:
            return path
    for name, p in (("policy_pre", policy_pre_path), ("critic", critic_path)):
        if p is None or not Path(p).exists():
            raise StageGateError(f"evolution stage needs the {name} checkpoint (missing: {p})")
    critic_ckpt = Checkpoint.load(critic_path).require_hash(run.hash)
    if not critic_ckpt.frozen:
        raise StageGateError("critic checkpoint is not marked frozen; refusing to evolve")
    critic = CriticPair.from_checkpoint(critic_ckpt)
    policy_ckpt = Checkpoint.load(policy_pre_path).require_hash(run.hash)
    policy = SequencePolicy.from_checkpoint(policy_ckpt)
    cfg = run.cfg
    evolve_cfg = cfg.evolve
    if group_size is not None:
        import dataclasses
        evolve_cfg = dataclasses.replace(evolve_cfg, group_size=group_size)
    foresight = load_foresight(foresight_path, run.norm())
    policy = evolve(policy, critic, run.packed(), foresight, evolve_cfg, cfg.optim,
                    run.root_stream.child(f"{stage}_evolve"), log_cb=run.log_cb(stage))
    extra = dict(policy_ckpt.extra)
    try:
        extra["evolved_from"] = str(Path(policy_pre_path).relative_to(run.dir))
    except ValueError:
        extra["evolved_from"] = Path(policy_pre_path).name
    return run.save_stage(stage, policy.to_checkpoint(stage, run.hash, extra=extra))


# --- public entry points ---------------------------------------------------


def train_supervised(run: Run, resume: bool = True) -> tuple[Path, Path]:
    """Stage A (planner to convergence), foresight attachment, stage B (policy).

    A joint simultaneous mode is available behind ``cfg.policy.joint_loss``.
    """
    if run.cfg.policy.joint_loss:
        return _train_supervised_joint(run, resume)
    mode = run.cfg.policy.foresight
    planner_path = None
    if mode == "planner":
        planner_path = stage_lad(run, resume)
    elif mode == "global":
        planner_path = stage_global_planner(run, resume)
    elif mode == "truth":
        planner_path = stage_lad(run, resume)  # trained for parity; targets stay truthful
    foresight_path = stage_foresight(run, planner_path, resume)
    policy_path = stage_policy_pre(run, foresight_path, resume)
    if planner_path is None:
        planner_path = stage_lad(run, resume)  # planner is still a pipeline artifact
    return planner_path, policy_path


def _train_supervised_joint(run: Run, resume: bool = True) -> tuple[Path, Path]:
    """Simultaneous optimization of the combined supervised objective."""
    if resume:
        lad_path, pol_path = run.existing(STAGE_LAD), run.existing(STAGE_POLICY_PRE)
        if lad_path is not None and pol_path is not None:
            return lad_path, pol_path
    cfg = run.cfg
    packed = run.packed()
    planner = DiffusionPlanner(cfg.planner, cfg.env.n_categories,
                               run.root_stream.child("lad_init"), norm=run.norm())
    policy = SequencePolicy(cfg.policy, horizon=packed.horizon, action_max=cfg.env.action_max,
                            stream=run.root_stream.child("policy_pre_init"), norm=run.norm())
    opt = torch.optim.AdamW(
        list(planner.parameters()) + list(policy.parameters()),
        lr=cfg.policy.lr, weight_decay=cfg.optim.weight_decay)
    gen = run.root_stream.child("joint_fit").torch_gen()
    log = run.log_cb("supervised_joint")
    planner.trained = True  # sampling inside the loop below
    for epoch in range(cfg.policy.epochs):
        total = 0.0
        for _ in range(cfg.policy.steps_per_epoch):
            lad_loss = planner.loss_on_batch(packed, cfg.planner.batch_size, gen)
            idx, t = policy._sample_bc_indices(packed, cfg.policy.batch_size, gen)
            with torch.no_grad():
                histories = [packed.states[idx[j]:idx[j] + 1, :t[j] + 1] for j in range(len(idx))]
                s_hat = torch.cat([
                    planner.sample_batch(h, packed.y[idx[j]:idx[j] + 1], gen)
                    for j, h in enumerate(histories)
                ])
            batch = policy.batch_from_packed(packed, idx, t, None)
            batch = batch[:-1] + (s_hat,)
            policy_loss = policy.bc_loss_from_batch(batch, packed.actions[idx, t])
            loss = lad_loss + policy_loss
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(
                list(planner.parameters()) + list(policy.parameters()), cfg.optim.grad_clip)
            opt.step()
            total += float(loss.detach())
        log(epoch, {"supervised_loss": total / cfg.policy.steps_per_epoch})
    policy.trained = True
    lad_path = run.save_stage(STAGE_LAD, planner.to_checkpoint(STAGE_LAD, run.hash))
    pol_path = run.save_stage(
        STAGE_POLICY_PRE, policy.to_checkpoint(STAGE_POLICY_PRE, run.hash,
                                               extra=_policy_extra(run, "planner")))
    return lad_path, pol_path


def run_pipeline(cfg: RunConfig, run_dir: str | Path | None = None,
                 resume: bool = True) -> dict:
    """Supervised -> critic -> evolution, each stage reading only prior
    checkpoints.  Returns the artifact paths."""
    torch.set_num_threads(1)
    run = Run(cfg, run_dir)
    run.dataset()
    planner_path, policy_pre_path = train_supervised(run, resume)
    critic_path = stage_critic(run, resume)
    foresight_path = run.existing(STAGE_FORESIGHT) if cfg.policy.foresight != "zero" else None
    final_path = stage_evolve(run, policy_pre_path, critic_path, foresight_path, resume)
    return {
        "run_dir": run.dir,
        "dataset": run.dir / "dataset.jsonl",
        "lad": planner_path,
        "policy_pre": policy_pre_path,
        "critic": critic_path,
        "policy_final": final_path,
        "metrics": run.metrics.path,
    }


# --- ablation arms -----------------------------------------------------------


ABLATION_STAGES = {
    "wo_s": {"pre": "ablation/policy_pre_wo_s", "final": "ablation/policy_final_wo_s",
             "foresight": None, "mode": "zero"},
    "wo_lad": {"pre": "ablation/policy_pre_wo_lad", "final": "ablation/policy_final_wo_lad",
               "foresight": "ablation/foresight_global", "mode": "global"},
}


def build_ablation_artifacts(cfg: RunConfig, run_dir: str | Path | None = None,
                             resume: bool = True) -> dict:
    """Train the extra arms the ablation table needs (shared dataset/critic)."""
    torch.set_num_threads(1)
    paths = run_pipeline(cfg, run_dir, resume)
    run = Run(cfg, run_dir if run_dir is not None else cfg.out)
    critic_path = paths["critic"]

    global_path = stage_global_planner(run, resume)
    paths["lad_global"] = global_path

    for arm, names in ABLATION_STAGES.items():
        planner_path = global_path if names["mode"] == "global" else None
        fs_path = None
        if names["foresight"] is not None:
            fs_path = stage_foresight(run, planner_path, resume,
                                      stage=names["foresight"], mode=names["mode"])
        pre = stage_policy_pre(run, fs_path, resume, stage=names["pre"], mode=names["mode"])
        final = stage_evolve(run, pre, critic_path, fs_path, resume, stage=names["final"])
        paths[names["pre"]] = pre
        paths[names["final"]] = final
    return paths


def run_group_size_sweep(cfg: RunConfig, run_dir: str | Path | None,
                         groups=(2, 4, 8), resume: bool = True) -> list[Path]:
    """Evolve the pre-trained policy once per group size (curve artifact)."""
    torch.set_num_threads(1)
    paths = run_pipeline(cfg, run_dir, resume)
    run = Run(cfg, run_dir if run_dir is not None else cfg.out)
    foresight_path = run.existing(STAGE_FORESIGHT)
    out = []
    for g in groups:
        stage = f"gsweep/policy_final_g{g}"
        out.append(stage_evolve(run, paths["policy_pre"], paths["critic"],
                                foresight_path, resume, stage=stage, group_size=g))
    return out
