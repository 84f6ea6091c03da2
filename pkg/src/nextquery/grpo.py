"""Group-relative policy optimization on a toy autoregressive policy.

The policy is a tabular softmax over a finite symbol vocabulary: contexts
hash into buckets, each bucket row of theta holds per-symbol logits. Small
enough to finite-difference, structured enough to exercise the full
pipeline: clipped surrogate over groups, group-normalized advantages,
trajectory-level advantage broadcast, and the two-stage trainer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError

SCHEDULES = ("constant", "cosine_with_warmup")

_HASH_OFFSET = 0xCBF29CE484222325
_HASH_PRIME = 0x100000001B3
_HASH_MASK = (1 << 64) - 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str) -> None:
        super().__init__(f"non-finite value at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class GrpoConfig:
    eps_clip: float = 0.2
    group_size: int = 8
    eps_std: float = 1e-8
    lr: float = 0.5
    schedule: str = "constant"
    steps: int = 100
    batch: int = 4
    warmup_frac: float = 0.02

    def __post_init__(self) -> None:
        if not 0.0 < self.eps_clip < 1.0:
            raise ConfigError(f"eps_clip must lie in (0, 1), got {self.eps_clip}")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.eps_std <= 0.0:
            raise ConfigError("eps_std must be positive")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule: {self.schedule!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")


def lr_at(cfg: GrpoConfig, step: int) -> float:
    """Learning rate for 0-indexed step under the configured schedule."""
    if cfg.schedule == "constant":
        return cfg.lr
    warmup = max(1, round(cfg.warmup_frac * cfg.steps))
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    span = max(1, cfg.steps - warmup)
    progress = (step - warmup) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class ToyPolicy:
    """Tabular-softmax policy: theta[bucket(context)] scores the next symbol."""

    def __init__(
        self, vocab_size: int = 16, context_len: int = 4, buckets: int = 64, seed: int = 0
    ) -> None:
        if vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if context_len < 1:
            raise ConfigError("context_len must be >= 1")
        if buckets < 1:
            raise ConfigError("buckets must be >= 1")
        self.vocab_size = vocab_size
        self.context_len = context_len
        self.buckets = buckets
        self.seed = seed
        self.theta = np.zeros((buckets, vocab_size), dtype=np.float64)
        self._rng = np.random.Generator(np.random.Philox(seed))

    def bucket(self, context: Sequence[int]) -> int:
        # FNV-1a over the trailing window; stable across processes, unlike
        # the interpreter's salted hash()
        h = _HASH_OFFSET
        for symbol in tuple(context)[-self.context_len :]:
            h = ((h ^ (int(symbol) + 1)) * _HASH_PRIME) & _HASH_MASK
        return h % self.buckets

    def log_probs(self, context: Sequence[int]) -> np.ndarray:
        logits = self.theta[self.bucket(context)]
        shifted = logits - logits.max()
        return shifted - math.log(np.exp(shifted).sum())

    def probs(self, context: Sequence[int]) -> np.ndarray:
        return np.exp(self.log_probs(context))

    def sequence_logprob(self, prompt: Sequence[int], output: Sequence[int]) -> float:
        if not output:
            raise ValueError("output must be non-empty")
        total = 0.0
        context = tuple(prompt)
        for symbol in output:
            total += float(self.log_probs(context)[symbol])
            context = context + (int(symbol),)
        return total

    def logprob_grad(self, prompt: Sequence[int], output: Sequence[int]) -> np.ndarray:
        """d log pi(output | prompt) / d theta, dense (buckets, vocab)."""
        grad = np.zeros_like(self.theta)
        context = tuple(prompt)
        for symbol in output:
            b = self.bucket(context)
            grad[b] -= self.probs(context)
            grad[b, symbol] += 1.0
            context = context + (int(symbol),)
        return grad

    def sample(
        self, prompt: Sequence[int], length: int, rng: Optional[np.random.Generator] = None
    ) -> tuple[int, ...]:
        if length < 1:
            raise ValueError("length must be >= 1")
        gen = rng if rng is not None else self._rng
        context = tuple(prompt)
        out: list[int] = []
        for _ in range(length):
            symbol = int(gen.choice(self.vocab_size, p=self.probs(context)))
            out.append(symbol)
            context = context + (symbol,)
        return tuple(out)

    def clone(self) -> "ToyPolicy":
        twin = ToyPolicy(self.vocab_size, self.context_len, self.buckets, self.seed)
        twin.theta = self.theta.copy()
        return twin


@dataclass
class Rollout:
    prompt: tuple[int, ...]
    output: tuple[int, ...]
    logp_old: float
    logp_new: float
    reward: float
    advantage: float = 0.0


@dataclass
class RolloutGroup:
    prompt: tuple[int, ...]
    rollouts: list[Rollout]


@dataclass
class TrajectoryStep:
    observation: tuple[int, ...]
    model_input: tuple[int, ...]
    output: tuple[int, ...]
    logp_old: float
    logp_new: float
    advantage: float = 0.0


@dataclass
class Trajectory:
    steps: list[TrajectoryStep]
    reward: float = 0.0


@dataclass
class TrajectoryGroup:
    episode_key: str
    trajectories: list[Trajectory]


def importance_ratio(logp_new: float, logp_old: float) -> float:
    if not (math.isfinite(logp_new) and math.isfinite(logp_old)):
        raise ValueError("log-probabilities must be finite")
    return math.exp(logp_new - logp_old)


def normalize_advantages(rewards: Sequence[float], eps_std: float = 1e-8) -> np.ndarray:
    """Group-normalize rewards to advantages with the population std.

    A flat group (std below eps_std) gets all-zero advantages rather than a
    blow-up.
    """
    arr = np.asarray(rewards, dtype=np.float64)
    if arr.size < 2:
        raise ConfigError("advantage normalization needs a group of >= 2")
    std = float(arr.std())
    if std < eps_std:
        return np.zeros_like(arr)
    return (arr - arr.mean()) / std


def broadcast_advantage(traj: Trajectory, terminal_advantage: float) -> Trajectory:
    """Stage-2 credit assignment: every step inherits the terminal advantage."""
    for step in traj.steps:
        step.advantage = terminal_advantage
    return traj


def _term_and_branch(rho: float, adv: float, eps: float) -> tuple[float, bool]:
    """min(rho*adv, clip(rho)*adv) and whether the unclipped branch is active.

    Ties go to the unclipped branch, matching its gradient (the two branches
    agree there anyway).
    """
    clipped = min(max(rho, 1.0 - eps), 1.0 + eps)
    unclipped_term = rho * adv
    clipped_term = clipped * adv
    if unclipped_term <= clipped_term:
        return unclipped_term, True
    return clipped_term, False


def grpo_loss(groups: Sequence[RolloutGroup], eps_clip: float) -> float:
    """Clipped surrogate averaged over groups; rollout fields must be filled."""
    if not groups:
        raise ValueError("grpo_loss needs at least one group")
    total = 0.0
    for group in groups:
        if not group.rollouts:
            raise ValueError("empty rollout group")
        acc = 0.0
        for rollout in group.rollouts:
            rho = importance_ratio(rollout.logp_new, rollout.logp_old)
            term, _ = _term_and_branch(rho, rollout.advantage, eps_clip)
            acc += term
        total += -acc / len(group.rollouts)
    loss = total / len(groups)
    if not math.isfinite(loss):
        raise ValueError("non-finite loss")
    return loss


def grpo_loss_and_gradient(
    policy: ToyPolicy, groups: Sequence[RolloutGroup], eps_clip: float
) -> tuple[float, np.ndarray, float]:
    """Loss, analytic d loss / d theta at the policy's current theta, and the
    fraction of rollouts whose ratio left the clip window.

    logp_new is recomputed here; the stored logp_old stays fixed. On the
    clipped branch the term is constant in theta, so its gradient is zero.
    """
    if not groups:
        raise ValueError("grpo_loss_and_gradient needs at least one group")
    grad = np.zeros_like(policy.theta)
    total = 0.0
    clipped_terms = 0
    n_terms = 0
    for group in groups:
        if not group.rollouts:
            raise ValueError("empty rollout group")
        g = len(group.rollouts)
        acc = 0.0
        for rollout in group.rollouts:
            logp_new = policy.sequence_logprob(rollout.prompt, rollout.output)
            rollout.logp_new = logp_new
            rho = importance_ratio(logp_new, rollout.logp_old)
            term, unclipped = _term_and_branch(rho, rollout.advantage, eps_clip)
            acc += term
            n_terms += 1
            if not (1.0 - eps_clip <= rho <= 1.0 + eps_clip):
                clipped_terms += 1
            if unclipped and rollout.advantage != 0.0:
                dlogp = policy.logprob_grad(rollout.prompt, rollout.output)
                grad += (-(rollout.advantage * rho) / (g * len(groups))) * dlogp
        total += -acc / g
    loss = total / len(groups)
    if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
        raise ValueError("non-finite loss or gradient")
    return loss, grad, clipped_terms / max(1, n_terms)


def trajectory_loss_and_gradient(
    policy: ToyPolicy, groups: Sequence[TrajectoryGroup], eps_clip: float
) -> tuple[float, np.ndarray, float]:
    """Stage-2 surrogate: per-step clipped terms summed within a trajectory,
    averaged over the group, then over groups. With single-step trajectories
    this equals the stage-1 loss on the same data."""
    if not groups:
        raise ValueError("trajectory loss needs at least one group")
    grad = np.zeros_like(policy.theta)
    total = 0.0
    clipped_terms = 0
    n_terms = 0
    for group in groups:
        if not group.trajectories:
            raise ValueError("empty trajectory group")
        g = len(group.trajectories)
        acc = 0.0
        for traj in group.trajectories:
            if not traj.steps:
                raise ValueError("empty trajectory")
            for step in traj.steps:
                logp_new = policy.sequence_logprob(step.model_input, step.output)
                step.logp_new = logp_new
                rho = importance_ratio(logp_new, step.logp_old)
                term, unclipped = _term_and_branch(rho, step.advantage, eps_clip)
                acc += term
                n_terms += 1
                if not (1.0 - eps_clip <= rho <= 1.0 + eps_clip):
                    clipped_terms += 1
                if unclipped and step.advantage != 0.0:
                    dlogp = policy.logprob_grad(step.model_input, step.output)
                    grad += (-(step.advantage * rho) / (g * len(groups))) * dlogp
        total += -acc / g
    loss = total / len(groups)
    if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
        raise ValueError("non-finite loss or gradient")
    return loss, grad, clipped_terms / max(1, n_terms)


@dataclass(frozen=True)
class ToyTask:
    """Single-shot task: fixed prompt, reward on the sampled output."""

    prompt: tuple[int, ...]
    reward_fn: Callable[[tuple[int, ...]], float]
    output_len: int = 1


@dataclass(frozen=True)
class ToyEpisode:
    """Multi-turn task: per-turn observations, one terminal reward.

    At each turn the model input is the previous turn's output (the bounded
    memory) followed by the turn's observation. The reward function sees the
    tuple of per-turn outputs and is scored once at the end.
    """

    observations: tuple[tuple[int, ...], ...]
    reward_fn: Callable[[tuple[tuple[int, ...], ...]], float]
    step_len: int = 1


def flatten_episode(episode: ToyEpisode) -> ToyTask:
    """Full-history single-shot variant of an episode, for stage-1 training.

    Valid when the episode reward depends only on the final turn's output.
    """
    prompt = tuple(s for obs in episode.observations for s in obs)
    return ToyTask(
        prompt=prompt,
        reward_fn=lambda out: episode.reward_fn((out,)),
        output_len=episode.step_len,
    )


def rollout_episode(
    policy: ToyPolicy, episode: ToyEpisode, rng: np.random.Generator
) -> Trajectory:
    memory: tuple[int, ...] = ()
    steps: list[TrajectoryStep] = []
    for obs in episode.observations:
        model_input = memory + obs
        output = policy.sample(model_input, episode.step_len, rng)
        logp = policy.sequence_logprob(model_input, output)
        steps.append(
            TrajectoryStep(
                observation=obs,
                model_input=model_input,
                output=output,
                logp_old=logp,
                logp_new=logp,
            )
        )
        memory = output
    reward = episode.reward_fn(tuple(s.output for s in steps))
    return Trajectory(steps=steps, reward=reward)


@dataclass
class TrainResult:
    policy: ToyPolicy
    log: list[dict] = field(default_factory=list)


def _log_record(step: int, stage: int, mean_reward: float, loss: float, grad: np.ndarray, clip_fraction: float) -> dict:
    return {
        "step": step,
        "stage": stage,
        "mean_reward": round(mean_reward, 6),
        "loss": round(loss, 8),
        "grad_norm": round(float(np.linalg.norm(grad)), 8),
        "clip_fraction": round(clip_fraction, 6),
    }


def train_stage1(
    policy: ToyPolicy,
    tasks: Sequence[ToyTask],
    cfg: GrpoConfig,
    seed: int = 0,
    on_groups: Optional[Callable[[list[RolloutGroup]], None]] = None,
) -> TrainResult:
    """Single-shot GRPO: G rollouts per task, plain gradient descent.

    theta_old is the snapshot at the top of each step; rollouts sample from
    it, the update lands after the gradient. Any non-finite loss or gradient
    aborts with TrainingDiverged.
    """
    if not tasks:
        raise ConfigError("train_stage1 needs at least one task")
    rng = np.random.Generator(np.random.Philox(seed))
    log: list[dict] = []
    for step in range(cfg.steps):
        groups: list[RolloutGroup] = []
        rewards_all: list[float] = []
        for j in range(cfg.batch):
            task = tasks[(step * cfg.batch + j) % len(tasks)]
            rollouts: list[Rollout] = []
            for _ in range(cfg.group_size):
                output = policy.sample(task.prompt, task.output_len, rng)
                logp = policy.sequence_logprob(task.prompt, output)
                reward = task.reward_fn(output)
                rollouts.append(Rollout(task.prompt, output, logp, logp, reward))
                rewards_all.append(reward)
            advantages = normalize_advantages([r.reward for r in rollouts], cfg.eps_std)
            for rollout, adv in zip(rollouts, advantages):
                rollout.advantage = float(adv)
            groups.append(RolloutGroup(task.prompt, rollouts))
        if on_groups is not None:
            on_groups(groups)
        try:
            loss, grad, clip_fraction = grpo_loss_and_gradient(policy, groups, cfg.eps_clip)
        except ValueError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        policy.theta -= lr_at(cfg, step) * grad
        if not np.all(np.isfinite(policy.theta)):
            raise TrainingDiverged(step, "theta left the finite range")
        log.append(_log_record(step, 1, float(np.mean(rewards_all)), loss, grad, clip_fraction))
    return TrainResult(policy=policy, log=log)


def train_stage2(
    policy: ToyPolicy,
    episodes: Sequence[ToyEpisode],
    cfg: GrpoConfig,
    seed: int = 0,
    on_groups: Optional[Callable[[list[TrajectoryGroup]], None]] = None,
) -> TrainResult:
    """Multi-turn GRPO: terminal reward, trajectory-level advantage broadcast."""
    if not episodes:
        raise ConfigError("train_stage2 needs at least one episode")
    rng = np.random.Generator(np.random.Philox(seed))
    log: list[dict] = []
    for step in range(cfg.steps):
        groups: list[TrajectoryGroup] = []
        rewards_all: list[float] = []
        for j in range(cfg.batch):
            idx = (step * cfg.batch + j) % len(episodes)
            episode = episodes[idx]
            trajectories = [
                rollout_episode(policy, episode, rng) for _ in range(cfg.group_size)
            ]
            rewards = [t.reward for t in trajectories]
            rewards_all.extend(rewards)
            advantages = normalize_advantages(rewards, cfg.eps_std)
            for traj, adv in zip(trajectories, advantages):
                broadcast_advantage(traj, float(adv))
            groups.append(TrajectoryGroup(f"episode-{idx}", trajectories))
        if on_groups is not None:
            on_groups(groups)
        try:
            loss, grad, clip_fraction = trajectory_loss_and_gradient(policy, groups, cfg.eps_clip)
        except ValueError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        policy.theta -= lr_at(cfg, step) * grad
        if not np.all(np.isfinite(policy.theta)):
            raise TrainingDiverged(step, "theta left the finite range")
        log.append(_log_record(step, 2, float(np.mean(rewards_all)), loss, grad, clip_fraction))
    return TrainResult(policy=policy, log=log)


def mean_episode_reward(
    policy: ToyPolicy, episodes: Sequence[ToyEpisode], samples: int = 64, seed: int = 9
) -> float:
    """Monte Carlo mean terminal reward under the policy, fixed eval seed."""
    rng = np.random.Generator(np.random.Philox(seed))
    total = 0.0
    count = 0
    for episode in episodes:
        for _ in range(samples):
            total += rollout_episode(policy, episode, rng).reward
            count += 1
    return total / count


def make_recall_episodes(
    codes: Sequence[int], cue: int, filler: Sequence[int] = ()
) -> list[ToyEpisode]:
    """Two-turn recall: turn 1 shows a code symbol, turn 2 shows the cue and
    the final output must start with the code. Reward is 1 or 0."""
    episodes = []
    for code in codes:
        def reward_fn(outputs: tuple[tuple[int, ...], ...], _code: int = int(code)) -> float:
            return 1.0 if outputs[-1] and outputs[-1][0] == _code else 0.0

        episodes.append(
            ToyEpisode(
                observations=((int(code),) + tuple(filler), (int(cue),)),
                reward_fn=reward_fn,
                step_len=1,
            )
        )
    return episodes


def make_bandit_tasks(targets: Sequence[tuple[int, ...]], prompts: Sequence[tuple[int, ...]]) -> list[ToyTask]:
    """Match-the-target tasks: reward 1 iff the output equals the target."""
    if len(targets) != len(prompts):
        raise ConfigError("one target per prompt")
    tasks = []
    for prompt, target in zip(prompts, targets):
        def reward_fn(out: tuple[int, ...], _target: tuple[int, ...] = tuple(target)) -> float:
            return 1.0 if out == _target else 0.0

        tasks.append(ToyTask(prompt=tuple(prompt), reward_fn=reward_fn, output_len=len(target)))
    return tasks


TOY_DIMS = {"vocab_size": 6, "context_len": 2, "buckets": 32}
TOY_STAGE1 = GrpoConfig(steps=150, batch=8, group_size=8, lr=0.8)
TOY_STAGE2 = GrpoConfig(steps=80, batch=4, group_size=8, lr=0.8, schedule="cosine_with_warmup")


def make_toy_curriculum() -> tuple[list[ToyTask], list[ToyEpisode], dict]:
    """Built-in two-turn recall curriculum plus its stage-1 counterpart.

    Stage 1 sees each turn's mapping as a single-shot task: echo the code,
    and recall it when code and cue are both visible. Stage 2 must compose
    the two through its own one-symbol memory under terminal reward only.
    """
    codes = (0, 1, 2, 3)
    cue = TOY_DIMS["vocab_size"] - 1
    episodes = make_recall_episodes(codes=codes, cue=cue)
    tasks = [flatten_episode(e) for e in episodes]
    tasks += make_bandit_tasks(
        targets=[(c,) for c in codes], prompts=[(c,) for c in codes]
    )
    return tasks, episodes, dict(TOY_DIMS)


CHECKPOINT_VERSION = 1


def save_checkpoint(path: Path, policy: ToyPolicy, cfg: GrpoConfig, seed: int, stage: int) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "vocab_size": policy.vocab_size,
        "context_len": policy.context_len,
        "buckets": policy.buckets,
        "policy_seed": policy.seed,
        "train_seed": seed,
        "stage": stage,
        "config": {
            "eps_clip": cfg.eps_clip,
            "group_size": cfg.group_size,
            "eps_std": cfg.eps_std,
            "lr": cfg.lr,
            "schedule": cfg.schedule,
            "steps": cfg.steps,
            "batch": cfg.batch,
            "warmup_frac": cfg.warmup_frac,
        },
    }
    np.savez(path, theta=policy.theta, meta=np.array(json.dumps(meta, sort_keys=True)))


def load_checkpoint(path: Path) -> tuple[ToyPolicy, GrpoConfig, dict]:
    with np.load(path, allow_pickle=False) as data:
        theta = data["theta"]
        meta = json.loads(str(data["meta"]))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version: {meta.get('version')}")
    policy = ToyPolicy(
        vocab_size=meta["vocab_size"],
        context_len=meta["context_len"],
        buckets=meta["buckets"],
        seed=meta["policy_seed"],
    )
    if theta.shape != policy.theta.shape:
        raise ConfigError("checkpoint theta shape does not match its metadata")
    policy.theta = theta.astype(np.float64)
    cfg = GrpoConfig(**meta["config"])
    return policy, cfg, meta
