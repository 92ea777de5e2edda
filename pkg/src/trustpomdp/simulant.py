"""Closed-loop simulation of a supervisor driven by the trust IOHMM.

Randomness is split into independent streams per episode (complexity,
policy, human action, task outcome, trust transition, initial trust), all
spawned from the episode seed.  Two policies run with the same episode
seed therefore face the same complexity sequence.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from joblib import Parallel, delayed

from . import iohmm
from ._validation import check_params, check_probability
from .exceptions import ConfigError, InconsistentRecordError, MissingOutcomeError
from .model import (
    Complexity,
    EnvConfig,
    Experience,
    HumanAction,
    ModelParams,
    RobotAction,
    TrialRecord,
    TrustState,
)


def label_experience(action, human_action, complexity, autonomous_success=None) -> Experience:
    """Experience the supervisor draws from one trial."""
    if action == RobotAction.AUTO and human_action == HumanAction.RELY:
        if autonomous_success is None:
            raise MissingOutcomeError("autonomous attempt without a recorded outcome")
        return Experience.RELIABLE if autonomous_success else Experience.FAULTY
    if autonomous_success is not None:
        raise InconsistentRecordError("outcome given for a trial without an autonomous attempt")
    if action == RobotAction.AUTO:
        # the supervisor interrupted, expecting a failure
        return Experience.FAULTY
    return Experience.RELIABLE if complexity == Complexity.HIGH else Experience.FAULTY


def trial_reward(action, human_action, experience, env: EnvConfig):
    if action == RobotAction.ASSIST:
        if human_action != HumanAction.INTERRUPT:
            raise InconsistentRecordError("supervisor cannot rely on the robot after an assistance request")
        return env.reward_assist
    if human_action == HumanAction.INTERRUPT:
        if experience != Experience.FAULTY:
            raise InconsistentRecordError("an interrupted trial is always faulty")
        return env.reward_interrupt
    return env.reward_success if experience == Experience.RELIABLE else env.reward_failure


class TrialStreams(NamedTuple):
    human: np.random.Generator
    outcome: np.random.Generator
    trust: np.random.Generator


def step(params: ModelParams, env: EnvConfig, trust, complexity, action, rng,
         *, episode_id: str = "", t: int = 0) -> tuple[TrialRecord, TrustState]:
    """Simulate one trial and the supervisor's trust transition.

    ``rng`` is either a single generator or a :class:`TrialStreams`.
    """
    streams = rng if isinstance(rng, TrialStreams) else TrialStreams(rng, rng, rng)
    trust, complexity, action = TrustState(trust), Complexity(complexity), RobotAction(action)
    rely = streams.human.random() < params.observation[trust, complexity, action]
    human_action = HumanAction.RELY if rely else HumanAction.INTERRUPT
    success = None
    if action == RobotAction.AUTO and rely:
        success = bool(streams.outcome.random() < env.p_success(complexity))
    experience = label_experience(action, human_action, complexity, success)
    reward = trial_reward(action, human_action, experience, env)
    p_high = params.trust_transition[trust, experience, complexity, action]
    next_trust = TrustState.HIGH if streams.trust.random() < p_high else TrustState.LOW
    record = TrialRecord(episode_id, t, complexity, action, human_action, experience, reward)
    return record, next_trust


# -- robot policies --------------------------------------------------------------

class RobotPolicy:
    """Base class: maps (belief, previous experience, complexity) to an action."""

    needs_belief = False

    def action(self, belief, experience, complexity, rng) -> RobotAction:
        raise NotImplementedError

    def spec(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class StaticPolicy(RobotPolicy):
    """Seek assistance with a fixed probability per complexity."""

    p_assist_low: float
    p_assist_high: float

    def __post_init__(self):
        check_probability(self.p_assist_low, "p_assist_low")
        check_probability(self.p_assist_high, "p_assist_high")

    def action(self, belief, experience, complexity, rng):
        p = self.p_assist_high if complexity == Complexity.HIGH else self.p_assist_low
        return RobotAction.ASSIST if rng.random() < p else RobotAction.AUTO

    def spec(self):
        return f"static:{self.p_assist_low!r},{self.p_assist_high!r}"


class AlwaysAutonomous(RobotPolicy):
    def action(self, belief, experience, complexity, rng):
        return RobotAction.AUTO

    def spec(self):
        return "always-auto"

    def __eq__(self, other):
        return type(other) is type(self)

    __hash__ = object.__hash__


class AlwaysAssist(RobotPolicy):
    def action(self, belief, experience, complexity, rng):
        return RobotAction.ASSIST

    def spec(self):
        return "always-assist"

    def __eq__(self, other):
        return type(other) is type(self)

    __hash__ = object.__hash__


@dataclass(frozen=True)
class ThresholdPolicy(RobotPolicy):
    """Trust-aware policy driven by a solved belief-MDP policy.

    ``policy`` is anything with an ``action(belief, experience, complexity)``
    method, normally :class:`trustpomdp.solver.Policy`.
    """

    policy: object
    source: str = ""
    needs_belief = True

    def action(self, belief, experience, complexity, rng):
        return RobotAction(self.policy.action(belief, experience, complexity))

    def spec(self):
        return f"threshold:{self.source}" if self.source else "threshold"


@dataclass(frozen=True)
class BeliefThresholdPolicy(RobotPolicy):
    """Act autonomously when the belief reaches a per-complexity threshold.

    ``None`` disables autonomy in that complexity.
    """

    threshold_low: float | None
    threshold_high: float | None
    needs_belief = True

    def action(self, belief, experience, complexity, rng):
        thr = self.threshold_high if complexity == Complexity.HIGH else self.threshold_low
        return RobotAction.AUTO if thr is not None and belief >= thr else RobotAction.ASSIST

    def spec(self):
        return f"belief-threshold:{self.threshold_low},{self.threshold_high}"


def policy_from_spec(spec: str) -> RobotPolicy:
    """Parse ``static:pL,pH``, ``threshold:policy.json``, ``always-auto`` or ``always-assist``."""
    spec = spec.strip()
    if spec == "always-auto":
        return AlwaysAutonomous()
    if spec == "always-assist":
        return AlwaysAssist()
    kind, _, arg = spec.partition(":")
    if kind == "static":
        parts = arg.split(",")
        if len(parts) != 2:
            raise ConfigError(f"policy {spec!r}: expected static:pL,pH")
        try:
            return StaticPolicy(float(parts[0]), float(parts[1]))
        except ValueError:
            raise ConfigError(f"policy {spec!r}: probabilities must be numbers") from None
    if kind == "threshold":
        from .solver import Policy

        if not arg:
            raise ConfigError("policy 'threshold:' needs a policy JSON path")
        return ThresholdPolicy(Policy.load(arg), source=arg)
    raise ConfigError(f"unknown policy spec {spec!r}")


# -- episodes -------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeConfig:
    """One simulated episode.

    ``complexity`` is ``"iid"`` (drawn with ``env.p_complex_high``) or a fixed
    schedule of length ``n_trials``.  ``initial_trust`` of ``None`` samples
    the starting trust from the model prior.
    """

    n_trials: int = 71
    complexity: str | Sequence = "iid"
    initial_trust: TrustState | None = None
    seed: int = 0
    episode_id: str = "ep0000"
    initial_experience: Experience = Experience.RELIABLE

    def __post_init__(self):
        if self.n_trials < 0:
            raise ConfigError("n_trials must be nonnegative")
        if not isinstance(self.complexity, str):
            schedule = tuple(Complexity.from_token(c) for c in self.complexity)
            if len(schedule) != self.n_trials:
                raise ConfigError(
                    f"complexity schedule has {len(schedule)} entries, expected {self.n_trials}"
                )
            object.__setattr__(self, "complexity", schedule)
        elif self.complexity != "iid":
            raise ConfigError(f"complexity mode must be 'iid' or a schedule, got {self.complexity!r}")
        if self.initial_trust is not None:
            object.__setattr__(self, "initial_trust", TrustState.from_token(self.initial_trust))

    def to_dict(self) -> dict:
        return {
            "n_trials": self.n_trials,
            "complexity": self.complexity if isinstance(self.complexity, str) else [c.token for c in self.complexity],
            "initial_trust": None if self.initial_trust is None else self.initial_trust.token,
            "seed": self.seed,
            "episode_id": self.episode_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EpisodeConfig":
        known = {"n_trials", "complexity", "initial_trust", "seed", "episode_id"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"episode config: unknown field(s) {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "EpisodeConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None


def episode_seed(master_seed: int, index: int) -> int:
    """Seed of episode ``index``; independent of how episodes are scheduled."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0])


def _streams(seed: int) -> dict:
    names = ("complexity", "policy", "human", "outcome", "trust", "initial")
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def run_episode(params: ModelParams, env: EnvConfig, policy: RobotPolicy,
                cfg: EpisodeConfig) -> list[TrialRecord]:
    rngs = _streams(cfg.seed)
    trial_streams = TrialStreams(rngs["human"], rngs["outcome"], rngs["trust"])
    if cfg.initial_trust is None:
        high = rngs["initial"].random() < params.initial_trust_high
        trust = TrustState.HIGH if high else TrustState.LOW
    else:
        trust = cfg.initial_trust
    belief = params.initial_trust_high
    experience = cfg.initial_experience
    records = []
    for t in range(cfg.n_trials):
        if isinstance(cfg.complexity, str):
            high = rngs["complexity"].random() < env.p_complex_high
            complexity = Complexity.HIGH if high else Complexity.LOW
        else:
            complexity = cfg.complexity[t]
        action = policy.action(belief, experience, complexity, rngs["policy"])
        rec, trust = step(params, env, trust, complexity, action, trial_streams,
                          episode_id=cfg.episode_id, t=t)
        if policy.needs_belief:
            belief = iohmm.filter_step(params, belief, rec)
        experience = rec.experience
        records.append(rec)
    return records


def simulate_dataset(params: ModelParams, env: EnvConfig, policy: RobotPolicy, n_episodes: int,
                     n_trials: int, seed: int, *, complexity="iid", n_jobs=None,
                     id_prefix: str = "ep") -> list[list[TrialRecord]]:
    """Simulate ``n_episodes`` independent episodes; episode ``i`` uses
    :func:`episode_seed` ``(seed, i)`` so the result does not depend on ``n_jobs``."""
    check_params(params, env)
    configs = [
        EpisodeConfig(n_trials, complexity, None, episode_seed(seed, i), f"{id_prefix}{i:04d}")
        for i in range(n_episodes)
    ]
    return Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(run_episode)(params, env, policy, cfg) for cfg in configs
    )


__all__ = [
    "AlwaysAssist",
    "AlwaysAutonomous",
    "BeliefThresholdPolicy",
    "EpisodeConfig",
    "RobotPolicy",
    "StaticPolicy",
    "ThresholdPolicy",
    "TrialStreams",
    "episode_seed",
    "label_experience",
    "policy_from_spec",
    "run_episode",
    "simulate_dataset",
    "step",
    "trial_reward",
]
