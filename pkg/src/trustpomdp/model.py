"""Domain enumerations, trial records and parameter containers.

Probability tables are dense ``float64`` arrays indexed by the integer
values of the enums below::

    trust_transition[T, E', C, a] = P(T' = HIGH | T, E', C, a)
    observation[T, C, a]          = P(o = RELY | T, C, a)

The complementary probabilities are implied and never stored.
"""
from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .exceptions import ConfigError, InconsistentRecordError


class _TokenEnum(IntEnum):
    """IntEnum serialised as its lowercase member name."""

    @property
    def token(self) -> str:
        return self.name.lower()

    @classmethod
    def from_token(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            allowed = "/".join(m.token for m in cls)
            raise ConfigError(f"{cls.__name__}: expected one of {allowed}, got {value!r}") from None

    def __str__(self):
        return self.token


class TrustState(_TokenEnum):
    HIGH = 0
    LOW = 1


class Complexity(_TokenEnum):
    LOW = 0
    HIGH = 1


class RobotAction(_TokenEnum):
    AUTO = 0  # attempt the collection autonomously
    ASSIST = 1  # hand the trial to the supervisor for teleoperation


class HumanAction(_TokenEnum):
    RELY = 0
    INTERRUPT = 1


class Experience(_TokenEnum):
    RELIABLE = 0
    FAULTY = 1


@dataclass(frozen=True)
class EnvConfig:
    """Environment stochastics and reward constants."""

    p_complex_high: float = 30 / 71
    p_success_low: float = 0.97
    p_success_high: float = 0.75
    reward_success: float = 3
    reward_assist: float = 1
    reward_interrupt: float = 0
    reward_failure: float = -4
    discount: float = 0.99

    def p_success(self, complexity: Complexity) -> float:
        return self.p_success_high if complexity == Complexity.HIGH else self.p_success_low

    def p_complexity(self, complexity: Complexity) -> float:
        return self.p_complex_high if complexity == Complexity.HIGH else 1.0 - self.p_complex_high

    def replace(self, **changes) -> "EnvConfig":
        return dataclasses.replace(self, **changes)

    def scaled_rewards(self, factor: float) -> "EnvConfig":
        return self.replace(
            reward_success=self.reward_success * factor,
            reward_assist=self.reward_assist * factor,
            reward_interrupt=self.reward_interrupt * factor,
            reward_failure=self.reward_failure * factor,
        )

    def violations(self) -> list[str]:
        out = []
        for name in ("p_complex_high", "p_success_low", "p_success_high"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                out.append(f"env.{name}={value!r} outside [0, 1]")
        # gamma = 0 is allowed: it yields the myopic policy
        if not 0.0 <= self.discount < 1.0:
            out.append(f"env.discount={self.discount!r} outside [0, 1)")
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EnvConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"env: unknown field(s) {sorted(unknown)}")
        try:
            return cls(**{k: float(v) for k, v in data.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"env: {exc}") from None


def _frozen_array(values, shape) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.shape != shape:
        raise ConfigError(f"expected table of shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Probability tables of the trust IOHMM."""

    initial_trust_high: float
    trust_transition: np.ndarray = field(repr=False)
    observation: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "initial_trust_high", float(self.initial_trust_high))
        object.__setattr__(self, "trust_transition", _frozen_array(self.trust_transition, (2, 2, 2, 2)))
        object.__setattr__(self, "observation", _frozen_array(self.observation, (2, 2, 2)))

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.initial_trust_high == other.initial_trust_high
            and np.array_equal(self.trust_transition, other.trust_transition)
            and np.array_equal(self.observation, other.observation)
        )

    __hash__ = None

    def p_high_next(self, trust, experience_next, complexity, action) -> float:
        return float(self.trust_transition[trust, experience_next, complexity, action])

    def p_rely(self, trust, complexity, action) -> float:
        return float(self.observation[trust, complexity, action])

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        transitions = [
            {
                "trust": TrustState(t).token,
                "experience": Experience(e).token,
                "complexity": Complexity(c).token,
                "action": RobotAction(a).token,
                "p_high": float(self.trust_transition[t, e, c, a]),
            }
            for t, e, c, a in itertools.product(range(2), repeat=4)
        ]
        observations = [
            {
                "trust": TrustState(t).token,
                "complexity": Complexity(c).token,
                "action": RobotAction(a).token,
                "p_rely": float(self.observation[t, c, a]),
            }
            for t, c, a in itertools.product(range(2), repeat=3)
        ]
        return {
            "initial_trust_high": self.initial_trust_high,
            "trust_transition": transitions,
            "observation": observations,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        try:
            transition = np.full((2, 2, 2, 2), np.nan)
            for i, row in enumerate(data["trust_transition"]):
                key = (
                    TrustState.from_token(row["trust"]),
                    Experience.from_token(row["experience"]),
                    Complexity.from_token(row["complexity"]),
                    RobotAction.from_token(row["action"]),
                )
                transition[key] = float(row["p_high"])
            observation = np.full((2, 2, 2), np.nan)
            for row in data["observation"]:
                key = (
                    TrustState.from_token(row["trust"]),
                    Complexity.from_token(row["complexity"]),
                    RobotAction.from_token(row["action"]),
                )
                observation[key] = float(row["p_rely"])
            initial = float(data["initial_trust_high"])
        except KeyError as exc:
            raise ConfigError(f"params: missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"params: {exc}") from None
        if np.isnan(transition).any():
            missing = [str(tuple(int(i) for i in idx)) for idx in np.argwhere(np.isnan(transition))]
            raise ConfigError("params: trust_transition missing entries " + ", ".join(missing))
        if np.isnan(observation).any():
            missing = [str(tuple(int(i) for i in idx)) for idx in np.argwhere(np.isnan(observation))]
            raise ConfigError("params: observation missing entries " + ", ".join(missing))
        return cls(initial, transition, observation)


def _reference_tables():
    T, E, C, A = TrustState, Experience, Complexity, RobotAction
    tr = np.zeros((2, 2, 2, 2))
    # (E', C, a): (P(T'=H | T=H), P(T'=H | T=L))
    table = {
        (E.RELIABLE, C.LOW, A.AUTO): (1.00, 0.00),
        (E.FAULTY, C.LOW, A.AUTO): (0.71, 0.00),
        (E.FAULTY, C.LOW, A.ASSIST): (1.00, 0.00),
        (E.RELIABLE, C.HIGH, A.AUTO): (1.00, 0.64),
        (E.FAULTY, C.HIGH, A.AUTO): (0.67, 0.12),
        (E.RELIABLE, C.HIGH, A.ASSIST): (1.00, 0.13),
        # never realised: assistance is faulty in low and reliable in high
        # complexity; mirror the realised outcome for the same (C, a)
        (E.RELIABLE, C.LOW, A.ASSIST): (1.00, 0.00),
        (E.FAULTY, C.HIGH, A.ASSIST): (1.00, 0.13),
    }
    for (e, c, a), (from_high, from_low) in table.items():
        tr[T.HIGH, e, c, a] = from_high
        tr[T.LOW, e, c, a] = from_low
    obs = np.zeros((2, 2, 2))
    obs[T.HIGH, C.LOW, A.AUTO] = 1.00
    obs[T.LOW, C.LOW, A.AUTO] = 0.97
    obs[T.HIGH, C.HIGH, A.AUTO] = 0.94
    obs[T.LOW, C.HIGH, A.AUTO] = 0.43
    return tr, obs


_REF_TRANSITION, _REF_OBSERVATION = _reference_tables()

#: Fitted values reported for the 33-participant study.
REFERENCE_PARAMS = ModelParams(0.82, _REF_TRANSITION, _REF_OBSERVATION)
REFERENCE_ENV = EnvConfig()
#: Assistance probabilities of the data-collection policy, per complexity.
DATA_COLLECTION_ASSIST = {Complexity.LOW: 0.10, Complexity.HIGH: 0.33}
DATA_COLLECTION_TRIALS = 71
DATA_COLLECTION_EPISODES = 33


def validate_params(params: ModelParams, env: EnvConfig | None = None) -> list[str]:
    """Return a list of invariant violations, empty when ``params`` is valid."""
    out = []
    p0 = params.initial_trust_high
    if not 0.0 <= p0 <= 1.0 or np.isnan(p0):
        out.append(f"initial_trust_high={p0!r} outside [0, 1]")
    for idx in itertools.product(range(2), repeat=4):
        v = params.trust_transition[idx]
        if not 0.0 <= v <= 1.0:
            t, e, c, a = idx
            out.append(
                f"trust_transition[{TrustState(t)},{Experience(e)},{Complexity(c)},{RobotAction(a)}]"
                f"={v!r} outside [0, 1]"
            )
    for idx in itertools.product(range(2), repeat=3):
        v = params.observation[idx]
        t, c, a = idx
        label = f"observation[{TrustState(t)},{Complexity(c)},{RobotAction(a)}]"
        if not 0.0 <= v <= 1.0:
            out.append(f"{label}={v!r} outside [0, 1]")
        elif a == RobotAction.ASSIST and v != 0.0:
            out.append(f"{label}={v!r}: supervisor must teleoperate when assistance is requested")
    if env is not None:
        out.extend(env.violations())
    return out


@dataclass(frozen=True)
class TrialRecord:
    episode_id: str
    t: int
    complexity: Complexity
    robot_action: RobotAction
    human_action: HumanAction
    experience: Experience
    reward: float

    def to_dict(self) -> dict:
        reward = self.reward
        if float(reward).is_integer():
            reward = int(reward)
        return {
            "episode_id": self.episode_id,
            "t": self.t,
            "complexity": self.complexity.token,
            "robot_action": self.robot_action.token,
            "human_action": self.human_action.token,
            "experience": self.experience.token,
            "reward": reward,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrialRecord":
        try:
            return cls(
                episode_id=str(data["episode_id"]),
                t=int(data["t"]),
                complexity=Complexity.from_token(data["complexity"]),
                robot_action=RobotAction.from_token(data["robot_action"]),
                human_action=HumanAction.from_token(data["human_action"]),
                experience=Experience.from_token(data["experience"]),
                reward=data["reward"],
            )
        except KeyError as exc:
            raise ConfigError(f"trial record: missing field {exc}") from None


def record_violations(rec: TrialRecord, env: EnvConfig = REFERENCE_ENV) -> list[str]:
    """Consistency checks on a single record (action, experience, reward)."""
    out = []
    A, H, E = RobotAction, HumanAction, Experience
    if rec.robot_action == A.ASSIST:
        if rec.human_action != H.INTERRUPT:
            out.append("assistance requested but supervisor relied")
        expected_e = E.RELIABLE if rec.complexity == Complexity.HIGH else E.FAULTY
        if rec.experience != expected_e:
            out.append(f"assistance in {rec.complexity} complexity must be {expected_e}")
        expected_r = env.reward_assist
    elif rec.human_action == H.INTERRUPT:
        if rec.experience != E.FAULTY:
            out.append("interruption must be labelled faulty")
        expected_r = env.reward_interrupt
    else:
        expected_r = env.reward_success if rec.experience == E.RELIABLE else env.reward_failure
    if rec.reward != expected_r:
        out.append(f"reward {rec.reward!r} inconsistent with outcome (expected {expected_r!r})")
    return out


def check_record(rec: TrialRecord, env: EnvConfig = REFERENCE_ENV) -> TrialRecord:
    problems = record_violations(rec, env)
    if problems:
        raise InconsistentRecordError(f"episode {rec.episode_id} trial {rec.t}: " + "; ".join(problems))
    return rec


# -- files ------------------------------------------------------------------

def save_params(path, params: ModelParams, env: EnvConfig | None = None) -> None:
    data = params.to_dict()
    if env is not None:
        data["env"] = env.to_dict()
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def load_params(path) -> tuple[ModelParams, EnvConfig | None]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    env = EnvConfig.from_dict(data["env"]) if "env" in data else None
    return ModelParams.from_dict(data), env


def load_env(path) -> EnvConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if isinstance(data, dict) and "env" in data and "trust_transition" in data:
        data = data["env"]
    return EnvConfig.from_dict(data)


def iter_trial_log(path) -> Iterator[TrialRecord]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield TrialRecord.from_dict(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: line {lineno}: {exc.msg}") from None
            except ConfigError as exc:
                raise ConfigError(f"{path}: line {lineno}: {exc}") from None


def group_episodes(records: Iterable[TrialRecord]) -> list[list[TrialRecord]]:
    """Group records by ``episode_id`` in order of first appearance, sorted by ``t``."""
    groups: dict[str, list[TrialRecord]] = {}
    for rec in records:
        groups.setdefault(rec.episode_id, []).append(rec)
    return [sorted(g, key=lambda r: r.t) for g in groups.values()]


def read_trial_log(path) -> list[list[TrialRecord]]:
    return group_episodes(iter_trial_log(path))


def write_trial_log(path, episodes: Iterable[Iterable[TrialRecord]]) -> None:
    with open(path, "w") as fh:
        for episode in episodes:
            for rec in episode:
                fh.write(json.dumps(rec.to_dict(), separators=(",", ":")) + "\n")
