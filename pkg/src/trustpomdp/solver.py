"""Trust-aware assistance-seeking policy via a discretised belief MDP.

The POMDP state is ``(T, E, C)`` with hidden trust ``T``.  Planning runs on
the belief MDP with states ``(b, E, C)`` where ``b = P(T = HIGH)`` is
restricted to a uniform grid.  After each transition the updated belief is
split between its two neighbouring grid points with linear-interpolation
weights (``projection="linear"``) or moved to the nearest grid point
(``projection="nearest"``).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as sparse_linalg
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_params, check_probability
from .exceptions import ConfigError, NoDataError, NonConvergenceError
from .model import (
    REFERENCE_ENV,
    Complexity,
    EnvConfig,
    Experience,
    HumanAction,
    ModelParams,
    RobotAction,
    TrustState,
)

logger = logging.getLogger(__name__)

AUTO, ASSIST = RobotAction.AUTO, RobotAction.ASSIST


@dataclass(frozen=True)
class ExperienceModel:
    """``p_reliable[o, C, a] = P(E' = RELIABLE | o, C, a)``."""

    p_reliable: np.ndarray

    def __call__(self, human_action, complexity, action) -> float:
        return float(self.p_reliable[human_action, complexity, action])


def experience_model(env: EnvConfig) -> ExperienceModel:
    p = np.zeros((2, 2, 2))
    p[HumanAction.RELY, Complexity.LOW, AUTO] = env.p_success_low
    p[HumanAction.RELY, Complexity.HIGH, AUTO] = env.p_success_high
    # interruption is faulty; assistance depends on complexity only
    p[HumanAction.INTERRUPT, :, AUTO] = 0.0
    p[:, Complexity.LOW, ASSIST] = 0.0
    p[:, Complexity.HIGH, ASSIST] = 1.0
    p.setflags(write=False)
    return ExperienceModel(p)


def marginal_experience(params: ModelParams, em: ExperienceModel, trust, complexity, action) -> float:
    """``P(E' = RELIABLE | T, C, a)``, marginalising the human action."""
    rely = params.observation[trust, complexity, action]
    return float(em.p_reliable[HumanAction.RELY, complexity, action] * rely
                 + em.p_reliable[HumanAction.INTERRUPT, complexity, action] * (1.0 - rely))


def pomdp_reward(params: ModelParams, em: ExperienceModel, env: EnvConfig, trust, complexity, action) -> float:
    """Expected immediate reward of ``action`` in state ``(T, C)``."""
    if action == ASSIST:
        return float(env.reward_assist)
    rely = params.observation[trust, complexity, AUTO]
    p_ok = em.p_reliable[HumanAction.RELY, complexity, AUTO]
    return float(env.reward_success * p_ok * rely
                 + env.reward_failure * (1.0 - p_ok) * rely
                 + env.reward_interrupt * (1.0 - rely))


@dataclass(frozen=True)
class BeliefGrid:
    n_bins: int = 101

    def __post_init__(self):
        if self.n_bins < 2:
            raise ConfigError("belief grid needs at least 2 bins (0 and 1)")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_bins)

    @property
    def spacing(self) -> float:
        return 1.0 / (self.n_bins - 1)

    def project(self, b):
        """Index of the nearest grid point (halfway points round up)."""
        idx = np.floor(np.asarray(b, dtype=float) * (self.n_bins - 1) + 0.5).astype(np.intp)
        return np.clip(idx, 0, self.n_bins - 1)

    def interpolate(self, b):
        """Neighbouring grid indices ``(lo, lo + 1)`` and the weight of ``lo + 1``."""
        x = np.clip(np.asarray(b, dtype=float), 0.0, 1.0) * (self.n_bins - 1)
        lo = np.clip(np.floor(x).astype(np.intp), 0, self.n_bins - 2)
        return lo, lo + 1, x - lo


def state_index(bin_, experience, complexity):
    return (np.asarray(bin_) * 2 + experience) * 2 + complexity


@dataclass(frozen=True)
class BeliefMdp:
    grid: BeliefGrid
    transitions: tuple  # per action: sparse (S, S) row-stochastic matrix
    rewards: np.ndarray  # (S, A)
    discount: float

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]


def build_belief_mdp(params: ModelParams, env: EnvConfig, grid: BeliefGrid = BeliefGrid(),
                     projection: str = "linear") -> BeliefMdp:
    check_params(params, env)
    if projection not in ("linear", "nearest"):
        raise ConfigError(f"projection must be 'linear' or 'nearest', got {projection!r}")
    em = experience_model(env)
    b = grid.centers
    n = grid.n_bins
    S = 4 * n
    rewards = np.zeros((S, 2))
    transitions = []
    for a in RobotAction:
        rows, cols, vals = [], [], []
        for c in Complexity:
            p_rel = (b * marginal_experience(params, em, TrustState.HIGH, c, a)
                     + (1 - b) * marginal_experience(params, em, TrustState.LOW, c, a))
            r = (b * pomdp_reward(params, em, env, TrustState.HIGH, c, a)
                 + (1 - b) * pomdp_reward(params, em, env, TrustState.LOW, c, a))
            for e_next, p_e in ((Experience.RELIABLE, p_rel), (Experience.FAULTY, 1.0 - p_rel)):
                p_hh = params.trust_transition[TrustState.HIGH, e_next, c, a]
                p_lh = params.trust_transition[TrustState.LOW, e_next, c, a]
                b_next = p_hh * b + p_lh * (1 - b)
                if projection == "linear":
                    lo, hi, w = grid.interpolate(b_next)
                    targets = ((lo, 1.0 - w), (hi, w))
                else:
                    targets = ((grid.project(b_next), 1.0),)
                for c_next in Complexity:
                    p = p_e * env.p_complexity(c_next)
                    for j, w_j in targets:
                        for e in Experience:
                            rows.append(state_index(np.arange(n), e, c))
                            cols.append(state_index(j, e_next, c_next))
                            vals.append(p * w_j)
            for e in Experience:
                rewards[state_index(np.arange(n), e, c), a] = r
        P = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(S, S)
        ).tocsr()
        P.sum_duplicates()
        P.eliminate_zeros()
        row_sums = np.asarray(P.sum(axis=1)).ravel()
        P = sparse.diags(1.0 / row_sums) @ P
        transitions.append(P.tocsr())
    return BeliefMdp(grid, tuple(transitions), rewards, float(env.discount))


@dataclass(frozen=True)
class Policy:
    """Greedy policy of the belief MDP.

    ``actions[bin, E, C]`` and ``values[bin, E, C]`` are indexed like the
    MDP states.  ``thresholds[C]`` is the smallest grid belief at which the
    robot acts autonomously, ``None`` if it never does.
    """

    grid: BeliefGrid
    actions: np.ndarray
    values: np.ndarray
    discount: float
    residuals: tuple = field(default=(), repr=False)

    @property
    def thresholds(self) -> dict:
        out = {}
        for c in Complexity:
            auto = np.flatnonzero((self.actions[:, :, c] == AUTO).any(axis=1))
            out[c] = float(self.grid.centers[auto[0]]) if auto.size else None
        return out

    def is_threshold(self, complexity) -> bool:
        """True if the action switches at most once, from ASSIST to AUTO."""
        col = self.actions[:, :, complexity]
        return bool(np.all(np.diff(col, axis=0) <= 0))

    def is_experience_invariant(self) -> bool:
        return bool(np.array_equal(self.actions[:, 0, :], self.actions[:, 1, :]))

    def action(self, belief, experience, complexity) -> RobotAction:
        return RobotAction(int(self.actions[self.grid.project(belief), experience, complexity]))

    def summary(self) -> list[str]:
        lines = []
        for c, thr in self.thresholds.items():
            col = self.actions[:, :, c]
            if np.all(col == AUTO):
                lines.append(f"C={c}: autonomous for all beliefs")
            elif thr is None:
                lines.append(f"C={c}: seek assistance for all beliefs")
            elif self.is_threshold(c):
                lines.append(f"C={c}: autonomous for belief >= {thr:.2f}, seek assistance below")
            else:
                lines.append(f"C={c}: non-threshold policy, first autonomous belief {thr:.2f}")
        return lines

    def to_dict(self) -> dict:
        rows = []
        centers = self.grid.centers
        for i in range(self.grid.n_bins):
            for e in Experience:
                for c in Complexity:
                    rows.append({
                        "bin": i,
                        "belief": float(centers[i]),
                        "experience": e.token,
                        "complexity": c.token,
                        "action": RobotAction(int(self.actions[i, e, c])).token,
                        "value": float(self.values[i, e, c]),
                    })
        return {
            "grid": {"n_bins": self.grid.n_bins, "spacing": self.grid.spacing},
            "discount": self.discount,
            "thresholds": {c.token: thr for c, thr in self.thresholds.items()},
            "summary": self.summary(),
            "policy": rows,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Policy":
        try:
            grid = BeliefGrid(int(data["grid"]["n_bins"]))
            actions = np.full((grid.n_bins, 2, 2), -1, dtype=np.intp)
            values = np.zeros((grid.n_bins, 2, 2))
            for row in data["policy"]:
                key = (int(row["bin"]), Experience.from_token(row["experience"]),
                       Complexity.from_token(row["complexity"]))
                actions[key] = RobotAction.from_token(row["action"])
                values[key] = float(row.get("value", 0.0))
            discount = float(data["discount"])
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ConfigError(f"policy file: {exc!r}") from None
        if (actions < 0).any():
            raise ConfigError("policy file: incomplete action table")
        return cls(grid, actions, values, discount)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Policy":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        return cls.from_dict(data)


def bellman_q(mdp: BeliefMdp, values: np.ndarray) -> np.ndarray:
    """One Jacobi backup: ``Q[s, a] = R[s, a] + gamma * sum_s' P_a[s, s'] V[s']``."""
    q = mdp.rewards.copy()
    for a, P in enumerate(mdp.transitions):
        q[:, a] += mdp.discount * (P @ values)
    return q


def greedy_actions(q: np.ndarray) -> np.ndarray:
    # exact ties go to the safe action
    return np.where(q[:, AUTO] > q[:, ASSIST], AUTO, ASSIST)


def value_iteration(mdp: BeliefMdp, tol: float = 1e-8, max_iter: int = 100_000) -> Policy:
    if not 0.0 <= mdp.discount < 1.0:
        raise ConfigError(f"discount must lie in [0, 1), got {mdp.discount}")
    values = np.zeros(mdp.n_states)
    residuals = []
    for _ in range(max_iter):
        new = bellman_q(mdp, values).max(axis=1)
        delta = float(np.max(np.abs(new - values)))
        residuals.append(delta)
        values = new
        if delta < tol:
            break
    else:
        raise NonConvergenceError(f"value iteration did not reach tol={tol} in {max_iter} sweeps")
    actions = greedy_actions(bellman_q(mdp, values))
    n = mdp.grid.n_bins
    logger.debug("value iteration converged after %d sweeps", len(residuals))
    return Policy(mdp.grid, actions.reshape(n, 2, 2), values.reshape(n, 2, 2),
                  mdp.discount, tuple(residuals))


def policy_evaluation(mdp: BeliefMdp, actions: np.ndarray) -> np.ndarray:
    """Exact value of a deterministic policy by a direct linear solve."""
    actions = np.asarray(actions).reshape(-1)
    S = mdp.n_states
    P = sparse.lil_matrix((S, S))
    r = np.empty(S)
    for s in range(S):
        a = int(actions[s])
        P[s] = mdp.transitions[a][s]
        r[s] = mdp.rewards[s, a]
    A = sparse.identity(S, format="csc") - mdp.discount * P.tocsc()
    return sparse_linalg.spsolve(A, r)


def solve(params: ModelParams, env: EnvConfig = REFERENCE_ENV, n_bins: int = 101,
          tol: float = 1e-8, discount: float | None = None, projection: str = "linear") -> Policy:
    if discount is not None:
        env = env.replace(discount=discount)
    return value_iteration(build_belief_mdp(params, env, BeliefGrid(n_bins), projection), tol)


# -- trust-agnostic baseline -------------------------------------------------------

@dataclass(frozen=True)
class BaselineResult:
    expected: dict  # (RobotAction, Complexity) -> expected reward
    policy: dict  # Complexity -> RobotAction


def trust_agnostic_baseline(interrupt_prob_low: float, interrupt_prob_high: float,
                            env: EnvConfig = REFERENCE_ENV) -> BaselineResult:
    """Expected reward per action when only the complexity is known."""
    q = {Complexity.LOW: check_probability(interrupt_prob_low, "interrupt_prob_low"),
         Complexity.HIGH: check_probability(interrupt_prob_high, "interrupt_prob_high")}
    expected = {}
    policy = {}
    for c in Complexity:
        p = env.p_success(c)
        rely = 1.0 - q[c]
        expected[(AUTO, c)] = (env.reward_success * rely * p + env.reward_failure * rely * (1 - p)
                               + env.reward_interrupt * q[c])
        expected[(ASSIST, c)] = float(env.reward_assist)
        policy[c] = AUTO if expected[(AUTO, c)] > expected[(ASSIST, c)] else ASSIST
    return BaselineResult(expected, policy)


@dataclass(frozen=True)
class InterruptEstimate:
    q_low: float
    q_high: float
    counts: dict  # Complexity -> (interrupts, autonomous trials)


def empirical_interrupt_probs(dataset) -> InterruptEstimate:
    counts = {c: [0, 0] for c in Complexity}
    for ep in dataset:
        for rec in ep:
            if rec.robot_action == AUTO:
                counts[rec.complexity][1] += 1
                counts[rec.complexity][0] += rec.human_action == HumanAction.INTERRUPT
    for c in Complexity:
        if counts[c][1] == 0:
            raise NoDataError(c.token)
    q = {c: counts[c][0] / counts[c][1] for c in Complexity}
    return InterruptEstimate(q[Complexity.LOW], q[Complexity.HIGH],
                             {c: tuple(v) for c, v in counts.items()})


# -- estimator --------------------------------------------------------------------

class BeliefMDPPlanner(BaseEstimator):
    """Value-iteration planner with an estimator interface.

    ``fit(params, env)`` solves the belief MDP; ``predict(X)`` maps rows of
    ``(belief, experience, complexity)`` to robot actions.
    """

    def __init__(self, n_bins=101, discount=None, tol=1e-8, max_iter=100_000, projection="linear"):
        self.n_bins = n_bins
        self.discount = discount
        self.tol = tol
        self.max_iter = max_iter
        self.projection = projection

    def fit(self, params: ModelParams, env: EnvConfig = REFERENCE_ENV):
        if self.discount is not None:
            env = env.replace(discount=self.discount)
        self.mdp_ = build_belief_mdp(params, env, BeliefGrid(self.n_bins), self.projection)
        self.policy_ = value_iteration(self.mdp_, self.tol, self.max_iter)
        self.thresholds_ = self.policy_.thresholds
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "policy_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != 3:
            raise ValueError("X must have columns (belief, experience, complexity)")
        idx = self.policy_.grid.project(X[:, 0])
        return self.policy_.actions[idx, X[:, 1].astype(np.intp), X[:, 2].astype(np.intp)]

    def value(self, X) -> np.ndarray:
        check_is_fitted(self, "policy_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        idx = self.policy_.grid.project(X[:, 0])
        return self.policy_.values[idx, X[:, 1].astype(np.intp), X[:, 2].astype(np.intp)]
