"""Independent reference computations used by the tests.

Nothing here imports the inference code: the oracles work from the
parameter tables and the records alone.
"""
import itertools
import math

import numpy as np
from hypothesis import strategies as st

from trustpomdp.model import (
    REFERENCE_ENV,
    Complexity,
    Experience,
    HumanAction,
    ModelParams,
    RobotAction,
    TrialRecord,
)

H, L = 0, 1


def _p_obs(params, trust, rec):
    rely = params.observation[trust, rec.complexity, rec.robot_action]
    return rely if rec.human_action == HumanAction.RELY else 1.0 - rely


def _p_trans(params, trust, nxt, rec):
    ph = params.trust_transition[trust, rec.experience, rec.complexity, rec.robot_action]
    return ph if nxt == H else 1.0 - ph


def path_weight(params, episode, path, n_obs):
    """P(T_0..T_k = path, o_0..o_{n_obs-1}) with ``len(path) - 1`` transitions."""
    w = params.initial_trust_high if path[0] == H else 1.0 - params.initial_trust_high
    for t in range(len(path)):
        if t < n_obs:
            w *= _p_obs(params, path[t], episode[t])
        if t + 1 < len(path):
            w *= _p_trans(params, path[t], path[t + 1], episode[t])
    return w


def enumerate_filter(params, episode):
    """Brute-force predicted beliefs b_t, filtered posteriors and log-likelihood."""
    n = len(episode)
    beliefs = [params.initial_trust_high]
    posteriors = []
    for t in range(n):
        num = den = 0.0
        for path in itertools.product((H, L), repeat=t + 1):
            w = path_weight(params, episode, path, t + 1)
            den += w
            num += w if path[-1] == H else 0.0
        posteriors.append(num / den)
        num = den = 0.0
        for path in itertools.product((H, L), repeat=t + 2):
            w = path_weight(params, episode, path, t + 1)
            den += w
            num += w if path[-1] == H else 0.0
        beliefs.append(num / den)
    total = sum(path_weight(params, episode, p, n) for p in itertools.product((H, L), repeat=max(n, 1)))
    return np.array(beliefs), np.array(posteriors), (math.log(total) if n else 0.0)


def enumerate_smoothing(params, episode):
    n = len(episode)
    gamma = np.zeros((n, 2))
    xi = np.zeros((max(n - 1, 0), 2, 2))
    total = 0.0
    for path in itertools.product((H, L), repeat=n):
        w = path_weight(params, episode, path, n)
        total += w
        for t in range(n):
            gamma[t, path[t]] += w
        for t in range(n - 1):
            xi[t, path[t], path[t + 1]] += w
    return gamma / total, xi / total, math.log(total)


def always_auto_low_reward(params, env, n_trials):
    """Exact expected reward per trial of AlwaysAutonomous on an all-Low schedule.

    Propagates the trust distribution; the reward only depends on the
    current trust through the reliance probability.
    """
    c, a = Complexity.LOW, RobotAction.AUTO
    p = env.p_success_low
    per_trust = [params.observation[t, c, a] * (env.reward_success * p + env.reward_failure * (1 - p))
                 + (1 - params.observation[t, c, a]) * env.reward_interrupt for t in (H, L)]
    b = params.initial_trust_high
    total = 0.0
    for _ in range(n_trials):
        total += b * per_trust[H] + (1 - b) * per_trust[L]
        nxt = 0.0
        for t, mass in ((H, b), (L, 1 - b)):
            rely = params.observation[t, c, a]
            p_rel = rely * p
            p_fault = 1 - p_rel
            nxt += mass * (p_rel * params.trust_transition[t, Experience.RELIABLE, c, a]
                           + p_fault * params.trust_transition[t, Experience.FAULTY, c, a])
        b = nxt
    return total / n_trials


def pooled_t_by_quadrature(xs, ys):
    """Pooled t statistic and a two-sided p from numerically integrating the t density."""
    from scipy import integrate, special

    x, y = np.asarray(xs, float), np.asarray(ys, float)
    nx, ny = len(x), len(y)
    df = nx + ny - 2
    sp2 = (((x - x.mean()) ** 2).sum() + ((y - y.mean()) ** 2).sum()) / df
    t = (x.mean() - y.mean()) / math.sqrt(sp2 * (1 / nx + 1 / ny))
    const = math.exp(special.gammaln((df + 1) / 2) - special.gammaln(df / 2)) / math.sqrt(df * math.pi)

    def density(u):
        return const * (1 + u * u / df) ** (-(df + 1) / 2)

    tail, _ = integrate.quad(density, abs(t), np.inf, epsabs=1e-13, epsrel=1e-13)
    return t, 2 * tail


# -- hypothesis strategies -----------------------------------------------------

probability = st.floats(0.0, 1.0, allow_nan=False)
inner_probability = st.floats(0.02, 0.98, allow_nan=False)


@st.composite
def model_params(draw, elements=inner_probability):
    initial = draw(elements)
    tr = np.array(draw(st.lists(elements, min_size=16, max_size=16))).reshape(2, 2, 2, 2)
    obs = np.array(draw(st.lists(elements, min_size=8, max_size=8))).reshape(2, 2, 2)
    obs[:, :, RobotAction.ASSIST] = 0.0
    return ModelParams(initial, tr, obs)


def make_record(complexity, action, rely, success, t=0, episode_id="e", env=REFERENCE_ENV):
    """A consistent record built directly from the labelling rules."""
    complexity, action = Complexity(complexity), RobotAction(action)
    if action == RobotAction.ASSIST:
        human = HumanAction.INTERRUPT
        exp = Experience.RELIABLE if complexity == Complexity.HIGH else Experience.FAULTY
        reward = env.reward_assist
    elif not rely:
        human, exp, reward = HumanAction.INTERRUPT, Experience.FAULTY, env.reward_interrupt
    else:
        human = HumanAction.RELY
        exp = Experience.RELIABLE if success else Experience.FAULTY
        reward = env.reward_success if success else env.reward_failure
    return TrialRecord(episode_id, t, complexity, action, human, exp, reward)


@st.composite
def episodes(draw, min_size=0, max_size=10, episode_id="e"):
    n = draw(st.integers(min_size, max_size))
    recs = []
    for t in range(n):
        recs.append(make_record(draw(st.integers(0, 1)), draw(st.integers(0, 1)),
                                draw(st.booleans()), draw(st.booleans()), t, episode_id))
    return recs


def random_episode(rng, n, episode_id="e"):
    return [make_record(rng.integers(2), rng.integers(2), rng.random() < 0.7, rng.random() < 0.8, t, episode_id)
            for t in range(n)]
