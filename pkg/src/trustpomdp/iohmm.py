"""Inference and learning for the binary-trust IOHMM.

The hidden state is the supervisor's trust ``T_t``; inputs are the trial
complexity ``C_t``, the robot action ``a_t`` and the experience ``E_{t+1}``
produced by the trial; the output is the human action ``o_t``.  One trial
contributes the factor ``P(o_t | T_t, C_t, a_t)`` and moves trust with
``P(T_{t+1} | T_t, E_{t+1}, C_t, a_t)``.

Single-episode routines (:func:`forward_filter`, :func:`posterior_smoothing`)
use plain floats and are the readable reference.  Fitting runs a scaled
forward-backward pass vectorised over all episodes at once.
"""
from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_dataset
from .exceptions import (
    DegenerateDatasetError,
    InvalidParamsError,
    SingularHessianError,
    ZeroLikelihoodError,
)
from .model import (
    Complexity,
    Experience,
    HumanAction,
    ModelParams,
    RobotAction,
    TrialRecord,
    TrustState,
    validate_params,
)

logger = logging.getLogger(__name__)

HIGH, LOW = TrustState.HIGH, TrustState.LOW


def belief_update(params: ModelParams, b: float, experience_next, complexity, action) -> float:
    """Propagate ``P(T = HIGH)`` through one trust transition."""
    p_hh = params.trust_transition[HIGH, experience_next, complexity, action]
    p_lh = params.trust_transition[LOW, experience_next, complexity, action]
    return float(p_hh * b + p_lh * (1.0 - b))


def _emission(params: ModelParams, rec: TrialRecord) -> tuple[float, float]:
    """Likelihood of the recorded human action under (HIGH, LOW) trust."""
    rely_h = params.observation[HIGH, rec.complexity, rec.robot_action]
    rely_l = params.observation[LOW, rec.complexity, rec.robot_action]
    if rec.human_action == HumanAction.RELY:
        return float(rely_h), float(rely_l)
    return 1.0 - float(rely_h), 1.0 - float(rely_l)


def correct(params: ModelParams, b: float, rec: TrialRecord) -> tuple[float, float]:
    """Condition ``b`` on the human action of ``rec``.

    Returns the posterior ``P(T_t = HIGH | o_t, ...)`` and the normaliser
    ``P(o_t | past)``; raises :class:`ZeroLikelihoodError` when the
    observation is impossible under both trust states.
    """
    lh, ll = _emission(params, rec)
    norm = b * lh + (1.0 - b) * ll
    if norm <= 0.0:
        raise ZeroLikelihoodError(rec.t, rec.episode_id)
    return b * lh / norm, norm


def filter_step(params: ModelParams, b: float, rec: TrialRecord) -> float:
    """Belief for the next trial after observing ``rec``."""
    posterior, _ = correct(params, b, rec)
    return belief_update(params, posterior, rec.experience, rec.complexity, rec.robot_action)


@dataclass(frozen=True)
class BeliefTrajectory:
    """Filtered trust beliefs along one episode.

    ``beliefs[t]`` is ``P(T_t = HIGH)`` before trial ``t`` is observed
    (``beliefs[0]`` is the prior, ``beliefs[n]`` the belief after the last
    trial).  ``posteriors[t]`` additionally conditions on the human action
    of trial ``t``.
    """

    beliefs: np.ndarray
    posteriors: np.ndarray
    log_likelihood: float


def forward_filter(params: ModelParams, episode) -> BeliefTrajectory:
    b = params.initial_trust_high
    beliefs = [b]
    posteriors = []
    loglik = 0.0
    for rec in episode:
        post, norm = correct(params, b, rec)
        posteriors.append(post)
        loglik += math.log(norm)
        b = belief_update(params, post, rec.experience, rec.complexity, rec.robot_action)
        beliefs.append(b)
    return BeliefTrajectory(np.array(beliefs), np.array(posteriors), loglik)


@dataclass(frozen=True)
class SmoothedPosteriors:
    """``gamma[t, T] = P(T_t = T | episode)`` and
    ``xi[t, T, T'] = P(T_t = T, T_{t+1} = T' | episode)`` for ``t < n - 1``."""

    gamma: np.ndarray
    xi: np.ndarray
    log_likelihood: float


def _transition_matrix(params: ModelParams, rec: TrialRecord) -> np.ndarray:
    ph = params.trust_transition[:, rec.experience, rec.complexity, rec.robot_action]
    return np.column_stack([ph, 1.0 - ph])


def posterior_smoothing(params: ModelParams, episode) -> SmoothedPosteriors:
    episode = list(episode)
    n = len(episode)
    if n == 0:
        return SmoothedPosteriors(np.zeros((0, 2)), np.zeros((0, 2, 2)), 0.0)
    alpha = np.zeros((n, 2))
    scale = np.zeros(n)
    lik = np.array([_emission(params, rec) for rec in episode])
    pred = np.array([params.initial_trust_high, 1.0 - params.initial_trust_high])
    for t, rec in enumerate(episode):
        u = pred * lik[t]
        scale[t] = u.sum()
        if scale[t] <= 0.0:
            raise ZeroLikelihoodError(rec.t, rec.episode_id)
        alpha[t] = u / scale[t]
        pred = alpha[t] @ _transition_matrix(params, rec)
    beta = np.ones((n, 2))
    xi = np.zeros((max(n - 1, 0), 2, 2))
    for t in range(n - 2, -1, -1):
        A = _transition_matrix(params, episode[t])
        w = lik[t + 1] * beta[t + 1] / scale[t + 1]
        beta[t] = A @ w
        xi[t] = alpha[t][:, None] * A * w[None, :]
    gamma = alpha * beta
    return SmoothedPosteriors(gamma, xi, float(np.log(scale).sum()))


# -- batched forward-backward ---------------------------------------------

@dataclass(frozen=True)
class EpisodeBatch:
    """Episodes encoded as padded integer arrays of shape (n_episodes, max_len)."""

    complexity: np.ndarray
    action: np.ndarray
    rely: np.ndarray
    experience: np.ndarray
    lengths: np.ndarray
    episode_ids: tuple

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.complexity.shape[1])[None, :] < self.lengths[:, None]

    @classmethod
    def from_episodes(cls, dataset, canonical: bool = False) -> "EpisodeBatch":
        dataset = [list(ep) for ep in dataset]
        if canonical:
            # permutation-invariant reductions: fix the episode order by content
            dataset.sort(key=lambda ep: (len(ep), [(r.complexity, r.robot_action, r.human_action, r.experience) for r in ep]))
        n = len(dataset)
        width = max((len(ep) for ep in dataset), default=0)
        arrays = {k: np.zeros((n, width), dtype=np.intp) for k in ("c", "a", "o", "e")}
        for i, ep in enumerate(dataset):
            for t, rec in enumerate(ep):
                arrays["c"][i, t] = rec.complexity
                arrays["a"][i, t] = rec.robot_action
                arrays["o"][i, t] = rec.human_action == HumanAction.RELY
                arrays["e"][i, t] = rec.experience
        ids = tuple(ep[0].episode_id if ep else str(i) for i, ep in enumerate(dataset))
        return cls(arrays["c"], arrays["a"], arrays["o"].astype(bool), arrays["e"],
                   np.array([len(ep) for ep in dataset], dtype=np.intp), ids)

    def emission(self, observation: np.ndarray) -> np.ndarray:
        """(N, L, 2) likelihood of each recorded action; 1 on padding."""
        rely = observation[:, self.complexity, self.action]  # (2, N, L)
        lik = np.where(self.rely[None], rely, 1.0 - rely)
        lik = np.moveaxis(lik, 0, -1)
        return np.where(self.mask[..., None], lik, 1.0)

    def p_high_next(self, trust_transition: np.ndarray) -> np.ndarray:
        """(N, L, 2) probability of HIGH trust after each trial, per current trust."""
        ph = trust_transition[:, self.experience, self.complexity, self.action]
        return np.moveaxis(ph, 0, -1)

    def transition_context(self) -> np.ndarray:
        """Flat (E', C, a) context index per trial."""
        return self.experience * 4 + self.complexity * 2 + self.action

    def observation_context(self) -> np.ndarray:
        return self.complexity * 2 + self.action


def _forward(initial, lik, ph, lengths):
    n, width = lik.shape[:2]
    alpha = np.empty((n, width, 2))
    scale = np.ones((n, width))
    pred = np.empty((n, 2))
    pred[:, 0] = initial
    pred[:, 1] = 1.0 - initial
    with np.errstate(invalid="ignore", divide="ignore"):
        for t in range(width):
            u = pred * lik[:, t]
            c = u.sum(axis=1)
            scale[:, t] = c
            alpha[:, t] = u / c[:, None]
            h = (alpha[:, t] * ph[:, t]).sum(axis=1)
            pred[:, 0] = h
            pred[:, 1] = 1.0 - h
    valid = np.arange(width)[None, :] < lengths[:, None]
    scale = np.where(valid, scale, 1.0)
    return alpha, scale


def _loglik_from_scale(scale) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(scale).sum(axis=1)


def batch_log_likelihood(params: ModelParams, batch: EpisodeBatch) -> np.ndarray:
    """Per-episode log-likelihood; ``-inf`` where an observation is impossible."""
    if batch.complexity.shape[1] == 0:
        return np.zeros(len(batch.lengths))
    lik = batch.emission(params.observation)
    ph = batch.p_high_next(params.trust_transition)
    _, scale = _forward(params.initial_trust_high, lik, ph, batch.lengths)
    return _loglik_from_scale(scale)


@dataclass
class _Statistics:
    loglik: float
    initial: float
    trans_num: np.ndarray  # (2, 8) expected HIGH-successor mass per (T, E'C a)
    trans_den: np.ndarray
    obs_num: np.ndarray  # (2, 4) expected RELY mass per (T, C a)
    obs_den: np.ndarray


def _expectation(params: ModelParams, batch: EpisodeBatch) -> _Statistics:
    n, width = batch.complexity.shape
    lik = batch.emission(params.observation)
    ph = batch.p_high_next(params.trust_transition)
    alpha, scale = _forward(params.initial_trust_high, lik, ph, batch.lengths)
    loglik = _loglik_from_scale(scale)
    if not np.all(np.isfinite(loglik)):
        i = int(np.flatnonzero(~np.isfinite(loglik))[0])
        t = int(np.flatnonzero(scale[i] <= 0)[0]) if np.any(scale[i] <= 0) else -1
        raise ZeroLikelihoodError(t, batch.episode_ids[i])
    mask = batch.mask
    beta = np.ones((n, width, 2))
    xi_high = np.zeros((n, width, 2))  # xi[t, T, HIGH]
    xi_total = np.zeros((n, width, 2))  # sum over T' of xi[t, T, T']
    for t in range(width - 2, -1, -1):
        has_next = mask[:, t + 1][:, None]
        w = np.where(has_next, lik[:, t + 1] * beta[:, t + 1] / scale[:, t + 1][:, None], 1.0)
        p = ph[:, t]
        beta[:, t] = p * w[:, [0]] + (1.0 - p) * w[:, [1]]
        a_t = alpha[:, t]
        xh = a_t * p * w[:, [0]]
        xl = a_t * (1.0 - p) * w[:, [1]]
        xi_high[:, t] = np.where(has_next, xh, 0.0)
        xi_total[:, t] = np.where(has_next, xh + xl, 0.0)
    gamma = alpha * beta
    gamma = np.where(mask[..., None], gamma, 0.0)

    tctx = batch.transition_context()
    octx = batch.observation_context()
    trans_num = np.stack([np.bincount(tctx.ravel(), xi_high[..., s].ravel(), minlength=8) for s in range(2)])
    trans_den = np.stack([np.bincount(tctx.ravel(), xi_total[..., s].ravel(), minlength=8) for s in range(2)])
    rely = batch.rely & mask
    obs_num = np.stack([np.bincount(octx.ravel(), (gamma[..., s] * rely).ravel(), minlength=4) for s in range(2)])
    obs_den = np.stack([np.bincount(octx.ravel(), gamma[..., s].ravel(), minlength=4) for s in range(2)])
    nonempty = batch.lengths > 0
    initial = float(gamma[nonempty, 0, 0].mean()) if nonempty.any() else float("nan")
    return _Statistics(float(loglik.sum()), initial, trans_num, trans_den, obs_num, obs_den)


def _maximization(params: ModelParams, stats: _Statistics) -> ModelParams:
    tr = params.trust_transition.copy().reshape(2, 8)
    seen = stats.trans_den > 0
    tr[seen] = stats.trans_num[seen] / stats.trans_den[seen]
    obs = params.observation.copy().reshape(2, 4)
    seen = stats.obs_den > 0
    obs[seen] = stats.obs_num[seen] / stats.obs_den[seen]
    obs = obs.reshape(2, 2, 2)
    obs[:, :, RobotAction.ASSIST] = 0.0
    initial = params.initial_trust_high if math.isnan(stats.initial) else stats.initial
    return ModelParams(
        min(max(initial, 0.0), 1.0),
        np.clip(tr.reshape(2, 2, 2, 2), 0.0, 1.0),
        np.clip(obs, 0.0, 1.0),
    )


def log_likelihood(params: ModelParams, dataset) -> float:
    """Total log-likelihood (natural log) of ``dataset`` under ``params``."""
    dataset = [list(ep) for ep in dataset]
    batch = EpisodeBatch.from_episodes(dataset)
    per_episode = batch_log_likelihood(params, batch)
    bad = np.flatnonzero(~np.isfinite(per_episode))
    if bad.size:
        i = int(bad[0])
        # locate the offending trial with the reference filter
        try:
            forward_filter(params, dataset[i])
        except ZeroLikelihoodError as exc:
            raise ZeroLikelihoodError(exc.trial, i) from None
        raise ZeroLikelihoodError(-1, i)
    return float(per_episode.sum())


# -- Baum-Welch --------------------------------------------------------------

OBSERVATION_CONTEXTS = [(c, RobotAction.AUTO) for c in Complexity] + [(c, RobotAction.ASSIST) for c in Complexity]
#: (E', C, a) combinations that can actually occur.
REALISABLE_TRANSITION_CONTEXTS = [
    (Experience.RELIABLE, Complexity.LOW, RobotAction.AUTO),
    (Experience.FAULTY, Complexity.LOW, RobotAction.AUTO),
    (Experience.FAULTY, Complexity.LOW, RobotAction.ASSIST),
    (Experience.RELIABLE, Complexity.HIGH, RobotAction.AUTO),
    (Experience.FAULTY, Complexity.HIGH, RobotAction.AUTO),
    (Experience.RELIABLE, Complexity.HIGH, RobotAction.ASSIST),
]


@dataclass
class FitDiagnostics:
    iterations: int
    log_likelihood_trace: list
    converged: bool
    restart_index: int
    restarts: list = field(default_factory=list)
    missing_contexts: list = field(default_factory=list)
    unidentifiable: list = field(default_factory=list)

    @property
    def log_likelihood(self) -> float:
        return self.log_likelihood_trace[-1]

    def is_monotone(self, tol: float = 1e-9) -> bool:
        trace = np.asarray(self.log_likelihood_trace)
        return bool(np.all(np.diff(trace) >= -tol))

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "restart_index": self.restart_index,
            "log_likelihood": self.log_likelihood,
            "trace": list(self.log_likelihood_trace),
            "restarts": self.restarts,
            "missing_contexts": self.missing_contexts,
            "unidentifiable": self.unidentifiable,
        }


def context_counts(dataset) -> tuple[dict, dict]:
    """Raw trial counts per observation context (C, a) and per transition
    context (E', C, a); transitions are only counted when a later trial exists."""
    obs = {ctx: 0 for ctx in OBSERVATION_CONTEXTS}
    trans = {ctx: 0 for ctx in itertools.product(Experience, Complexity, RobotAction)}
    for ep in dataset:
        ep = list(ep)
        for t, rec in enumerate(ep):
            obs[(rec.complexity, rec.robot_action)] += 1
            if t + 1 < len(ep):
                trans[(rec.experience, rec.complexity, rec.robot_action)] += 1
    return obs, trans


def _ctx_label(ctx) -> str:
    return ",".join(m.token for m in ctx)


def random_params(rng: np.random.Generator, low: float = 0.05, high: float = 0.95) -> ModelParams:
    initial = rng.uniform(low, high)
    tr = rng.uniform(low, high, size=(2, 2, 2, 2))
    obs = rng.uniform(low, high, size=(2, 2, 2))
    obs[:, :, RobotAction.ASSIST] = 0.0
    return ModelParams(initial, tr, obs)


def default_init() -> ModelParams:
    """Asymmetric neutral start: HIGH trust relies more and is stickier."""
    tr = np.empty((2, 2, 2, 2))
    tr[HIGH] = 0.9
    tr[LOW] = 0.1
    obs = np.zeros((2, 2, 2))
    obs[HIGH, :, RobotAction.AUTO] = 0.9
    obs[LOW, :, RobotAction.AUTO] = 0.5
    return ModelParams(0.5, tr, obs)


def canonical_labels(params: ModelParams) -> ModelParams:
    """Swap the trust labels if LOW relies more than HIGH under autonomy."""
    rely = params.observation[:, :, RobotAction.AUTO].sum(axis=1)
    if rely[HIGH] >= rely[LOW]:
        return params
    # P(T'=H | T) relabelled: new_H <- old_L, so P'(H'|T') = 1 - P(H|swap(T'))
    tr = 1.0 - params.trust_transition[::-1]
    return ModelParams(1.0 - params.initial_trust_high, tr, params.observation[::-1])


def _em_run(batch: EpisodeBatch, init: ModelParams, max_iter: int, tol: float):
    params = init
    trace = []
    converged = False
    for it in range(max_iter + 1):
        stats = _expectation(params, batch)
        trace.append(stats.loglik)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
        if it == max_iter:
            break
        params = _maximization(params, stats)
    return params, trace, converged


def baum_welch_fit(dataset, init: ModelParams | None = None, *, max_iter: int = 500,
                   tol: float = 1e-6, seed=0, restarts: int = 20, strict: bool = False,
                   n_jobs=None) -> tuple[ModelParams, FitDiagnostics]:
    """Maximum-likelihood fit of the IOHMM by expectation maximisation.

    Start 0 is ``init`` (or :func:`default_init`); starts ``1..restarts-1``
    draw every free parameter uniformly from [0.05, 0.95] using a stream
    derived from ``(seed, start)``.  The highest final log-likelihood wins.
    Contexts with no expected mass keep their previous value.

    With ``strict=True`` a missing (complexity, action) context raises
    :class:`DegenerateDatasetError`; otherwise it is reported in the
    diagnostics and a warning is issued.
    """
    dataset = check_dataset(dataset)
    if not dataset or all(len(ep) == 0 for ep in dataset):
        raise DegenerateDatasetError([], "empty dataset")
    init = default_init() if init is None else init
    problems = validate_params(init)
    if problems:
        raise InvalidParamsError(problems)
    obs_counts, trans_counts = context_counts(dataset)
    missing = [_ctx_label(ctx) for ctx, n in obs_counts.items() if n == 0]
    unidentifiable = [f"trust[*,{_ctx_label(ctx)}]" for ctx in REALISABLE_TRANSITION_CONTEXTS if trans_counts[ctx] == 0]
    unidentifiable += [f"observation[*,{_ctx_label(ctx)}]" for ctx, n in obs_counts.items()
                       if n == 0 and ctx[1] == RobotAction.AUTO]
    if missing:
        if strict:
            raise DegenerateDatasetError(missing)
        warnings.warn(f"contexts never observed: {', '.join(missing)}", stacklevel=2)

    batch = EpisodeBatch.from_episodes(dataset, canonical=True)
    starts = [init]
    for r in range(1, max(restarts, 1)):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), r]))
        starts.append(random_params(rng))
    runs = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_em_run)(batch, start, max_iter, tol) for start in starts
    )
    table = []
    best = 0
    for r, (params, trace, converged) in enumerate(runs):
        table.append({"restart": r, "log_likelihood": trace[-1], "iterations": len(trace) - 1,
                      "converged": converged, "monotone": bool(np.all(np.diff(trace) >= -1e-9))})
        if trace[-1] > runs[best][1][-1]:
            best = r
    params, trace, converged = runs[best]
    logger.info("best restart %d of %d: log-likelihood %.6f", best, len(runs), trace[-1])
    diag = FitDiagnostics(
        iterations=len(trace) - 1,
        log_likelihood_trace=list(trace),
        converged=converged,
        restart_index=best,
        restarts=table,
        missing_contexts=missing,
        unidentifiable=unidentifiable,
    )
    return canonical_labels(params), diag


# -- Laplace approximation --------------------------------------------------

@dataclass(frozen=True)
class FreeParameter:
    name: str
    kind: str  # "initial" | "transition" | "observation"
    index: tuple


def free_parameters() -> list[FreeParameter]:
    """All parameters the fit estimates (assistance reliance is fixed at 0)."""
    out = [FreeParameter("initial_trust_high", "initial", ())]
    for t, e, c, a in itertools.product(TrustState, Experience, Complexity, RobotAction):
        out.append(FreeParameter(f"trust[{t},{e},{c},{a}]", "transition", (t, e, c, a)))
    for t, c in itertools.product(TrustState, Complexity):
        out.append(FreeParameter(f"observation[{t},{c},auto]", "observation", (t, c, RobotAction.AUTO)))
    return out


def params_to_vector(params: ModelParams, layout=None) -> np.ndarray:
    layout = free_parameters() if layout is None else layout
    out = np.empty(len(layout))
    for i, p in enumerate(layout):
        if p.kind == "initial":
            out[i] = params.initial_trust_high
        elif p.kind == "transition":
            out[i] = params.trust_transition[p.index]
        else:
            out[i] = params.observation[p.index]
    return out


def vector_to_params(x, base: ModelParams, layout=None) -> ModelParams:
    layout = free_parameters() if layout is None else layout
    initial = base.initial_trust_high
    tr = base.trust_transition.copy()
    obs = base.observation.copy()
    for value, p in zip(x, layout):
        if p.kind == "initial":
            initial = value
        elif p.kind == "transition":
            tr[p.index] = value
        else:
            obs[p.index] = value
    return ModelParams(initial, tr, obs)


def finite_difference_hessian(fun, x, step: float = 1e-4, lower: float = 0.0, upper: float = 1.0):
    """Hessian of ``fun`` at ``x`` by finite differences.

    Central differences are used where ``x`` is at least ``2 * step`` inside
    ``[lower, upper]``; otherwise a one-sided stencil pointing into the
    domain.  Returns ``(H, one_sided)`` with ``one_sided`` a boolean mask.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    direction = np.zeros(n)
    direction[x - lower < 2 * step] = 1.0
    direction[upper - x < 2 * step] = -1.0
    one_sided = direction != 0
    cache = {}

    def f(offsets):
        key = tuple(offsets)
        if key not in cache:
            cache[key] = fun(x + step * np.array(offsets, dtype=float))
        return cache[key]

    def shift(i, k, base=None):
        v = [0] * n if base is None else list(base)
        v[i] += k
        return v

    f0 = f([0] * n)
    H = np.empty((n, n))
    for i in range(n):
        s = direction[i]
        if one_sided[i]:
            H[i, i] = (f(shift(i, 2 * s)) - 2 * f(shift(i, s)) + f0) / step**2
        else:
            H[i, i] = (f(shift(i, 1)) - 2 * f0 + f(shift(i, -1))) / step**2
    for i in range(n):
        for j in range(i + 1, n):
            # product of first-difference operators along i and j
            pts_i = [(int(direction[i]), 1.0), (0, -1.0)] if one_sided[i] else [(1, 0.5), (-1, -0.5)]
            pts_j = [(int(direction[j]), 1.0), (0, -1.0)] if one_sided[j] else [(1, 0.5), (-1, -0.5)]
            total = 0.0
            for ki, wi in pts_i:
                for kj, wj in pts_j:
                    total += wi * wj * f(shift(j, kj, shift(i, ki)))
            denom = (direction[i] if one_sided[i] else 1.0) * (direction[j] if one_sided[j] else 1.0)
            H[i, j] = H[j, i] = total / (step**2 * denom)
    return H, one_sided


@dataclass(frozen=True)
class UncertaintyEntry:
    parameter: str
    estimate: float
    std_error: float
    literal_error: float
    count: int
    identifiable: bool
    boundary: bool


@dataclass(frozen=True)
class UncertaintyReport:
    entries: list
    hessian: np.ndarray = field(repr=False)
    singular: bool = False

    def __getitem__(self, name) -> UncertaintyEntry:
        for e in self.entries:
            if e.parameter == name:
                return e
        raise KeyError(name)

    def to_csv(self, literal: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["parameter", "estimate", "std_error", "identifiable"]
        if literal:
            header.append("literal_error")
        header += ["count", "boundary"]
        writer.writerow(header)
        for e in self.entries:
            row = [e.parameter, repr(e.estimate), repr(e.std_error), str(e.identifiable).lower()]
            if literal:
                row.append(repr(e.literal_error))
            row += [e.count, str(e.boundary).lower()]
            writer.writerow(row)
        return buf.getvalue()


def _truncated_pinv(a: np.ndarray, rtol: float = 1e-6) -> np.ndarray:
    """Pseudo-inverse of a symmetric matrix over its clearly positive eigenvalues."""
    w, v = np.linalg.eigh(a)
    keep = w > rtol * max(float(w.max()), 0.0)
    return (v[:, keep] / w[keep]) @ v[:, keep].T


def _parameter_count(p: FreeParameter, obs_counts, trans_counts, n_episodes) -> int:
    if p.kind == "initial":
        return n_episodes
    if p.kind == "transition":
        return trans_counts[p.index[1:]]
    return obs_counts[p.index[1:]]


def laplace_uncertainty(params: ModelParams, dataset, step: float = 1e-4, *, parameters=None,
                        allow_pseudo: bool = True, curvature_tol: float = 1e-6) -> UncertaintyReport:
    """Standard errors from the curvature of the log-likelihood at ``params``.

    The Hessian is taken over the identifiable free parameters, i.e. those
    whose conditioning context occurs in ``dataset`` and whose diagonal
    curvature exceeds ``curvature_tol``; others are reported with NaN errors.
    ``std_error = sqrt(diag(inv(-H)))`` over the interior estimates; an
    estimate within ``2 * step`` of 0 or 1 gets ``1 / sqrt(-H_ii)`` and is
    flagged ``boundary``.  ``literal_error = sqrt(diag(-H))`` is kept for
    comparison.  ``parameters`` restricts the analysis to a
    subset of names, holding the rest fixed.
    """
    dataset = check_dataset(dataset)
    layout = free_parameters()
    if parameters is not None:
        wanted = set(parameters)
        unknown = wanted - {p.name for p in layout}
        if unknown:
            raise KeyError(f"unknown parameter(s): {sorted(unknown)}")
        layout = [p for p in layout if p.name in wanted]
    obs_counts, trans_counts = context_counts(dataset)
    n_episodes = sum(1 for ep in dataset if len(ep) > 0)
    counts = [_parameter_count(p, obs_counts, trans_counts, n_episodes) for p in layout]
    active = [i for i, n in enumerate(counts) if n > 0]

    batch = EpisodeBatch.from_episodes(dataset, canonical=True)
    x0 = params_to_vector(params, layout)

    def loglik(x_active):
        x = x0.copy()
        x[active] = x_active
        return float(batch_log_likelihood(vector_to_params(x, params, layout), batch).sum())

    H_active, one_sided = finite_difference_hessian(loglik, x0[active], step)
    curv = -np.diag(H_active)
    keep = [k for k in range(len(active)) if np.isfinite(curv[k]) and curv[k] > curvature_tol]
    # estimates pinned at 0 or 1 do not have a zero score, so they are left out
    # of the joint inverse and get the conditional error 1/sqrt(curvature)
    interior = [k for k in keep if not one_sided[k]]
    neg_h = -H_active[np.ix_(interior, interior)]
    singular = False
    se_active = np.full(len(active), np.nan)
    if interior:
        try:
            np.linalg.cholesky(neg_h)
            cov = np.linalg.inv(neg_h)
        except np.linalg.LinAlgError:
            singular = True
            if not allow_pseudo:
                raise SingularHessianError() from None
            warnings.warn("negative Hessian not positive definite; using pseudo-inverse", stacklevel=2)
            cov = _truncated_pinv(neg_h)
        var = np.diag(cov)
        se_active[interior] = np.where(var > 0, np.sqrt(np.abs(var)), np.nan)
    for k in keep:
        if one_sided[k]:
            se_active[k] = 1.0 / math.sqrt(curv[k])

    se = np.full(len(layout), np.nan)
    literal = np.full(len(layout), np.nan)
    boundary = np.zeros(len(layout), dtype=bool)
    for k, i in enumerate(active):
        boundary[i] = one_sided[k]
        literal[i] = math.sqrt(curv[k]) if np.isfinite(curv[k]) and curv[k] >= 0 else np.nan
        se[i] = se_active[k]
    entries = [
        UncertaintyEntry(p.name, float(x0[i]), float(se[i]), float(literal[i]), int(counts[i]),
                         bool(np.isfinite(se[i])), bool(boundary[i]))
        for i, p in enumerate(layout)
    ]
    H_full = np.full((len(layout), len(layout)), np.nan)
    H_full[np.ix_(active, active)] = H_active
    return UncertaintyReport(entries, H_full, singular)


# -- estimator ----------------------------------------------------------------

class TrustIOHMM(BaseEstimator):
    """Estimator wrapper around :func:`baum_welch_fit`.

    ``X`` is a sequence of episodes, each a sequence of :class:`TrialRecord`.

    Parameters
    ----------
    init_params : ModelParams, optional
        Starting point of the first EM run.
    max_iter, tol : EM stopping rule on the absolute log-likelihood change.
    n_restarts : int
        Total number of EM starts (the first from ``init_params``).
    random_state : int
        Seed of the random restarts.
    n_jobs : int, optional
        joblib workers for the restarts; the result does not depend on it.
    """

    def __init__(self, init_params=None, max_iter=500, tol=1e-6, n_restarts=20,
                 random_state=0, n_jobs=None, strict=False):
        self.init_params = init_params
        self.max_iter = max_iter
        self.tol = tol
        self.n_restarts = n_restarts
        self.random_state = random_state
        self.n_jobs = n_jobs
        self.strict = strict

    def fit(self, X, y=None):
        self.params_, self.diagnostics_ = baum_welch_fit(
            X, self.init_params, max_iter=self.max_iter, tol=self.tol,
            seed=self.random_state, restarts=self.n_restarts,
            strict=self.strict, n_jobs=self.n_jobs,
        )
        return self

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "params_")
        return log_likelihood(self.params_, check_dataset(X))

    def predict_proba(self, X) -> list:
        """Belief trajectories ``P(T_t = HIGH)`` for each episode."""
        check_is_fitted(self, "params_")
        return [forward_filter(self.params_, ep).beliefs for ep in check_dataset(X)]

    def transform(self, X) -> list:
        return self.predict_proba(X)

    def uncertainty(self, X, step=1e-4, **kwargs) -> UncertaintyReport:
        check_is_fitted(self, "params_")
        return laplace_uncertainty(self.params_, X, step, **kwargs)


__all__ = [
    "BeliefTrajectory",
    "EpisodeBatch",
    "FitDiagnostics",
    "SmoothedPosteriors",
    "TrustIOHMM",
    "UncertaintyReport",
    "baum_welch_fit",
    "belief_update",
    "forward_filter",
    "laplace_uncertainty",
    "log_likelihood",
    "posterior_smoothing",
]
