"""Policy comparison, t-tests and the survey-mapping curve fits."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy import special
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_params, check_points
from .exceptions import ConfigError, DegenerateFitError, OutOfRangeError
from .model import EnvConfig, ModelParams
from .simulant import EpisodeConfig, RobotPolicy, episode_seed, run_episode


# -- two-sample t-test ----------------------------------------------------------

@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: float
    infinite: bool = False

    def __iter__(self):
        return iter((self.t, self.p))


def two_sided_p(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t via the regularised incomplete beta."""
    if math.isinf(t):
        return 0.0
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def two_sample_t_test(xs, ys, equal_var: bool = True) -> TTestResult:
    """Pooled-variance (or Welch) two-sample t-test, two-sided."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    nx, ny = len(x), len(y)
    if nx < 2 or ny < 2:
        raise ConfigError("each sample needs at least 2 observations")
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(ddof=1), y.var(ddof=1)
    diff = mx - my
    if equal_var:
        df = nx + ny - 2
        pooled = ((nx - 1) * vx + (ny - 1) * vy) / df
        se2 = pooled * (1.0 / nx + 1.0 / ny)
    else:
        a, b = vx / nx, vy / ny
        se2 = a + b
        df = se2**2 / (a**2 / (nx - 1) + b**2 / (ny - 1)) if se2 > 0 else nx + ny - 2
    if se2 == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, 1.0, df)
        return TTestResult(math.copysign(math.inf, diff), 0.0, df, infinite=True)
    t = diff / math.sqrt(se2)
    return TTestResult(float(t), two_sided_p(t, df), float(df))


# -- Monte Carlo comparison -----------------------------------------------------------

@dataclass
class ComparisonReport:
    labels: tuple
    samples_a: np.ndarray
    samples_b: np.ndarray
    seeds: list
    n_trials: int
    seed: int
    env: EnvConfig
    test: TTestResult = field(init=False)

    def __post_init__(self):
        self.test = two_sample_t_test(self.samples_a, self.samples_b)

    @property
    def t(self):
        return self.test.t

    @property
    def p(self):
        return self.test.p

    @property
    def medians(self):
        return float(np.median(self.samples_a)), float(np.median(self.samples_b))

    @property
    def means(self):
        return float(np.mean(self.samples_a)), float(np.mean(self.samples_b))

    def to_dict(self) -> dict:
        def num(v):
            return v if math.isfinite(v) else str(v)

        return {
            "policies": list(self.labels),
            "n_participants": len(self.samples_a),
            "n_trials": self.n_trials,
            "seed": self.seed,
            "participant_seeds": [str(s) for s in self.seeds],
            "env": self.env.to_dict(),
            "median": dict(zip(self.labels, self.medians)),
            "mean": dict(zip(self.labels, self.means)),
            "t": num(self.t),
            "p": self.p,
            "df": self.test.df,
            "samples": {self.labels[0]: self.samples_a.tolist(), self.labels[1]: self.samples_b.tolist()},
        }

    def samples_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["participant", "policy", "cumulative_reward"])
        for label, samples in zip(self.labels, (self.samples_a, self.samples_b)):
            for i, v in enumerate(samples):
                writer.writerow([i, label, repr(float(v))])
        return buf.getvalue()


def _participant(params, env, policies, n_trials, seed, index):
    cfg = EpisodeConfig(n_trials, "iid", None, seed, f"p{index:04d}")
    return [sum(r.reward for r in run_episode(params, env, pol, cfg)) for pol in policies]


def monte_carlo_compare(params: ModelParams, env: EnvConfig, policy_a: RobotPolicy, policy_b: RobotPolicy,
                        n_participants: int, n_trials: int, seed: int, *, labels=None,
                        n_jobs=None) -> ComparisonReport:
    """Cumulative reward of two policies over simulated participants.

    Participant ``i`` runs both policies with the same episode seed, so the
    arms share complexity sequences and initial trust draws.
    """
    if n_participants < 2:
        raise ConfigError("n_participants must be at least 2")
    check_params(params, env)
    seeds = [episode_seed(seed, i) for i in range(n_participants)]
    rows = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_participant)(params, env, (policy_a, policy_b), n_trials, s, i) for i, s in enumerate(seeds)
    )
    rows = np.asarray(rows, dtype=float).reshape(n_participants, 2)
    if labels is None:
        labels = (policy_a.spec(), policy_b.spec())
        if labels[0] == labels[1]:
            labels = (labels[0] + "#a", labels[1] + "#b")
    return ComparisonReport(tuple(labels), rows[:, 0].copy(), rows[:, 1].copy(), seeds, n_trials, seed, env)


# -- survey mappings -------------------------------------------------------------------

def logistic(r, amplitude, slope, center):
    return amplitude * special.expit(slope * (np.asarray(r, dtype=float) - center))


@dataclass(frozen=True)
class LogisticFit:
    amplitude: float
    slope: float
    center: float
    rss: float
    flat: bool = False
    grid_rss: float = math.nan
    iterations: int = 0

    def __call__(self, r):
        return logistic(r, self.amplitude, self.slope, self.center)

    def to_dict(self) -> dict:
        return {"amplitude": self.amplitude, "slope": self.slope, "center": self.center,
                "rss": self.rss, "flat": self.flat}

    @classmethod
    def from_dict(cls, data: dict) -> "LogisticFit":
        try:
            return cls(float(data["amplitude"]), float(data["slope"]), float(data["center"]),
                       float(data.get("rss", math.nan)), bool(data.get("flat", False)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"logistic fit: {exc!r}") from None


DEFAULT_LOGISTIC_GRID = (
    np.round(np.arange(0.5, 1.0 + 1e-9, 0.05), 10),
    np.round(np.arange(0.1, 5.0 + 1e-9, 0.1), 10),
    np.round(np.arange(0.0, 10.0 + 1e-9, 0.25), 10),
)


def _rss(r, y, theta) -> float:
    res = y - logistic(r, *theta)
    return float(res @ res)


def fit_logistic(points, init_grid=None, max_steps: int = 200) -> LogisticFit:
    """Least-squares fit of ``y = L / (1 + exp(-k (r - r0)))``.

    A coarse grid search over ``(L, k, r0)`` seeds a damped Gauss-Newton
    refinement; a step is accepted only if it lowers the residual, halving it
    up to 40 times.  The amplitude is kept in (0, 1].
    """
    r, y = check_points(points, min_points=3)
    if len(np.unique(r)) != len(r):
        raise ConfigError("r values must be distinct")
    if np.all(y == y[0]):
        return LogisticFit(float(y[0]), 0.0, float(r.mean()), 0.0, flat=True)
    grid = DEFAULT_LOGISTIC_GRID if init_grid is None else init_grid
    Lg, kg, cg = np.meshgrid(*[np.asarray(g, dtype=float) for g in grid], indexing="ij")
    pred = Lg[..., None] * special.expit(kg[..., None] * (r - cg[..., None]))
    rss_grid = ((y - pred) ** 2).sum(axis=-1)
    best = np.unravel_index(np.argmin(rss_grid), rss_grid.shape)
    theta = np.array([Lg[best], kg[best], cg[best]])
    rss = float(rss_grid[best])
    grid_rss = rss

    it = 0
    for it in range(1, max_steps + 1):
        L, k, c = theta
        s = special.expit(k * (r - c))
        ds = s * (1.0 - s)
        J = np.column_stack([s, L * ds * (r - c), -L * ds * k])
        delta = np.linalg.lstsq(J, y - L * s, rcond=None)[0]
        lam = 1.0
        improved = False
        for _ in range(40):
            cand = theta + lam * delta
            cand[0] = min(max(cand[0], 1e-12), 1.0)
            cand_rss = _rss(r, y, cand)
            if cand_rss < rss:
                improved = True
                break
            lam *= 0.5
        if not improved:
            break
        change = np.max(np.abs(cand - theta))
        theta, rss = cand, cand_rss
        if change < 1e-14 * max(1.0, np.max(np.abs(theta))) or rss == 0.0:
            break
    return LogisticFit(float(theta[0]), float(theta[1]), float(theta[2]), rss, False, grid_rss, it)


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    rss: float

    def __call__(self, r):
        return self.slope * np.asarray(r, dtype=float) + self.intercept


def fit_linear(points) -> LinearFit:
    r, y = check_points(points, min_points=2)
    if np.all(r == r[0]):
        raise DegenerateFitError("all r values are equal")
    X = np.column_stack([r, np.ones_like(r)])
    (slope, intercept), *_ = np.linalg.lstsq(X, y, rcond=None)
    res = y - (slope * r + intercept)
    return LinearFit(float(slope), float(intercept), float(res @ res))


def belief_to_survey(fit: LogisticFit, belief: float) -> float:
    """Invert the logistic map: survey score whose fitted belief is ``belief``."""
    if fit.slope == 0.0:
        raise DegenerateFitError("flat logistic fit cannot be inverted")
    if not 0.0 < belief < fit.amplitude:
        raise OutOfRangeError(f"belief {belief!r} outside (0, {fit.amplitude!r})")
    return fit.center - math.log(fit.amplitude / belief - 1.0) / fit.slope


class LogisticCurve(RegressorMixin, BaseEstimator):
    """Logistic map from survey score to belief; ``inverse`` maps back."""

    def __init__(self, init_grid=None, max_steps=200):
        self.init_grid = init_grid
        self.max_steps = max_steps

    def fit(self, X, y):
        X = np.asarray(X, dtype=float).reshape(-1)
        self.fit_ = fit_logistic(np.column_stack([X, np.asarray(y, dtype=float)]), self.init_grid, self.max_steps)
        self.amplitude_, self.slope_, self.center_ = self.fit_.amplitude, self.fit_.slope, self.fit_.center
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_(np.asarray(X, dtype=float).reshape(-1))

    def inverse(self, beliefs):
        check_is_fitted(self, "fit_")
        return np.array([belief_to_survey(self.fit_, b) for b in np.ravel(beliefs)])


class LinearCurve(RegressorMixin, BaseEstimator):
    def fit(self, X, y):
        X = np.asarray(X, dtype=float).reshape(-1)
        self.fit_ = fit_linear(np.column_stack([X, np.asarray(y, dtype=float)]))
        self.coef_, self.intercept_ = self.fit_.slope, self.fit_.intercept
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_(np.asarray(X, dtype=float).reshape(-1))
