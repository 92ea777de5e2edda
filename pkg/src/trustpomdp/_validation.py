"""Input validation helpers shared by the estimators and functions."""
from __future__ import annotations

import math

import numpy as np

from .exceptions import ConfigError, InconsistentRecordError, InvalidParamsError
from .model import EnvConfig, ModelParams, TrialRecord, record_violations, validate_params


def check_probability(value, name: str = "probability", open_interval: bool = False) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None
    if math.isnan(value) or not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name}={value!r} outside [0, 1]")
    if open_interval and value in (0.0, 1.0):
        raise ConfigError(f"{name}={value!r} must lie strictly inside (0, 1)")
    return value


def check_params(params: ModelParams, env: EnvConfig | None = None) -> ModelParams:
    if not isinstance(params, ModelParams):
        raise TypeError(f"expected ModelParams, got {type(params).__name__}")
    problems = validate_params(params, env)
    if problems:
        raise InvalidParamsError(problems)
    return params


def check_dataset(dataset, env: EnvConfig | None = None) -> list[list[TrialRecord]]:
    """Materialise ``dataset`` as a list of episodes.

    Accepts a single episode (flat list of records) as well.  When ``env`` is
    given every record is checked for action/experience/reward consistency.
    """
    dataset = list(dataset)
    if dataset and isinstance(dataset[0], TrialRecord):
        dataset = [dataset]
    out = []
    for i, ep in enumerate(dataset):
        ep = list(ep)
        for rec in ep:
            if not isinstance(rec, TrialRecord):
                raise TypeError(f"episode {i}: expected TrialRecord, got {type(rec).__name__}")
            if env is not None:
                problems = record_violations(rec, env)
                if problems:
                    raise InconsistentRecordError(
                        f"episode {rec.episode_id} trial {rec.t}: " + "; ".join(problems)
                    )
        out.append(ep)
    return out


def check_points(points, min_points: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Split ``[(r, y), ...]`` into two finite float arrays."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ConfigError(f"expected a sequence of (r, y) pairs, got shape {arr.shape}")
    if len(arr) < min_points:
        raise ConfigError(f"need at least {min_points} points, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("points must be finite")
    return arr[:, 0].copy(), arr[:, 1].copy()
