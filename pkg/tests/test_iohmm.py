import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from _oracles import (
    enumerate_filter,
    enumerate_smoothing,
    episodes,
    make_record,
    model_params,
    random_episode,
)
from trustpomdp.exceptions import DegenerateDatasetError, SingularHessianError, ZeroLikelihoodError
from trustpomdp.iohmm import (
    EpisodeBatch,
    TrustIOHMM,
    baum_welch_fit,
    batch_log_likelihood,
    belief_update,
    canonical_labels,
    context_counts,
    filter_step,
    finite_difference_hessian,
    forward_filter,
    free_parameters,
    laplace_uncertainty,
    log_likelihood,
    params_to_vector,
    posterior_smoothing,
    vector_to_params,
)
from trustpomdp.model import (
    REFERENCE_ENV,
    REFERENCE_PARAMS,
    Complexity,
    Experience,
    ModelParams,
    RobotAction,
    TrustState,
)
from trustpomdp.simulant import StaticPolicy, simulate_dataset

H, L = TrustState.HIGH, TrustState.LOW
R, F = Experience.RELIABLE, Experience.FAULTY
CL, CH = Complexity.LOW, Complexity.HIGH
AUTO, ASSIST = RobotAction.AUTO, RobotAction.ASSIST


@pytest.fixture(scope="module")
def sim_data():
    return simulate_dataset(REFERENCE_PARAMS, REFERENCE_ENV, StaticPolicy(0.10, 0.33), 30, 40, seed=11)


# -- belief update ---------------------------------------------------------------

def test_belief_update_examples():
    assert belief_update(REFERENCE_PARAMS, 0.0, R, CH, ASSIST) == pytest.approx(0.13, abs=1e-15)
    assert belief_update(REFERENCE_PARAMS, 0.5, R, CH, AUTO) == pytest.approx(0.82, abs=1e-15)
    tr = np.ones((2, 2, 2, 2))
    p = REFERENCE_PARAMS.replace(trust_transition=tr)
    assert belief_update(p, 1.0, F, CL, AUTO) == 1.0


@given(model_params(), st.floats(0, 1), st.floats(0, 1), st.integers(0, 1), st.integers(0, 1), st.integers(0, 1))
def test_belief_update_affine_and_bounded(params, b1, b2, e, c, a):
    f0 = belief_update(params, 0.0, e, c, a)
    f1 = belief_update(params, 1.0, e, c, a)
    for b in (b1, b2):
        v = belief_update(params, b, e, c, a)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(f0 + b * (f1 - f0), abs=1e-12)


# -- filtering -------------------------------------------------------------------

def test_filter_all_assist_low_is_constant():
    ep = [make_record(CL, ASSIST, False, False, t) for t in range(12)]
    traj = forward_filter(REFERENCE_PARAMS, ep)
    assert len(traj.beliefs) == 13
    assert np.all(traj.beliefs == 0.82)
    assert traj.log_likelihood == 0.0


def test_filter_empty_episode():
    traj = forward_filter(REFERENCE_PARAMS, [])
    assert traj.beliefs.tolist() == [0.82]
    assert traj.log_likelihood == 0.0


def test_filter_five_trial_enumeration():
    ep = [make_record(CH, AUTO, True, False, 0), make_record(CL, AUTO, False, False, 1),
          make_record(CH, ASSIST, False, False, 2), make_record(CH, AUTO, True, True, 3),
          make_record(CL, AUTO, True, True, 4)]
    traj = forward_filter(REFERENCE_PARAMS, ep)
    beliefs, posteriors, ll = enumerate_filter(REFERENCE_PARAMS, ep)
    np.testing.assert_allclose(traj.beliefs, beliefs, atol=1e-12)
    np.testing.assert_allclose(traj.posteriors, posteriors, atol=1e-12)
    assert traj.log_likelihood == pytest.approx(ll, abs=1e-12)


@given(model_params(), episodes(max_size=8))
def test_filter_matches_enumeration(params, ep):
    traj = forward_filter(params, ep)
    beliefs, posteriors, ll = enumerate_filter(params, ep)
    np.testing.assert_allclose(traj.beliefs, beliefs, atol=1e-9)
    if ep:
        np.testing.assert_allclose(traj.posteriors, posteriors, atol=1e-9)
    assert traj.log_likelihood == pytest.approx(ll, abs=1e-9)
    assert np.all((traj.beliefs >= 0) & (traj.beliefs <= 1))


def test_filter_step_agrees_with_trajectory():
    ep = random_episode(np.random.default_rng(3), 20)
    b = REFERENCE_PARAMS.initial_trust_high
    traj = forward_filter(REFERENCE_PARAMS, ep)
    for t, rec in enumerate(ep):
        b = filter_step(REFERENCE_PARAMS, b, rec)
        assert b == traj.beliefs[t + 1]


def test_zero_likelihood_is_located():
    obs = REFERENCE_PARAMS.observation.copy()
    obs[L, CL, AUTO] = 1.0
    p = REFERENCE_PARAMS.replace(observation=obs)
    ep = [make_record(CL, AUTO, True, True, 0, "ep7"), make_record(CL, AUTO, False, False, 1, "ep7")]
    with pytest.raises(ZeroLikelihoodError) as info:
        forward_filter(p, ep)
    assert info.value.trial == 1 and info.value.episode == "ep7"
    assert info.value.exit_code == 5
    with pytest.raises(ZeroLikelihoodError):
        log_likelihood(p, [ep])


# -- smoothing -------------------------------------------------------------------

def test_smoothing_single_trial_equals_filter():
    ep = [make_record(CH, AUTO, False, False)]
    sm = posterior_smoothing(REFERENCE_PARAMS, ep)
    traj = forward_filter(REFERENCE_PARAMS, ep)
    assert sm.gamma[0, H] == pytest.approx(traj.posteriors[0], abs=1e-15)


def test_smoothing_all_assist_low():
    ep = [make_record(CL, ASSIST, False, False, t) for t in range(7)]
    sm = posterior_smoothing(REFERENCE_PARAMS, ep)
    np.testing.assert_allclose(sm.gamma[:, H], 0.82, atol=1e-15)


def test_smoothing_six_trial_enumeration():
    ep = random_episode(np.random.default_rng(5), 6)
    sm = posterior_smoothing(REFERENCE_PARAMS, ep)
    gamma, xi, ll = enumerate_smoothing(REFERENCE_PARAMS, ep)
    np.testing.assert_allclose(sm.gamma, gamma, atol=1e-12)
    np.testing.assert_allclose(sm.xi, xi, atol=1e-12)
    assert sm.log_likelihood == pytest.approx(ll, abs=1e-12)


@given(model_params(), episodes(min_size=1, max_size=9))
def test_smoothing_matches_enumeration_and_is_consistent(params, ep):
    sm = posterior_smoothing(params, ep)
    gamma, xi, _ = enumerate_smoothing(params, ep)
    np.testing.assert_allclose(sm.gamma, gamma, atol=1e-9)
    np.testing.assert_allclose(sm.xi, xi, atol=1e-9)
    np.testing.assert_allclose(sm.gamma.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(sm.xi.sum(axis=2), sm.gamma[:-1], atol=1e-9)
    np.testing.assert_allclose(sm.xi.sum(axis=1), sm.gamma[1:], atol=1e-9)


# -- likelihood ------------------------------------------------------------------

def test_log_likelihood_assist_only_is_zero():
    eps = [[make_record(c, ASSIST, False, False, t, f"e{i}") for t, c in enumerate([CL, CH, CH, CL])]
           for i in range(3)]
    assert log_likelihood(REFERENCE_PARAMS, eps) == 0.0


def test_log_likelihood_enumeration():
    ep = random_episode(np.random.default_rng(8), 5)
    assert log_likelihood(REFERENCE_PARAMS, [ep]) == pytest.approx(enumerate_filter(REFERENCE_PARAMS, ep)[2], abs=1e-12)


def test_log_likelihood_prefers_generating_params(sim_data):
    tr = np.full((2, 2, 2, 2), 0.5)
    obs = np.zeros((2, 2, 2))
    obs[:, :, AUTO] = 0.5
    uniform = ModelParams(0.5, tr, obs)
    assert log_likelihood(REFERENCE_PARAMS, sim_data) > log_likelihood(uniform, sim_data)


@given(model_params(), st.lists(episodes(max_size=7), min_size=1, max_size=5))
def test_batched_likelihood_equals_per_episode(params, eps):
    eps = [[replace(r, episode_id=f"e{i}") for r in ep] for i, ep in enumerate(eps)]
    batch = EpisodeBatch.from_episodes(eps)
    per = batch_log_likelihood(params, batch)
    expected = [forward_filter(params, ep).log_likelihood for ep in eps]
    np.testing.assert_allclose(per, expected, atol=1e-10)


# -- Baum-Welch ------------------------------------------------------------------

def test_em_single_episode_monotone():
    ep = random_episode(np.random.default_rng(1), 60)
    _, diag = baum_welch_fit([ep], REFERENCE_PARAMS, restarts=1, max_iter=200)
    assert diag.is_monotone()
    assert diag.log_likelihood >= log_likelihood(REFERENCE_PARAMS, [ep]) - 1e-9


@settings(max_examples=15)
@given(model_params(), st.lists(episodes(min_size=2, max_size=12), min_size=1, max_size=4))
def test_em_trace_nondecreasing(init, eps):
    eps = [[replace(r, episode_id=f"e{i}") for r in ep] for i, ep in enumerate(eps)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, diag = baum_welch_fit(eps, init, restarts=1, max_iter=50)
    assert np.all(np.diff(diag.log_likelihood_trace) >= -1e-9)


def test_em_restart_selection(sim_data):
    params, diag = baum_welch_fit(sim_data, restarts=3, max_iter=40, seed=4)
    finals = [row["log_likelihood"] for row in diag.restarts]
    assert len(finals) == 3
    assert diag.log_likelihood == max(finals)
    assert diag.restart_index == int(np.argmax(finals))
    assert log_likelihood(params, sim_data) == pytest.approx(diag.log_likelihood, abs=1e-8)


def test_em_is_invariant_to_episode_order(sim_data):
    order = np.random.default_rng(0).permutation(len(sim_data))
    shuffled = [sim_data[i] for i in order]
    a, _ = baum_welch_fit(sim_data, restarts=1, max_iter=30)
    b, _ = baum_welch_fit(shuffled, restarts=1, max_iter=30)
    assert a == b


def test_em_thread_count_does_not_change_result(sim_data):
    a, da = baum_welch_fit(sim_data, restarts=3, max_iter=20, n_jobs=1)
    b, db = baum_welch_fit(sim_data, restarts=3, max_iter=20, n_jobs=3)
    assert a == b and da.log_likelihood_trace == db.log_likelihood_trace


def test_em_structure(sim_data):
    params, diag = baum_welch_fit(sim_data, restarts=2, max_iter=50)
    assert np.all(params.observation[:, :, ASSIST] == 0.0)
    # canonical labels: HIGH relies at least as much as LOW
    assert params.observation[H, :, AUTO].sum() >= params.observation[L, :, AUTO].sum()
    assert canonical_labels(params) is params
    # contexts that cannot occur keep the starting value
    start = diag.restarts[diag.restart_index]
    assert start["restart"] == diag.restart_index


def test_em_zero_count_contexts_carry_forward():
    eps = [[make_record(CL, AUTO, True, True, t, "a") for t in range(10)]]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        params, diag = baum_welch_fit(eps, REFERENCE_PARAMS, restarts=1, max_iter=20)
    assert params.trust_transition[H, R, CH, ASSIST] == REFERENCE_PARAMS.trust_transition[H, R, CH, ASSIST]
    assert params.observation[L, CH, AUTO] == REFERENCE_PARAMS.observation[L, CH, AUTO]
    assert "high,auto" in diag.missing_contexts
    assert "observation[*,high,auto]" in diag.unidentifiable


def test_em_degenerate_dataset():
    eps = [[make_record(CL, AUTO, True, True, t, "a") for t in range(5)]]
    with pytest.warns(UserWarning, match="never observed"):
        baum_welch_fit(eps, restarts=1, max_iter=5)
    with pytest.raises(DegenerateDatasetError) as info:
        baum_welch_fit(eps, restarts=1, strict=True)
    assert set(info.value.missing_contexts) == {"low,assist", "high,auto", "high,assist"}
    assert info.value.exit_code == 3
    with pytest.raises(DegenerateDatasetError):
        baum_welch_fit([], restarts=1)


def test_context_counts():
    ep = [make_record(CL, AUTO, True, True, 0), make_record(CH, ASSIST, False, False, 1),
          make_record(CH, AUTO, False, False, 2)]
    obs, trans = context_counts([ep])
    assert obs[(CL, AUTO)] == 1 and obs[(CH, ASSIST)] == 1 and obs[(CL, ASSIST)] == 0
    assert trans[(R, CL, AUTO)] == 1 and trans[(R, CH, ASSIST)] == 1 and trans[(F, CH, AUTO)] == 0


# -- Laplace ---------------------------------------------------------------------

def test_hessian_of_quadratic_is_exact():
    A = np.array([[-3.0, 1.0], [1.0, -2.0]])

    def fun(x):
        return 0.5 * x @ A @ x + x.sum()

    Hm, one_sided = finite_difference_hessian(fun, np.array([0.4, 0.6]), 1e-3)
    np.testing.assert_allclose(Hm, A, atol=1e-6)
    assert not one_sided.any()
    Hm, one_sided = finite_difference_hessian(fun, np.array([0.0, 0.9999]), 1e-3)
    np.testing.assert_allclose(Hm, A, atol=1e-5)
    assert one_sided.all()


def test_bernoulli_toy_closed_form():
    def loglik(x):
        p = x[0]
        return 50 * math.log(p) + 50 * math.log(1 - p)

    Hm, _ = finite_difference_hessian(loglik, np.array([0.5]), 1e-4)
    assert math.sqrt(1 / -Hm[0, 0]) == pytest.approx(0.05, abs=1e-6)


def _bernoulli_iohmm_toy(n=100, k=50):
    tr = np.zeros((2, 2, 2, 2))
    tr[H] = 1.0
    obs = np.zeros((2, 2, 2))
    obs[:, CL, AUTO] = k / n
    params = ModelParams(1.0, tr, obs)
    ep = [make_record(CL, AUTO, t < k, True, t) for t in range(n)]
    return params, [ep]


def test_bernoulli_toy_through_iohmm():
    params, data = _bernoulli_iohmm_toy()
    rep = laplace_uncertainty(params, data, parameters=["observation[high,low,auto]"])
    entry = rep["observation[high,low,auto]"]
    assert entry.std_error == pytest.approx(0.05, abs=1e-6)
    assert entry.count == 100 and entry.identifiable and not entry.boundary
    assert entry.literal_error == pytest.approx(math.sqrt(100 / 0.25), rel=1e-5)


def test_unseen_context_is_unidentifiable(sim_data):
    params, data = _bernoulli_iohmm_toy()
    rep = laplace_uncertainty(params, data)
    assert len(rep.entries) == len(free_parameters()) == 21
    e = rep["observation[high,high,auto]"]
    assert e.count == 0 and not e.identifiable and math.isnan(e.std_error)
    for entry in rep.entries:
        assert math.isnan(entry.std_error) or entry.std_error >= 0


def test_singular_hessian_pseudo_inverse():
    tr = np.full((2, 2, 2, 2), 0.5)
    obs = np.zeros((2, 2, 2))
    obs[:, :, AUTO] = 0.6
    params = ModelParams(0.5, tr, obs)
    rng = np.random.default_rng(0)
    data = [[make_record(CL, AUTO, rng.random() < 0.6, True, t) for t in range(200)]]
    names = ["observation[high,low,auto]", "observation[low,low,auto]"]
    with pytest.warns(UserWarning, match="pseudo-inverse"):
        rep = laplace_uncertainty(params, data, parameters=names)
    assert rep.singular
    assert all(np.isfinite(rep[n].std_error) and rep[n].std_error > 0 for n in names)
    with pytest.raises(SingularHessianError) as info:
        laplace_uncertainty(params, data, parameters=names, allow_pseudo=False)
    assert info.value.exit_code == 6


def test_uncertainty_csv_columns():
    params, data = _bernoulli_iohmm_toy()
    rep = laplace_uncertainty(params, data, parameters=["observation[high,low,auto]"])
    assert rep.to_csv().splitlines()[0] == "parameter,estimate,std_error,identifiable,count,boundary"
    assert "literal_error" in rep.to_csv(literal=True).splitlines()[0]


def test_vector_round_trip():
    x = params_to_vector(REFERENCE_PARAMS)
    assert len(x) == 21
    assert vector_to_params(x, REFERENCE_PARAMS) == REFERENCE_PARAMS


# -- estimator -------------------------------------------------------------------

def test_estimator_interface(sim_data):
    est = TrustIOHMM(n_restarts=2, max_iter=30, random_state=3)
    assert clone(est).get_params() == est.get_params()
    est.fit(sim_data)
    assert est.score(sim_data) == pytest.approx(log_likelihood(est.params_, sim_data))
    probs = est.predict_proba(sim_data[:2])
    assert len(probs) == 2 and probs[0].shape == (len(sim_data[0]) + 1,)
    np.testing.assert_array_equal(probs[1], forward_filter(est.params_, sim_data[1]).beliefs)
