import json

import numpy as np
import pytest
from hypothesis import given

from _oracles import make_record, model_params, probability
from trustpomdp.exceptions import ConfigError, InconsistentRecordError
from trustpomdp.model import (
    DATA_COLLECTION_ASSIST,
    REFERENCE_ENV,
    REFERENCE_PARAMS,
    Complexity,
    EnvConfig,
    Experience,
    HumanAction,
    ModelParams,
    RobotAction,
    TrialRecord,
    TrustState,
    check_record,
    load_env,
    load_params,
    read_trial_log,
    record_violations,
    save_params,
    validate_params,
    write_trial_log,
)

H, L = TrustState.HIGH, TrustState.LOW
R, F = Experience.RELIABLE, Experience.FAULTY
CL, CH = Complexity.LOW, Complexity.HIGH
AUTO, ASSIST = RobotAction.AUTO, RobotAction.ASSIST


def test_enums_have_two_values_and_tokens():
    for enum in (TrustState, Complexity, RobotAction, HumanAction, Experience):
        assert len(enum) == 2
        for member in enum:
            assert enum.from_token(member.token) is member
    with pytest.raises(ConfigError):
        Complexity.from_token("medium")


def test_reference_values():
    p = REFERENCE_PARAMS
    assert p.initial_trust_high == 0.82
    assert p.observation[H, CL, AUTO] == 1.00
    assert p.observation[L, CL, AUTO] == 0.97
    assert p.observation[H, CH, AUTO] == 0.94
    assert p.observation[L, CH, AUTO] == 0.43
    assert np.all(p.observation[:, :, ASSIST] == 0.0)
    tr = p.trust_transition
    assert (tr[H, R, CL, AUTO], tr[L, R, CL, AUTO]) == (1.0, 0.0)
    assert (tr[H, F, CL, AUTO], tr[L, F, CL, AUTO]) == (0.71, 0.0)
    assert (tr[H, F, CL, ASSIST], tr[L, F, CL, ASSIST]) == (1.0, 0.0)
    assert (tr[H, R, CH, AUTO], tr[L, R, CH, AUTO]) == (1.0, 0.64)
    assert (tr[H, F, CH, AUTO], tr[L, F, CH, AUTO]) == (0.67, 0.12)
    assert (tr[H, R, CH, ASSIST], tr[L, R, CH, ASSIST]) == (1.0, 0.13)
    env = REFERENCE_ENV
    assert (env.p_success_low, env.p_success_high, env.discount) == (0.97, 0.75, 0.99)
    assert env.p_complex_high == 30 / 71
    assert (env.reward_success, env.reward_assist, env.reward_interrupt, env.reward_failure) == (3, 1, 0, -4)
    assert DATA_COLLECTION_ASSIST == {CL: 0.10, CH: 0.33}


def test_validate_reference_is_clean():
    assert validate_params(REFERENCE_PARAMS) == []
    assert validate_params(REFERENCE_PARAMS, REFERENCE_ENV) == []


def test_validate_structural_violation():
    obs = REFERENCE_PARAMS.observation.copy()
    obs[L, CH, ASSIST] = 0.5
    problems = validate_params(REFERENCE_PARAMS.replace(observation=obs))
    assert len(problems) == 1
    assert "low" in problems[0] and "assist" in problems[0] and "0.5" in problems[0]


def test_validate_range_violation():
    tr = REFERENCE_PARAMS.trust_transition.copy()
    tr[H, F, CH, AUTO] = 1.2
    problems = validate_params(REFERENCE_PARAMS.replace(trust_transition=tr))
    assert len(problems) == 1
    assert "1.2" in problems[0]


def test_validate_env_discount():
    assert validate_params(REFERENCE_PARAMS, REFERENCE_ENV.replace(discount=1.0))
    assert validate_params(REFERENCE_PARAMS, REFERENCE_ENV.replace(discount=0.0)) == []


def test_params_are_immutable():
    with pytest.raises(ValueError):
        REFERENCE_PARAMS.observation[0, 0, 0] = 0.3
    with pytest.raises(Exception):
        REFERENCE_PARAMS.initial_trust_high = 0.1


def test_params_file_schema(tmp_path):
    path = tmp_path / "p.json"
    save_params(path, REFERENCE_PARAMS, REFERENCE_ENV)
    data = json.loads(path.read_text())
    assert set(data) == {"initial_trust_high", "trust_transition", "observation", "env"}
    assert {"trust", "experience", "complexity", "action", "p_high"} == set(data["trust_transition"][0])
    assert {"trust", "complexity", "action", "p_rely"} == set(data["observation"][0])
    params, env = load_params(path)
    assert params == REFERENCE_PARAMS
    assert env == REFERENCE_ENV
    assert load_env(path) == REFERENCE_ENV


@given(model_params(probability))
def test_params_round_trip_is_bit_exact(params):
    again = ModelParams.from_dict(json.loads(json.dumps(params.to_dict())))
    assert again == params
    assert again.initial_trust_high == params.initial_trust_high
    assert np.array_equal(again.trust_transition, params.trust_transition)


def test_params_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"initial_trust_high": 0.5,\n  oops}')
    with pytest.raises(ConfigError, match="line 2"):
        load_params(bad)
    data = REFERENCE_PARAMS.to_dict()
    data["observation"] = data["observation"][:-1]
    with pytest.raises(ConfigError, match="missing"):
        ModelParams.from_dict(data)
    with pytest.raises(ConfigError):
        EnvConfig.from_dict({"p_success_low": 0.9, "colour": 1})


def test_record_consistency_rules():
    assert record_violations(make_record(CH, ASSIST, False, False)) == []
    bad = TrialRecord("e", 0, CL, ASSIST, HumanAction.RELY, F, 1)
    assert record_violations(bad)
    with pytest.raises(InconsistentRecordError):
        check_record(bad)
    wrong_reward = TrialRecord("e", 0, CL, AUTO, HumanAction.RELY, R, -4)
    assert record_violations(wrong_reward)
    wrong_exp = TrialRecord("e", 0, CH, ASSIST, HumanAction.INTERRUPT, F, 1)
    assert record_violations(wrong_exp)


def test_trial_log_round_trip(tmp_path):
    eps = [[make_record(CL, AUTO, True, True, 0, "a"), make_record(CH, ASSIST, False, False, 1, "a")],
           [make_record(CH, AUTO, False, False, 0, "b")]]
    path = tmp_path / "log.jsonl"
    write_trial_log(path, eps)
    lines = path.read_text().splitlines()
    assert json.loads(lines[0]) == {"episode_id": "a", "t": 0, "complexity": "low", "robot_action": "auto",
                                    "human_action": "rely", "experience": "reliable", "reward": 3}
    assert read_trial_log(path) == eps


def test_trial_log_reports_line(tmp_path):
    path = tmp_path / "log.jsonl"
    rec = make_record(CL, AUTO, True, True).to_dict()
    rec2 = dict(rec, complexity="medium")
    path.write_text(json.dumps(rec) + "\n" + json.dumps(rec2) + "\n")
    with pytest.raises(ConfigError, match="line 2"):
        read_trial_log(path)
