import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simtune import autotune as at
from simtune.envs import Controller, make_env_spec, make_pseudo_real
from simtune.params import PARAM_FLOOR, percent_error
from simtune.spm import spm_predict

RULE = at.UpdateRule()
probs_st = st.floats(min_value=1e-6, max_value=1 - 1e-6)


@pytest.mark.parametrize("prob, expected", [(0.9, 1.05), (0.5, 1.0), (0.1, 0.95), (0.7, 1.0), (0.3, 1.0)])
def test_update_rule_examples(prob, expected):
    assert at.update_mean(RULE, [prob], [1.0])[0] == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.2, 1.5])
def test_update_rejects_probabilities_outside_open_interval(bad):
    with pytest.raises(ValueError):
        at.update_mean(RULE, [bad], [1.0])


def test_update_rule_validation():
    with pytest.raises(ValueError):
        at.UpdateRule(hi_threshold=0.4)
    with pytest.raises(ValueError):
        at.UpdateRule(alpha=0.0)
    with pytest.raises(ValueError):
        at.LoopSettings(r_sp=0.5, r_policy=0.5)


@given(st.lists(st.tuples(probs_st, st.floats(1e-3, 1e3)), min_size=1, max_size=8))
@settings(max_examples=200, deadline=None)
def test_each_parameter_moves_by_at_most_one_step(pairs):
    probs, mean = map(np.array, zip(*pairs))
    new = at.update_mean(RULE, probs, mean)
    ratio = new / mean
    assert np.all((ratio >= 1 - RULE.alpha - 1e-12) & (ratio <= 1 + RULE.alpha + 1e-12))
    in_zone = (probs >= RULE.lo_threshold) & (probs <= RULE.hi_threshold)
    assert np.array_equal(new[in_zone], mean[in_zone])


def test_update_respects_floor():
    assert at.update_mean(RULE, [0.01], [PARAM_FLOOR])[0] == PARAM_FLOOR


@pytest.mark.parametrize("real, expected", [(2.0, 1.0), (1.0, 0.5), (0.5, 0.0), (1.04, 0.5), (0.96, 0.5)])
def test_oracle_comparator_examples(real, expected):
    assert at.oracle_comparator([real], [1.0])[0] == expected


def test_seed_streams_are_independent_and_reproducible():
    s = at.SeedStreams(3)
    a = s.rng("sp_rollouts", 1).random(4)
    assert np.array_equal(a, at.SeedStreams(3).rng("sp_rollouts", 1).random(4))
    assert not np.array_equal(a, s.rng("sp_rollouts", 2).random(4))
    assert not np.array_equal(a, s.rng("policy_rollouts", 1).random(4))
    assert not np.array_equal(a, at.SeedStreams(4).rng("sp_rollouts", 1).random(4))


# --- oracle-driven search ---------------------------------------------------------------


def _oracle_state(truth_factors, start_factors, rounds):
    spec = make_env_spec("bouncing_ball", 16, 10)
    real = np.array(spec.real_params) * np.asarray(truth_factors)
    pseudo = make_pseudo_real(spec, real)
    mean0 = np.array(spec.real_params) * np.asarray(start_factors)
    state = at.new_state(spec, at.LoopSettings(rounds=rounds), 0, mean0, model_kind=None)
    return state, pseudo


def test_oracle_from_twice_the_truth_follows_closed_form():
    state, pseudo = _oracle_state(np.ones(8), np.full(8, 2.0), 20)
    at.run_autotune(state, pseudo, comparator=at.make_oracle(pseudo))
    real = pseudo.hidden_params()
    ratio = 2.0
    for rec in state.history:
        # scalar recurrence: step down by 5% while the truth sits below the equality band
        if 1.0 < ratio * (1 - at.DEFAULT_ETA):
            ratio *= 0.95
        np.testing.assert_allclose(rec.mean, ratio * real, rtol=1e-12)
    assert state.history[11].mean / real == pytest.approx(np.full(8, 2.0 * 0.95**12))
    first = [next(r.round for r in state.history if r.percent_error[i] < 10.0) for i in range(8)]
    assert first == [12] * 8
    # oracle mode needs no simulated data
    assert len(state.buffers.sp) == 0 and len(state.buffers.policy) == 0


@given(st.lists(st.floats(0.1, 10.0), min_size=8, max_size=8))
@settings(max_examples=40, deadline=None)
def test_oracle_search_converges_monotonically(start_ratio):
    """Start anywhere in [0.1x, 10x] of the truth; the bound covers the needed steps plus one."""
    alpha, eta = RULE.alpha, at.DEFAULT_ETA
    start = np.array(start_ratio)
    bound = [
        math.ceil(abs(math.log(1 / r)) / abs(math.log(1 + alpha if r < 1 else 1 - alpha))) + 1 for r in start_ratio
    ]
    state, pseudo = _oracle_state(np.ones(8), start, max(bound) + 5)
    at.run_autotune(state, pseudo, comparator=at.make_oracle(pseudo))
    errors = np.array([percent_error(start * pseudo.hidden_params(), pseudo.hidden_params())] + [r.percent_error for r in state.history])
    band = 100.0 * (alpha + eta)
    assert np.all(np.diff(errors, axis=0) <= 1e-9)
    for i, b in enumerate(bound):
        assert np.all(errors[b:, i] <= band), (i, start[i], errors[:, i])


def test_oracle_recovers_truth_outside_initial_support():
    # truth at 2.5x the initial mean, well outside mean * [0.5, 1.5]
    state, pseudo = _oracle_state(np.full(8, 2.5), np.ones(8), 40)
    at.run_autotune(state, pseudo, comparator=at.make_oracle(pseudo))
    bound = math.ceil(math.log(2.5) / math.log(1.05)) + 1
    assert all(np.all(r.percent_error <= 10.0) for r in state.history[bound - 1 :])


# --- regression baseline stubs ------------------------------------------------------------


def test_perfect_regressor_converges_geometrically():
    state, pseudo = _oracle_state(np.ones(8), np.full(8, 2.0), 30)
    real = pseudo.hidden_params()
    at.run_baseline_regression(state, pseudo, predictor=lambda _t: real)
    for rec in state.history:
        np.testing.assert_allclose(rec.mean - real, (2.0 * real - real) * 0.95**rec.round, rtol=1e-9, atol=1e-12)


def test_regressor_returning_current_mean_is_fixed_point():
    state, pseudo = _oracle_state(np.ones(8), np.full(8, 0.5), 5)
    mean0 = state.mean.copy()
    at.run_baseline_regression(state, pseudo, predictor=lambda _t: state.mean.copy())
    assert np.array_equal(state.mean, mean0)
    assert all(d == at.HOLD for r in state.history for d in r.decisions)


def test_regression_update_clamps_at_floor():
    assert at.regression_update([PARAM_FLOOR], [0.0], 0.05)[0] == PARAM_FLOOR
    assert at.regression_update([1.0], [0.0], 0.05)[0] == pytest.approx(0.95)


# --- small end-to-end rounds ---------------------------------------------------------------


def _tiny_settings(**kw):
    base = dict(
        rounds=2, pretrain_trajs=16, pretrain_steps=3, sim_param_itrs=2, sp_rollouts_per_round=4,
        policy_rollouts_per_round=3, real_rollouts_per_update=2, batch_size=8, eval_pairs=4,
    )
    base.update(kw)
    return at.LoopSettings(**base)


def _tiny_state(env_id="sliding_block", seed=0, model_kind="spm", blind=False, **kw):
    spec = make_env_spec(env_id, 16, 20)
    real = np.array(spec.real_params)
    state = at.new_state(spec, _tiny_settings(**kw), seed, 2.0 * real, blind=blind, model_kind=model_kind)
    return state, make_pseudo_real(spec, real)


def test_pretrain_fills_buffer_within_support():
    state, _ = _tiny_state()
    at.pretrain_phase(state)
    assert len(state.buffers.sp) == 16
    lo, hi = 0.5 * state.initial_mean, 1.5 * state.initial_mean
    for t in state.buffers.sp:
        assert np.all((t.gen_params >= lo - 1e-12) & (t.gen_params <= hi + 1e-12))
    assert state.pretrain_accuracy.shape == (6,)


def test_round_collects_trains_and_moves_boundedly():
    state, pseudo = _tiny_state(rounds=1)
    at.pretrain_phase(state)
    before = state.mean.copy()
    at.run_round(state, pseudo)
    assert state.round == 1 and len(state.history) == 1
    assert len(state.buffers.sp) == 16 + 4 and len(state.buffers.policy) == 3
    rec = state.history[0]
    ratio = rec.mean / before
    assert np.all((ratio > 0.95 - 1e-12) & (ratio < 1.05 + 1e-12))
    assert np.all((rec.probs > 0) & (rec.probs < 1))
    np.testing.assert_allclose(rec.percent_error, percent_error(rec.mean, pseudo.hidden_params()))


def test_policy_phase_stays_near_the_mean():
    state, pseudo = _tiny_state(rounds=1)
    at.pretrain_phase(state)
    at.run_round(state, pseudo)
    for t in state.buffers.policy:
        assert np.all(np.abs(t.gen_params / state.initial_mean - 1.0) <= 0.05 + 1e-12)


def test_blind_state_records_no_error():
    state, pseudo = _tiny_state(blind=True, rounds=1)
    at.run_autotune(state, pseudo)
    assert state.history[0].percent_error is None


def test_dr_baseline_never_moves_the_mean():
    state, pseudo = _tiny_state(model_kind=None, rounds=3)
    mean0 = state.mean.copy()
    at.run_baseline_dr(state, pseudo)
    assert np.array_equal(state.mean, mean0)
    errs = [r.percent_error for r in state.history]
    assert all(np.array_equal(e, errs[0]) for e in errs)
    assert len(state.buffers.sp) == 0 and len(state.buffers.policy) == 9
    for t in state.buffers.policy:
        assert np.all(np.abs(t.gen_params / mean0 - 1.0) <= 0.25 + 1e-12)


def test_methods_share_the_real_rollouts():
    a, pseudo = _tiny_state(model_kind=None)
    b, _ = _tiny_state(model_kind="spm")
    ra, _ = at._collect_round_data(a, pseudo, 1, 0.5, train=False)
    rb, _ = at._collect_round_data(b, pseudo, 1, 0.1, train=False)
    assert all(np.array_equal(x.frames, y.frames) and np.array_equal(x.actions, y.actions) for x, y in zip(ra, rb))


def test_aggregate_prediction_is_a_plain_mean():
    state, pseudo = _tiny_state()
    trajs = pseudo.rollouts(Controller(), [1, 2, 3])
    model, mean = state.model, state.mean
    single = at.aggregate_real_predictions(model, trajs[:1], mean)
    assert np.array_equal(single, spm_predict(model, trajs[0], mean))
    base = at.aggregate_real_predictions(model, trajs, mean)
    np.testing.assert_allclose(at.aggregate_real_predictions(model, trajs + trajs, mean), base, rtol=1e-12)
    np.testing.assert_allclose(at.aggregate_real_predictions(model, trajs[::-1], mean), base, rtol=1e-12)
    with pytest.raises(ValueError):
        at.aggregate_real_predictions(model, [], mean)


def test_pred_bound_tracks_mean_with_cap():
    state, _ = _tiny_state(model_kind=None)
    state.mean = state.initial_mean * 1.3
    np.testing.assert_allclose(state.pred_mean, state.initial_mean * 1.3)
    state.mean = state.initial_mean * 5.0
    np.testing.assert_allclose(state.pred_mean, state.initial_mean * 2.0 * at.ALIAS_GUARD)
    frozen, _ = _tiny_state(model_kind=None, track_pred_bound=False)
    frozen.mean = frozen.initial_mean * 1.3
    assert np.array_equal(frozen.pred_mean, frozen.initial_mean)


def test_autotune_loop_is_seed_deterministic():
    def run(seed):
        state, pseudo = _tiny_state(seed=seed)
        at.run_autotune(state, pseudo)
        return np.array([r.mean for r in state.history]), np.array([r.probs for r in state.history])

    (ma, pa), (mb, pb) = run(1), run(1)
    assert np.array_equal(ma, mb) and np.array_equal(pa, pb)


@pytest.mark.slow
@pytest.mark.parametrize("env_id", ["bouncing_ball", "damped_pendulum", "sliding_block"])
def test_pretraining_beats_identifiability_floor(env_id):
    spec = make_env_spec(env_id)
    settings_ = at.LoopSettings(pretrain_trajs=200, pretrain_steps=600, eval_pairs=64)
    state = at.new_state(spec, settings_, 0, np.array(spec.real_params))
    at.pretrain_phase(state)
    acc = state.pretrain_accuracy
    for i in spec.schema.indices("dynamics"):
        assert acc[i] >= 0.70, (spec.schema.names[i], acc[i])
