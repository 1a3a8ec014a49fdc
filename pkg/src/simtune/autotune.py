"""The calibration loop: buffers, alternating collection/training phases and mean updates.

Each round collects narrow-range rollouts into the policy buffer, wide-range
rollouts into the search buffer (and trains the classifier on them), then
queries the classifier on trajectories from the pseudo-real environment at
the current mean and nudges every parameter up, down, or not at all.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .buffer import TrajectoryBuffer
from .envs import Controller, EnvSpec, PseudoRealEnv, rollout_many
from .params import PARAM_FLOOR, ParamDistribution, percent_error, sample_params
from .spm import (
    DEFAULT_ETA,
    RegressionModel,
    SpmModel,
    regress_predict,
    spm_predict,
    train_regression,
    train_spm,
)

UP, DOWN, HOLD = "up", "down", "hold"
# fraction of the encoder period candidates may reach; see AutotuneState.pred_mean
ALIAS_GUARD = 0.99

# ids for independent random streams; see SeedStreams
STREAMS = {
    "misparam": 1,
    "model": 2,
    "pretrain_rollouts": 3,
    "pretrain_train": 4,
    "policy_rollouts": 5,
    "sp_rollouts": 6,
    "sp_train": 7,
    "real_rollouts": 8,
    "eval": 9,
    "resume_rollouts": 10,
}


class SeedStreams:
    """Named, per-round random generators derived from one run seed.

    Every phase draws from its own stream so changing how much one phase
    consumes never shifts another phase's randomness.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def rng(self, name: str, k: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, STREAMS[name], k])

    def seeds(self, name: str, k: int, n: int) -> list[int]:
        return [int(s) for s in self.rng(name, k).integers(0, 2**63 - 1, size=n)]


@dataclass(frozen=True)
class UpdateRule:
    alpha: float = 0.05
    hi_threshold: float = 0.7
    lo_threshold: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.lo_threshold < 0.5 < self.hi_threshold < 1.0:
            raise ValueError("thresholds must satisfy 0 < lo < 0.5 < hi < 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def decide(rule: UpdateRule, probs) -> list[str]:
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs <= 0.0) or np.any(probs >= 1.0):
        raise ValueError(f"probabilities must lie strictly inside (0, 1): {probs}")
    return [UP if p > rule.hi_threshold else DOWN if p < rule.lo_threshold else HOLD for p in probs]


def update_mean(rule: UpdateRule, probs, mean) -> np.ndarray:
    """Scale each parameter by (1 + alpha) / (1 - alpha) on confident up / down votes.

    ``probs[i]`` estimates P(real_i > mean_i), so a high value moves the mean up.
    """
    mean = np.asarray(mean, dtype=np.float64)
    step = {UP: 1.0 + rule.alpha, DOWN: 1.0 - rule.alpha, HOLD: 1.0}
    factors = np.array([step[d] for d in decide(rule, probs)])
    return np.maximum(mean * factors, PARAM_FLOOR)


def oracle_comparator(real, mean, eta=DEFAULT_ETA) -> np.ndarray:
    """Test double for the classifier that answers from the hidden truth."""
    real = np.asarray(real, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    out = np.full(real.shape, 0.5)
    out[real > mean * (1.0 + eta)] = 1.0
    out[real < mean * (1.0 - eta)] = 0.0
    return out


def aggregate_real_predictions(model: SpmModel, real_trajs, mean) -> np.ndarray:
    real_trajs = list(real_trajs)
    if not real_trajs:
        raise ValueError("need at least one real trajectory")
    return np.mean([spm_predict(model, t, mean) for t in real_trajs], axis=0)


@dataclass
class BufferPair:
    sp: TrajectoryBuffer
    policy: TrajectoryBuffer

    @classmethod
    def create(cls, sp_capacity=500, policy_capacity=1000):
        return cls(TrajectoryBuffer(sp_capacity, require_params=True), TrajectoryBuffer(policy_capacity))


@dataclass
class RoundRecord:
    round: int
    mean: np.ndarray
    probs: Optional[np.ndarray]
    decisions: list
    percent_error: Optional[np.ndarray]
    accuracy: Optional[np.ndarray] = None


@dataclass
class LoopSettings:
    """Counts and ranges the loop needs; the harness builds this from its config."""

    r_sp: float = 1.0
    r_policy: float = 0.1
    r_dr: float = 0.5
    rule: UpdateRule = field(default_factory=UpdateRule)
    eta: float = DEFAULT_ETA
    rounds: int = 40
    pretrain_trajs: int = 200
    pretrain_steps: int = 1500
    sim_param_itrs: int = 300
    sp_rollouts_per_round: int = 20
    policy_rollouts_per_round: int = 10
    real_rollouts_per_update: int = 5
    batch_size: int = 128
    pairs_per_traj: int = 4
    eval_pairs: int = 32
    track_pred_bound: bool = True
    controller: Controller = field(default_factory=Controller)

    def __post_init__(self):
        if not self.r_policy < self.r_sp:
            raise ValueError("r_policy must be smaller than r_sp")


@dataclass
class AutotuneState:
    spec: EnvSpec
    settings: LoopSettings
    streams: SeedStreams
    mean: np.ndarray
    initial_mean: np.ndarray
    buffers: BufferPair
    model: Optional[object] = None
    round: int = 0
    blind: bool = False
    history: list = field(default_factory=list)
    pretrain_accuracy: Optional[np.ndarray] = None

    @property
    def pred_mean(self) -> np.ndarray:
        """Center of candidate sampling, i.e. candidates are drawn from ``[0, 2 * pred_mean]``.

        Follows the current mean by default, capped so candidates stay below
        ``2 * p_max`` where the slowest encoding frequency would wrap around.
        """
        if not self.settings.track_pred_bound:
            return self.initial_mean
        return np.minimum(self.mean, ALIAS_GUARD * 2.0 * self.initial_mean)


def new_state(spec, settings, seed, initial_mean, blind=False, model_kind="spm", buffers=None) -> AutotuneState:
    streams = SeedStreams(seed)
    initial_mean = np.maximum(np.asarray(initial_mean, dtype=np.float64), PARAM_FLOOR)
    state = AutotuneState(
        spec=spec,
        settings=settings,
        streams=streams,
        mean=initial_mean.copy(),
        initial_mean=initial_mean.copy(),
        buffers=buffers or BufferPair.create(),
        blind=blind,
    )
    p_max = 2.0 * initial_mean
    if model_kind == "spm":
        state.model = SpmModel(spec.schema, spec.frame_size, spec.action_dim, p_max, streams.rng("model"))
    elif model_kind == "regression":
        state.model = RegressionModel(spec.schema, spec.frame_size, spec.action_dim, p_max, streams.rng("model"))
    return state


def collect(spec: EnvSpec, dist: ParamDistribution, controller: Controller, streams: SeedStreams, name: str, k: int, n: int):
    rng = streams.rng(name, k)
    params = [sample_params(dist, rng) for _ in range(n)]
    return rollout_many(spec, params, controller, streams.seeds(name, k + 1_000_000, n))


def _train(state: AutotuneState, steps: int, rng) -> np.ndarray:
    s = state.settings
    if isinstance(state.model, RegressionModel):
        return train_regression(state.model, state.buffers.sp, steps, s.batch_size, rng).accuracy
    metrics = train_spm(
        state.model,
        state.buffers.sp,
        steps,
        s.batch_size,
        rng,
        pairs_per_traj=s.pairs_per_traj,
        eta=s.eta,
        pred_mean=state.pred_mean,
        eval_pairs=s.eval_pairs,
        eval_rng=state.streams.rng("eval", state.round),
    )
    return metrics.accuracy


def pretrain_phase(state: AutotuneState, pretrain_trajs=None, pretrain_steps=None) -> AutotuneState:
    """Fill the search buffer from the initial distribution with a random controller and pretrain."""
    s = state.settings
    n = s.pretrain_trajs if pretrain_trajs is None else pretrain_trajs
    steps = s.pretrain_steps if pretrain_steps is None else pretrain_steps
    dist = ParamDistribution(state.initial_mean, s.r_sp)
    trajs = collect(state.spec, dist, Controller("random"), state.streams, "pretrain_rollouts", 0, n)
    state.buffers.sp.extend(trajs)
    if state.model is not None and steps > 0:
        state.pretrain_accuracy = _train(state, steps, state.streams.rng("pretrain_train"))
    return state


def _hidden_error(state, pseudo_real, mean):
    if state.blind or pseudo_real is None:
        return None
    return percent_error(mean, pseudo_real.hidden_params())


def _collect_round_data(state: AutotuneState, pseudo_real: PseudoRealEnv, k: int, policy_range: float, train: bool):
    s = state.settings
    spec, streams = state.spec, state.streams
    policy_dist = ParamDistribution(state.mean, policy_range)
    state.buffers.policy.extend(
        collect(spec, policy_dist, s.controller, streams, "policy_rollouts", k, s.policy_rollouts_per_round)
    )
    accuracy = None
    if train:
        sp_dist = ParamDistribution(state.mean, s.r_sp)
        state.buffers.sp.extend(collect(spec, sp_dist, s.controller, streams, "sp_rollouts", k, s.sp_rollouts_per_round))
        accuracy = _train(state, s.sim_param_itrs, streams.rng("sp_train", k))
    real_seeds = streams.seeds("real_rollouts", k, s.real_rollouts_per_update)
    real_trajs = pseudo_real.rollouts(s.controller, real_seeds)
    return real_trajs, accuracy


def run_round(state: AutotuneState, pseudo_real: PseudoRealEnv, comparator=None) -> AutotuneState:
    """One outer iteration. ``comparator(real_trajs, mean) -> probs`` replaces the classifier when given.

    A substituted comparator needs no simulated data, so collection and
    training are skipped for it.
    """
    k = state.round + 1
    s = state.settings
    if comparator is None:
        real_trajs, accuracy = _collect_round_data(state, pseudo_real, k, s.r_policy, train=True)
        probs = aggregate_real_predictions(state.model, real_trajs, state.mean)
    else:
        accuracy = None
        probs = np.asarray(comparator(None, state.mean), dtype=np.float64)
    # the dead zone is inclusive, so 0 / 1 from a test double are treated as confident votes
    clipped = np.clip(probs, 1e-12, 1.0 - 1e-12)
    decisions = decide(s.rule, clipped)
    state.mean = update_mean(s.rule, clipped, state.mean)
    state.round = k
    state.history.append(RoundRecord(k, state.mean.copy(), probs, decisions, _hidden_error(state, pseudo_real, state.mean), accuracy))
    return state


def make_oracle(pseudo_real: PseudoRealEnv, eta=DEFAULT_ETA):
    """Comparator closure that reads hidden truth; test and evaluation use only."""
    real = pseudo_real.hidden_params()
    return lambda _trajs, mean: oracle_comparator(real, mean, eta)


def run_autotune(state: AutotuneState, pseudo_real: PseudoRealEnv, comparator=None, on_round=None) -> AutotuneState:
    if comparator is None and state.round == 0 and len(state.buffers.sp) == 0:
        pretrain_phase(state)
    while state.round < state.settings.rounds:
        run_round(state, pseudo_real, comparator)
        if on_round is not None:
            on_round(state)
    return state


def run_baseline_dr(state: AutotuneState, pseudo_real: PseudoRealEnv, on_round=None) -> AutotuneState:
    """Domain randomization at a fixed mean: same collection path, never updates the mean."""
    s = state.settings
    while state.round < s.rounds:
        k = state.round + 1
        _collect_round_data(state, pseudo_real, k, s.r_dr, train=False)
        state.round = k
        state.history.append(
            RoundRecord(k, state.mean.copy(), None, [HOLD] * len(state.mean), _hidden_error(state, pseudo_real, state.mean))
        )
        if on_round is not None:
            on_round(state)
    return state


def regression_update(mean, prediction, alpha) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    return np.maximum(mean + alpha * (np.asarray(prediction, dtype=np.float64) - mean), PARAM_FLOOR)


def run_baseline_regression(state: AutotuneState, pseudo_real: PseudoRealEnv, predictor=None, on_round=None) -> AutotuneState:
    """Same loop, but the mean moves a fraction alpha toward a direct parameter regression.

    ``predictor(real_trajs) -> vector`` replaces the trained regressor when given.
    """
    s = state.settings
    if predictor is None and state.round == 0 and len(state.buffers.sp) == 0:
        pretrain_phase(state)
    while state.round < s.rounds:
        k = state.round + 1
        if predictor is None:
            real_trajs, accuracy = _collect_round_data(state, pseudo_real, k, s.r_policy, train=True)
            pred = np.mean([regress_predict(state.model, t) for t in real_trajs], axis=0)
        else:
            accuracy = None
            pred = np.asarray(predictor(None), dtype=np.float64)
        new_mean = regression_update(state.mean, pred, s.rule.alpha)
        decisions = [UP if n > m else DOWN if n < m else HOLD for n, m in zip(new_mean, state.mean)]
        state.mean = new_mean
        state.round = k
        state.history.append(
            RoundRecord(k, state.mean.copy(), None, decisions, _hidden_error(state, pseudo_real, state.mean), accuracy)
        )
        if on_round is not None:
            on_round(state)
    return state
