import time
from dataclasses import dataclass

import numpy as np
import pytest

from simtune.buffer import TrajectoryBuffer
from simtune.envs import Controller, make_env_spec, rollout_many
from simtune.params import ParamDistribution, sample_params
from simtune.spm import SpmModel, train_spm

PRETRAIN_TRAJS = 200
PRETRAIN_STEPS = 1500


def small_rollouts(env_id="bouncing_ball", n=8, frame_size=16, episode_len=20, r=1.0, seed=0, mean=None):
    spec = make_env_spec(env_id, frame_size, episode_len)
    mean = np.array(spec.real_params if mean is None else mean, dtype=np.float64)
    rng = np.random.default_rng(seed)
    params = [sample_params(ParamDistribution(mean, r), rng) for _ in range(n)]
    return spec, rollout_many(spec, params, Controller(), list(range(seed * 1000, seed * 1000 + n)))


@dataclass
class Pretrained:
    spec: object
    model: SpmModel
    buffer: TrajectoryBuffer
    mean: np.ndarray
    accuracy: np.ndarray
    seconds: float


@pytest.fixture(scope="session")
def pretrained_ball():
    """bouncing_ball classifier trained on 200 rollouts drawn around the true parameters at r_sp = 1."""
    start = time.perf_counter()
    spec, trajs = small_rollouts("bouncing_ball", PRETRAIN_TRAJS, frame_size=32, episode_len=60, seed=11)
    buf = TrajectoryBuffer(PRETRAIN_TRAJS, require_params=True)
    buf.extend(trajs)
    mean = np.array(spec.real_params)
    model = SpmModel(spec.schema, spec.frame_size, spec.action_dim, 2.0 * mean, np.random.default_rng(12))
    metrics = train_spm(model, buf, PRETRAIN_STEPS, 128, np.random.default_rng(13), pred_mean=mean, eval_pairs=200)
    return Pretrained(spec, model, buf, mean, metrics.accuracy, time.perf_counter() - start)


ACCEPTANCE_LINES: dict = {}


def record_acceptance(number: int, passed: bool, detail: str) -> str:
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
