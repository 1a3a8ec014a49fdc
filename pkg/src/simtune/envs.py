"""Parametrized toy environments, a small RGB rasterizer and scripted controllers.

Three environments are shipped: ``bouncing_ball``, ``damped_pendulum`` and
``sliding_block``. Each exposes dynamics parameters (read by :func:`env_step`)
and visual parameters (read only by :func:`render`). World coordinates live
in the unit square with y pointing up; frames are ``(S, S, 3)`` uint8 arrays.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .params import ParamSchema

DEFAULT_DT = 0.02
SUBSTEPS = 4
FRAME_SIZES = (16, 32, 64)
MIN_EPISODE_LEN = 10
GRAVITY = 9.8


@dataclass(frozen=True)
class EnvState:
    q: tuple
    step: int = 0


@dataclass
class Trajectory:
    frames: np.ndarray  # (T, S, S, 3) uint8
    actions: np.ndarray  # (T, action_dim)
    gen_params: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.frames) != len(self.actions):
            raise ValueError("frames and actions must have equal length")

    def __len__(self):
        return len(self.frames)

    def without_params(self) -> "Trajectory":
        return Trajectory(self.frames, self.actions, None)


# --- environment dynamics -------------------------------------------------


class _BouncingBall:
    env_id = "bouncing_ball"
    schema = ParamSchema(
        names=("gravity", "restitution", "ball_r", "ball_g", "ball_b", "bg_r", "bg_g", "bg_b"),
        kinds=("dynamics", "dynamics") + ("visual",) * 6,
        reference_scale=(9.8, 1.0) + (1.0,) * 6,
        units=("m/s^2", "1") + ("rgb",) * 6,
    )
    real_params = (9.8, 0.7, 0.45, 0.2, 0.15, 0.1, 0.15, 0.3)
    action_dim = 1
    radius = 0.09
    push = 3.0
    max_speed = 6.0
    spawn_height = 0.9

    def reset(self, params, rng):
        return (float(rng.uniform(0.3, 0.7)), self.spawn_height, 0.0, 0.0)

    def step(self, q, action, params, dt):
        x, y, vx, vy = q
        g, e = params[0], params[1]
        r = self.radius
        h = dt / SUBSTEPS
        for _ in range(SUBSTEPS):
            vx += self.push * action[0] * h
            vy -= g * h
            vx = min(max(vx, -self.max_speed), self.max_speed)
            vy = min(max(vy, -self.max_speed), self.max_speed)
            x += vx * h
            y += vy * h
            if y < r:
                y = r
                if vy < 0:
                    vy = min(-e * vy, self.max_speed)
            elif y > 1.0 - r:
                y = 1.0 - r
                if vy > 0:
                    vy = max(-e * vy, -self.max_speed)
            if x < r:
                x, vx = r, abs(vx)
            elif x > 1.0 - r:
                x, vx = 1.0 - r, -abs(vx)
        return (x, y, vx, vy)

    def position(self, q):
        return q[0], q[2]

    def background(self, params):
        return params[5:8]

    def draw(self, img, q, params, size):
        kernels.draw_circle(img, q[0] * size, (1.0 - q[1]) * size, self.radius * size, params[2:5])


class _DampedPendulum:
    env_id = "damped_pendulum"
    schema = ParamSchema(
        names=("mass", "damping", "rod_r", "rod_g", "rod_b", "bg_r", "bg_g", "bg_b"),
        kinds=("dynamics", "dynamics") + ("visual",) * 6,
        reference_scale=(1.0, 0.4) + (1.0,) * 6,
        units=("kg", "N*m*s/rad") + ("rgb",) * 6,
    )
    real_params = (1.0, 0.4, 0.4, 0.35, 0.15, 0.15, 0.2, 0.1)
    action_dim = 1
    length = 1.0
    max_torque = 5.0
    pivot = (0.5, 0.62)
    draw_length = 0.38
    bob_radius = 0.07
    rod_half_width = 0.03

    def reset(self, params, rng):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return (sign * float(rng.uniform(0.5, 1.0)), 0.0)

    def step(self, q, action, params, dt):
        theta, omega = q
        m, b = params[0], params[1]
        inertia = m * self.length**2
        h = dt / SUBSTEPS
        tau = self.max_torque * action[0]
        for _ in range(SUBSTEPS):
            acc = (tau - b * omega) / inertia - GRAVITY / self.length * math.sin(theta)
            omega += acc * h
            theta += omega * h
        return (theta, omega)

    def energy(self, q, params):
        theta, omega = q
        m = params[0]
        return 0.5 * m * self.length**2 * omega**2 + m * GRAVITY * self.length * (1.0 - math.cos(theta))

    def position(self, q):
        return q[0], q[1]

    def background(self, params):
        return params[5:8]

    def draw(self, img, q, params, size):
        px, py = self.pivot
        bx = px + self.draw_length * math.sin(q[0])
        by = py - self.draw_length * math.cos(q[0])
        color = params[2:5]
        kernels.draw_segment(
            img, px * size, (1.0 - py) * size, bx * size, (1.0 - by) * size, self.rod_half_width * size, color
        )
        kernels.draw_circle(img, bx * size, (1.0 - by) * size, self.bob_radius * size, color)


class _SlidingBlock:
    env_id = "sliding_block"
    schema = ParamSchema(
        names=("friction", "mass", "brightness", "block_r", "block_g", "block_b"),
        kinds=("dynamics", "dynamics") + ("visual",) * 4,
        reference_scale=(0.3, 1.0, 1.0, 1.0, 1.0, 1.0),
        units=("1", "kg", "1", "rgb", "rgb", "rgb"),
    )
    real_params = (0.3, 1.0, 0.6, 0.4, 0.3, 0.2)
    action_dim = 1
    max_force = 10.0
    half_width = 0.08
    height = 0.12
    floor_y = 0.35
    # base colors, scaled by brightness together with the block
    backdrop = (0.4, 0.4, 0.45)
    floor_color = (0.15, 0.15, 0.15)

    def reset(self, params, rng):
        return (float(rng.uniform(0.35, 0.65)), 0.0)

    def step(self, q, action, params, dt):
        x, v = q
        mu, m = params[0], params[1]
        force = self.max_force * action[0]
        stick = mu * m * GRAVITY
        h = dt / SUBSTEPS
        for _ in range(SUBSTEPS):
            if v == 0.0:
                if abs(force) <= stick:
                    continue
                acc = (force - math.copysign(stick, force)) / m
                v = acc * h
            else:
                v_new = v + (force - math.copysign(stick, v)) / m * h
                v = 0.0 if v_new * v < 0.0 else v_new
            x += v * h
            if x < self.half_width:
                x, v = self.half_width, 0.0
            elif x > 1.0 - self.half_width:
                x, v = 1.0 - self.half_width, 0.0
        return (x, v)

    def position(self, q):
        return q[0], q[1]

    def background(self, params):
        return self.backdrop

    def brightness(self, params):
        return params[2]

    def draw(self, img, q, params, size):
        kernels.draw_rect(img, 0.0, (1.0 - self.floor_y) * size, float(size), float(size), self.floor_color)
        x0 = (q[0] - self.half_width) * size
        x1 = (q[0] + self.half_width) * size
        y0 = (1.0 - self.floor_y - self.height) * size
        y1 = (1.0 - self.floor_y) * size
        kernels.draw_rect(img, x0, y0, x1, y1, params[3:6])


ENVS = {cls.env_id: cls() for cls in (_BouncingBall, _DampedPendulum, _SlidingBlock)}


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    schema: ParamSchema
    dt: float = DEFAULT_DT
    frame_size: int = 32
    action_dim: int = 1
    episode_len: int = 60
    real_params: tuple = ()

    def __post_init__(self):
        if self.env_id not in ENVS:
            raise ValueError(f"unknown env {self.env_id!r}; choose from {sorted(ENVS)}")
        if self.frame_size not in FRAME_SIZES:
            raise ValueError(f"frame_size must be one of {FRAME_SIZES}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.episode_len < MIN_EPISODE_LEN:
            raise ValueError(f"episode_len must be >= {MIN_EPISODE_LEN}")


def make_env_spec(env_id: str, frame_size: int = 32, episode_len: int = 60, dt: float = DEFAULT_DT) -> EnvSpec:
    if env_id not in ENVS:
        raise ValueError(f"unknown env {env_id!r}; choose from {sorted(ENVS)}")
    env = ENVS[env_id]
    return EnvSpec(
        env_id=env_id,
        schema=env.schema,
        dt=dt,
        frame_size=frame_size,
        action_dim=env.action_dim,
        episode_len=episode_len,
        real_params=tuple(env.real_params),
    )


def env_reset(spec: EnvSpec, params, rng) -> EnvState:
    params = spec.schema.vector(params)
    return EnvState(ENVS[spec.env_id].reset(params, rng), 0)


def env_step(spec: EnvSpec, state: EnvState, action, params) -> EnvState:
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.shape[0] != spec.action_dim:
        raise ValueError(f"action must have {spec.action_dim} entries")
    if np.any(np.abs(action) > 1.0 + 1e-12):
        raise ValueError("actions must lie in [-1, 1]")
    q = ENVS[spec.env_id].step(state.q, action, params, spec.dt)
    return EnvState(q, state.step + 1)


def render(spec: EnvSpec, state: EnvState, params) -> np.ndarray:
    env = ENVS[spec.env_id]
    size = spec.frame_size
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = np.clip(env.background(params), 0.0, 1.0)
    # shape colors are clamped before blending
    clipped = np.clip(np.asarray(params, dtype=np.float64), 0.0, 1.0)
    env.draw(img, state.q, clipped, size)
    if hasattr(env, "brightness"):
        img *= env.brightness(params)
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


# --- controllers -----------------------------------------------------------

CONTROLLER_KINDS = ("random", "sinusoid", "scripted_reach")


@dataclass(frozen=True)
class Controller:
    """Action source standing in for a learned policy; actions lie in [-1, 1].

    ``hold`` repeats each random action for that many steps. ``seed``, when set,
    fixes the controller's own random stream independently of the rollout.
    """

    kind: str = "random"
    hold: int = 5
    amplitude: float = 1.0
    freq_range: tuple = (0.5, 2.0)
    gain: float = 2.0
    damping: float = 0.3
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ValueError(f"controller kind must be one of {CONTROLLER_KINDS}")
        if self.hold < 1:
            raise ValueError("hold must be >= 1")
        if not 0 < self.amplitude <= 1:
            raise ValueError("amplitude must be in (0, 1]")

    def start(self, spec: EnvSpec, rng: np.random.Generator) -> "_Policy":
        if self.seed is not None:
            rng = np.random.default_rng(self.seed)
        return _Policy(self, spec, rng)


class _Policy:
    def __init__(self, ctrl: Controller, spec: EnvSpec, rng: np.random.Generator):
        self.ctrl = ctrl
        self.spec = spec
        self.rng = rng
        self.dim = spec.action_dim
        self.last = np.zeros(self.dim)
        if ctrl.kind == "sinusoid":
            self.freq = rng.uniform(*ctrl.freq_range, size=self.dim)
            self.phase = rng.uniform(0.0, 2.0 * math.pi, size=self.dim)
        elif ctrl.kind == "scripted_reach":
            self.target = rng.uniform(0.25, 0.75) if spec.env_id != "damped_pendulum" else rng.uniform(-1.0, 1.0)

    def act(self, state: EnvState) -> np.ndarray:
        c = self.ctrl
        t = state.step
        if c.kind == "random":
            if t % c.hold == 0:
                self.last = self.rng.uniform(-c.amplitude, c.amplitude, size=self.dim)
            return self.last
        if c.kind == "sinusoid":
            return c.amplitude * np.sin(2.0 * math.pi * self.freq * t * self.spec.dt + self.phase)
        pos, vel = ENVS[self.spec.env_id].position(state.q)
        u = c.gain * (self.target - pos) - c.damping * vel
        return np.full(self.dim, np.clip(u, -c.amplitude, c.amplitude))


# --- rollouts ----------------------------------------------------------------


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def rollout(spec: EnvSpec, params, controller: Controller, rng) -> Trajectory:
    """Reset, then run ``episode_len`` steps; frame t is the observation before action t."""
    params = spec.schema.vector(params)
    init_rng, ctrl_rng = _as_rng(rng).spawn(2)
    state = env_reset(spec, params, init_rng)
    policy = controller.start(spec, ctrl_rng)
    size = spec.frame_size
    frames = np.empty((spec.episode_len, size, size, 3), dtype=np.uint8)
    actions = np.empty((spec.episode_len, spec.action_dim), dtype=np.float64)
    for t in range(spec.episode_len):
        frames[t] = render(spec, state, params)
        a = policy.act(state)
        actions[t] = a
        state = env_step(spec, state, a, params)
    return Trajectory(frames, actions, np.array(params))


def sim_threads() -> int:
    try:
        return max(1, int(os.environ.get("AUTOTUNE_SIM_THREADS", "1")))
    except ValueError:
        return 1


def rollout_many(spec: EnvSpec, param_list, controller: Controller, seeds) -> list[Trajectory]:
    """Roll out one episode per (params, seed); order follows the inputs."""
    jobs = list(zip(param_list, seeds))
    threads = min(sim_threads(), len(jobs))
    if threads <= 1:
        return [rollout(spec, p, controller, s) for p, s in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: rollout(spec, job[0], controller, job[1]), jobs))


@dataclass
class PseudoRealEnv:
    """A simulator with fixed hidden parameters, playing the real world.

    Trajectories handed out carry no parameters; :meth:`hidden_params` is the
    privileged accessor for evaluation only.
    """

    spec: EnvSpec
    _real: np.ndarray = field(repr=False)

    def rollout(self, controller: Controller, rng) -> Trajectory:
        return rollout(self.spec, self._real, controller, rng).without_params()

    def rollouts(self, controller: Controller, seeds) -> list[Trajectory]:
        trajs = rollout_many(self.spec, [self._real] * len(seeds), controller, seeds)
        return [t.without_params() for t in trajs]

    def hidden_params(self) -> np.ndarray:
        return np.array(self._real)


def make_pseudo_real(spec: EnvSpec, real_params) -> PseudoRealEnv:
    return PseudoRealEnv(spec, spec.schema.vector(real_params))


# --- frame dumps ---------------------------------------------------------------


def write_ppm(path, frame: np.ndarray) -> None:
    h, w, _ = frame.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(frame, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or parts[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit P6 image")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def dump_trajectory(traj: Trajectory, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(traj.frames):
        p = directory / f"frame_{t:04d}.ppm"
        write_ppm(p, frame)
        paths.append(p)
    return paths


def with_episode_len(spec: EnvSpec, episode_len: int) -> EnvSpec:
    return replace(spec, episode_len=episode_len)
