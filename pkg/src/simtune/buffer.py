"""Bounded FIFO of trajectories with stable insertion ids."""
from __future__ import annotations

from collections import deque

HOLDOUT_EVERY = 10


class TrajectoryBuffer:
    """FIFO store; every ``HOLDOUT_EVERY``-th inserted trajectory is held out.

    The split is keyed on insertion ids rather than positions so a trajectory
    never migrates between the training and held-out sides as old entries
    are evicted.
    """

    def __init__(self, capacity: int, require_params: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.require_params = require_params
        self._items = deque(maxlen=capacity)
        self._next_id = 0

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return (t for _, t in self._items)

    def add(self, traj) -> None:
        if self.require_params and traj.gen_params is None:
            raise ValueError("this buffer only stores trajectories with generating parameters")
        self._items.append((self._next_id, traj))
        self._next_id += 1

    def extend(self, trajs) -> None:
        for t in trajs:
            self.add(t)

    def split(self):
        train, held = [], []
        for i, t in self._items:
            (held if i % HOLDOUT_EVERY == HOLDOUT_EVERY - 1 else train).append(t)
        return train, held


def as_buffer(trajs) -> TrajectoryBuffer:
    if isinstance(trajs, TrajectoryBuffer):
        return trajs
    trajs = list(trajs)
    buf = TrajectoryBuffer(max(1, len(trajs)))
    buf.extend(trajs)
    return buf
