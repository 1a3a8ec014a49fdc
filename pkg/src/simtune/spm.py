"""Search-param model: a per-parameter binary classifier over trajectory windows.

Given a window of frames and actions plus a candidate parameter vector, the
model estimates, for every parameter, the probability that the parameters
which generated the window exceed the candidate. A direct-regression model
sharing the encoder shape is kept alongside as a baseline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .buffer import as_buffer
from .nn import (
    Adam,
    Conv2d,
    Dense,
    Flatten,
    LayerStack,
    Workspace,
    ReLU,
    check_finite,
    load_checkpoint,
    logistic_loss,
    save_checkpoint,
    sigmoid,
    sinusoidal_encode,
)

WINDOW = 10
DEFAULT_ETA = 0.05
PROB_EPS = 1e-9


@dataclass
class SpmBatch:
    frames: np.ndarray  # (B, W, S, S, 3) uint8
    actions: np.ndarray  # (B, W, A)
    xi_pred: np.ndarray  # (B, N)
    labels: np.ndarray  # (B, N)
    mask: np.ndarray  # (B, N)
    xi_sim: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.frames)

    @classmethod
    def concat(cls, batches):
        batches = list(batches)
        return cls(
            *(np.concatenate([getattr(b, f) for b in batches]) for f in ("frames", "actions", "xi_pred", "labels", "mask")),
            xi_sim=np.concatenate([b.xi_sim for b in batches]),
        )

    def take(self, idx):
        return SpmBatch(
            self.frames[idx], self.actions[idx], self.xi_pred[idx], self.labels[idx], self.mask[idx], self.xi_sim[idx]
        )


def label_pairs(xi_sim, xi_pred, dist_mean, eta=DEFAULT_ETA):
    """Label 1 where the generating value exceeds the candidate; mask out the near-equal band."""
    xi_sim = np.asarray(xi_sim, dtype=np.float64)
    xi_pred = np.asarray(xi_pred, dtype=np.float64)
    labels = (xi_sim > xi_pred).astype(np.float64)
    mask = (np.abs(xi_sim - xi_pred) > eta * np.asarray(dist_mean)).astype(np.float64)
    return labels, mask


def make_training_pairs(traj, dist_mean, rng, pairs_per_traj=4, eta=DEFAULT_ETA, window=WINDOW) -> SpmBatch:
    """Cut random windows from a simulated trajectory and pair them with candidate vectors.

    Candidates are drawn per parameter uniformly from ``[0, 2 * dist_mean]``.
    """
    if traj.gen_params is None:
        raise ValueError("training pairs need a simulated trajectory (gen_params missing)")
    T = len(traj)
    if T < window:
        raise ValueError(f"trajectory has {T} frames, window needs {window}")
    dist_mean = np.asarray(dist_mean, dtype=np.float64)
    xi_sim = np.asarray(traj.gen_params, dtype=np.float64)
    starts = rng.integers(0, T - window + 1, size=pairs_per_traj)
    xi_pred = rng.uniform(0.0, 2.0 * dist_mean, size=(pairs_per_traj, dist_mean.shape[0]))
    labels, mask = label_pairs(xi_sim[None, :], xi_pred, dist_mean, eta)
    idx = starts[:, None] + np.arange(window)
    return SpmBatch(
        traj.frames[idx], traj.actions[idx], xi_pred, labels, mask, np.repeat(xi_sim[None, :], pairs_per_traj, 0)
    )


def window_starts(T, window=WINDOW):
    """Non-overlapping windows; a trailing partial window is dropped."""
    if T < window:
        raise ValueError(f"trajectory has {T} frames, window needs {window}")
    return list(range(0, T - window + 1, window))


def build_encoder(in_channels, frame_size, rng, dtype=np.float32, feature_dim=128) -> LayerStack:
    return LayerStack(
        [
            Conv2d(in_channels, 16, 3, 2, rng, dtype),
            ReLU(),
            Conv2d(16, 32, 3, 2, rng, dtype),
            ReLU(),
            Flatten(),
            Dense(32 * math.ceil(frame_size / 4) ** 2, feature_dim, rng, dtype),
        ],
        (frame_size, frame_size, in_channels),
    )


def build_mlp(in_dim, hidden, out_dim, rng, dtype=np.float32, zero_final=False) -> LayerStack:
    return LayerStack(
        [
            Dense(in_dim, hidden, rng, dtype),
            ReLU(),
            Dense(hidden, hidden, rng, dtype),
            ReLU(),
            Dense(hidden, out_dim, rng, dtype, zero_init=zero_final),
        ],
        (in_dim,),
    )


class _WindowModel:
    def __init__(self, schema, frame_size, action_dim, p_max, rng, window=WINDOW, feature_dim=128,
                 hidden=400, extra_dim=0, dtype=np.float32, lr=1e-3, beta1=0.9):
        self.schema = schema
        self.n_params = len(schema)
        self.frame_size = frame_size
        self.action_dim = action_dim
        self.window = window
        self.extra_dim = extra_dim
        self.dtype = dtype
        self._work = Workspace()
        self.p_max = np.asarray(p_max, dtype=np.float64).reshape(-1)
        if self.p_max.shape[0] != self.n_params or np.any(self.p_max <= 0):
            raise ValueError("p_max must hold one positive bound per parameter")
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.encoder = build_encoder(3 * window, frame_size, rng, dtype, feature_dim)
        self.feature_dim = feature_dim
        self.hidden = hidden
        self._build_heads(rng)
        self.optimizer = Adam(self.params, lr=lr, beta1=beta1)

    def _frames_input(self, frames):
        frames = np.asarray(frames)
        if frames.ndim != 5 or frames.shape[1:] != (self.window, self.frame_size, self.frame_size, 3):
            raise ValueError(f"frames must be (B, {self.window}, {self.frame_size}, {self.frame_size}, 3), got {frames.shape}")
        b = frames.shape[0]
        out = self._work.get((b, self.frame_size, self.frame_size, 3 * self.window), self.dtype)
        return kernels.stack_windows(np.ascontiguousarray(frames, dtype=np.uint8), self.dtype, out=out)

    def _actions_input(self, actions, b):
        actions = np.asarray(actions, dtype=self.dtype)
        if actions.shape != (b, self.window, self.action_dim):
            raise ValueError(f"actions must be ({b}, {self.window}, {self.action_dim}), got {actions.shape}")
        return actions.reshape(b, -1)

    def _extra_input(self, extra, b):
        if self.extra_dim == 0:
            if extra is not None and np.size(extra) > 0:
                raise ValueError("model was built without extra features")
            return np.zeros((b, 0), dtype=self.dtype)
        extra = np.asarray(extra, dtype=self.dtype).reshape(b, self.extra_dim)
        return extra

    @property
    def stacks(self):
        return [self.encoder] + self.heads

    @property
    def params(self):
        return [p for s in self.stacks for p in s.params]

    @property
    def grads(self):
        return [g for s in self.stacks for g in s.grads]

    def zero_grad(self):
        for s in self.stacks:
            s.zero_grad()

    def apply_gradients(self):
        self.optimizer.step(self.grads)
        check_finite(self.params, f"{type(self).__name__} parameters after Adam step {self.optimizer.t}")

    def save(self, path):
        save_checkpoint(path, [self.p_max] + self.params)

    def load(self, path):
        arrays = load_checkpoint(path)
        params = self.params
        if len(arrays) != len(params) + 1 or any(a.shape != p.shape for a, p in zip(arrays[1:], params)):
            raise ValueError(f"{path}: checkpoint does not match this model")
        # the format stores float32, so p_max is a consistency check and the exact value stays with the model
        if not np.array_equal(arrays[0], self.p_max.astype(np.float32)):
            raise ValueError(f"{path}: checkpoint was trained with a different p_max")
        for a, p in zip(arrays[1:], params):
            p[...] = a


class SpmModel(_WindowModel):
    """Shared conv encoder plus one MLP head per parameter emitting a logit."""

    def __init__(self, schema, frame_size, action_dim, p_max, rng, levels=6, zero_final=False, **kw):
        self.levels = levels
        self.zero_final = zero_final
        super().__init__(schema, frame_size, action_dim, p_max, rng, **kw)

    def _build_heads(self, rng):
        self.head_in = self.feature_dim + self.window * self.action_dim + 2 * self.levels + self.extra_dim
        self.heads = [
            build_mlp(self.head_in, self.hidden, 1, rng, self.dtype, self.zero_final) for _ in range(self.n_params)
        ]

    def logits(self, frames, actions, xi_pred, extra=None):
        """Forward pass over a batch of windows; caches for :meth:`backward`."""
        x = self._frames_input(frames)
        b = x.shape[0]
        act = self._actions_input(actions, b)
        xi_pred = np.asarray(xi_pred, dtype=np.float64).reshape(b, self.n_params)
        enc = sinusoidal_encode(xi_pred, self.p_max, self.levels).astype(self.dtype)
        ext = self._extra_input(extra, b)
        feat = self.encoder.forward(x)
        out = np.empty((b, self.n_params), dtype=self.dtype)
        for i, head in enumerate(self.heads):
            h_in = np.concatenate([feat, act, enc[:, i, :], ext], axis=1)
            out[:, i] = head.forward(h_in)[:, 0]
        return out

    def backward(self, dlogits):
        dfeat = None
        for i, head in enumerate(self.heads):
            g = head.backward(np.ascontiguousarray(dlogits[:, i : i + 1]))
            gf = g[:, : self.feature_dim]
            dfeat = gf.copy() if dfeat is None else dfeat + gf
        self.encoder.backward(dfeat, need_input_grad=False)

    def probabilities(self, frames, actions, xi_pred, extra=None):
        p = sigmoid(self.logits(frames, actions, xi_pred, extra))
        return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def spm_forward_window(model: SpmModel, frames10, actions10, xi_pred, extra=None) -> np.ndarray:
    """Per-parameter probabilities for one window; reads only inputs."""
    e = None if extra is None else np.asarray(extra)[None]
    return model.probabilities(np.asarray(frames10)[None], np.asarray(actions10)[None], np.asarray(xi_pred)[None], e)[0]


def spm_predict(model: SpmModel, traj, xi_pred, extra=None) -> np.ndarray:
    """Average the window predictions over consecutive non-overlapping windows."""
    w = model.window
    probs = [
        spm_forward_window(model, traj.frames[s : s + w], traj.actions[s : s + w], xi_pred, extra)
        for s in window_starts(len(traj), w)
    ]
    return np.mean(probs, axis=0)


@dataclass
class TrainMetrics:
    losses: list
    accuracy: np.ndarray  # per parameter, held-out (nan when nothing was evaluated)
    steps: int


def _sample_batch(trajs, n_rows, pred_mean, rng, pairs_per_traj, eta, window):
    n_traj = -(-n_rows // pairs_per_traj)
    pick = rng.choice(len(trajs), size=n_traj, replace=len(trajs) < n_traj)
    batch = SpmBatch.concat(
        make_training_pairs(trajs[i], pred_mean, rng, pairs_per_traj, eta, window) for i in pick
    )
    return batch.take(slice(0, n_rows))


def spm_train_step(model: SpmModel, batch: SpmBatch) -> float:
    """One masked-logistic Adam step; returns the pre-step loss."""
    model.zero_grad()
    logits = model.logits(batch.frames, batch.actions, batch.xi_pred)
    loss, grad = logistic_loss(logits, batch.labels, batch.mask)
    model.backward(grad)
    model.apply_gradients()
    return loss


def evaluate_spm(model: SpmModel, trajs, pred_mean, rng, pairs_per_traj=16, eta=DEFAULT_ETA, chunk=256):
    """Held-out accuracy per parameter over unmasked pairs."""
    trajs = list(trajs)
    if not trajs:
        return np.full(model.n_params, np.nan)
    batch = SpmBatch.concat(
        make_training_pairs(t, pred_mean, rng, pairs_per_traj, eta, model.window) for t in trajs
    )
    correct = np.zeros(model.n_params)
    count = np.zeros(model.n_params)
    for s in range(0, len(batch), chunk):
        part = batch.take(slice(s, s + chunk))
        p = model.probabilities(part.frames, part.actions, part.xi_pred)
        hit = ((p > 0.5) == (part.labels > 0.5)) * part.mask
        correct += hit.sum(axis=0)
        count += part.mask.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, correct / np.maximum(count, 1), np.nan)


def train_spm(model: SpmModel, buffer, steps, batch_size=128, rng=None, pairs_per_traj=4, eta=DEFAULT_ETA,
              pred_mean=None, shuffle_labels=False, eval_pairs=16, eval_rng=None) -> TrainMetrics:
    """Run ``steps`` Adam steps on pairs cut from the buffer's training split.

    ``pred_mean`` centers candidate sampling (defaults to ``p_max / 2``, the
    initial mean). With ``shuffle_labels`` the label/mask rows of every batch
    are permuted, which gives the chance-level control.
    """
    buf = as_buffer(buffer)
    if len(buf) == 0:
        raise ValueError("cannot train on an empty buffer")
    if len(buf) < batch_size:
        raise ValueError(f"buffer holds {len(buf)} trajectories, batch_size is {batch_size}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pred_mean = model.p_max / 2.0 if pred_mean is None else np.asarray(pred_mean, dtype=np.float64)
    train, held = buf.split()
    if not train:
        train = held
    losses = []
    for _ in range(steps):
        batch = _sample_batch(train, batch_size, pred_mean, rng, pairs_per_traj, eta, model.window)
        if shuffle_labels:
            perm = rng.permutation(len(batch))
            batch.labels, batch.mask = batch.labels[perm], batch.mask[perm]
        losses.append(spm_train_step(model, batch))
    if eval_rng is None:
        eval_rng = np.random.default_rng(rng.integers(2**63))
    acc = evaluate_spm(model, held, pred_mean, eval_rng, eval_pairs, eta)
    return TrainMetrics(losses, acc, steps)


# --- regression baseline ----------------------------------------------------------


class RegressionModel(_WindowModel):
    """Encoder plus one MLP regressing all parameters as fractions of ``p_max``."""

    def _build_heads(self, rng):
        self.head_in = self.feature_dim + self.window * self.action_dim + self.extra_dim
        self.heads = [build_mlp(self.head_in, self.hidden, self.n_params, rng, self.dtype)]

    def outputs(self, frames, actions, extra=None):
        x = self._frames_input(frames)
        b = x.shape[0]
        feat = self.encoder.forward(x)
        h_in = np.concatenate([feat, self._actions_input(actions, b), self._extra_input(extra, b)], axis=1)
        return self.heads[0].forward(h_in)

    def backward(self, dout):
        g = self.heads[0].backward(dout)
        self.encoder.backward(np.ascontiguousarray(g[:, : self.feature_dim]), need_input_grad=False)


def _regression_batch(trajs, n_rows, rng, window):
    pick = rng.integers(0, len(trajs), size=n_rows)
    frames, actions, targets = [], [], []
    for i in pick:
        t = trajs[i]
        s = int(rng.integers(0, len(t) - window + 1))
        frames.append(t.frames[s : s + window])
        actions.append(t.actions[s : s + window])
        targets.append(t.gen_params)
    return np.stack(frames), np.stack(actions), np.stack(targets)


def regression_train_step(model: RegressionModel, frames, actions, targets) -> float:
    model.zero_grad()
    out = model.outputs(frames, actions)
    diff = out.astype(np.float64) - targets / model.p_max
    loss = float(np.mean(diff**2))
    model.backward((2.0 * diff / diff.size).astype(model.dtype))
    model.apply_gradients()
    return loss


def regress_predict(model: RegressionModel, traj) -> np.ndarray:
    w = model.window
    outs = [
        model.outputs(traj.frames[s : s + w][None], traj.actions[s : s + w][None])[0].astype(np.float64)
        for s in window_starts(len(traj), w)
    ]
    frac = np.clip(np.mean(outs, axis=0), 0.0, 1.0)
    return frac * model.p_max


def train_regression(model: RegressionModel, buffer, steps, batch_size=128, rng=None) -> TrainMetrics:
    """Squared-error training on normalized parameters; reports held-out relative accuracy.

    The returned ``accuracy`` is ``1 - mean |pred - true| / true`` per parameter
    on the held-out split, so it reads on the same scale as the classifier's.
    """
    buf = as_buffer(buffer)
    if len(buf) == 0:
        raise ValueError("cannot train on an empty buffer")
    if len(buf) < batch_size:
        raise ValueError(f"buffer holds {len(buf)} trajectories, batch_size is {batch_size}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    train, held = buf.split()
    if not train:
        train = held
    for t in train:
        if t.gen_params is None:
            raise ValueError("regression needs simulated trajectories")
    losses = [
        regression_train_step(model, *_regression_batch(train, batch_size, rng, model.window)) for _ in range(steps)
    ]
    if held:
        rel = np.mean([np.abs(regress_predict(model, t) - t.gen_params) / t.gen_params for t in held], axis=0)
        acc = 1.0 - rel
    else:
        acc = np.full(model.n_params, np.nan)
    return TrainMetrics(losses, acc, steps)
