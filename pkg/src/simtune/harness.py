"""Experiment driver: builds the pseudo-real env, dispatches a method, writes metrics and summaries."""
from __future__ import annotations

import csv
import datetime as _dt
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autotune as at
from .config import RunConfig
from .envs import Controller, make_env_spec, make_pseudo_real
from .params import misparametrize, percent_error

CSV_SCHEMA_VERSION = 1
FULL_COLUMNS = (
    "schema_version", "round", "param_name", "mean", "hidden_real", "percent_error",
    "aggregate_prob", "decision", "spm_accuracy", "timestamp", "config_hash",
)
BLIND_COLUMNS = tuple(c for c in FULL_COLUMNS if c not in ("hidden_real", "percent_error"))
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
STATE_FILE = "state.json"
CONFIG_FILE = "config.json"


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return "nan" if math.isnan(x) else repr(float(x))
    return str(x)


def true_params(cfg: RunConfig) -> np.ndarray:
    spec = make_env_spec(cfg.env_id, cfg.frame_size, cfg.episode_len)
    real = np.array(spec.real_params, dtype=np.float64)
    for name, value in (cfg.real_params or {}).items():
        real[spec.schema.index(name)] = value
    return real


def initial_mean(cfg: RunConfig, real: np.ndarray) -> np.ndarray:
    if cfg.misparam_factors is not None:
        return misparametrize(real, cfg.misparam_factors)
    return misparametrize(real, rng=at.SeedStreams(cfg.seed).rng("misparam"), preset=cfg.misparam_preset)


def loop_settings(cfg: RunConfig) -> at.LoopSettings:
    return at.LoopSettings(
        r_sp=cfg.r_sp,
        r_policy=cfg.r_policy,
        r_dr=cfg.r_dr,
        rule=at.UpdateRule(cfg.alpha, cfg.hi_threshold, cfg.lo_threshold),
        eta=cfg.eta,
        rounds=cfg.rounds,
        pretrain_trajs=cfg.pretrain_trajs,
        pretrain_steps=cfg.pretrain_steps,
        sim_param_itrs=cfg.sim_param_itrs,
        sp_rollouts_per_round=cfg.sp_rollouts_per_round,
        policy_rollouts_per_round=cfg.policy_rollouts_per_round,
        real_rollouts_per_update=cfg.real_rollouts_per_update,
        batch_size=cfg.batch_size,
        pairs_per_traj=cfg.pairs_per_traj,
        eval_pairs=cfg.eval_pairs,
        track_pred_bound=cfg.track_pred_bound,
        controller=Controller(cfg.controller, hold=cfg.controller_hold),
    )


class MetricsWriter:
    """Streams one CSV row per parameter per round; flushes after each round."""

    def __init__(self, path: Path, names, config_hash: str, blind: bool, clock=None):
        self.path = Path(path)
        self.names = list(names)
        self.config_hash = config_hash
        self.blind = blind
        self.columns = BLIND_COLUMNS if blind else FULL_COLUMNS
        self.clock = clock or (lambda: _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="milliseconds"))
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(self.columns)
        self._fh.flush()

    def write_round(self, rec: at.RoundRecord, hidden_real: Optional[np.ndarray]) -> None:
        stamp = self.clock()
        for i, name in enumerate(self.names):
            row = {
                "schema_version": CSV_SCHEMA_VERSION,
                "round": rec.round,
                "param_name": name,
                "mean": float(rec.mean[i]),
                "hidden_real": None if hidden_real is None else float(hidden_real[i]),
                "percent_error": None if rec.percent_error is None else float(rec.percent_error[i]),
                "aggregate_prob": None if rec.probs is None else float(rec.probs[i]),
                "decision": rec.decisions[i],
                "spm_accuracy": None if rec.accuracy is None else float(rec.accuracy[i]),
                "timestamp": stamp,
                "config_hash": self.config_hash,
            }
            self._w.writerow([_fmt(row[c]) for c in self.columns])
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        if int(r["schema_version"]) != CSV_SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported metrics schema {r['schema_version']}")
    return rows


def mean_trajectory(rows) -> dict:
    """``{param_name: [mean at round 1, 2, ...]}`` from metrics rows."""
    out: dict = {}
    for r in rows:
        out.setdefault(r["param_name"], []).append(float(r["mean"]))
    return out


def _first_below(history, threshold=10.0):
    if not history or history[0].percent_error is None:
        return None
    n = len(history[0].percent_error)
    first = [None] * n
    for rec in history:
        for i in range(n):
            if first[i] is None and rec.percent_error[i] < threshold:
                first[i] = rec.round
    return first


def _tolist(a):
    return None if a is None else [float(x) for x in np.asarray(a)]


@dataclass
class RunResult:
    state: at.AutotuneState
    summary: dict
    out_dir: Path


def _save_state(state: at.AutotuneState, out_dir: Path, save_model: bool) -> None:
    ref = None
    if save_model and state.model is not None:
        ref = "model.ckpt"
        state.model.save(out_dir / ref)
    blob = {
        "round": state.round,
        "mean": _tolist(state.mean),
        "initial_mean": _tolist(state.initial_mean),
        "model_checkpoint": ref,
        "adam_step": getattr(getattr(state.model, "optimizer", None), "t", None),
    }
    (out_dir / STATE_FILE).write_text(json.dumps(blob, indent=2) + "\n")


def run_experiment(cfg: RunConfig, blind: bool = False, out_dir=None, clock=None) -> RunResult:
    """Execute one configured run and write ``metrics.csv``, ``summary.json`` and run state."""
    out_dir = Path(out_dir if out_dir is not None else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = make_env_spec(cfg.env_id, cfg.frame_size, cfg.episode_len)
    real = true_params(cfg)
    pseudo_real = make_pseudo_real(spec, real)
    mean0 = initial_mean(cfg, real)
    settings = loop_settings(cfg)
    chash = cfg.config_hash()
    (out_dir / CONFIG_FILE).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    model_kind = {"autotune": "spm", "regression_baseline": "regression"}.get(cfg.method)
    state = at.new_state(
        spec, settings, cfg.seed, mean0, blind=blind, model_kind=model_kind,
        buffers=at.BufferPair.create(cfg.sp_capacity, cfg.policy_capacity),
    )
    writer = MetricsWriter(out_dir / METRICS_FILE, spec.schema.names, chash, blind, clock)
    hidden = None if blind else real

    def on_round(s):
        writer.write_round(s.history[-1], hidden)
        _save_state(s, out_dir, cfg.save_checkpoints)

    try:
        if cfg.method == "autotune":
            at.run_autotune(state, pseudo_real, on_round=on_round)
        elif cfg.method == "oracle_test":
            at.run_autotune(state, pseudo_real, comparator=at.make_oracle(pseudo_real, cfg.eta), on_round=on_round)
        elif cfg.method == "dr_baseline":
            at.run_baseline_dr(state, pseudo_real, on_round=on_round)
        else:
            at.run_baseline_regression(state, pseudo_real, on_round=on_round)
    finally:
        writer.close()

    summary = {
        "schema_version": CSV_SCHEMA_VERSION,
        "env_id": cfg.env_id,
        "method": cfg.method,
        "seed": cfg.seed,
        "blind": blind,
        "config_hash": chash,
        "rounds": state.round,
        "param_names": list(spec.schema.names),
        "initial_mean": _tolist(mean0),
        "final_mean": _tolist(state.mean),
        "pretrain_accuracy": _tolist(state.pretrain_accuracy),
        "final_accuracy": _tolist(next((r.accuracy for r in reversed(state.history) if r.accuracy is not None), None)),
    }
    if not blind:
        init_err = percent_error(mean0, real)
        final_err = percent_error(state.mean, real)
        summary.update(
            hidden_real=_tolist(real),
            initial_percent_error=_tolist(init_err),
            final_percent_error=_tolist(final_err),
            initial_mean_percent_error=float(init_err.mean()),
            final_mean_percent_error=float(final_err.mean()),
            first_round_below_10pct=_first_below(state.history),
        )
    (out_dir / SUMMARY_FILE).write_text(json.dumps(summary, indent=2) + "\n")
    return RunResult(state, summary, out_dir)


def load_summary(run_dir) -> dict:
    path = Path(run_dir) / SUMMARY_FILE
    if not Path(run_dir).is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    return json.loads(path.read_text())


class CompareError(ValueError):
    pass


def compare_runs(run_dirs) -> list[dict]:
    """Group runs by method; mean and population std of the final mean percent error."""
    summaries = [load_summary(d) for d in run_dirs]
    envs = {s["env_id"] for s in summaries}
    if len(envs) != 1:
        raise CompareError(f"runs span several environments: {sorted(envs)}")
    names = {tuple(s["param_names"]) for s in summaries}
    if len(names) != 1:
        raise CompareError("runs use different parameter schemas")
    groups: dict = {}
    for d, s in zip(run_dirs, summaries):
        if "final_mean_percent_error" not in s:
            raise CompareError(f"{d}: blind runs carry no error to compare")
        groups.setdefault(s["method"], []).append(s)
    table = []
    for method in sorted(groups):
        runs = groups[method]
        final = np.array([r["final_mean_percent_error"] for r in runs])
        initial = np.array([r["initial_mean_percent_error"] for r in runs])
        table.append(
            {
                "env_id": runs[0]["env_id"],
                "method": method,
                "runs": len(runs),
                "seeds": " ".join(str(r["seed"]) for r in sorted(runs, key=lambda r: r["seed"])),
                "initial_error_mean": float(initial.mean()),
                "final_error_mean": float(final.mean()),
                "final_error_std": float(final.std()),
            }
        )
    return table


def write_table(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def format_table(rows) -> str:
    head = f"{'method':<22}{'runs':>5}  {'initial %err':>13}  {'final %err (mean ± std)':>26}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['method']:<22}{r['runs']:>5}  {r['initial_error_mean']:>13.2f}  "
            f"{r['final_error_mean']:>14.2f} ± {r['final_error_std']:<9.2f}"
        )
    return "\n".join(lines)
