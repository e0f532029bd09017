"""Offline-optimal planning over a fully known trace, and expert trajectories.

The planner runs a forward dynamic program over states
(chunk index, quantized buffer, last level, quantized wall time), using the
simulator's fluid model for transitions and the per-chunk QoE as the reward.
Buffer and wall time are re-quantized after every transition, so the search
is exact whenever the true values land on quantization points and otherwise
accurate to a bound that scales with the quanta.

Expert trajectories pair each decision-time observation along the optimal
path with the estimator's QoE-to-go output and the optimal action as a
one-hot distribution; they are the training unit for the sequence model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .qoe import QoeParams, VideoManifest, quality
from .sim import BandwidthProfile, SessionLog, SessionState, SimConfig, run_policy
from .traces import NetworkTrace
from . import estimator as est


class DpError(ValueError):
    """Invalid planner input or an empty reachable state set."""


class DpBudgetError(DpError):
    """State count exceeded the configured budget; try coarser quanta."""


@dataclass(frozen=True)
class DpConfig:
    buffer_quantum_s: float = 0.5
    time_quantum_s: float = 0.5
    max_time_s: float = 7200.0
    max_states: int = 3_000_000
    # Strict dominance pruning (drop states with another state at
    # buffer >=, time <=, value >, same last level).  Large speedup, but can
    # sacrifice exactness when later trace segments are faster than earlier
    # ones, so it defaults off; the evaluation pipeline opts in.
    dominance_prune: bool = False

    def __post_init__(self) -> None:
        if self.buffer_quantum_s <= 0 or self.time_quantum_s <= 0:
            raise DpError("quanta must be positive")


@dataclass
class Plan:
    """Optimal action per remaining chunk plus the planner's value accounting.

    ``value_to_go[i]`` is the planned QoE sum from the i-th planned chunk to
    the end of the session; ``value_to_go[0] == total_qoe``.
    """

    actions: list[int]
    total_qoe: float
    value_to_go: np.ndarray
    start_chunk: int = 0


def dp_plan(
    manifest: VideoManifest,
    trace: NetworkTrace,
    params: QoeParams = QoeParams(),
    start_state: SessionState | None = None,
    dp_config: DpConfig = DpConfig(),
    sim_config: SimConfig = SimConfig(),
) -> Plan:
    """Maximize cumulative per-chunk QoE for all chunks from ``start_state`` on.

    The first chunk of a fresh session gets the simulator's startup treatment
    (its stall is not billed as rebuffering and it pays no smoothness term).
    Among action sequences within 1e-12 of the maximum, the lexicographically
    lowest (most rebuffer-averse) one is returned.
    """
    state0 = start_state if start_state is not None else SessionState()
    t0 = state0.next_chunk
    T = manifest.chunk_count
    if t0 > T:
        raise DpError(f"start_state.next_chunk {t0} beyond chunk count {T}")
    if t0 == T:
        return Plan(actions=[], total_qoe=0.0, value_to_go=np.zeros(0), start_chunk=t0)

    profile = BandwidthProfile(trace, sim_config.link_efficiency)
    n_lv = len(manifest.ladder)
    q_lv = np.array([quality(r, params) for r in manifest.ladder.levels])
    # Smoothness penalty lookup; row 0 is the no-previous-chunk sentinel.
    smooth = np.zeros((n_lv + 1, n_lv))
    smooth[1:, :] = params.smooth_penalty * np.abs(q_lv[:, None] - q_lv[None, :])

    dq_b = dp_config.buffer_quantum_s
    dq_t = dp_config.time_quantum_s
    cap = sim_config.buffer_cap_s
    dur = manifest.chunk_duration_s
    max_bq = int(round(cap / dq_b))
    # On a constant-bandwidth trace the download time is position-free, so
    # wall time can be dropped from the state identity.
    time_free = len(profile.seg_rates) == 1
    levels = np.arange(n_lv, dtype=np.int64)

    tq = np.array([int(round(state0.wall_clock_s / dq_t))], dtype=np.int64)
    bq = np.array([int(round(state0.buffer_s / dq_b))], dtype=np.int64)
    last = np.array(
        [-1 if state0.last_level is None else state0.last_level], dtype=np.int64
    )
    val = np.zeros(1)
    back: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []  # (parent, action, value)

    for t in range(t0, T):
        n = len(val)
        if n * n_lv > dp_config.max_states:
            raise DpBudgetError(
                f"{n * n_lv} candidate states at chunk {t} exceed max_states="
                f"{dp_config.max_states}; use coarser buffer/time quanta"
            )
        w_exp = np.repeat(tq, n_lv) * dq_t
        b_exp = np.repeat(bq, n_lv) * dq_b
        last_exp = np.repeat(last, n_lv)
        val_exp = np.repeat(val, n_lv)
        parent = np.repeat(np.arange(n, dtype=np.int64), n_lv)
        act = np.tile(levels, n)
        size_exp = manifest.chunk_sizes_bytes[t, act] * 8.0

        d = profile.download_time(w_exp, size_exp)
        stall = np.maximum(d - b_exp, 0.0)
        rebuf = np.zeros_like(stall) if t == 0 else stall
        b_mid = np.maximum(b_exp - d, 0.0) + dur
        sleep = np.maximum(b_mid - cap, 0.0)
        b_new = b_mid - sleep
        w_new = w_exp + d + sleep
        val_new = val_exp + q_lv[act] - params.rebuffer_penalty * rebuf - smooth[last_exp + 1, act]

        within = w_new <= dp_config.max_time_s
        if not np.any(within):
            raise DpError(
                f"all states passed max_time_s={dp_config.max_time_s} at chunk {t}"
            )
        tq_new = np.rint(w_new / dq_t).astype(np.int64)
        bq_new = np.rint(b_new / dq_b).astype(np.int64)

        key_t = np.zeros_like(tq_new) if time_free else tq_new
        key = (key_t * (max_bq + 1) + bq_new) * n_lv + act
        # ties at equal value resolve toward the lower level, then the
        # earlier parent, keeping plans deterministic and rebuffer-averse
        order = np.lexsort((parent, act, -val_new, key))
        order = order[within[order]]
        k_sorted = key[order]
        first = np.empty(len(order), dtype=bool)
        if len(order):
            first[0] = True
            first[1:] = k_sorted[1:] != k_sorted[:-1]
        sel = order[first]

        if dp_config.dominance_prune and not time_free:
            sel = sel[_dominant_mask(tq_new[sel], bq_new[sel], act[sel], val_new[sel], max_bq)]

        tq, bq, last, val = tq_new[sel], bq_new[sel], act[sel], val_new[sel]
        back.append((parent[sel], act[sel], val))

    total = float(val.max())
    candidates = np.flatnonzero(val >= total - 1e-12)[:64]
    best_actions: list[int] | None = None
    best_cum: list[float] = []
    for cand in candidates:
        actions: list[int] = []
        cum: list[float] = []
        idx = int(cand)
        for parent, action, value in reversed(back):
            actions.append(int(action[idx]))
            cum.append(float(value[idx]))
            idx = int(parent[idx])
        actions.reverse()
        cum.reverse()
        if best_actions is None or actions < best_actions:
            best_actions, best_cum = actions, cum
    cum_before = np.concatenate(([0.0], np.asarray(best_cum[:-1])))
    value_to_go = total - cum_before
    return Plan(actions=best_actions, total_qoe=total, value_to_go=value_to_go, start_chunk=t0)


def _dominant_mask(
    tq: np.ndarray, bq: np.ndarray, lv: np.ndarray, val: np.ndarray, max_bq: int
) -> np.ndarray:
    """Keep states not strictly dominated within their last-level group."""
    keep = np.ones(len(val), dtype=bool)
    for level in np.unique(lv):
        g = np.flatnonzero(lv == level)
        times, t_rank = np.unique(tq[g], return_inverse=True)
        grid = np.full((len(times), max_bq + 1), -np.inf)
        np.maximum.at(grid, (t_rank, bq[g]), val[g])
        grid = np.maximum.accumulate(grid, axis=0)  # earlier-or-equal time
        grid = np.maximum.accumulate(grid[:, ::-1], axis=1)[:, ::-1]  # higher-or-equal buffer
        keep[g] = val[g] >= grid[t_rank, bq[g]]
    return keep


def qoe_to_go_truth(
    manifest: VideoManifest,
    trace: NetworkTrace,
    params: QoeParams,
    state: SessionState,
    dp_config: DpConfig = DpConfig(),
    sim_config: SimConfig = SimConfig(),
) -> float:
    """Scaled maximum achievable QoE over the remaining chunks (0 when done)."""
    if state.next_chunk >= manifest.chunk_count:
        return 0.0
    plan = dp_plan(manifest, trace, params, state, dp_config, sim_config)
    return params.qoe_to_go_scale * plan.total_qoe


@dataclass
class Trajectory:
    """Per-trace expert sequence: (observation, estimated QoE-to-go, action).

    observations are raw decision-time vectors (T, obs_dim); returns hold the
    estimator output per chunk; actions are one-hot over ladder levels.
    """

    trace_tag: str
    timesteps: np.ndarray
    observations: np.ndarray
    returns: np.ndarray
    actions: np.ndarray

    def __len__(self) -> int:
        return len(self.timesteps)


def plan_session(
    manifest: VideoManifest,
    trace: NetworkTrace,
    params: QoeParams = QoeParams(),
    dp_config: DpConfig = DpConfig(),
    sim_config: SimConfig = SimConfig(),
) -> tuple[Plan, SessionLog]:
    """Plan once from the session start, then replay the plan in the simulator."""
    plan = dp_plan(manifest, trace, params, None, dp_config, sim_config)
    actions = plan.actions

    def follow(state: SessionState, obs) -> int:
        return actions[state.next_chunk]

    log = run_policy(follow, manifest, trace, sim_config, params)
    return plan, log


def trajectory_from_log(
    log: SessionLog,
    plan: Plan,
    estimator_model: "est.EstimatorModel",
    stats_window: int = 4,
) -> Trajectory:
    """Assemble the 3-modality expert sequence for one planned session.

    The return modality is the estimator's output on measured window
    statistics (startup prior before any measurement), not the planner's
    ground truth.
    """
    T = len(log.records)
    obs_mat = np.stack([o.vector() for o in log.observations])
    returns = np.empty(T)
    measured = [rec.throughput_mbps for rec in log.records]
    for t in range(T):
        stats = est.throughput_stats(measured[:t], window=stats_window) if t else est.STARTUP_PRIOR
        feats = est.features(stats, log.observations[t].buffer_s, log.observations[t].remaining_frac)
        returns[t] = est.estimate(estimator_model, feats)
    n_lv = log.observations[0].next_chunk_sizes_bytes.shape[0]
    actions = np.zeros((T, n_lv))
    actions[np.arange(T), plan.actions] = 1.0
    return Trajectory(
        trace_tag=log.trace_tag,
        timesteps=np.arange(T, dtype=np.int64),
        observations=obs_mat,
        returns=returns,
        actions=actions,
    )


def build_expert_trajectories(
    traces: Sequence[NetworkTrace],
    manifest: VideoManifest,
    params: QoeParams,
    estimator_model: "est.EstimatorModel",
    stats_window: int = 4,
    dp_config: DpConfig = DpConfig(),
    sim_config: SimConfig = SimConfig(),
) -> list[Trajectory]:
    out = []
    for trace in traces:
        plan, log = plan_session(manifest, trace, params, dp_config, sim_config)
        out.append(trajectory_from_log(log, plan, estimator_model, stats_window))
    return out


def save_trajectories(trajectories: Sequence[Trajectory], path: str | Path) -> None:
    """One trajectory per line: {"trace", "t", "o", "r", "a"}."""
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(
                json.dumps(
                    {
                        "trace": traj.trace_tag,
                        "t": traj.timesteps.tolist(),
                        "o": traj.observations.tolist(),
                        "r": traj.returns.tolist(),
                        "a": traj.actions.tolist(),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_trajectories(path: str | Path) -> list[Trajectory]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            out.append(
                Trajectory(
                    trace_tag=doc["trace"],
                    timesteps=np.asarray(doc["t"], dtype=np.int64),
                    observations=np.asarray(doc["o"], dtype=np.float64),
                    returns=np.asarray(doc["r"], dtype=np.float64),
                    actions=np.asarray(doc["a"], dtype=np.float64),
                )
            )
    return out
