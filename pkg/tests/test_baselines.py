from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from abrlab import baselines, expert, qoe, sim, traces
from abrlab.baselines import (
    BbConfig,
    MpcConfig,
    bb_decide,
    harmonic_mean,
    rb_decide,
    robust_mpc_decide,
)
from abrlab.qoe import BitrateLadder, VideoManifest
from abrlab.sim import SessionState

from conftest import constant_trace


def test_bb_examples(ladder):
    assert bb_decide(2.0, ladder) == 0
    assert bb_decide(40.0, ladder) == 5
    assert bb_decide(10.0, ladder) == 3


@given(st.floats(min_value=0.0, max_value=60.0), st.floats(min_value=0.0, max_value=60.0))
def test_bb_monotone(b1, b2):
    ladder = BitrateLadder(qoe.DEFAULT_LADDER_KBPS)
    lo, hi = sorted((b1, b2))
    assert bb_decide(lo, ladder) <= bb_decide(hi, ladder)


def test_bb_validation(ladder):
    with pytest.raises(ValueError):
        bb_decide(-1.0, ladder)
    with pytest.raises(ValueError):
        BbConfig(cushion_s=0.0)


def test_rb_examples(ladder):
    assert rb_decide(1.0, ladder) == 1
    assert rb_decide(0.2, ladder) == 0
    assert rb_decide(100.0, ladder) == 5
    with pytest.raises(ValueError):
        rb_decide(0.0, ladder)


def test_harmonic_mean():
    assert harmonic_mean([1, 1, 1]) == pytest.approx(1.0)
    assert harmonic_mean([1, 3]) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        harmonic_mean([])


def test_mpc_sustains_top_level_on_fast_link(small_manifest, params):
    state = SessionState(next_chunk=1, buffer_s=30.0, last_level=5, wall_clock_s=5.0)
    history = [10.0] * 5
    assert robust_mpc_decide(state, small_manifest, history, MpcConfig(), params) == 5
    state2 = SessionState(next_chunk=2, buffer_s=30.0, last_level=5, wall_clock_s=7.0)
    assert robust_mpc_decide(state2, small_manifest, history, MpcConfig(), params) == 5


def test_mpc_error_discount_matches_clean_half_prediction(small_manifest, params):
    # History whose worst recent normalized error is exactly 1 halves the
    # forecast; a clean history at half the harmonic mean must decide alike.
    state = SessionState(next_chunk=1, buffer_s=12.0, last_level=0, wall_clock_s=3.0)
    noisy = [1.0, 1.0, 1.0, 1.0, 1.0, 0.5]
    assert baselines._max_recent_error(noisy, MpcConfig()) == pytest.approx(1.0)
    effective = harmonic_mean(noisy[-5:]) / 2.0
    clean = [effective] * 5
    assert baselines._max_recent_error(clean, MpcConfig()) == 0.0
    assert robust_mpc_decide(state, small_manifest, noisy, MpcConfig(), params) == robust_mpc_decide(
        state, small_manifest, clean, MpcConfig(), params
    )


def test_mpc_horizon_one_reduces_to_argmax(small_manifest, params):
    state = SessionState(next_chunk=small_manifest.chunk_count - 1, buffer_s=40.0, last_level=1, wall_clock_s=9.0)
    history = [1.8] * 5
    chosen = robust_mpc_decide(state, small_manifest, history, MpcConfig(horizon=5), params)
    # horizon truncates to 1 chunk: exhaustive single-step argmax
    rate = harmonic_mean(history) * 1e6
    best, best_val = 0, -np.inf
    for lv in range(6):
        d = small_manifest.chunk_bits(small_manifest.chunk_count - 1, lv) / rate
        value = qoe.chunk_qoe(
            small_manifest.ladder[lv], small_manifest.ladder[1], max(0.0, d - 40.0), params
        )
        if value > best_val:
            best, best_val = lv, value
    assert chosen == best


def test_mpc_matches_planner_first_action_on_stationary_traces(params):
    # Perfect constant-throughput prediction + horizon covering the session:
    # the horizon search and the planner agree whenever the optimum is unique.
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 4:
        n_lv = 2
        T = 3
        base = np.sort(rng.uniform(4e4, 4e5, size=n_lv))
        sizes = np.tile(base, (T, 1))
        ladder = BitrateLadder((300.0, 750.0))
        manifest = VideoManifest(T, 4.0, ladder, sizes)
        bw = float(rng.uniform(0.3, 1.6))
        trace = constant_trace(bw)
        totals = {}
        for seq in itertools.product(range(n_lv), repeat=T):
            state = sim.init_session(manifest, trace)
            recs = []
            for lv in seq:
                _, rec, state = sim.step(state, lv, manifest, trace)
                recs.append(rec)
            totals[seq] = qoe.session_qoe(recs, params).total
        ordered = sorted(totals.values(), reverse=True)
        if ordered[0] - ordered[1] < 1e-6:
            continue  # skip ties: tie-breaking conventions may differ
        checked += 1
        best_seq = max(totals, key=totals.get)
        plan = expert.dp_plan(manifest, trace, params, dp_config=expert.DpConfig(0.25, 0.25))
        state0 = sim.init_session(manifest, trace)
        mpc = robust_mpc_decide(state0, manifest, [bw], MpcConfig(horizon=T), params)
        assert plan.actions[0] == best_seq[0]
        assert mpc == best_seq[0]


def test_policies_drive_sessions(small_manifest):
    trace = traces.gen_synthetic_trace(traces.SyntheticSpec(1.5, 0.5, 120.0, seed=2))
    for policy in (
        baselines.BufferBasedPolicy(small_manifest.ladder),
        baselines.RateBasedPolicy(small_manifest.ladder),
        baselines.RobustMpcPolicy(small_manifest),
    ):
        log = sim.run_policy(policy, small_manifest, trace)
        assert len(log.records) == small_manifest.chunk_count
        again = sim.run_policy(policy, small_manifest, trace)  # reset() clears state
        assert [r.chosen_level for r in log.records] == [r.chosen_level for r in again.records]
