"""Independent oracles shared by the unit and acceptance suites.

The brute-force planner enumerates every action sequence through the real
simulator; it shares no code with the dynamic program it checks.  The
aligned-instance generator produces manifests/traces whose download times,
buffers, and wall clocks always land exactly on the planner's quantization
grid, so planner totals must match enumeration to float round-off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from abrlab import qoe, sim, traces


def brute_force_plan(manifest, trace, params=None, sim_config=None):
    """(best_total, best_actions) over all ladder^T sequences, via the simulator."""
    params = params or qoe.QoeParams()
    sim_config = sim_config or sim.SimConfig()
    profile = sim.BandwidthProfile(trace, sim_config.link_efficiency)
    n_lv = len(manifest.ladder)
    T = manifest.chunk_count
    best = [-np.inf, None]

    def recurse(state, records):
        t = state.next_chunk
        if t == T:
            total = qoe.session_qoe(records, params).total
            if total > best[0]:
                best[0] = total
                best[1] = [r.chosen_level for r in records]
            return
        for level in range(n_lv):
            _, rec, nxt = sim.step(state, level, manifest, trace, sim_config, params, profile)
            recurse(nxt, records + [rec])

    recurse(sim.init_session(manifest, trace, sim_config), [])
    return best[0], best[1]


@dataclass
class AlignedInstance:
    manifest: qoe.VideoManifest
    trace: traces.NetworkTrace
    quantum_s: float
    bw_ratio: float


def make_aligned_instance(rng: np.random.Generator, quantum_s: float = 0.25) -> AlignedInstance:
    """Instance whose dynamics stay exactly on the quantization grid.

    Bandwidths are p*u and u bits/s with u = 8e5 and chunk sizes
    u*quantum*p*k bits (integral bytes), so every download time is an exact
    multiple of the quantum in either segment and across the boundary; the
    chunk duration and segment boundary are grid multiples too, and the trace
    is long enough that no session wraps it.
    """
    unit_bps = 8e5
    p = int(rng.integers(1, 5))
    T = int(rng.integers(2, 7))
    n_lv = int(rng.integers(2, 4))
    k = np.sort(rng.integers(1, 13, size=(T, n_lv)), axis=1)
    k = np.maximum.accumulate(k, axis=1)
    sizes_bytes = unit_bps * quantum_s * p * k / 8.0
    ladder = qoe.BitrateLadder(tuple(300.0 * (i + 1) for i in range(n_lv)))
    manifest = qoe.VideoManifest(T, 4.0, ladder, sizes_bytes)

    two_segment = bool(rng.integers(0, 2)) and p > 1
    horizon = 10.0 * T * float(k.max()) * quantum_s * p + 100.0
    if two_segment:
        boundary = float(rng.integers(4, 33)) * quantum_s
        times = [0.0, boundary, horizon]
        bws = [p * unit_bps / 1e6, unit_bps / 1e6, unit_bps / 1e6]
    else:
        times = [0.0, horizon]
        bws = [p * unit_bps / 1e6, p * unit_bps / 1e6]
    trace = traces.NetworkTrace(np.asarray(times), np.asarray(bws), source_tag="aligned")
    return AlignedInstance(manifest=manifest, trace=trace, quantum_s=quantum_s, bw_ratio=float(p))


def make_nonaligned_instance(rng: np.random.Generator) -> AlignedInstance:
    """Small instance with arbitrary float sizes and a 2-segment trace."""
    T = int(rng.integers(2, 6))
    n_lv = int(rng.integers(2, 4))
    base = rng.uniform(100.0, 900.0, size=n_lv)
    ladder = qoe.BitrateLadder(tuple(np.sort(300.0 * np.arange(1, n_lv + 1) + rng.uniform(0, 50, n_lv))))
    sizes = np.sort(rng.uniform(3e4, 6e5, size=(T, n_lv)), axis=1)
    manifest = qoe.VideoManifest(T, 4.0, ladder, sizes)
    bw1 = rng.uniform(0.3, 2.0)
    ratio = rng.uniform(0.25, 4.0)
    bw2 = bw1 * ratio
    boundary = rng.uniform(2.0, 15.0)
    horizon = 4000.0
    trace = traces.NetworkTrace(
        np.asarray([0.0, boundary, horizon]),
        np.asarray([bw1, bw2, bw2]),
        source_tag="nonaligned",
    )
    return AlignedInstance(
        manifest=manifest, trace=trace, quantum_s=0.25, bw_ratio=float(max(ratio, 1.0 / ratio))
    )


def discretization_bound(instance: AlignedInstance, params: qoe.QoeParams, dp_config) -> float:
    """Worst-case planner value error from buffer/time re-quantization.

    Per chunk the representative buffer is off by at most half a buffer
    quantum and the representative start time by half a time quantum; a start
    shift of delta changes the download time by at most delta*(1 + ratio)
    where ratio bounds the bandwidth ratio across the trace.  Both feed the
    rebuffer term; the smoothness and utility terms are exact.
    """
    per_chunk = params.rebuffer_penalty * (
        dp_config.buffer_quantum_s / 2.0
        + dp_config.time_quantum_s / 2.0 * (1.0 + instance.bw_ratio)
    )
    return instance.manifest.chunk_count * per_chunk + 1e-9
