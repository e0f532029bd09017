"""End-to-end orchestration: corpus evaluation, ablation sweeps, reports.

A run configuration names the manifest, the trace corpus, and the algorithms
to compare; evaluation drives every algorithm over every test trace and
aggregates per-session QoE into a report with per-component means and CDF
sample points.  The pipeline helper regenerates everything (traces,
estimator, expert trajectories, sequence model) from one seed so that two
runs with the same configuration produce byte-identical reports.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import baselines, dt, estimator as est, expert, qoe, sim, traces


class HarnessError(ValueError):
    """Invalid run configuration or missing artifact."""


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str
    settings: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    manifest_path: str
    test_trace_paths: list[str]
    algorithms: list[AlgorithmSpec]
    train_trace_paths: list[str] = field(default_factory=list)
    qoe_params: qoe.QoeParams = field(default_factory=qoe.QoeParams)
    sim_config: sim.SimConfig = field(default_factory=sim.SimConfig)
    dp_config: expert.DpConfig = field(default_factory=expert.DpConfig)
    seed: int = 0
    output_dir: str = "out"

    def validate(self) -> None:
        if not self.algorithms:
            raise HarnessError("at least one algorithm is required")
        missing = [p for p in [self.manifest_path, *self.test_trace_paths] if not Path(p).exists()]
        if missing:
            raise HarnessError(f"missing input files: {missing}")


def load_run_config(path: str | Path) -> RunConfig:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    trace_doc = doc.get("traces", {})
    if "corpus_index" in doc:
        index = traces.load_corpus_index(doc["corpus_index"])
        trace_doc = {"train": index.get("train", []), "test": index.get("test", [])}
    algorithms = [
        AlgorithmSpec(a["name"], {k: v for k, v in a.items() if k != "name"})
        for a in doc.get("algorithms", [])
    ]
    return RunConfig(
        manifest_path=doc["manifest"],
        test_trace_paths=list(trace_doc.get("test", [])),
        train_trace_paths=list(trace_doc.get("train", [])),
        algorithms=algorithms,
        qoe_params=qoe.QoeParams(**doc.get("qoe", {})),
        sim_config=sim.SimConfig(**doc.get("sim", {})),
        dp_config=expert.DpConfig(**doc.get("dp", {})),
        seed=int(doc.get("seed", 0)),
        output_dir=doc.get("output_dir", "out"),
    )


@dataclass
class SessionSummary:
    algorithm: str
    trace_tag: str
    mean_qoe: float
    total_qoe: float
    utility: float
    rebuffer_penalty: float
    smoothness_penalty: float
    rebuffer_s: float
    startup_s: float


@dataclass
class AlgorithmAggregate:
    algorithm: str
    mean_qoe: float
    std_qoe: float
    utility: float
    rebuffer_penalty: float
    smoothness_penalty: float
    session_count: int


@dataclass
class EvalReport:
    """Per-session rows, per-algorithm aggregates, and CDF sample points.

    Component values are per-chunk means so that for every aggregate row
    mean_qoe == utility - rebuffer_penalty - smoothness_penalty.
    """

    sessions: list[SessionSummary]
    aggregates: list[AlgorithmAggregate]
    cdf: dict[str, dict[str, list[float]]]

    def to_dict(self) -> dict:
        return {
            "sessions": [asdict(s) for s in self.sessions],
            "aggregates": [asdict(a) for a in self.aggregates],
            "cdf": self.cdf,
        }

    @staticmethod
    def from_dict(doc: dict) -> "EvalReport":
        return EvalReport(
            sessions=[SessionSummary(**s) for s in doc["sessions"]],
            aggregates=[AlgorithmAggregate(**a) for a in doc["aggregates"]],
            cdf={k: {"qoe": list(v["qoe"]), "fraction": list(v["fraction"])} for k, v in doc["cdf"].items()},
        )


def summarize_session(
    algorithm: str, log: sim.SessionLog, params: qoe.QoeParams
) -> SessionSummary:
    totals = qoe.session_qoe(log.records, params)
    n = len(log.records)
    return SessionSummary(
        algorithm=algorithm,
        trace_tag=log.trace_tag,
        mean_qoe=totals.mean,
        total_qoe=totals.total,
        utility=totals.utility / n,
        rebuffer_penalty=totals.rebuffer_penalty / n,
        smoothness_penalty=totals.smoothness_penalty / n,
        rebuffer_s=log.final_state.rebuffer_total_s,
        startup_s=log.final_state.startup_delay_s,
    )


PolicyFactory = Callable[[traces.NetworkTrace], sim.Policy]


def make_policy_factory(
    spec: AlgorithmSpec,
    manifest: qoe.VideoManifest,
    params: qoe.QoeParams,
    sim_config: sim.SimConfig,
    dp_config: expert.DpConfig,
) -> PolicyFactory:
    """Resolve an algorithm spec to a per-trace policy constructor."""
    name, settings = spec.name, spec.settings
    if name == "bb":
        cfg = baselines.BbConfig(**_pick(settings, "reservoir_s", "cushion_s"))
        return lambda trace: baselines.BufferBasedPolicy(manifest.ladder, cfg)
    if name == "rb":
        window = int(settings.get("pred_window", 5))
        return lambda trace: baselines.RateBasedPolicy(manifest.ladder, window)
    if name == "mpc":
        cfg = baselines.MpcConfig(**_pick(settings, "horizon", "error_window", "pred_window"))
        return lambda trace: baselines.RobustMpcPolicy(manifest, params, cfg, sim_config)
    if name == "dt":
        model, estimator_model = _load_dt_bundle(settings)
        window = int(settings.get("stats_window", 4))
        return lambda trace: dt.DtPolicy(model, estimator_model, window)
    if name == "dp":
        cfg = replace(dp_config, **_pick(settings, "buffer_quantum_s", "time_quantum_s", "dominance_prune"))

        def dp_factory(trace: traces.NetworkTrace) -> sim.Policy:
            plan = expert.dp_plan(manifest, trace, params, None, cfg, sim_config)
            actions = plan.actions
            return lambda state, obs: actions[state.next_chunk]

        return dp_factory
    raise HarnessError(f"unknown algorithm {name!r}")


def _pick(settings: dict, *keys: str) -> dict:
    return {k: settings[k] for k in keys if k in settings}


def _load_dt_bundle(settings: dict):
    for key in ("checkpoint", "estimator"):
        if key in settings and isinstance(settings[key], str) and not Path(settings[key]).exists():
            raise HarnessError(f"algorithm 'dt': missing {key} file {settings[key]!r}")
    if "model" in settings and "estimator_model" in settings:
        return settings["model"], settings["estimator_model"]
    if "checkpoint" not in settings or "estimator" not in settings:
        raise HarnessError("algorithm 'dt': needs 'checkpoint' and 'estimator' paths")
    return dt.load_dt(settings["checkpoint"]), est.load_estimator(settings["estimator"])


def evaluate_corpus(
    config: RunConfig,
    manifest: qoe.VideoManifest | None = None,
    test_traces: Sequence[traces.NetworkTrace] | None = None,
) -> EvalReport:
    """Run every configured algorithm over every test trace.

    Pass preloaded ``manifest``/``test_traces`` to skip file IO (the pipeline
    does); otherwise they are loaded from the paths in the config.
    """
    if manifest is None or test_traces is None:
        config.validate()
        manifest = qoe.load_manifest(config.manifest_path)
        test_traces = [traces.load_trace_file(p) for p in config.test_trace_paths]
    if not config.algorithms:
        raise HarnessError("at least one algorithm is required")
    if not test_traces:
        raise HarnessError("no test traces")

    sessions: list[SessionSummary] = []
    aggregates: list[AlgorithmAggregate] = []
    cdf: dict[str, dict[str, list[float]]] = {}
    for spec in config.algorithms:
        factory = make_policy_factory(spec, manifest, config.qoe_params, config.sim_config, config.dp_config)
        rows = []
        for trace in test_traces:
            policy = factory(trace)
            log = sim.run_policy(policy, manifest, trace, config.sim_config, config.qoe_params)
            rows.append(summarize_session(spec.name, log, config.qoe_params))
        sessions.extend(rows)
        means = np.array([r.mean_qoe for r in rows])
        aggregates.append(
            AlgorithmAggregate(
                algorithm=spec.name,
                mean_qoe=float(means.mean()),
                std_qoe=float(means.std()),
                utility=float(np.mean([r.utility for r in rows])),
                rebuffer_penalty=float(np.mean([r.rebuffer_penalty for r in rows])),
                smoothness_penalty=float(np.mean([r.smoothness_penalty for r in rows])),
                session_count=len(rows),
            )
        )
        ordered = np.sort(means)
        cdf[spec.name] = {
            "qoe": [float(v) for v in ordered],
            "fraction": [float((i + 1) / len(ordered)) for i in range(len(ordered))],
        }
    return EvalReport(sessions=sessions, aggregates=aggregates, cdf=cdf)


def emit_report(report: EvalReport, output_dir: str | Path) -> dict[str, Path]:
    """Write report.json, summary.csv, and cdf.csv; returns the paths."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out / "report.json",
        "csv": out / "summary.csv",
        "cdf": out / "cdf.csv",
    }
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["algorithm", "mean_qoe", "std_qoe", "utility", "rebuffer_penalty", "smoothness_penalty", "sessions"]
        )
        for a in report.aggregates:
            writer.writerow(
                [a.algorithm, repr(a.mean_qoe), repr(a.std_qoe), repr(a.utility),
                 repr(a.rebuffer_penalty), repr(a.smoothness_penalty), a.session_count]
            )
    with open(paths["cdf"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["algorithm", "mean_qoe", "fraction"])
        for name, points in report.cdf.items():
            for v, f in zip(points["qoe"], points["fraction"]):
                writer.writerow([name, repr(v), repr(f)])
    return paths


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class SweepContext:
    """Shared artifacts for ablation sweeps, with plan/trajectory caching.

    Planning each training trace is the expensive part; it is done once and
    reused across the window sizes and context lengths being swept.
    """

    manifest: qoe.VideoManifest
    params: qoe.QoeParams
    train_traces: list[traces.NetworkTrace]
    test_traces: list[traces.NetworkTrace]
    estimator_model: est.EstimatorModel
    dt_config: dt.DtConfig
    dt_hyper: dt.DtTrainConfig
    stats_window: int = 4
    sim_config: sim.SimConfig = field(default_factory=sim.SimConfig)
    dp_config: expert.DpConfig = field(default_factory=expert.DpConfig)
    _plans: list[tuple[expert.Plan, sim.SessionLog]] | None = None
    _trajectories: dict[int, list[expert.Trajectory]] = field(default_factory=dict)
    _models: dict[tuple[int, int], dt.DtModel] = field(default_factory=dict)

    def plans(self) -> list[tuple[expert.Plan, sim.SessionLog]]:
        if self._plans is None:
            self._plans = [
                expert.plan_session(self.manifest, t, self.params, self.dp_config, self.sim_config)
                for t in self.train_traces
            ]
        return self._plans

    def trajectories(self, stats_window: int) -> list[expert.Trajectory]:
        if stats_window not in self._trajectories:
            self._trajectories[stats_window] = [
                expert.trajectory_from_log(log, plan, self.estimator_model, stats_window)
                for plan, log in self.plans()
            ]
        return self._trajectories[stats_window]

    def model(self, context_len: int, stats_window: int) -> dt.DtModel:
        key = (context_len, stats_window)
        if key not in self._models:
            cfg = replace(self.dt_config, context_len=context_len)
            trained, _ = dt.train_dt(self.trajectories(stats_window), cfg, self.dt_hyper)
            self._models[key] = trained
        return self._models[key]

    def evaluate_model(self, model: dt.DtModel, stats_window: int) -> tuple[float, float]:
        means = []
        for trace in self.test_traces:
            policy = dt.DtPolicy(model, self.estimator_model, stats_window)
            log = sim.run_policy(policy, self.manifest, trace, self.sim_config, self.params)
            means.append(summarize_session("dt", log, self.params).mean_qoe)
        arr = np.asarray(means)
        return float(arr.mean()), float(arr.std())


@dataclass
class SweepRow:
    parameter: str
    value: int
    mean_qoe: float
    std_qoe: float


def ablation_sweep(parameter: str, values: Sequence[int], ctx: SweepContext) -> list[SweepRow]:
    """Retrain (or reuse cached) models per value and evaluate on the test split.

    parameter "K" sweeps the sequence context length; "L" sweeps the
    throughput-statistics window feeding the QoE-to-go estimate (both in
    trajectory building and at decision time).
    """
    if parameter not in ("K", "L"):
        raise HarnessError("parameter must be 'K' or 'L'")
    rows = []
    for value in values:
        if parameter == "K":
            k, window = int(value), ctx.stats_window
        else:
            k, window = ctx.dt_config.context_len, int(value)
        model = ctx.model(k, window)
        mean, std = ctx.evaluate_model(model, window)
        rows.append(SweepRow(parameter=parameter, value=int(value), mean_qoe=mean, std_qoe=std))
    return rows


@dataclass
class PipelineConfig:
    """Desk-scale end-to-end run: corpus synthesis through final report."""

    seed: int = 7
    chunk_count: int = 48
    chunk_duration_s: float = 4.0
    size_jitter: float = 0.1
    # Estimator grid (coarsened from the full 0.1-step sweep).
    grid_mu_step: float = 0.5
    grid_sigma_step: float = 0.5
    grid_duration_s: float = 320.0
    estimator_epochs: int = 120
    # Regime-switching corpus for training/evaluating policies.
    n_train_traces: int = 200
    n_test_traces: int = 50
    trace_duration_s: float = 400.0
    segment_s: tuple[float, float] = (12.0, 35.0)
    mu_range: tuple[float, float] = (0.4, 3.0)
    sigma_rel_range: tuple[float, float] = (0.15, 0.4)
    # 0 draws each segment mean independently; > 0 makes the mean follow a
    # bounded log-space random walk (bandwidth trends instead of jumps).
    walk_scale: float = 0.0
    stats_window: int = 4
    dt_steps: int = 1500
    dt_batch: int = 128
    context_len: int = 4
    algorithms: tuple[str, ...] = ("bb", "rb", "mpc", "dt", "dp")
    dominance_prune: bool = True


def make_switching_corpus(
    n: int, config: PipelineConfig, seed: int, tag_prefix: str
) -> list[traces.NetworkTrace]:
    """Seeded piecewise-stationary traces: Gaussian segments with moving means."""
    out = []
    lo, hi = config.mu_range
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        mu = float(rng.uniform(lo, hi))
        segs = []
        remaining = config.trace_duration_s
        while remaining > 0:
            seg_len = min(remaining, float(rng.uniform(*config.segment_s)))
            sigma = mu * float(rng.uniform(*config.sigma_rel_range))
            segs.append(
                traces.SyntheticSpec(
                    mean_mbps=mu,
                    stddev_mbps=sigma,
                    duration_s=max(seg_len, 2.0),
                    seed=int(rng.integers(0, 2**31)),
                )
            )
            if config.walk_scale > 0:
                mu = float(np.clip(mu * np.exp(rng.normal(0.0, config.walk_scale)), lo, hi))
            else:
                mu = float(rng.uniform(lo, hi))
            remaining -= seg_len
        out.append(traces.gen_switching_trace(segs, source_tag=f"{tag_prefix}{i:03d}"))
    return out


def build_pipeline_context(config: PipelineConfig) -> SweepContext:
    """Generate corpora, train the estimator, and wire up a sweep context."""
    manifest = qoe.make_manifest(
        config.chunk_count, config.chunk_duration_s, size_jitter=config.size_jitter, seed=config.seed
    )
    params = qoe.QoeParams()
    dp_config = expert.DpConfig(dominance_prune=config.dominance_prune)
    grid = traces.estimator_grid(
        mu_step=config.grid_mu_step,
        sigma_step=config.grid_sigma_step,
        duration_s=config.grid_duration_s,
        seed=config.seed,
    )
    dataset = est.make_estimator_dataset(grid, manifest, params, dp_config)
    estimator_model, _ = est.train_estimator(
        dataset, est.EstimatorConfig(seed=config.seed, epochs=config.estimator_epochs)
    )
    train_traces = make_switching_corpus(config.n_train_traces, config, config.seed * 2 + 1, "train")
    test_traces = make_switching_corpus(config.n_test_traces, config, config.seed * 2 + 2, "test")
    obs_width = sim.obs_dim(len(manifest.ladder))
    dt_config = dt.DtConfig(
        context_len=config.context_len,
        action_count=len(manifest.ladder),
        obs_dim=obs_width,
        max_timestep=config.chunk_count,
    )
    dt_hyper = dt.DtTrainConfig(steps=config.dt_steps, batch_size=config.dt_batch, seed=config.seed)
    return SweepContext(
        manifest=manifest,
        params=params,
        train_traces=train_traces,
        test_traces=test_traces,
        estimator_model=estimator_model,
        dt_config=dt_config,
        dt_hyper=dt_hyper,
        stats_window=config.stats_window,
        dp_config=dp_config,
    )


def run_pipeline(config: PipelineConfig, output_dir: str | Path) -> tuple[EvalReport, dict[str, Path]]:
    """Full deterministic pass: synthesize, train, evaluate, emit report."""
    ctx = build_pipeline_context(config)
    model = ctx.model(config.context_len, config.stats_window)
    algorithms = []
    for name in config.algorithms:
        settings: dict = {}
        if name == "dt":
            settings = {
                "model": model,
                "estimator_model": ctx.estimator_model,
                "stats_window": config.stats_window,
            }
        algorithms.append(AlgorithmSpec(name, settings))
    run_cfg = RunConfig(
        manifest_path="<in-memory>",
        test_trace_paths=[],
        algorithms=algorithms,
        qoe_params=ctx.params,
        sim_config=ctx.sim_config,
        dp_config=ctx.dp_config,
        seed=config.seed,
        output_dir=str(output_dir),
    )
    report = evaluate_corpus(run_cfg, manifest=ctx.manifest, test_traces=ctx.test_traces)
    paths = emit_report(report, output_dir)
    return report, paths
