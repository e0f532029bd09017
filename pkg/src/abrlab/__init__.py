"""Trace-driven adaptive-bitrate streaming laboratory.

Subsystems: chunk-level QoE arithmetic (:mod:`abrlab.qoe`), network trace
ingest and synthesis (:mod:`abrlab.traces`), a deterministic streaming
simulator (:mod:`abrlab.sim`), an offline-optimal planner and expert
trajectory builder (:mod:`abrlab.expert`), a small differentiable kernel
(:mod:`abrlab.nn`), the QoE-to-go estimator (:mod:`abrlab.estimator`), the
causal sequence-model policy (:mod:`abrlab.dt`), rule-based baselines
(:mod:`abrlab.baselines`), and the evaluation harness, decision service and
CLI (:mod:`abrlab.harness`, :mod:`abrlab.service`, :mod:`abrlab.cli`).
"""

__version__ = "0.1.0"
