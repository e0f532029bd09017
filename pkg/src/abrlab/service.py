"""Stateless HTTP decision service.

Clients ship their current decision window (past observations, returns, and
executed actions); the server computes the fresh QoE-to-go estimate, runs
the sequence model, and answers with the chosen ladder level and that
estimate.  Because the client carries all state, any number of servers can
answer any request, and identical requests get identical responses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
import numpy as np

from . import dt, estimator as est
from .sim import Observation

OBS_FIELDS = ("buffer_s", "throughput_mbps", "download_s", "next_chunk_sizes_bytes", "remaining_frac")


class RequestError(ValueError):
    """Client-side problem with a /decide request."""


@dataclass
class DecisionBundle:
    model: dt.DtModel
    estimator_model: est.EstimatorModel
    ladder_kbps: tuple[float, ...]
    stats_window: int = 4
    manifest_ref: str = "default"


def _parse_observation(doc: dict, expected_sizes: int) -> Observation:
    if not isinstance(doc, dict):
        raise RequestError("each observation must be an object")
    missing = [k for k in OBS_FIELDS if k not in doc]
    if missing:
        raise RequestError(f"observation missing fields: {missing}")
    sizes = doc["next_chunk_sizes_bytes"]
    if not isinstance(sizes, list) or len(sizes) != expected_sizes:
        raise RequestError(f"next_chunk_sizes_bytes must be a list of {expected_sizes} values")
    try:
        return Observation(
            buffer_s=float(doc["buffer_s"]),
            throughput_mbps=float(doc["throughput_mbps"]),
            download_s=float(doc["download_s"]),
            next_chunk_sizes_bytes=np.asarray(sizes, dtype=np.float64),
            remaining_frac=float(doc["remaining_frac"]),
        )
    except (TypeError, ValueError) as exc:
        raise RequestError(f"invalid observation: {exc}") from None


def handle_decide(bundle: DecisionBundle, payload: dict) -> tuple[int, dict]:
    """Pure request handler: returns (http_status, response_body)."""
    try:
        if not isinstance(payload, dict):
            raise RequestError("request body must be a JSON object")
        if "ladder_kbps" in payload:
            if tuple(float(r) for r in payload["ladder_kbps"]) != bundle.ladder_kbps:
                raise RequestError("ladder_kbps does not match the served model")
        if payload.get("manifest_ref", bundle.manifest_ref) != bundle.manifest_ref:
            raise RequestError(f"unknown manifest_ref; this server serves {bundle.manifest_ref!r}")
        window_doc = payload.get("window")
        if not isinstance(window_doc, dict):
            raise RequestError("missing 'window' object")
        timesteps = window_doc.get("timesteps")
        observations = window_doc.get("observations")
        returns = window_doc.get("returns")
        actions = window_doc.get("actions")
        if not isinstance(timesteps, list) or not timesteps:
            raise RequestError("window.timesteps must be a non-empty list")
        n = len(timesteps)
        K = bundle.model.config.context_len
        if n > K:
            raise RequestError(f"window holds {n} timesteps; the model context is {K}")
        if any(int(b) != int(a) + 1 for a, b in zip(timesteps, timesteps[1:])):
            raise RequestError("window.timesteps must be consecutive")
        if not isinstance(observations, list) or len(observations) != n:
            raise RequestError(f"window.observations must list {n} observations")
        if not isinstance(returns, list) or len(returns) != n - 1:
            raise RequestError(f"window.returns must list {n - 1} past returns")
        if not isinstance(actions, list) or len(actions) != n - 1:
            raise RequestError(f"window.actions must list {n - 1} past actions")
        n_actions = bundle.model.config.action_count
        acts = []
        for a in actions:
            if not isinstance(a, int) or not 0 <= a < n_actions:
                raise RequestError(f"action {a!r} outside [0, {n_actions})")
            acts.append(a)
        expected_sizes = bundle.model.config.obs_dim - 4
        obs = [_parse_observation(o, expected_sizes) for o in observations]
    except RequestError as exc:
        return 400, {"error": str(exc)}

    try:
        # The timestep-0 observation carries a placeholder throughput, not a
        # measurement, so it is excluded from the window statistics.
        measured = [o.throughput_mbps for o, t in zip(obs, timesteps) if int(t) > 0]
        if measured:
            stats = est.throughput_stats(measured, window=bundle.stats_window)
        else:
            stats = est.STARTUP_PRIOR
        newest = obs[-1]
        r_hat = est.estimate(
            bundle.estimator_model, est.features(stats, newest.buffer_s, newest.remaining_frac)
        )
        window = dt.TrajectoryWindow(
            context_len=K,
            timesteps=[int(t) for t in timesteps],
            observations=[o.vector() for o in obs],
            returns=[float(r) for r in returns] + [r_hat],
            actions=acts + [None],
        )
        level = dt.decide(bundle.model, window)
    except Exception as exc:  # model-side failure
        return 500, {"error": f"decision failed: {exc}"}
    return 200, {"level": level, "r_hat": r_hat}


def make_server(bundle: DecisionBundle, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """HTTP server exposing POST /decide; port 0 picks an ephemeral port."""

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self) -> None:  # noqa: N802 (http.server API)
            if self.path != "/decide":
                self._reply(404, {"error": "unknown path; POST /decide"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length).decode("utf-8"))
            except (ValueError, UnicodeDecodeError) as exc:
                self._reply(400, {"error": f"bad request body: {exc}"})
                return
            status, body = handle_decide(bundle, payload)
            self._reply(status, body)

        def _reply(self, status: int, body: dict) -> None:
            data = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, fmt: str, *args) -> None:  # quiet by default
            pass

    return ThreadingHTTPServer((host, port), Handler)


def serve_decisions(bundle: DecisionBundle, host: str = "127.0.0.1", port: int = 8008) -> None:
    """Blocking entry point used by the CLI."""
    server = make_server(bundle, host, port)
    print(f"serving decisions on http://{host}:{server.server_address[1]}/decide")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
