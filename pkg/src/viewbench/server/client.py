"""HTTP client for the evaluation service, and a planner handle that runs over it."""
from __future__ import annotations

import httpx

from ..episode import (DuplicateView, EpisodeDone, EpisodeError, EpisodeRunning, InfeasibleView, ProtocolConfig,
                       ViewIndexError, trace_csv)
from ..planners import Clock, Handle, PlannerSpec, drive, episode_config_for, make_planner
from ..viewspace import ViewSet
from .schemas import CreateEpisode, EpisodeCreated, Metrics, Observed, ProtocolModel

_ERRORS = {cls.code: cls for cls in (InfeasibleView, DuplicateView, EpisodeDone, EpisodeRunning, ViewIndexError)}


class RemoteError(EpisodeError):
    def __init__(self, code: str, message: str, status: int):
        super().__init__(f"{code}: {message}")
        self.code, self.message, self.status = code, message, status


class EvaluationClient:
    """Thin wrapper over the JSON endpoints; accepts a base URL or a ready httpx.Client."""

    def __init__(self, target: str | httpx.Client, timeout: float = 600.0):
        self.http = target if isinstance(target, httpx.Client) else httpx.Client(base_url=target, timeout=timeout)

    def close(self):
        self.http.close()

    def _call(self, method: str, url: str, **kw):
        resp = self.http.request(method, url, **kw)
        if resp.is_success:
            return resp
        try:
            body = resp.json()
            code, message = body["code"], body["message"]
        except Exception:
            code, message = "http_error", resp.text
        cls = _ERRORS.get(code)
        if cls is not None:
            raise cls(message)
        raise RemoteError(code, message, resp.status_code)

    def health(self) -> dict:
        return self._call("GET", "/health").json()

    def create(self, object_id: str, config: ProtocolConfig | None = None) -> EpisodeCreated:
        proto = ProtocolModel.from_config(config) if config is not None else ProtocolModel()
        body = CreateEpisode(object_id=object_id, protocol=proto).model_dump()
        return EpisodeCreated.model_validate(self._call("POST", "/episodes", json=body).json())

    def feasible(self, sid: str, index: int) -> bool:
        return bool(self._call("GET", f"/episodes/{sid}/feasible/{index}").json()["feasible"])

    def observe(self, sid: str, view: int, planner_time: float = 0.0) -> Observed:
        body = {"view": int(view), "planner_time": float(planner_time)}
        return Observed.model_validate(self._call("POST", f"/episodes/{sid}/observe", json=body).json())

    def stop(self, sid: str, reason: str = "native-stop") -> dict:
        return self._call("POST", f"/episodes/{sid}/stop", json={"reason": reason}).json()

    def metrics(self, sid: str) -> Metrics:
        return Metrics.model_validate(self._call("GET", f"/episodes/{sid}/metrics").json())

    def trace(self, sid: str) -> str:
        return self._call("GET", f"/episodes/{sid}/trace").text

    def delete(self, sid: str):
        self._call("DELETE", f"/episodes/{sid}")


class RemoteHandle(Handle):
    def __init__(self, client: EvaluationClient, object_id: str, config: ProtocolConfig, track_grid: bool = False):
        super().__init__(track_grid, config.occupancy_cells)
        self.client = client
        created = client.create(object_id, config)
        self.episode_id = created.episode_id
        self.candidates = ViewSet(created.candidates, created.radius)
        self.feasible_indices = list(created.feasible)
        self._records = [created.record.record()]
        self._ingest(created.record.view, created.observation.image())

    def is_feasible(self, index: int) -> bool:
        return self.client.feasible(self.episode_id, index)

    def observe(self, index: int, planner_time: float):
        out = self.client.observe(self.episode_id, index, planner_time)
        rec = out.record.record()
        self._records.append(rec)
        self._ingest(index, out.observation.image())
        self.status, self.reason = out.status, out.reason
        return rec

    def stop(self, reason: str):
        out = self.client.stop(self.episode_id, reason)
        self.status, self.reason = out["status"], out["reason"]

    def report(self):
        return self.client.metrics(self.episode_id).report()

    @property
    def records(self):
        return list(self._records)

    def trace_csv(self) -> str:
        return trace_csv(self._records)


def run_remote(client: EvaluationClient, object_id: str, spec: PlannerSpec, config: ProtocolConfig,
               oracle=None, timing: str = "wall"):
    """Same loop as the in-process runner, over HTTP. Oracle planners still need their rows locally."""
    planner = make_planner(spec)
    cfg = episode_config_for(planner, config)
    handle = RemoteHandle(client, object_id, cfg, planner.needs_grid)
    drive(handle, planner, cfg.budget.limit, Clock(timing), oracle)
    return handle.records, handle.report()
