"""HTTP evaluation service. Holds the hidden geometry; planners only ever see depth images."""
from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse

from .. import PROTOCOL_VERSION, __version__
from ..episode import (EpisodeDone, EpisodeError, EpisodeRunning, EpisodeState, InfeasibleView, ViewIndexError,
                       check_feasible, execute_step, finalize, start_episode, stop_episode)
from ..objects import ObjectStore, UnknownObject
from ..viewspace import EmptyFeasibleSet
from .schemas import (CreateEpisode, EpisodeCreated, ErrorBody, Feasibility, Health, Metrics, Observation,
                      Observed, ObserveRequest, Record, Status, StopRequest)

PROTOCOL_HEADER = "X-Viewbench-Protocol"

_STATUS = {
    "unknown_object": 404,
    "unknown_episode": 404,
    "invalid_request": 422,
    "invalid_config": 422,
    "index_out_of_range": 422,
    InfeasibleView.code: 409,
    "duplicate_view": 409,
    EpisodeDone.code: 409,
    EpisodeRunning.code: 409,
}


class ServiceError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


@dataclass(eq=False)
class Session:
    state: EpisodeState
    lock: threading.Lock = field(default_factory=threading.Lock)


class SessionRegistry:
    def __init__(self, store: ObjectStore):
        self.store = store
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._sessions)

    def create(self, object_id: str, config) -> tuple[str, Session]:
        try:
            assets = self.store.get(object_id)
        except UnknownObject:
            raise ServiceError("unknown_object", f"no object registered as {object_id!r}") from None
        try:
            state = start_episode(object_id, assets, config)
        except (EmptyFeasibleSet, IndexError, ValueError) as exc:
            raise ServiceError("invalid_config", str(exc)) from None
        sid = uuid.uuid4().hex
        session = Session(state)
        with self._lock:
            self._sessions[sid] = session
        return sid, session

    def get(self, sid: str) -> Session:
        with self._lock:
            session = self._sessions.get(sid)
        if session is None:
            raise ServiceError("unknown_episode", f"no episode {sid!r}")
        return session

    def drop(self, sid: str):
        with self._lock:
            if self._sessions.pop(sid, None) is None:
                raise ServiceError("unknown_episode", f"no episode {sid!r}")


def _error(code: str, message: str) -> JSONResponse:
    body = ErrorBody(code=code, message=message).model_dump()
    return JSONResponse(body, status_code=_STATUS.get(code, 400), headers={PROTOCOL_HEADER: PROTOCOL_VERSION})


def create_app(store: ObjectStore) -> FastAPI:
    app = FastAPI(title="viewbench evaluation service", version=__version__)
    registry = SessionRegistry(store)
    app.state.registry = registry

    @app.middleware("http")
    async def protocol_header(request: Request, call_next):
        response = await call_next(request)
        response.headers[PROTOCOL_HEADER] = PROTOCOL_VERSION
        return response

    @app.exception_handler(ServiceError)
    async def service_error(request, exc: ServiceError):
        return _error(exc.code, exc.message)

    @app.exception_handler(EpisodeError)
    async def episode_error(request, exc: EpisodeError):
        return _error(exc.code, str(exc))

    @app.exception_handler(RequestValidationError)
    async def validation_error(request, exc: RequestValidationError):
        return _error("invalid_request", "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}"
                                                    for e in exc.errors()))

    @app.get("/health", response_model=Health)
    def health():
        return Health(version=__version__, protocol=PROTOCOL_VERSION, objects=len(store))

    @app.get("/objects", response_model=list[str])
    def objects():
        return store.ids()

    @app.post("/episodes", response_model=EpisodeCreated, status_code=201)
    def create_episode(req: CreateEpisode):
        try:
            config = req.protocol.to_config()
        except (ValueError, IndexError) as exc:
            raise ServiceError("invalid_config", str(exc)) from None
        sid, session = registry.create(req.object_id, config)
        st = session.state
        return EpisodeCreated(
            episode_id=sid, object_id=st.object_id, candidates=st.candidates.directions.tolist(),
            radius=st.candidates.radius, feasible=st.feasible_indices,
            observation=Observation.of(st.last_image), record=Record.of(st.records[0]), status=st.status)

    @app.get("/episodes/{sid}", response_model=Status)
    def episode_status(sid: str):
        st = registry.get(sid).state
        return Status(episode_id=sid, status=st.status, reason=st.reason, selected=st.selected)

    @app.get("/episodes/{sid}/feasible/{index}", response_model=Feasibility)
    def feasible(sid: str, index: int):
        st = registry.get(sid).state
        try:
            return Feasibility(index=index, feasible=check_feasible(st, index))
        except ViewIndexError as exc:
            raise ServiceError(exc.code, str(exc)) from None

    @app.post("/episodes/{sid}/observe", response_model=Observed)
    def observe(sid: str, req: ObserveRequest):
        session = registry.get(sid)
        with session.lock:
            st, rec = execute_step(session.state, req.view, req.planner_time)
            return Observed(observation=Observation.of(st.last_image), record=Record.of(rec),
                            status=st.status, reason=st.reason)

    @app.post("/episodes/{sid}/stop", response_model=Status)
    def stop(sid: str, req: StopRequest):
        session = registry.get(sid)
        with session.lock:
            st = stop_episode(session.state, req.reason)
            return Status(episode_id=sid, status=st.status, reason=st.reason, selected=st.selected)

    @app.get("/episodes/{sid}/metrics", response_model=Metrics)
    def metrics(sid: str):
        session = registry.get(sid)
        with session.lock:
            return Metrics.of(finalize(session.state))

    @app.get("/episodes/{sid}/trace", response_class=PlainTextResponse)
    def trace(sid: str):
        session = registry.get(sid)
        with session.lock:
            return PlainTextResponse(session.state.trace_csv(), media_type="text/csv")

    @app.delete("/episodes/{sid}", status_code=204)
    def delete(sid: str):
        registry.drop(sid)

    return app
