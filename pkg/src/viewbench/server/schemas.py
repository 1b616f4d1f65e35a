"""Wire models. Nothing here can carry mesh vertices or faces."""
from __future__ import annotations

import base64
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

from ..episode import Budget, MetricsReport, ProtocolConfig, StepRecord
from ..perception.depth import DepthImage
from ..viewspace import CameraIntrinsics, ReachabilityMask


class Strict(BaseModel):
    """Unknown keys are rejected in both directions, so a payload can only carry the declared fields."""
    model_config = ConfigDict(extra="forbid")


class BudgetModel(Strict):
    mode: Literal["fixed", "automatic"] = "fixed"
    k: int = Field(30, ge=1)
    cap: int = Field(128, ge=1)
    ms_delta: float = Field(0.02, gt=0)


class MaskModel(Strict):
    variant: Literal["whole", "quarter", "explicit"] = "whole"
    indices: list[int] = []


class IntrinsicsModel(Strict):
    width: int = Field(256, ge=1)
    height: int = Field(256, ge=1)
    fov_deg: float = Field(50.0, gt=0, lt=180)
    far: float = Field(5.0, gt=0)


class ProtocolModel(Strict):
    budget: BudgetModel = BudgetModel()
    mask: MaskModel = MaskModel()
    candidates: int = Field(128, ge=2)
    candidate_seed: int = 0
    tau: float = Field(0.02, gt=0)
    intrinsics: IntrinsicsModel = IntrinsicsModel()
    radius: float = Field(2.5, gt=1)
    seed: int = 0
    map_stabilization: bool = True
    reference_views: int = Field(360, ge=2)
    dedup: float = Field(0.005, gt=0)
    occupancy_cells: int = Field(64, ge=2)

    def to_config(self) -> ProtocolConfig:
        d = self.model_dump()
        return ProtocolConfig(
            **{**d, "budget": Budget(**d["budget"]),
               "mask": ReachabilityMask(d["mask"]["variant"], tuple(d["mask"]["indices"])),
               "intrinsics": CameraIntrinsics(**d["intrinsics"])})

    @classmethod
    def from_config(cls, config: ProtocolConfig) -> "ProtocolModel":
        return cls.model_validate(config.to_dict())


class CreateEpisode(Strict):
    object_id: str
    protocol: ProtocolModel = ProtocolModel()


class Observation(Strict):
    depth: str = Field(description="base64 of the binary depth image (header + little-endian float32)")
    pose: list[float] = Field(min_length=12, max_length=12)

    @classmethod
    def of(cls, img: DepthImage) -> "Observation":
        return cls(depth=base64.b64encode(img.to_bytes()).decode("ascii"), pose=img.pose.as_floats())

    def image(self) -> DepthImage:
        return DepthImage.from_bytes(base64.b64decode(self.depth))


class Record(Strict):
    step: int
    view: int
    sc: float
    nsc: float
    path_increment: float
    time: float

    @classmethod
    def of(cls, rec: StepRecord) -> "Record":
        return cls(**rec.__dict__)

    def record(self) -> StepRecord:
        return StepRecord(**self.model_dump())


class EpisodeCreated(Strict):
    episode_id: str
    object_id: str
    candidates: list[list[float]]
    radius: float
    feasible: list[int]
    observation: Observation
    record: Record
    status: str


class ObserveRequest(Strict):
    view: int
    planner_time: float = Field(0.0, ge=0)


class StopRequest(Strict):
    reason: Literal["native-stop", "no-valid-view"] = "native-stop"


class Observed(Strict):
    observation: Observation
    record: Record
    status: str
    reason: str | None = None


class Status(Strict):
    episode_id: str
    status: str
    reason: str | None = None
    selected: int


class Feasibility(Strict):
    index: int
    feasible: bool


class Metrics(Strict):
    object_id: str
    nsc: float
    sc: float
    views: int
    selected: int
    path_cost: float
    planning_time: float
    time_bin: str
    termination: str
    sc_ref: float

    @classmethod
    def of(cls, rep: MetricsReport) -> "Metrics":
        return cls(**rep.to_dict())

    def report(self) -> MetricsReport:
        return MetricsReport(**self.model_dump())


class ErrorBody(Strict):
    code: str
    message: str


class Health(Strict):
    status: str = "ok"
    version: str
    protocol: str
    objects: int
