"""HTTP service exposing the analysis, benchmark and simulation surface.

The service reads weight and dataset files from its own filesystem
(single-host usage; the CLI defaults to an in-process transport). Every
endpoint is stateless: requests carry file paths or synthetic-data
descriptors, responses carry the full report including rendered CSVs.
"""

from __future__ import annotations

from typing import Literal, Optional

from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__, bench
from .data import (
    LabeledImage,
    load_cifar10,
    load_cifar10_dir,
    stratified_sample,
    synthetic_dataset,
)
from .kernels import DegenerateFeatureError, InvalidParameterError, ShapeError
from .model import MissingWeightError
from .policies import PolicyConfig
from .simulator import ClusterConfig, default_cluster
from .weights import (
    WeightFormatError,
    WeightValidationError,
    random_weights,
    read_weights_file,
    save_weights,
    spec_metadata,
    validate_weights,
)


class ArchModel(BaseModel):
    arch: str = "wrn16-1"
    exits: Optional[list[int]] = None
    classes: int = 10
    students: int = 2


class PolicyModel(BaseModel):
    policy: str
    thresholds: Optional[list[float]] = None
    strict: bool = True
    seed: int = 0

    def to_config(self) -> PolicyConfig:
        return PolicyConfig.from_dict(self.model_dump())


class DeviceModel(BaseModel):
    device_id: str
    compute_rate: float
    per_inference_overhead: float = 0.0


class LinkModel(BaseModel):
    bandwidth: float
    latency: float = 0.0


class ClusterModel(BaseModel):
    devices: list[DeviceModel]
    links: list[LinkModel]
    coordinator: DeviceModel
    exit_mode: Literal["independent", "synchronized"] = "independent"
    seed: int = 0

    def to_config(self) -> ClusterConfig:
        return ClusterConfig.from_dict(self.model_dump())


class DataModel(BaseModel):
    kind: Literal["cifar10_dir", "cifar10_file", "synthetic"] = "synthetic"
    path: Optional[str] = None
    split: Literal["train", "test"] = "test"
    n: int = 200
    seed: int = 0
    noise: float = 0.15


class FlopsRequest(BaseModel):
    arch: ArchModel = Field(default_factory=ArchModel)


class InitWeightsRequest(BaseModel):
    arch: ArchModel = Field(default_factory=ArchModel)
    seed: int = 0


class BenchRequest(BaseModel):
    weights_path: str
    data: DataModel = Field(default_factory=DataModel)
    policies: list[PolicyModel]
    cluster: Optional[ClusterModel] = None
    seed: int = 0
    repeats: int = 1
    sample_per_class: Optional[int] = 10
    exit_eval: Literal["all", "needed"] = "all"


class CurvesRequest(BaseModel):
    weights_path: str
    data: DataModel = Field(default_factory=DataModel)
    seed: int = 0
    sample_size: int = 50


class SweepRequest(BaseModel):
    weights_path: str
    data: DataModel = Field(default_factory=DataModel)
    offsets: list[float]
    base_thresholds: Optional[list[float]] = None
    cluster: Optional[ClusterModel] = None
    seed: int = 0
    strict: bool = True
    sample_per_class: Optional[int] = 10
    exit_eval: Literal["all", "needed"] = "all"


class InspectRequest(BaseModel):
    path: str
    validate_arch: bool = True


def _load_dataset(data: DataModel) -> tuple[list[LabeledImage], dict]:
    desc = data.model_dump()
    if data.kind == "synthetic":
        return synthetic_dataset(data.n, seed=data.seed, noise=data.noise), desc
    if data.path is None:
        raise ValueError(f"data kind {data.kind} requires a path")
    if data.kind == "cifar10_dir":
        return load_cifar10_dir(data.path, split=data.split), desc
    return load_cifar10(data.path), desc


def _load_weights_for(request_path: str):
    try:
        store, raw = read_weights_file(request_path)
    except FileNotFoundError:
        raise HTTPException(status_code=400,
                            detail={"error": "FileNotFound", "detail": request_path})
    spec = bench.spec_from_metadata(store.metadata)
    validate_weights(store, spec)
    return spec, store, raw


def _build_spec(arch: ArchModel):
    return bench.build_spec(arch.arch, arch.exits, arch.classes, arch.students)


ERROR_TYPES = (ValueError, ShapeError, DegenerateFeatureError, InvalidParameterError,
               WeightFormatError, WeightValidationError, MissingWeightError,
               FileNotFoundError, KeyError)


def create_app() -> FastAPI:
    app = FastAPI(title="distree", version=__version__,
                  description="Distributed early-exit inference runtime and "
                              "cluster simulator")

    async def domain_error_handler(request: Request, exc: Exception):
        return JSONResponse(status_code=400,
                            content={"error": type(exc).__name__, "detail": str(exc)})

    for exc_type in ERROR_TYPES:
        app.add_exception_handler(exc_type, domain_error_handler)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/flops")
    def flops(req: FlopsRequest) -> dict:
        return bench.flops_report(_build_spec(req.arch))

    @app.post("/init-weights")
    def init_weights(req: InitWeightsRequest):
        spec = _build_spec(req.arch)
        store = random_weights(spec, seed=req.seed, metadata=spec_metadata(spec))
        return Response(content=save_weights(store),
                        media_type="application/octet-stream")

    @app.post("/bench")
    def run_bench(req: BenchRequest) -> dict:
        spec, store, raw = _load_weights_for(req.weights_path)
        dataset, desc = _load_dataset(req.data)
        if req.sample_per_class:
            dataset = stratified_sample(dataset, req.sample_per_class, seed=req.seed,
                                        class_count=spec.class_count)
            desc["sample_per_class"] = req.sample_per_class
        policies = [p.to_config() for p in req.policies]
        cluster = req.cluster.to_config() if req.cluster else default_cluster(
            spec.n_students, req.seed)
        return bench.bench_report(spec, store, raw, dataset, policies, cluster,
                                  seed=req.seed, repeats=req.repeats,
                                  exit_eval=req.exit_eval, data_desc=desc)

    @app.post("/curves")
    def curves(req: CurvesRequest) -> dict:
        spec, store, raw = _load_weights_for(req.weights_path)
        dataset, desc = _load_dataset(req.data)
        if req.sample_size and len(dataset) > req.sample_size:
            dataset = dataset[:req.sample_size]
            desc["sample_size"] = req.sample_size
        return bench.curves_report(spec, store, raw, dataset, seed=req.seed,
                                   data_desc=desc)

    @app.post("/sweep")
    def sweep(req: SweepRequest) -> dict:
        spec, store, raw = _load_weights_for(req.weights_path)
        dataset, desc = _load_dataset(req.data)
        if req.sample_per_class:
            dataset = stratified_sample(dataset, req.sample_per_class, seed=req.seed,
                                        class_count=spec.class_count)
            desc["sample_per_class"] = req.sample_per_class
        cluster = req.cluster.to_config() if req.cluster else default_cluster(
            spec.n_students, req.seed)
        return bench.sweep_report(spec, store, raw, dataset, req.offsets,
                                  base_thresholds=req.base_thresholds, cluster=cluster,
                                  seed=req.seed, strict=req.strict,
                                  exit_eval=req.exit_eval, data_desc=desc)

    @app.post("/inspect-weights")
    def inspect(req: InspectRequest) -> dict:
        try:
            store, raw = read_weights_file(req.path)
        except FileNotFoundError:
            raise HTTPException(status_code=400,
                                detail={"error": "FileNotFound", "detail": req.path})
        info = bench.weights_info(store, raw)
        if req.validate_arch and store.metadata.get("arch"):
            spec = bench.spec_from_metadata(store.metadata)
            try:
                validate_weights(store, spec)
                info["arch_valid"] = True
            except WeightValidationError as exc:
                info["arch_valid"] = False
                info["arch_problems"] = str(exc)
        return info

    return app


app = create_app()
