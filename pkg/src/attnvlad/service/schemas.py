"""Pydantic request/response models for the HTTP service.

Requests reference server-side filesystem paths; stage outputs are written
to disk in the documented artifact formats and summarized in the response.
"""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class ConfigOverrides(BaseModel):
    """Subset of pipeline config keys; unset fields keep their defaults."""

    layers: Optional[str] = None
    regions_per_layer: Optional[int] = None
    clusters: Optional[int] = None
    connectivity: Optional[int] = None
    similarity_ratio: Optional[str] = None
    zero_threshold: Optional[float] = None
    normalization: Optional[str] = None
    seed: Optional[int] = None
    jobs: Optional[int] = None
    config_file: Optional[str] = None

    def mapping(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for key in (
            "layers",
            "regions_per_layer",
            "clusters",
            "connectivity",
            "similarity_ratio",
            "zero_threshold",
            "normalization",
            "seed",
            "jobs",
        ):
            value = getattr(self, key)
            if value is not None:
                out[key] = str(value)
        return out


class InfoResponse(BaseModel):
    name: str
    version: str
    format_versions: dict[str, int]
    defaults: dict[str, str]
    subcommands: list[str]


class ImageFailureModel(BaseModel):
    image_id: str
    message: str


class ExtractRequest(BaseModel):
    tensor_dir: str
    out_dir: str
    config: Optional[ConfigOverrides] = None
    dump_dir: Optional[str] = None


class ExtractResponse(BaseModel):
    processed: int
    written: list[str]
    failures: list[ImageFailureModel]


class TrainRequest(BaseModel):
    features_dir: str
    out: str
    clusters: int = Field(default=128, ge=2)
    seed: int = Field(default=0, ge=0)
    max_iters: int = Field(default=100, ge=1)
    tol: float = Field(default=1e-4, ge=0.0)


class TrainResponse(BaseModel):
    codebook: str
    clusters: int
    channels: int
    iterations: int
    inertia: float
    corpus_hash: str
    num_rows: int
    num_sets: int


class EncodeRequest(BaseModel):
    features_dir: str
    codebook: str
    out_dir: str
    normalization: Optional[str] = None
    jobs: Optional[int] = None


class EncodeResponse(BaseModel):
    processed: int
    written: list[str]
    degenerate: list[str]
    failures: list[ImageFailureModel]


class MatchRequest(BaseModel):
    query: str
    refs: str
    out: str
    top: Optional[int] = Field(default=None, ge=1)


class MatchResponse(BaseModel):
    num_queries: int
    num_references: int
    matches: str


class EvaluateRequest(BaseModel):
    matches: str
    truth: str
    out: str
    plot: Optional[str] = None


class EvaluateResponse(BaseModel):
    auc: float
    num_queries: int
    num_references: int
    report: str


class BenchRequest(BaseModel):
    queries: str
    refs: str
    codebook: str
    out: str
    config: Optional[ConfigOverrides] = None
    m_f: Optional[float] = Field(default=None, ge=0.0)
    u_e: float = Field(default=0.0, ge=0.0)
    u_m: float = Field(default=0.0, ge=0.0)
    iterations: int = Field(default=3, ge=1)
    truth: Optional[str] = None
    plot: Optional[str] = None


class BenchResponse(BaseModel):
    report: str
    retrieval_time_ms: float
    power_mah: float
    auc: Optional[float] = None


class RunRequest(BaseModel):
    queries: str
    refs: str
    truth: str
    workdir: str
    codebook: Optional[str] = None
    config: Optional[ConfigOverrides] = None
    plot: Optional[str] = None


class RunResponse(BaseModel):
    auc: float
    num_queries: int
    num_references: int
    report: str
    matches: str
    codebook: str


class ErrorResponse(BaseModel):
    error: str
    detail: str
    stage: Optional[str] = None
