"""FastAPI service wrapping the pipeline stages.

Run with `uvicorn attnvlad.service.app:app`. The CLI talks to this same
app in-process by default, so both surfaces share one request/response
contract.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..codebook import CODEBOOK_VERSION
from ..config import PipelineConfig, config_from_mapping, parse_config_file
from ..errors import AttnVladError, StageError
from ..features import FEATURE_VERSION
from ..tensor_store import TENSOR_VERSION
from ..vlad import VLAD_VERSION
from . import schemas

SUBCOMMANDS = [
    "extract-regions",
    "train-codebook",
    "encode",
    "match",
    "evaluate",
    "bench",
    "run",
    "info",
]


def _resolve_config(overrides: schemas.ConfigOverrides | None) -> PipelineConfig:
    config = PipelineConfig()
    if overrides is None:
        return config
    if overrides.config_file:
        config = config_from_mapping(parse_config_file(overrides.config_file), config)
    return config_from_mapping(overrides.mapping(), config)


def _failures(summary) -> list[schemas.ImageFailureModel]:
    return [
        schemas.ImageFailureModel(image_id=f.image_id, message=f.message)
        for f in summary.failures
    ]


def create_app() -> FastAPI:
    app = FastAPI(title="attnvlad", version=__version__)

    @app.exception_handler(AttnVladError)
    async def handle_pipeline_error(request: Request, exc: AttnVladError):
        payload = schemas.ErrorResponse(
            error=type(exc).__name__,
            detail=str(exc),
            stage=exc.stage if isinstance(exc, StageError) else None,
        )
        return JSONResponse(status_code=400, content=payload.model_dump())

    @app.exception_handler(OSError)
    async def handle_os_error(request: Request, exc: OSError):
        payload = schemas.ErrorResponse(error=type(exc).__name__, detail=str(exc))
        return JSONResponse(status_code=400, content=payload.model_dump())

    @app.get("/info", response_model=schemas.InfoResponse)
    def info() -> schemas.InfoResponse:
        return schemas.InfoResponse(
            name="attnvlad",
            version=__version__,
            format_versions={
                "tensor": TENSOR_VERSION,
                "features": FEATURE_VERSION,
                "codebook": CODEBOOK_VERSION,
                "vlad": VLAD_VERSION,
            },
            defaults=PipelineConfig().to_mapping(),
            subcommands=SUBCOMMANDS,
        )

    @app.post("/extract-regions", response_model=schemas.ExtractResponse)
    def extract(request: schemas.ExtractRequest) -> schemas.ExtractResponse:
        config = _resolve_config(request.config)
        summary = pipeline.extract_stage(
            request.tensor_dir, request.out_dir, config, dump_dir=request.dump_dir
        )
        return schemas.ExtractResponse(
            processed=summary.processed,
            written=list(summary.written),
            failures=_failures(summary),
        )

    @app.post("/train-codebook", response_model=schemas.TrainResponse)
    def train(request: schemas.TrainRequest) -> schemas.TrainResponse:
        summary = pipeline.train_stage(
            request.features_dir,
            request.out,
            clusters=request.clusters,
            seed=request.seed,
            max_iters=request.max_iters,
            tol=request.tol,
        )
        return schemas.TrainResponse(
            codebook=summary.codebook_path,
            clusters=summary.clusters,
            channels=summary.channels,
            iterations=summary.iterations,
            inertia=summary.inertia,
            corpus_hash=summary.corpus_hash,
            num_rows=summary.num_rows,
            num_sets=summary.num_sets,
        )

    @app.post("/encode", response_model=schemas.EncodeResponse)
    def encode(request: schemas.EncodeRequest) -> schemas.EncodeResponse:
        config = PipelineConfig()
        summary = pipeline.encode_stage(
            request.features_dir,
            request.codebook,
            request.out_dir,
            normalization=request.normalization or config.normalization,
            jobs=request.jobs or 1,
        )
        return schemas.EncodeResponse(
            processed=summary.processed,
            written=list(summary.written),
            degenerate=list(summary.degenerate),
            failures=_failures(summary),
        )

    @app.post("/match", response_model=schemas.MatchResponse)
    def match(request: schemas.MatchRequest) -> schemas.MatchResponse:
        summary = pipeline.match_stage(
            request.query, request.refs, request.out, top_k=request.top
        )
        return schemas.MatchResponse(
            num_queries=summary.num_queries,
            num_references=summary.num_references,
            matches=summary.matches_path,
        )

    @app.post("/evaluate", response_model=schemas.EvaluateResponse)
    def evaluate(request: schemas.EvaluateRequest) -> schemas.EvaluateResponse:
        summary = pipeline.evaluate_stage(
            request.matches, request.truth, request.out, plot_path=request.plot
        )
        return schemas.EvaluateResponse(
            auc=summary.auc,
            num_queries=summary.num_queries,
            num_references=summary.num_references,
            report=summary.report_path,
        )

    @app.post("/bench", response_model=schemas.BenchResponse)
    def bench(request: schemas.BenchRequest) -> schemas.BenchResponse:
        config = _resolve_config(request.config)
        summary = pipeline.bench_stage(
            request.queries,
            request.refs,
            request.codebook,
            request.out,
            config=config,
            m_f_override=request.m_f,
            u_e=request.u_e,
            u_m=request.u_m,
            iterations=request.iterations,
            truth_path=request.truth,
            plot_path=request.plot,
        )
        return schemas.BenchResponse(
            report=summary.report_path,
            retrieval_time_ms=summary.retrieval_time_ms,
            power_mah=summary.power_mah,
            auc=summary.auc,
        )

    @app.post("/run", response_model=schemas.RunResponse)
    def run(request: schemas.RunRequest) -> schemas.RunResponse:
        config = _resolve_config(request.config)
        summary = pipeline.run_stage(
            request.queries,
            request.refs,
            request.truth,
            request.workdir,
            config=config,
            codebook_path=request.codebook,
            plot_path=request.plot,
        )
        return schemas.RunResponse(
            auc=summary.auc,
            num_queries=summary.num_queries,
            num_references=summary.num_references,
            report=summary.report_path,
            matches=summary.matches_path,
            codebook=summary.codebook_path,
        )

    return app


app = create_app()
