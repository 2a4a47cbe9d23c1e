"""File-level pipeline stages shared by the HTTP service and the CLI.

Every stage reads and writes the documented artifact formats, processes
images in lexicographic image_id order, and is deterministic for fixed
inputs and seed, so reruns produce byte-identical outputs and a full `run`
equals chaining the individual stages.

Directory conventions: activation tensors are named `<image_id>.<layer>.atn`,
feature sets `<image_id>.feat`, descriptors `<image_id>.vlad`.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import codebook as cb
from . import features as ft
from . import regions as rg
from . import tensor_store as ts
from . import vlad as vl
from .config import PipelineConfig
from .errors import AttnVladError, ParameterError, StageError
from .evaluation import (
    CostModelInputs,
    GroundTruth,
    PRCurve,
    load_ground_truth,
    power_consumption,
    pr_curve,
    retrieval_time,
)

MATCHES_SCHEMA = "attnvlad-matches/1"
REPORT_SCHEMA = "attnvlad-report/1"


@dataclass(frozen=True)
class ImageFailure:
    image_id: str
    message: str


@dataclass(frozen=True)
class ExtractSummary:
    processed: int
    written: tuple[str, ...]
    failures: tuple[ImageFailure, ...]


@dataclass(frozen=True)
class TrainSummary:
    codebook_path: str
    clusters: int
    channels: int
    iterations: int
    inertia: float
    corpus_hash: str
    num_rows: int
    num_sets: int


@dataclass(frozen=True)
class EncodeSummary:
    processed: int
    written: tuple[str, ...]
    degenerate: tuple[str, ...]
    failures: tuple[ImageFailure, ...]


@dataclass(frozen=True)
class MatchSummary:
    num_queries: int
    num_references: int
    matches_path: str


@dataclass(frozen=True)
class EvaluateSummary:
    auc: float
    num_queries: int
    num_references: int
    report_path: str


@dataclass(frozen=True)
class BenchSummary:
    report_path: str
    retrieval_time_ms: float
    power_mah: float
    auc: float | None


@dataclass(frozen=True)
class RunSummary:
    auc: float
    num_queries: int
    num_references: int
    report_path: str
    matches_path: str
    codebook_path: str


def _require_dir(path: Path, stage: str) -> Path:
    if not path.is_dir():
        raise StageError(stage, f"directory {path} does not exist")
    return path


def discover_tensor_groups(
    tensor_dir: Path, layer_tags: Sequence[str]
) -> tuple[dict[str, dict[str, Path]], list[ImageFailure]]:
    """Group `<image_id>.<layer>.atn` files by image, keeping configured layers."""
    groups: dict[str, dict[str, Path]] = {}
    failures: list[ImageFailure] = []
    for path in sorted(tensor_dir.glob(f"*{ts.TENSOR_EXTENSION}")):
        stem = path.name[: -len(ts.TENSOR_EXTENSION)]
        image_id, sep, layer = stem.rpartition(".")
        if not sep or not image_id:
            failures.append(
                ImageFailure(stem, f"file name {path.name!r} is not <image_id>.<layer>.atn")
            )
            continue
        if layer not in layer_tags:
            continue
        groups.setdefault(image_id, {})[layer] = path
    return groups, failures


def _extract_one(
    image_id: str,
    layer_paths: dict[str, Path],
    config: PipelineConfig,
    out_dir: Path,
    dump_dir: Path | None,
) -> str:
    selections: list[tuple[ts.ActivationTensor, rg.RegionSelection]] = []
    dump_lines: list[str] = []
    for layer in config.layer_tags:
        if layer not in layer_paths:
            raise AttnVladError(f"missing layer file for {layer!r}")
        tensor = ts.read_tensor_file(layer_paths[layer])
        if tensor.image_id != image_id:
            raise AttnVladError(
                f"file {layer_paths[layer].name} carries image_id {tensor.image_id!r}"
            )
        if tensor.layer_tag != layer:
            raise AttnVladError(
                f"file {layer_paths[layer].name} carries layer_tag {tensor.layer_tag!r}"
            )
        regions = rg.extract_regions(tensor, config.grouping)
        if dump_dir is not None:
            dump_lines.extend(rg.region_dump_lines(image_id, layer, regions))
        selections.append(
            (tensor, rg.select_top_n(regions, config.regions_per_layer, layer_tag=layer))
        )
    feature_set = ft.build_feature_set(selections)
    out_path = out_dir / f"{image_id}{ft.FEATURE_EXTENSION}"
    ft.write_feature_set_file(feature_set, out_path)
    if dump_dir is not None:
        (dump_dir / f"{image_id}.regions.tsv").write_text(
            "\n".join(dump_lines) + ("\n" if dump_lines else ""), encoding="utf-8"
        )
    return str(out_path)


def extract_stage(
    tensor_dir: str | Path,
    out_dir: str | Path,
    config: PipelineConfig | None = None,
    dump_dir: str | Path | None = None,
    jobs: int | None = None,
) -> ExtractSummary:
    """Turn per-layer tensors into one feature-set file per image.

    Per-image problems (missing layer, corrupt file, id mismatch) are
    collected as failures instead of aborting the batch.
    """
    config = config or PipelineConfig()
    tensor_dir = _require_dir(Path(tensor_dir), "extract")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_path: Path | None = None
    if dump_dir is not None:
        dump_path = Path(dump_dir)
        dump_path.mkdir(parents=True, exist_ok=True)
    jobs = jobs or config.jobs

    groups, failures = discover_tensor_groups(tensor_dir, config.layer_tags)
    written: list[str] = []

    def work(image_id: str) -> tuple[str, str | None, str | None]:
        try:
            return image_id, _extract_one(image_id, groups[image_id], config, out_dir, dump_path), None
        except (AttnVladError, OSError) as exc:
            return image_id, None, str(exc)

    image_ids = sorted(groups)
    if jobs > 1 and len(image_ids) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(work, image_ids))
    else:
        outcomes = [work(image_id) for image_id in image_ids]
    for image_id, path, error in sorted(outcomes):
        if error is None:
            written.append(path)
        else:
            failures.append(ImageFailure(image_id, error))
    failures.sort(key=lambda f: f.image_id)
    return ExtractSummary(
        processed=len(written), written=tuple(written), failures=tuple(failures)
    )


def _load_feature_sets(features_dir: Path, stage: str) -> list[tuple[Path, ft.RegionalFeatureSet]]:
    paths = sorted(features_dir.glob(f"*{ft.FEATURE_EXTENSION}"))
    if not paths:
        raise StageError(stage, f"no {ft.FEATURE_EXTENSION} files in {features_dir}")
    return [(path, ft.read_feature_set_file(path)) for path in paths]


def train_stage(
    features_dir: str | Path,
    out_path: str | Path,
    clusters: int,
    seed: int,
    max_iters: int = cb.DEFAULT_MAX_ITERS,
    tol: float = cb.DEFAULT_TOL,
) -> TrainSummary:
    """Train the regional codebook on every feature set in a directory.

    Corpus order is the lexicographic file order, so training is reproducible
    from the directory contents alone.
    """
    features_dir = _require_dir(Path(features_dir), "train-codebook")
    loaded = _load_feature_sets(features_dir, "train-codebook")
    corpus = [feature_set for _, feature_set in loaded]
    book = cb.train_codebook(corpus, v=clusters, seed=seed, max_iters=max_iters, tol=tol)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    cb.write_codebook_file(book, out_path)
    return TrainSummary(
        codebook_path=str(out_path),
        clusters=book.num_clusters,
        channels=book.channels,
        iterations=book.meta.iterations,
        inertia=book.meta.inertia,
        corpus_hash=book.meta.corpus_hash.hex(),
        num_rows=sum(fs.num_regions for fs in corpus),
        num_sets=len(corpus),
    )


def encode_stage(
    features_dir: str | Path,
    codebook_path: str | Path,
    out_dir: str | Path,
    normalization: str = vl.NORM_INTRA_GLOBAL,
    jobs: int = 1,
) -> EncodeSummary:
    """Encode every feature set in a directory into a VLAD descriptor file."""
    features_dir = _require_dir(Path(features_dir), "encode")
    book = cb.read_codebook_file(codebook_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loaded = _load_feature_sets(features_dir, "encode")

    def work(item: tuple[Path, ft.RegionalFeatureSet]):
        path, feature_set = item
        image_id = path.name[: -len(ft.FEATURE_EXTENSION)]
        try:
            descriptor = vl.encode_vlad(feature_set, book, normalization)
            out_path = out_dir / f"{image_id}{vl.VLAD_EXTENSION}"
            vl.write_vlad_file(descriptor, out_path)
            return image_id, str(out_path), descriptor.is_degenerate, None
        except (AttnVladError, OSError) as exc:
            return image_id, None, False, str(exc)

    if jobs > 1 and len(loaded) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(work, loaded))
    else:
        outcomes = [work(item) for item in loaded]
    written: list[str] = []
    degenerate: list[str] = []
    failures: list[ImageFailure] = []
    for image_id, path, is_degenerate, error in sorted(outcomes):
        if error is not None:
            failures.append(ImageFailure(image_id, error))
            continue
        written.append(path)
        if is_degenerate:
            degenerate.append(image_id)
    return EncodeSummary(
        processed=len(written),
        written=tuple(written),
        degenerate=tuple(degenerate),
        failures=tuple(failures),
    )


def _load_descriptors(source: Path, stage: str) -> list[vl.VladDescriptor]:
    if source.is_dir():
        paths = sorted(source.glob(f"*{vl.VLAD_EXTENSION}"))
        if not paths:
            raise StageError(stage, f"no {vl.VLAD_EXTENSION} files in {source}")
    elif source.is_file():
        paths = [source]
    else:
        raise StageError(stage, f"{source} is neither a file nor a directory")
    return [vl.read_vlad_file(path) for path in paths]


def match_stage(
    query_path: str | Path,
    refs_dir: str | Path,
    out_path: str | Path,
    top_k: int | None = None,
) -> MatchSummary:
    """Rank every query against the reference descriptors; write matches JSON.

    Reference ingestion order is the lexicographic file order; the stored
    rankings may be truncated to `top_k` entries, but the roster and best
    match always cover the full reference set.
    """
    if top_k is not None and top_k < 1:
        raise ParameterError(f"top_k must be >= 1, got {top_k}")
    queries = _load_descriptors(Path(query_path), "match")
    references = _load_descriptors(_require_dir(Path(refs_dir), "match"), "match")
    results = [vl.match_query(query, references) for query in queries]
    doc = {
        "schema": MATCHES_SCHEMA,
        "reference_ids": [ref.image_id for ref in references],
        "results": [
            {
                "query_id": result.query_id,
                "best_match": result.best_match,
                "confidence": result.confidence,
                "ranking": [
                    [ref_id, score]
                    for ref_id, score in (
                        result.ranking[:top_k] if top_k is not None else result.ranking
                    )
                ],
            }
            for result in results
        ],
    }
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(doc, out_path)
    return MatchSummary(
        num_queries=len(queries), num_references=len(references), matches_path=str(out_path)
    )


def load_matches(path: str | Path) -> tuple[list[vl.MatchResult], list[str]]:
    """Read a matches JSON document back into MatchResult objects."""
    with open(path, encoding="utf-8") as handle:
        doc = json.load(handle)
    if doc.get("schema") != MATCHES_SCHEMA:
        raise StageError("evaluate", f"{path} is not a {MATCHES_SCHEMA} document")
    results = [
        vl.MatchResult(
            query_id=entry["query_id"],
            ranking=tuple((ref_id, float(score)) for ref_id, score in entry["ranking"]),
            best_match=entry["best_match"],
        )
        for entry in doc["results"]
    ]
    return results, list(doc["reference_ids"])


def _pr_to_dict(curve: PRCurve) -> dict:
    return {
        "auc": curve.auc,
        "num_queries": curve.num_queries,
        "num_references": curve.num_references,
        "points": [[p, r] for p, r in curve.points],
    }


def _write_json(doc: dict, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_pr_plot(curve: PRCurve, path: str | Path) -> str:
    """Render the PR curve to an image, or CSV when matplotlib is unavailable."""
    path = Path(path)
    want_csv = path.suffix.lower() == ".csv"
    if not want_csv:
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            want_csv = True
            path = path.with_suffix(".csv")
    if want_csv:
        lines = ["recall,precision"]
        lines += [f"{r!r},{p!r}" for p, r in curve.points]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return str(path)
    recalls = [r for _, r in curve.points]
    precisions = [p for p, _ in curve.points]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(recalls, precisions, marker="o", markersize=3)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"AUC-PR = {curve.auc:.4f}")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def evaluate_stage(
    matches_path: str | Path,
    truth_path: str | Path,
    out_path: str | Path,
    plot_path: str | Path | None = None,
    config: PipelineConfig | None = None,
    extra_sections: dict | None = None,
) -> EvaluateSummary:
    """Score a matches file against ground truth and write the report JSON."""
    results, roster = load_matches(matches_path)
    truth = load_ground_truth(truth_path)
    curve = pr_curve(results, truth, reference_ids=roster)
    report: dict = {
        "schema": REPORT_SCHEMA,
        "kind": "evaluate",
        "pr": _pr_to_dict(curve),
    }
    if config is not None:
        report["config"] = config.to_mapping()
    if extra_sections:
        report.update(extra_sections)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(report, out_path)
    if plot_path is not None:
        write_pr_plot(curve, plot_path)
    return EvaluateSummary(
        auc=curve.auc,
        num_queries=curve.num_queries,
        num_references=curve.num_references,
        report_path=str(out_path),
    )


def _timed(fn: Callable[[], object]) -> tuple[object, float]:
    start = time.perf_counter()
    result = fn()
    return result, (time.perf_counter() - start) * 1000.0


def bench_stage(
    queries_dir: str | Path,
    refs_dir: str | Path,
    codebook_path: str | Path,
    out_path: str | Path,
    config: PipelineConfig | None = None,
    m_f_override: float | None = None,
    u_e: float = 0.0,
    u_m: float = 0.0,
    iterations: int = 3,
    truth_path: str | Path | None = None,
    plot_path: str | Path | None = None,
) -> BenchSummary:
    """Measure per-stage wall-clock times and feed the cost models.

    The forward-pass component cannot be measured here (no CNN runs inside
    the pipeline); tensor-load time stands in unless `m_f_override` is given.
    Components are averaged over `iterations` passes and over queries.
    """
    if iterations < 1:
        raise ParameterError(f"iterations must be >= 1, got {iterations}")
    config = config or PipelineConfig()
    queries_dir = _require_dir(Path(queries_dir), "bench")
    refs_dir = _require_dir(Path(refs_dir), "bench")
    book = cb.read_codebook_file(codebook_path)

    ref_descriptors = _build_descriptors_from_tensors(refs_dir, config, book, "bench")
    query_groups, failures = discover_tensor_groups(queries_dir, config.layer_tags)
    if failures:
        raise StageError("bench", f"unparseable tensor files: {[f.image_id for f in failures]}")
    if not query_groups:
        raise StageError("bench", f"no query tensors in {queries_dir}")
    num_queries = len(query_groups)
    num_references = len(ref_descriptors)

    load_ms = extract_ms = encode_ms = match_ms = 0.0
    results: list[vl.MatchResult] = []
    for _ in range(iterations):
        results = []
        for image_id in sorted(query_groups):
            layer_paths = query_groups[image_id]
            tensors, t_load = _timed(
                lambda: [ts.read_tensor_file(layer_paths[layer]) for layer in config.layer_tags]
            )
            feature_set, t_extract = _timed(lambda: _features_from_tensors(tensors, config))
            descriptor, t_encode = _timed(
                lambda: vl.encode_vlad(feature_set, book, config.normalization)
            )
            result, t_match = _timed(lambda: vl.match_query(descriptor, ref_descriptors))
            results.append(result)
            load_ms += t_load
            extract_ms += t_extract
            encode_ms += t_encode
            match_ms += t_match

    per_query = iterations * num_queries
    measured_load = load_ms / per_query
    inputs = CostModelInputs.derived(
        m_f=m_f_override if m_f_override is not None else measured_load,
        m_e=extract_ms / per_query,
        m_v=encode_ms / per_query,
        m_m=match_ms / (per_query * num_references),
        num_references=num_references,
        num_queries=num_queries,
        u_e=u_e,
        u_m=u_m,
    )
    m_q = retrieval_time(inputs)
    mah = power_consumption(inputs)

    report: dict = {
        "schema": REPORT_SCHEMA,
        "kind": "bench",
        "config": config.to_mapping(),
        "cost_model": {
            "inputs": {
                "m_f": inputs.m_f,
                "m_e": inputs.m_e,
                "m_v": inputs.m_v,
                "m_m": inputs.m_m,
                "num_references": inputs.num_references,
                "num_queries": inputs.num_queries,
                "u_e": inputs.u_e,
                "u_m": inputs.u_m,
                "t_e": inputs.t_e,
                "t_m": inputs.t_m,
                "volts": inputs.volts,
            },
            "retrieval_time_ms": m_q,
            "power_mah": mah,
            "iterations": iterations,
            "m_f_source": "override" if m_f_override is not None else "tensor-load",
            "measured_load_ms": measured_load,
        },
        "corpus_hashes": {"codebook": book.meta.corpus_hash.hex()},
    }
    auc: float | None = None
    if truth_path is not None:
        curve = pr_curve(results, load_ground_truth(truth_path))
        report["pr"] = _pr_to_dict(curve)
        auc = curve.auc
        if plot_path is not None:
            write_pr_plot(curve, plot_path)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(report, out_path)
    return BenchSummary(
        report_path=str(out_path), retrieval_time_ms=m_q, power_mah=mah, auc=auc
    )


def _features_from_tensors(
    tensors: Sequence[ts.ActivationTensor], config: PipelineConfig
) -> ft.RegionalFeatureSet:
    selections = []
    for tensor in tensors:
        regions = rg.extract_regions(tensor, config.grouping)
        selections.append(
            (tensor, rg.select_top_n(regions, config.regions_per_layer, layer_tag=tensor.layer_tag))
        )
    return ft.build_feature_set(selections)


def _build_descriptors_from_tensors(
    tensor_dir: Path, config: PipelineConfig, book: cb.Codebook, stage: str
) -> list[vl.VladDescriptor]:
    groups, failures = discover_tensor_groups(tensor_dir, config.layer_tags)
    if failures:
        raise StageError(stage, f"unparseable tensor files: {[f.image_id for f in failures]}")
    if not groups:
        raise StageError(stage, f"no tensors in {tensor_dir}")
    descriptors = []
    for image_id in sorted(groups):
        layer_paths = groups[image_id]
        missing = [layer for layer in config.layer_tags if layer not in layer_paths]
        if missing:
            raise StageError(stage, f"image {image_id!r} missing layer files: {missing}")
        tensors = [ts.read_tensor_file(layer_paths[layer]) for layer in config.layer_tags]
        feature_set = _features_from_tensors(tensors, config)
        descriptors.append(vl.encode_vlad(feature_set, book, config.normalization))
    return descriptors


def _abort_on_failures(summary: ExtractSummary, stage: str) -> None:
    if summary.failures:
        ids = ", ".join(f.image_id for f in summary.failures)
        raise StageError(stage, f"failed images: {ids}")


def run_stage(
    query_dir: str | Path,
    ref_dir: str | Path,
    truth_path: str | Path,
    workdir: str | Path,
    config: PipelineConfig | None = None,
    codebook_path: str | Path | None = None,
    plot_path: str | Path | None = None,
) -> RunSummary:
    """Full pipeline: extract -> (train) -> encode -> match -> evaluate.

    When no codebook is supplied, one is trained on the reference feature
    sets with the configured cluster count and seed. All intermediate
    artifacts land under `workdir` in the documented formats.
    """
    config = config or PipelineConfig()
    workdir = Path(workdir)
    features_q = workdir / "features" / "queries"
    features_r = workdir / "features" / "refs"
    vlad_q = workdir / "descriptors" / "queries"
    vlad_r = workdir / "descriptors" / "refs"

    _abort_on_failures(extract_stage(query_dir, features_q, config), "extract")
    _abort_on_failures(extract_stage(ref_dir, features_r, config), "extract")

    if codebook_path is None:
        codebook_path = workdir / f"codebook{cb.CODEBOOK_EXTENSION}"
        train_stage(features_r, codebook_path, clusters=config.clusters, seed=config.seed)
    book = cb.read_codebook_file(codebook_path)

    for src, dst in ((features_q, vlad_q), (features_r, vlad_r)):
        summary = encode_stage(src, codebook_path, dst, config.normalization, jobs=config.jobs)
        if summary.failures:
            ids = ", ".join(f.image_id for f in summary.failures)
            raise StageError("encode", f"failed images: {ids}")

    matches_path = workdir / "matches.json"
    match_summary = match_stage(vlad_q, vlad_r, matches_path)
    report_path = workdir / "report.json"
    evaluate = evaluate_stage(
        matches_path,
        truth_path,
        report_path,
        plot_path=plot_path,
        config=config,
        extra_sections={
            "kind": "run",
            "corpus_hashes": {"codebook": book.meta.corpus_hash.hex()},
        },
    )
    return RunSummary(
        auc=evaluate.auc,
        num_queries=match_summary.num_queries,
        num_references=match_summary.num_references,
        report_path=str(report_path),
        matches_path=str(matches_path),
        codebook_path=str(codebook_path),
    )
