"""Acceptance suite: one test per release criterion.

Run with `pytest tests/test_acceptance.py -v -s` to see one [PASS]/[FAIL]
line per criterion with its measured runtime.
"""

import json
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from attnvlad.cli import main as cli_main
from attnvlad.codebook import Codebook, TrainingMeta, assign, train_codebook
from attnvlad.config import PipelineConfig
from attnvlad.evaluation import (
    CostModelInputs,
    GroundTruth,
    load_ground_truth,
    power_consumption,
    pr_curve,
    retrieval_time,
)
from attnvlad.features import RegionalFeatureSet, build_feature_set
from attnvlad.pipeline import (
    encode_stage,
    extract_stage,
    load_matches,
    match_stage,
    train_stage,
)
from attnvlad.regions import GroupingConfig, extract_regions, select_top_n
from attnvlad.tensor_store import ActivationTensor
from attnvlad.vlad import MatchResult, VladDescriptor, encode_vlad, match_query, similarity

from oracles import (
    cosine_oracle,
    exhaustive_partition_optimum,
    nearest_centroid_oracle,
    oracle_components,
    oracle_coupled,
    oracle_neighbours,
    sweep_oracle,
)
from synth import random_tensor, write_place_dataset


@contextmanager
def criterion(name: str, budget_seconds: float):
    start = time.perf_counter()
    try:
        yield
    except Exception as exc:
        print(f"[FAIL] {name}: {exc}")
        raise
    elapsed = time.perf_counter() - start
    assert elapsed < budget_seconds, f"{name} took {elapsed:.1f}s (budget {budget_seconds}s)"
    print(f"[PASS] {name} ({elapsed:.2f}s)")


def test_cost_model_reproduction():
    with criterion("cost-model reproduction (retrieval time)", 5.0):
        ours = CostModelInputs.derived(
            m_f=13.85, m_e=110.0, m_v=2.68, m_m=0.07, num_references=1622, num_queries=1622
        )
        assert abs(retrieval_time(ours) - 240.07) <= 1e-9
        netvlad = CostModelInputs.derived(
            m_f=770.0, m_e=0.0, m_v=0.0, m_m=0.005, num_references=1622, num_queries=1622
        )
        assert abs(retrieval_time(netvlad) - 778.11) <= 1e-9


def test_power_model_reproduction():
    with criterion("power-model reproduction", 5.0):
        camal = CostModelInputs(
            u_e=0.125, t_e=126.53, u_m=0.031, t_m=113.54, num_queries=1622, volts=2.5
        )
        assert abs(power_consumption(camal) - 3.48) <= 0.01
        region_vlad = CostModelInputs(
            u_e=0.25, t_e=412.0, u_m=0.031, t_m=113.54, num_queries=1622, volts=2.5
        )
        assert abs(power_consumption(region_vlad) - 19.20) <= 0.05


def _sparse_384(seed: int, image_id: str, layer: str) -> ActivationTensor:
    rng = np.random.default_rng(seed)
    values = rng.random((13, 13, 384))
    mask = rng.random((13, 13, 384)) < 0.15
    return ActivationTensor(
        values=np.where(mask, values, 0.0).astype(np.float32),
        layer_tag=layer,
        image_id=image_id,
    )


def _feature_set_384(seed: int, image_id: str, n: int) -> RegionalFeatureSet:
    pairs = []
    for offset, layer in enumerate(("conv3", "conv4")):
        tensor = _sparse_384(seed + offset, image_id, layer)
        selection = select_top_n(extract_regions(tensor), n, layer_tag=layer)
        pairs.append((tensor, selection))
    return build_feature_set(pairs)


def test_descriptor_shape_contract():
    with criterion("descriptor-shape contract (K=384, N=300, V=128)", 10.0):
        sets = [_feature_set_384(100 + 10 * i, f"im{i}", n=300) for i in range(3)]
        for feature_set in sets:
            assert feature_set.channels == 384
            assert feature_set.num_regions <= 600
            assert all(count <= 300 for count in feature_set.per_layer_counts.values())
        codebook = train_codebook(sets[:2], v=128, seed=7)
        descriptor = encode_vlad(sets[2], codebook)
        assert descriptor.matrix.shape == (128, 384)
        assert descriptor.matrix.size == 49152


def test_region_extraction_oracle_equivalence():
    with criterion("region-extraction oracle equivalence (500 tensors)", 30.0):
        rng = np.random.default_rng(20260809)
        maximality_checked = 0
        for index in range(500):
            tensor = random_tensor(
                rng,
                width=int(rng.integers(1, 17)),
                height=int(rng.integers(1, 17)),
                channels=int(rng.integers(1, 9)),
                density=float(rng.uniform(0.2, 0.95)),
                quantize=bool(rng.integers(0, 2)),
                image_id=f"t{index}",
            )
            config = GroupingConfig(
                connectivity=int(rng.choice([4, 8])),
                similarity_ratio=None if rng.integers(0, 2) else float(rng.uniform(1.1, 3.0)),
                zero_threshold=float(rng.choice([0.0, 0.1])),
            )
            regions = extract_regions(tensor, config)
            by_map: dict[int, list] = {}
            for region in regions:
                by_map.setdefault(region.feature_map, []).append(region)
            for k in range(tensor.channels):
                grid = tensor.values[:, :, k].tolist()
                expected = oracle_components(
                    grid, config.connectivity, config.similarity_ratio, config.zero_threshold
                )
                got = by_map.get(k, [])
                assert len(got) == len(expected)
                got_map = {r.positions: r.energy for r in got}
                for positions, energy in expected:
                    assert positions in got_map  # identical partition
                    rel = abs(got_map[positions] - energy) / max(abs(energy), 1e-30)
                    assert rel <= 1e-6
                # spot-check maximality explicitly on a sample of maps
                if index % 25 == 0 and len(got) > 1:
                    maximality_checked += 1
                    for i, first in enumerate(got):
                        for second in got[i + 1 :]:
                            for x, y in first.positions:
                                for nx, ny in oracle_neighbours(x, y, config.connectivity):
                                    if (nx, ny) in second.positions:
                                        assert not oracle_coupled(
                                            grid[y][x], grid[ny][nx], config.similarity_ratio
                                        )
        assert maximality_checked > 0


def test_kmeans_and_assignment_oracles():
    with criterion("k-means / assignment oracle", 30.0):
        # fixed-point case: square corners pair left/right at the side midpoints
        square = [[1.0, 1.0], [1.0, 2.0], [2.0, 1.0], [2.0, 2.0]]
        corpus = [RegionalFeatureSet(image_id="sq", features=np.asarray(square, dtype=np.float32))]
        book = train_codebook(corpus, v=2, seed=1)
        optimum = exhaustive_partition_optimum(square, 2)
        assert abs(book.meta.inertia - optimum) <= 1e-12
        assert sorted(book.centroids.tolist()) in (
            [[1.0, 1.5], [2.0, 1.5]],
            [[1.5, 1.0], [1.5, 2.0]],
        )
        # fixed-point case: V distinct rows, V clusters
        rows = [[0.0, 1.0], [2.0, 3.0], [5.0, 1.0]]
        fixed = train_codebook(
            [RegionalFeatureSet(image_id="r", features=np.asarray(rows, dtype=np.float32))],
            v=3,
            seed=0,
        )
        assert fixed.meta.inertia <= 1e-12
        assert exhaustive_partition_optimum(rows, 3) <= 1e-12
        assert sorted(fixed.centroids.tolist()) == sorted(rows)
        # 12-point / V=3 envelope: the trained local optimum never beats the
        # exhaustive-partition optimum
        rng = np.random.default_rng(77)
        points = rng.uniform(0.5, 4.0, size=(12, 2))
        twelve = train_codebook(
            [RegionalFeatureSet(image_id="p", features=points.astype(np.float32))],
            v=3,
            seed=5,
        )
        best = exhaustive_partition_optimum(
            points.astype(np.float32).astype(float).tolist(), 3
        )
        assert twelve.meta.inertia >= best - 1e-9

        # assignment vs all-pairs nearest-neighbour scan on 1000 random rows
        centroids = rng.uniform(-1.0, 1.0, size=(16, 8)).astype(np.float32)
        meta = TrainingMeta(iterations=0, inertia=0.0, seed=0, corpus_hash=bytes(32))
        codebook = Codebook(centroids=centroids, meta=meta)
        queries = rng.uniform(-1.0, 1.0, size=(1000, 8)).astype(np.float32)
        got = assign(codebook, queries)
        for i in range(1000):
            assert got[i] == nearest_centroid_oracle(queries[i].tolist(), centroids.tolist())


def test_vlad_property_suite():
    with criterion("VLAD property suite", 10.0):
        rng = np.random.default_rng(31)
        centroids = rng.uniform(0.1, 1.0, size=(8, 6)).astype(np.float32)
        meta = TrainingMeta(iterations=0, inertia=0.0, seed=0, corpus_hash=bytes(32))
        codebook = Codebook(centroids=centroids, meta=meta)
        rows = rng.uniform(0.1, 1.0, size=(30, 6)).astype(np.float32)

        base = encode_vlad(RegionalFeatureSet(image_id="a", features=rows), codebook)
        # permutation invariance of feature rows (bit-exact)
        for _ in range(5):
            perm = rng.permutation(len(rows))
            other = encode_vlad(
                RegionalFeatureSet(image_id="a", features=rows[perm]), codebook
            )
            assert np.array_equal(base.matrix, other.matrix)
        # centroid-permutation covariance
        cluster_perm = rng.permutation(8)
        permuted_book = Codebook(centroids=centroids[cluster_perm], meta=meta)
        permuted = encode_vlad(RegionalFeatureSet(image_id="a", features=rows), permuted_book)
        assert np.array_equal(base.matrix[cluster_perm], permuted.matrix)
        # zero-residual degenerate case
        exact = RegionalFeatureSet(image_id="z", features=centroids[:5].copy())
        degenerate = encode_vlad(exact, codebook)
        assert degenerate.is_degenerate and not degenerate.matrix.any()
        # unit norm of the flattened descriptor
        assert abs(float(np.linalg.norm(base.flat().astype(np.float64))) - 1.0) <= 1e-6
        # cosine self-similarity
        assert abs(similarity(base, base) - 1.0) <= 1e-6
        # and agreement with the extended-precision oracle on fresh pairs
        second = encode_vlad(
            RegionalFeatureSet(
                image_id="b", features=rng.uniform(0.1, 1.0, size=(21, 6)).astype(np.float32)
            ),
            codebook,
        )
        assert similarity(base, second) == pytest.approx(cosine_oracle(base, second), abs=1e-12)


def _results_from(scores, correctness):
    results = []
    truth = {}
    for i, (score, correct) in enumerate(zip(scores, correctness)):
        query, good, bad = f"q{i}", f"good{i}", f"bad{i}"
        best = good if correct else bad
        results.append(
            MatchResult(
                query_id=query,
                ranking=((best, score), (bad if correct else good, score - 1.0)),
                best_match=best,
            )
        )
        truth[query] = frozenset({good})
    return results, GroundTruth(correct=truth)


def test_pr_auc_oracle():
    with criterion("PR/AUC oracle", 10.0):
        scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
        correctness = [True, True, False, True, False, False]
        expected_points, expected_auc = sweep_oracle(scores, correctness)
        results, truth = _results_from(scores, correctness)
        curve = pr_curve(results, truth)
        assert len(curve.points) == len(expected_points)
        for (gp, gr), (ep, er) in zip(curve.points, expected_points):
            assert abs(gp - ep) <= 1e-12 and abs(gr - er) <= 1e-12
        assert abs(curve.auc - expected_auc) <= 1e-12

        perfect, perfect_truth = _results_from(scores, [True] * 6)
        assert abs(pr_curve(perfect, perfect_truth).auc - 1.0) <= 1e-12
        inverted, inverted_truth = _results_from(scores, [False] * 6)
        assert abs(pr_curve(inverted, inverted_truth).auc - 0.0) <= 1e-12

        rng = np.random.default_rng(41)
        for _ in range(100):
            q = int(rng.integers(2, 15))
            raw = rng.choice(np.linspace(-0.9, 0.9, 41), size=q).tolist()
            flags = (rng.random(q) < 0.5).tolist()
            base_results, base_truth = _results_from(raw, flags)
            base_curve = pr_curve(base_results, base_truth)
            # strictly monotone transform of the confidences
            scale = float(rng.uniform(0.5, 3.0))
            shift = float(rng.uniform(-1.0, 1.0))
            warped = [math.tanh(scale * s) + shift for s in raw]
            warped_results = []
            for result, confidence in zip(base_results, warped):
                ranking = tuple(
                    (ref, confidence if rank == 0 else confidence - 2.0)
                    for rank, (ref, _) in enumerate(result.ranking)
                )
                warped_results.append(
                    MatchResult(
                        query_id=result.query_id, ranking=ranking, best_match=result.best_match
                    )
                )
            warped_curve = pr_curve(warped_results, base_truth)
            assert abs(warped_curve.auc - base_curve.auc) <= 1e-12
            assert [tuple(p) for p in warped_curve.points] == [
                tuple(p) for p in base_curve.points
            ]


def test_end_to_end_desk_scale_retrieval(tmp_path):
    with criterion("end-to-end desk-scale retrieval (100 places)", 120.0):
        query_dir, ref_dir, truth_path = write_place_dataset(
            tmp_path, num_places=100, seed=1234,
            width=20, height=20, channels=24, blobs=6,
            noise=0.1, max_shift=2,
        )
        config = PipelineConfig(regions_per_layer=50, clusters=16, seed=0)
        features_q = tmp_path / "features_q"
        features_r = tmp_path / "features_r"
        assert not extract_stage(query_dir, features_q, config).failures
        assert not extract_stage(ref_dir, features_r, config).failures
        codebook_path = tmp_path / "codebook.cdbk"
        train_stage(features_r, codebook_path, clusters=config.clusters, seed=config.seed)
        vlad_q = tmp_path / "vlad_q"
        vlad_r = tmp_path / "vlad_r"
        assert not encode_stage(features_q, codebook_path, vlad_q).failures
        assert not encode_stage(features_r, codebook_path, vlad_r).failures
        matches_path = tmp_path / "matches.json"
        summary = match_stage(vlad_q, vlad_r, matches_path)
        assert summary.num_queries == 100 and summary.num_references == 100
        results, roster = load_matches(matches_path)
        truth = load_ground_truth(truth_path)
        recall_at_1 = sum(
            1 for r in results if r.best_match in truth.correct[r.query_id]
        ) / len(results)
        curve = pr_curve(results, truth, reference_ids=roster)
        print(f"  recall@1={recall_at_1:.3f} auc={curve.auc:.4f}", end=" ")
        assert recall_at_1 >= 0.95
        assert curve.auc >= 0.95


def test_determinism_and_run_equals_chained_subcommands(tmp_path):
    with criterion("determinism + run == chained subcommands", 60.0):
        query_dir, ref_dir, truth_path = write_place_dataset(
            tmp_path, num_places=5, seed=55
        )
        runner = CliRunner()
        flags = ["--regions-per-layer", "12", "--clusters", "4", "--seed", "3"]

        def run_cli(args):
            result = runner.invoke(cli_main, args, catch_exceptions=False)
            assert result.exit_code == 0, result.output
            return result

        def dir_bytes(directory):
            return {
                p.name: p.read_bytes()
                for p in sorted(Path(directory).iterdir())
                if p.is_file()
            }

        # every stage rerun twice must be byte-identical
        chained = tmp_path / "chained"
        repeat = tmp_path / "repeat"
        for target in (chained, repeat):
            run_cli(["extract-regions", "--input", str(query_dir),
                     "--out", str(target / "features/queries"), *flags])
            run_cli(["extract-regions", "--input", str(ref_dir),
                     "--out", str(target / "features/refs"), *flags])
            run_cli(["train-codebook", "--input", str(target / "features/refs"),
                     "--clusters", "4", "--seed", "3",
                     "--out", str(target / "codebook.cdbk")])
            run_cli(["encode", "--features", str(target / "features/queries"),
                     "--codebook", str(target / "codebook.cdbk"),
                     "--out", str(target / "descriptors/queries")])
            run_cli(["encode", "--features", str(target / "features/refs"),
                     "--codebook", str(target / "codebook.cdbk"),
                     "--out", str(target / "descriptors/refs")])
            run_cli(["match", "--query", str(target / "descriptors/queries"),
                     "--refs", str(target / "descriptors/refs"),
                     "--out", str(target / "matches.json")])
            run_cli(["evaluate", "--matches", str(target / "matches.json"),
                     "--truth", str(truth_path), "--out", str(target / "report.json")])
        for rel in ("features/queries", "features/refs",
                    "descriptors/queries", "descriptors/refs"):
            assert dir_bytes(chained / rel) == dir_bytes(repeat / rel)
        for name in ("codebook.cdbk", "matches.json", "report.json"):
            assert (chained / name).read_bytes() == (repeat / name).read_bytes()

        # `run` produces the same artifacts as the chained subcommands
        rundir = tmp_path / "rundir"
        run_cli(["run", "--queries", str(query_dir), "--refs", str(ref_dir),
                 "--truth", str(truth_path), "--workdir", str(rundir), *flags])
        for rel in ("features/queries", "features/refs",
                    "descriptors/queries", "descriptors/refs"):
            assert dir_bytes(rundir / rel) == dir_bytes(chained / rel)
        assert (rundir / "codebook.cdbk").read_bytes() == (chained / "codebook.cdbk").read_bytes()
        assert (rundir / "matches.json").read_bytes() == (chained / "matches.json").read_bytes()
        run_pr = json.loads((rundir / "report.json").read_text())["pr"]
        chained_pr = json.loads((chained / "report.json").read_text())["pr"]
        assert run_pr == chained_pr
