"""Retrieval evaluation: precision-recall/AUC, retrieval-time and power models.

The PR protocol is best-match-only: each query contributes its top-ranked
reference with the top similarity as confidence. A descending threshold is
swept over the distinct confidences; at each step
precision = correct-and-accepted / accepted and recall =
correct-and-accepted / Q. The curve is anchored at (recall=0, precision of
the top-scoring query) -- not at an extrapolated (0, 1) -- and AUC is the
trapezoidal integral of precision over recall across the stored points.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ConsistencyError, FormatError, ParameterError, ValidationError
from .vlad import MatchResult

DEFAULT_VOLTS = 2.5

_TOLERANCE_DIRECTIVE = re.compile(r"#\s*frame_tolerance\s*=\s*(\d+)\s*$")
_LAST_INTEGER = re.compile(r"(\d+)(?!.*\d)")


@dataclass(frozen=True)
class GroundTruth:
    """Correct reference ids per query, with an optional frame window.

    With frame_tolerance == 0 a retrieval is correct iff best_match is in the
    query's listed set. With a positive tolerance, a best_match whose trailing
    integer (frame index) lies within +/- tolerance of any listed reference's
    trailing integer also counts, which is the usual rule for sequence
    datasets.
    """

    correct: Mapping[str, frozenset[str]]
    frame_tolerance: int = 0

    def __post_init__(self):
        if self.frame_tolerance < 0:
            raise ValidationError(f"frame_tolerance must be >= 0, got {self.frame_tolerance}")
        for query_id, refs in self.correct.items():
            if not refs:
                raise ValidationError(f"query {query_id!r} has no correct references")

    def is_correct(self, query_id: str, retrieved_id: str) -> bool:
        refs = self.correct[query_id]
        if retrieved_id in refs:
            return True
        if self.frame_tolerance == 0:
            return False
        frame = _frame_index(retrieved_id)
        if frame is None:
            return False
        for ref in refs:
            ref_frame = _frame_index(ref)
            if ref_frame is not None and abs(frame - ref_frame) <= self.frame_tolerance:
                return True
        return False


def _frame_index(image_id: str) -> int | None:
    match = _LAST_INTEGER.search(image_id)
    return int(match.group(1)) if match else None


def load_ground_truth(path: str | Path) -> GroundTruth:
    """Parse the ground-truth CSV (`query_id,reference_ids`, `;`-separated)."""
    tolerance = 0
    rows: list[list[str]] = []
    with open(path, newline="", encoding="utf-8") as handle:
        data_lines = []
        for line in handle:
            stripped = line.strip()
            if stripped.startswith("#"):
                directive = _TOLERANCE_DIRECTIVE.match(stripped)
                if directive:
                    tolerance = int(directive.group(1))
                continue
            if stripped:
                data_lines.append(line)
        rows = list(csv.reader(data_lines))
    if not rows:
        raise FormatError(f"ground-truth file {path} has no header row")
    header = [cell.strip() for cell in rows[0]]
    if header[:2] != ["query_id", "reference_ids"]:
        raise FormatError(
            f"ground-truth header must be 'query_id,reference_ids', got {rows[0]!r}"
        )
    correct: dict[str, frozenset[str]] = {}
    for row in rows[1:]:
        if len(row) < 2:
            raise FormatError(f"ground-truth row {row!r} needs query_id and reference_ids")
        query_id = row[0].strip()
        refs = frozenset(r.strip() for r in row[1].split(";") if r.strip())
        if not refs:
            raise FormatError(f"query {query_id!r} lists no reference ids")
        if query_id in correct:
            raise FormatError(f"duplicate ground-truth row for query {query_id!r}")
        correct[query_id] = refs
    return GroundTruth(correct=correct, frame_tolerance=tolerance)


def save_ground_truth(truth: GroundTruth, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        if truth.frame_tolerance:
            handle.write(f"# frame_tolerance={truth.frame_tolerance}\n")
        writer = csv.writer(handle)
        writer.writerow(["query_id", "reference_ids"])
        for query_id in sorted(truth.correct):
            writer.writerow([query_id, ";".join(sorted(truth.correct[query_id]))])


@dataclass(frozen=True)
class PRCurve:
    points: tuple[tuple[float, float], ...]  # (precision, recall), threshold-descending
    auc: float
    num_queries: int
    num_references: int

    def __post_init__(self):
        recalls = [r for _, r in self.points]
        if recalls != sorted(recalls):
            raise ValidationError("recall must be non-decreasing along the sweep")
        for p, r in self.points:
            if not (0.0 <= p <= 1.0 and 0.0 <= r <= 1.0):
                raise ValidationError(f"PR point ({p}, {r}) outside [0, 1]")
        if not 0.0 <= self.auc <= 1.0:
            raise ValidationError(f"AUC {self.auc} outside [0, 1]")


def pr_curve(
    results: Sequence[MatchResult],
    truth: GroundTruth,
    reference_ids: Sequence[str] | None = None,
) -> PRCurve:
    """Best-match PR sweep over a batch of match results.

    Every result's query_id must appear in the truth, and every truth
    reference id for an evaluated query must exist in the reference roster
    (`reference_ids` when given, else the union of ranked ids).
    """
    if not results:
        raise ParameterError("cannot compute a PR curve from zero results")
    if reference_ids is not None:
        roster = set(reference_ids)
    else:
        roster = set()
        for result in results:
            roster.update(ref_id for ref_id, _ in result.ranking)
    outcomes: list[tuple[float, bool]] = []
    for result in results:
        if result.query_id not in truth.correct:
            raise ConsistencyError(f"query id {result.query_id!r} not present in ground truth")
        for ref_id in truth.correct[result.query_id]:
            if ref_id not in roster:
                raise ConsistencyError(
                    f"ground truth names unknown reference id {ref_id!r}"
                )
        outcomes.append(
            (result.confidence, truth.is_correct(result.query_id, result.best_match))
        )

    num_queries = len(outcomes)
    outcomes.sort(key=lambda item: -item[0])
    points: list[tuple[float, float]] = []
    accepted = 0
    correct = 0
    index = 0
    while index < num_queries:
        threshold = outcomes[index][0]
        while index < num_queries and outcomes[index][0] == threshold:
            accepted += 1
            correct += outcomes[index][1]
            index += 1
        points.append((correct / accepted, correct / num_queries))
    # Anchor at recall 0 with the precision of the top-scoring sweep point.
    points.insert(0, (points[0][0], 0.0))

    auc = 0.0
    for (p0, r0), (p1, r1) in zip(points, points[1:]):
        auc += (r1 - r0) * (p0 + p1) / 2.0
    num_references = len(roster) if reference_ids is not None else len(results[0].ranking)
    return PRCurve(
        points=tuple(points),
        auc=auc,
        num_queries=num_queries,
        num_references=num_references,
    )


@dataclass(frozen=True)
class CostModelInputs:
    """Per-query timing/utilization parameters of the retrieval cost models.

    All times are milliseconds. t_e is the per-query feature encoding time
    and t_m the per-query matching time against all references; `derived`
    builds them from the stage components.
    """

    m_f: float = 0.0  # forward pass
    m_e: float = 0.0  # feature extraction
    m_v: float = 0.0  # descriptor encoding
    m_m: float = 0.0  # one-to-one match
    num_references: int = 0
    num_queries: int = 0
    u_e: float = 0.0  # CPU utilization while encoding
    u_m: float = 0.0  # CPU utilization while matching
    t_e: float = 0.0
    t_m: float = 0.0
    volts: float = DEFAULT_VOLTS

    def __post_init__(self):
        for name in ("m_f", "m_e", "m_v", "m_m", "u_e", "u_m", "t_e", "t_m"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.num_references < 0 or self.num_queries < 0:
            raise ParameterError("reference and query counts must be non-negative")

    @classmethod
    def derived(
        cls,
        m_f: float,
        m_e: float,
        m_v: float,
        m_m: float,
        num_references: int,
        num_queries: int,
        u_e: float = 0.0,
        u_m: float = 0.0,
        volts: float = DEFAULT_VOLTS,
    ) -> "CostModelInputs":
        return cls(
            m_f=m_f,
            m_e=m_e,
            m_v=m_v,
            m_m=m_m,
            num_references=num_references,
            num_queries=num_queries,
            u_e=u_e,
            u_m=u_m,
            t_e=m_f + m_e + m_v,
            t_m=m_m * num_references,
            volts=volts,
        )


def retrieval_time(inputs: CostModelInputs) -> float:
    """Per-query retrieval time in ms: forward + extract + encode + match*R."""
    return inputs.m_f + inputs.m_e + inputs.m_v + inputs.m_m * inputs.num_references


def power_consumption(inputs: CostModelInputs) -> float:
    """Battery draw in mAh for matching all Q queries against R references."""
    if inputs.volts <= 0:
        raise ParameterError(f"voltage must be positive, got {inputs.volts}")
    busy = inputs.u_e * inputs.t_e + inputs.u_m * inputs.t_m
    return busy * inputs.num_queries / (inputs.volts * 60.0 * 60.0)
