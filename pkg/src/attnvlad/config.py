"""Pipeline configuration: defaults, flat key=value config files, overrides.

Defaults follow the reference operating point: layers conv3+conv4, 300
regions per layer, a 128-cluster codebook. The parsed config is echoed
verbatim into every report so runs are reproducible from their output alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ParameterError
from .regions import GroupingConfig
from .vlad import NORM_INTRA_GLOBAL, NORM_NONE

DEFAULT_LAYERS = ("conv3", "conv4")
DEFAULT_REGIONS_PER_LAYER = 300
DEFAULT_CLUSTERS = 128
JOBS_ENV_VAR = "ATTNVLAD_JOBS"


@dataclass(frozen=True)
class PipelineConfig:
    layer_tags: tuple[str, ...] = DEFAULT_LAYERS
    regions_per_layer: int = DEFAULT_REGIONS_PER_LAYER
    clusters: int = DEFAULT_CLUSTERS
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    normalization: str = NORM_INTRA_GLOBAL
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if not self.layer_tags:
            raise ParameterError("at least one layer tag is required")
        if len(set(self.layer_tags)) != len(self.layer_tags):
            raise ParameterError(f"duplicate layer tags: {self.layer_tags}")
        if self.regions_per_layer < 1:
            raise ParameterError(f"regions_per_layer must be >= 1, got {self.regions_per_layer}")
        if self.clusters < 2:
            raise ParameterError(f"clusters must be >= 2, got {self.clusters}")
        if self.normalization not in (NORM_NONE, NORM_INTRA_GLOBAL):
            raise ParameterError(f"unknown normalization {self.normalization!r}")
        if self.jobs < 1:
            raise ParameterError(f"jobs must be >= 1, got {self.jobs}")

    def to_mapping(self) -> dict[str, str]:
        """Flat key=value view, suitable for config files and report echoes."""
        ratio = self.grouping.similarity_ratio
        return {
            "layers": ",".join(self.layer_tags),
            "regions_per_layer": str(self.regions_per_layer),
            "clusters": str(self.clusters),
            "connectivity": str(self.grouping.connectivity),
            "similarity_ratio": "disabled" if ratio is None else repr(ratio),
            "zero_threshold": repr(self.grouping.zero_threshold),
            "normalization": self.normalization,
            "seed": str(self.seed),
            "jobs": str(self.jobs),
        }


_CONFIG_KEYS = {
    "layers",
    "regions_per_layer",
    "clusters",
    "connectivity",
    "similarity_ratio",
    "zero_threshold",
    "normalization",
    "seed",
    "jobs",
}


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read a flat key=value file; '#' starts a comment, blank lines ignored."""
    mapping: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ParameterError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            mapping[key.strip()] = value.strip()
    return mapping


def config_from_mapping(mapping: Mapping[str, Any], base: PipelineConfig | None = None) -> PipelineConfig:
    """Apply key=value overrides on top of `base` (or the defaults).

    Unknown keys raise ParameterError so typos in config files fail loudly.
    """
    config = base or PipelineConfig()
    grouping = config.grouping
    updates: dict[str, Any] = {}
    for key, raw in mapping.items():
        if key not in _CONFIG_KEYS:
            raise ParameterError(f"unknown config key {key!r}")
        if raw is None:
            continue
        value = str(raw)
        try:
            if key == "layers":
                updates["layer_tags"] = tuple(t.strip() for t in value.split(",") if t.strip())
            elif key == "regions_per_layer":
                updates["regions_per_layer"] = int(value)
            elif key == "clusters":
                updates["clusters"] = int(value)
            elif key == "connectivity":
                grouping = replace(grouping, connectivity=int(value))
            elif key == "similarity_ratio":
                ratio = None if value.lower() in ("disabled", "none", "") else float(value)
                grouping = replace(grouping, similarity_ratio=ratio)
            elif key == "zero_threshold":
                grouping = replace(grouping, zero_threshold=float(value))
            elif key == "normalization":
                updates["normalization"] = value
            elif key == "seed":
                updates["seed"] = int(value)
            elif key == "jobs":
                updates["jobs"] = int(value)
        except ValueError as exc:
            raise ParameterError(f"config key {key!r} has invalid value {value!r}") from exc
    return replace(config, grouping=grouping, **updates)


def default_jobs() -> int:
    raw = os.environ.get(JOBS_ENV_VAR)
    if not raw:
        return 1
    try:
        jobs = int(raw)
    except ValueError as exc:
        raise ParameterError(f"{JOBS_ENV_VAR} must be an integer, got {raw!r}") from exc
    if jobs < 1:
        raise ParameterError(f"{JOBS_ENV_VAR} must be >= 1, got {jobs}")
    return jobs
