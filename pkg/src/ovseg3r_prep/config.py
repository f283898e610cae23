"""Validated configuration models.

``SegmentConfig`` parameterises superpoint construction; ``PipelineConfig``
is the JSON document behind ``ovseg3r-prep pipeline``. Both reject unknown
keys. CLI flags that were explicitly given override values from the file.
"""

from __future__ import annotations

import logging
from enum import Enum
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from ovseg3r_prep.errors import ValidationError
from ovseg3r_prep.io_utils import read_json

logger = logging.getLogger(__name__)


class CrossViewPolicy(str, Enum):
    """What to do with k-NN edges whose endpoints come from different views."""

    PRUNE = "prune"
    KEEP = "keep"


class BackgroundPolicy(str, Enum):
    """How background pixels (-1) take part in the instance test."""

    LABEL = "label"
    PRUNE = "prune"


class SegmentConfig(BaseModel):
    """Superpoint construction parameters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    sp_thresh: float = Field(default=0.1, gt=0.0)
    sp_min: int = Field(default=25, ge=1)
    cross_view_policy: CrossViewPolicy = CrossViewPolicy.PRUNE
    background_policy: BackgroundPolicy = BackgroundPolicy.LABEL


class PipelineConfig(BaseModel):
    """End-to-end pipeline configuration.

    Paths are resolved relative to the working directory. ``features``,
    ``text``, ``queries``, ``init`` and ``origins`` are optional; stages that
    need a missing input are skipped.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    points: Path
    corr: Path
    masks: Path
    out_dir: Path
    features: Path | None = None
    text: Path | None = None
    queries: Path | None = None
    init: Path | None = None
    origins: Path | None = None

    k: int = Field(default=16, ge=3)
    sp_thresh: float = Field(default=0.1, gt=0.0)
    sp_min: int = Field(default=25, ge=1)
    cross_view_policy: CrossViewPolicy = CrossViewPolicy.PRUNE
    background_policy: BackgroundPolicy = BackgroundPolicy.LABEL
    tau: float = 0.0
    seed: int = Field(default=0, ge=0)
    query_count: int = Field(default=64, ge=1)
    threads: int | None = Field(default=None, ge=0)

    def segment_config(self) -> SegmentConfig:
        return SegmentConfig(
            sp_thresh=self.sp_thresh,
            sp_min=self.sp_min,
            cross_view_policy=self.cross_view_policy,
            background_policy=self.background_policy,
        )


def validated(model: type[BaseModel], values: dict[str, Any]) -> Any:
    """Build ``model`` from ``values``, mapping pydantic errors to ours."""
    try:
        return model.model_validate(values)
    except PydanticValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}"
            for err in e.errors()
        )
        raise ValidationError(f"invalid {model.__name__}: {problems}") from e


def load_pipeline_config(
    path: Path | None, overrides: dict[str, Any] | None = None
) -> PipelineConfig:
    """Load a pipeline config file and apply CLI overrides.

    Args:
        path: JSON config file, or None to build from overrides alone.
        overrides: Values from explicitly given CLI flags; ``None`` values
            are ignored.

    Returns:
        The validated configuration.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        ValidationError: If keys are unknown or values invalid.
    """
    values: dict[str, Any] = {}
    if path is not None:
        document = read_json(path)
        if not isinstance(document, dict):
            raise ValidationError(f"{path} must contain a JSON object")
        values.update(document)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    config = validated(PipelineConfig, values)
    logger.debug("pipeline config: %s", config.model_dump(mode="json"))
    return config
