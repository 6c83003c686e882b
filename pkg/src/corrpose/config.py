"""Run configuration.

Every section rejects unknown keys. The same models are passed straight into
the core functions, so a config file and a Python caller see identical
defaults. ``RunConfig().model_dump()`` is what ``corrpose dump-config``
prints.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

CONFIG_ENV = "CORRPOSE_CONFIG"

DEFAULT_EPS_GRID = (1.0, 0.5, 0.3, 0.1, 0.075, 0.05, 0.025)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RansacConfig(_Section):
    iters: int = Field(300, ge=1)
    inlier_px: float = Field(2.0, gt=0)
    min_inliers: int = Field(12, ge=4)
    lm_iters: int = Field(10, ge=0)
    score_points: int = Field(1000, ge=4)


class ThresholdPolicy(_Section):
    """How the error threshold is chosen.

    ``fixed`` uses ``eps``; ``adaptive`` picks one value from ``grid`` per
    image; ``grid`` emits one hypothesis per grid value.
    """

    mode: Literal["fixed", "adaptive", "grid"] = "grid"
    eps: float = Field(1.0, gt=0, le=1)
    grid: tuple[float, ...] = DEFAULT_EPS_GRID
    min_count: int = Field(32, ge=1)
    rho: float = Field(0.05, ge=0, le=1)

    @field_validator("grid")
    @classmethod
    def _check_grid(cls, v):
        if not v:
            raise ValueError("grid must not be empty")
        if any(not (0 < e <= 1) for e in v):
            raise ValueError("grid values must lie in (0, 1]")
        if any(a <= b for a, b in zip(v, v[1:])):
            raise ValueError("grid must be strictly descending")
        return v

    def thresholds(self) -> tuple[float, ...]:
        if self.mode == "fixed":
            return (self.eps,)
        return self.grid


class PnPConfig(_Section):
    conf_thresh: float = Field(0.5, gt=0, lt=1)
    stride: int = Field(2, ge=1)
    policy: ThresholdPolicy = ThresholdPolicy()
    ransac: RansacConfig = RansacConfig()


class RefinerConfig(_Section):
    """Region-based refinement parameters.

    ``sigma_r`` holds one standard deviation (pixels) per entry of ``scales``.
    Line lengths are ``line_segments`` segments per side, each segment being
    ``s`` pixels long at scale ``s``. ``view_distance`` is the camera distance
    used to render the viewpoint model (meters, default four diameters); it
    should roughly match the working distance because the silhouette of a
    nonconvex object changes with perspective.
    """

    scales: tuple[int, ...] = (4, 2, 1)
    sigma_r: tuple[float, ...] = (5.0, 3.0, 1.5)
    iterations: int = Field(5, ge=1)
    slope: float = Field(0.5, gt=0)
    tikhonov_rotation: float = Field(1000.0, gt=0)
    tikhonov_translation: float = Field(5000.0, gt=0)
    hist_bins: int = Field(16, ge=2, le=256)
    hist_learning_rate: float = Field(0.2, ge=0, le=1)
    line_segments: int = Field(8, ge=2)
    n_views: int = 642
    n_points: int = Field(200, ge=4)
    view_distance: float | None = Field(None, gt=0)
    min_variance: float = Field(0.25, gt=0)
    min_continuous: float = Field(3.0, ge=0)

    @model_validator(mode="after")
    def _check_scales(self):
        if not self.scales or any(s < 1 for s in self.scales):
            raise ValueError("scales must be positive integers")
        if len(self.sigma_r) != len(self.scales) or any(s <= 0 for s in self.sigma_r):
            raise ValueError("sigma_r needs one positive value per scale")
        return self


class NoiseConfig(_Section):
    """Corruption applied by the synthetic correspondence source."""

    sigma_coord: float = Field(0.0, ge=0)
    n_blobs: int = Field(0, ge=0)
    blob_radius: float = Field(4.0, gt=0)
    error_mode: Literal["oracle", "noisy"] = "oracle"
    sigma_error: float = Field(0.05, ge=0)
    conf_soft: float = Field(0.0, ge=0, le=1)
    conf_flip: float = Field(0.0, ge=0, le=1)
    conf_blur: float = Field(0.0, ge=0)


class PipelineConfig(_Section):
    ensemble: bool = False
    refine: bool = True
    std_thresh: float = Field(0.1, gt=0)
    roi_refine: bool = False
    map_size: int = Field(256, ge=8)
    jobs: int = Field(1, ge=1)


class Seeds(_Section):
    pnp: int = 0
    noise: int = 0


class RunConfig(_Section):
    pnp: PnPConfig = PnPConfig()
    refiner: RefinerConfig = RefinerConfig()
    pipeline: PipelineConfig = PipelineConfig()
    noise: NoiseConfig = NoiseConfig()
    seeds: Seeds = Seeds()


def load_config(path=None) -> RunConfig:
    """Load a JSON run config; falls back to ``$CORRPOSE_CONFIG`` then defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    data = json.loads(Path(path).read_text())
    return RunConfig.model_validate(data)


def updated(model: BaseModel, **changes) -> BaseModel:
    """Copy of a frozen section with fields replaced and re-validated."""
    data = model.model_dump()
    data.update(changes)
    return type(model).model_validate(data)
