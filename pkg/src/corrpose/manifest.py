"""Dataset manifest (JSON).

Example::

    {
      "object": {"mesh": "satellite.ply", "regions": 8},
      "images": [
        {"id": "000", "image": "images/000.png",
         "intrinsics": {"fx": 800, "fy": 800, "cx": 319.5, "cy": 239.5, "width": 640, "height": 480},
         "pose": {"quaternion": [1, 0, 0, 0], "translation": [0, 0, 1.5]},
         "roi": {"center": [320, 240], "side": 180},
         "predictions": {"0": {"coords": "pred/000_coords.eptf", "error": "...", "confidence": "..."}}}
      ]
    }

Relative paths resolve against the manifest's directory. ``predictions`` is
keyed by quarter-turn count of the input crop.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import FormatError
from .geometry import CameraIntrinsics, Pose
from .roi import RoI


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Intrinsics(_Strict):
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float = Field(ge=0)
    cy: float = Field(ge=0)
    width: int = Field(gt=0)
    height: int = Field(gt=0)

    @field_validator("fx", "fy", "cx", "cy")
    @classmethod
    def _finite(cls, v):
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v

    @model_validator(mode="after")
    def _principal_point(self):
        if self.cx >= self.width or self.cy >= self.height:
            raise ValueError("principal point outside the image")
        return self

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    @classmethod
    def of(cls, K: CameraIntrinsics) -> "Intrinsics":
        return cls(fx=K.fx, fy=K.fy, cx=K.cx, cy=K.cy, width=K.width, height=K.height)


class PoseEntry(_Strict):
    quaternion: tuple[float, float, float, float]  # w, x, y, z
    translation: tuple[float, float, float]  # meters

    def pose(self) -> Pose:
        return Pose.from_quat(np.array(self.quaternion), np.array(self.translation))

    @classmethod
    def of(cls, pose: Pose) -> "PoseEntry":
        return cls(
            quaternion=tuple(float(v) for v in pose.quat().as_array()),
            translation=tuple(float(v) for v in pose.translation),
        )


class RoIEntry(_Strict):
    center: tuple[float, float]
    side: float = Field(gt=0)

    def roi(self) -> RoI:
        return RoI(center=self.center, side=self.side, source="manifest")


class MapPaths(_Strict):
    coords: str
    error: str
    confidence: str
    regions: str | None = None


class ImageEntry(_Strict):
    id: str
    image: str
    intrinsics: Intrinsics
    split: str = "default"
    pose: PoseEntry | None = None
    roi: RoIEntry | None = None
    predictions: dict[int, MapPaths] | None = None


class ObjectEntry(_Strict):
    mesh: str
    bbox: tuple[tuple[float, float, float], tuple[float, float, float]] | None = None
    regions: int = Field(8, ge=1)


class Manifest(_Strict):
    object: ObjectEntry
    images: list[ImageEntry]
    root: Path = Field(default=Path("."), exclude=True)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", exclude_none=True), indent=2, sort_keys=True) + "\n"


def _diagnostic(exc: ValidationError, path: Path) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"])
        parts.append(f"{path}: {loc}: {err['msg']}")
    return "\n".join(parts)


def parse_manifest(text: str, root: Path = Path("."), name: str = "<manifest>") -> Manifest:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{name}: line {exc.lineno}: {exc.msg}") from exc
    try:
        m = Manifest.model_validate(data)
    except ValidationError as exc:
        raise FormatError(_diagnostic(exc, Path(name))) from exc
    m.root = Path(root)
    ids = [im.id for im in m.images]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{name}: duplicate image ids")
    return m


def load_manifest(path) -> Manifest:
    path = Path(path)
    return parse_manifest(path.read_text(), root=path.parent, name=str(path))
