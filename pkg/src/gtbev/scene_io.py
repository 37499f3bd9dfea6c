"""JSON interchange for scenes, predictions and dataset manifests.

Every loader validates before constructing objects and raises
:class:`SchemaError` whose message starts with the JSON path of the offending
field, e.g. ``scenes[2].instances[0].yaw: 3.2 outside [-pi, pi)``.  Floats
are written with python's shortest round-trip repr, so save followed by load
reproduces every value bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .scene import (
    CLASS_NAMES, ATTRIBUTE_NAMES, CameraRig, ClassProfile, Geometry,
    GtInstance, GtScene, PredictedBox, ViewFeatures, default_profile,
    generate_scene, class_signatures, render_views, render_seed, scene_seed,
    signature_seed,
)

__all__ = [
    "SchemaError", "DatasetManifest",
    "load_scenes", "save_scenes", "load_predictions", "save_predictions",
    "load_manifest", "save_manifest", "build_dataset", "render_dataset",
]


class SchemaError(ValueError):
    """A document failed validation; ``path`` points at the bad field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def _field(obj, key, path):
    if not isinstance(obj, dict):
        raise SchemaError(path, f"expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise SchemaError(f"{path}.{key}" if path else key, "missing required field")
    return obj[key]


def _number(v, path, lo=None, hi=None, hi_open=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(path, f"expected a number, got {type(v).__name__}")
    v = float(v)
    if not math.isfinite(v):
        raise SchemaError(path, f"non-finite value {v!r}")
    if lo is not None and v < lo:
        raise SchemaError(path, f"{v!r} below minimum {lo!r}")
    if hi is not None and (v >= hi if hi_open else v > hi):
        cmp = "[" + repr(lo) + ", " + repr(hi) + (")" if hi_open else "]")
        raise SchemaError(path, f"{v!r} outside {cmp}")
    return v


def _integer(v, path, lo=None, hi=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise SchemaError(path, f"expected an integer, got {type(v).__name__}")
    if lo is not None and v < lo or hi is not None and v > hi:
        raise SchemaError(path, f"{v} outside [{lo}, {hi}]")
    return int(v)


def _vector(v, path, n):
    if not isinstance(v, (list, tuple)) or len(v) != n:
        raise SchemaError(path, f"expected a list of {n} numbers")
    return tuple(_number(x, f"{path}[{i}]") for i, x in enumerate(v))


def _parse_instance(obj, path, geometry: Geometry | None = None):
    class_id = _integer(_field(obj, "class_id", path), f"{path}.class_id",
                        0, len(CLASS_NAMES) - 1)
    center = _vector(_field(obj, "center", path), f"{path}.center", 3)
    size = _vector(_field(obj, "size", path), f"{path}.size", 3)
    for i, s in enumerate(size):
        if s <= 0:
            raise SchemaError(f"{path}.size[{i}]", f"non-positive extent {s!r}")
    yaw = _number(_field(obj, "yaw", path), f"{path}.yaw",
                  lo=-math.pi, hi=math.pi, hi_open=True)
    velocity = _vector(_field(obj, "velocity", path), f"{path}.velocity", 2)
    attribute_id = _integer(_field(obj, "attribute_id", path),
                            f"{path}.attribute_id", 0, len(ATTRIBUTE_NAMES) - 1)
    if geometry is not None:
        for axis, val in zip(("x", "y"), center[:2]):
            if abs(val) > geometry.range_m:
                raise SchemaError(f"{path}.center",
                                  f"{axis}={val!r} outside perception range "
                                  f"+-{geometry.range_m}")
    return dict(class_id=class_id, center=center, size=size, yaw=yaw,
                velocity=velocity, attribute_id=attribute_id)


def _parse_scene(obj, path, geometry=None) -> GtScene:
    scene_id = _field(obj, "scene_id", path)
    if not isinstance(scene_id, str) or not scene_id:
        raise SchemaError(f"{path}.scene_id", "expected a non-empty string")
    raw = _field(obj, "instances", path)
    if not isinstance(raw, list):
        raise SchemaError(f"{path}.instances", "expected a list")
    instances = tuple(
        GtInstance(**_parse_instance(o, f"{path}.instances[{i}]", geometry))
        for i, o in enumerate(raw))
    truncated = obj.get("truncated", False)
    if not isinstance(truncated, bool):
        raise SchemaError(f"{path}.truncated", "expected a boolean")
    return GtScene(scene_id=scene_id, instances=instances, truncated=truncated)


def _instance_json(inst: GtInstance) -> dict:
    return {
        "class_id": inst.class_id,
        "center": list(inst.center),
        "size": list(inst.size),
        "yaw": inst.yaw,
        "velocity": list(inst.velocity),
        "attribute_id": inst.attribute_id,
    }


def load_scenes(path, geometry: Geometry | None = None) -> list[GtScene]:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError("$", f"invalid JSON: {e}") from e
    raw = _field(doc, "scenes", "")
    if not isinstance(raw, list):
        raise SchemaError("scenes", "expected a list")
    scenes = [_parse_scene(o, f"scenes[{i}]", geometry) for i, o in enumerate(raw)]
    seen: set[str] = set()
    for i, s in enumerate(scenes):
        if s.scene_id in seen:
            raise SchemaError(f"scenes[{i}].scene_id", f"duplicate id {s.scene_id!r}")
        seen.add(s.scene_id)
    return scenes


def save_scenes(path, scenes) -> None:
    doc = {"scenes": [
        {"scene_id": s.scene_id, "instances": [_instance_json(i) for i in s.instances],
         **({"truncated": True} if s.truncated else {})}
        for s in scenes]}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_predictions(path) -> dict[str, list[PredictedBox]]:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError("$", f"invalid JSON: {e}") from e
    raw = _field(doc, "predictions", "")
    if not isinstance(raw, dict):
        raise SchemaError("predictions", "expected an object keyed by scene_id")
    out: dict[str, list[PredictedBox]] = {}
    for sid, rows in raw.items():
        if not isinstance(rows, list):
            raise SchemaError(f"predictions.{sid}", "expected a list")
        boxes = []
        for i, o in enumerate(rows):
            p = f"predictions.{sid}[{i}]"
            fields = _parse_instance(o, p)
            score = _number(_field(o, "score", p), f"{p}.score", lo=0.0, hi=1.0)
            boxes.append(PredictedBox(**fields, score=score))
        out[sid] = boxes
    return out


def save_predictions(path, preds: dict[str, list[PredictedBox]]) -> None:
    doc = {"predictions": {
        sid: [{**_instance_json(b), "score": b.score} for b in rows]  # type: ignore[arg-type]
        for sid, rows in preds.items()}}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass(frozen=True)
class DatasetManifest:
    """Everything needed to regenerate a dataset bit for bit.

    ``start`` offsets the scene index stream: scene i draws from index
    start + i.  Two manifests with one seed and disjoint index ranges give
    disjoint scenes rendered with the same class signature matrix, which is
    how train/eval splits share a feature space without sharing scenes.
    """

    seed: int
    count: int
    profile: ClassProfile
    geometry: Geometry
    rig: CameraRig
    noise_sigma: float
    start: int = 0

    def validate(self):
        if self.count < 1:
            raise ValueError(f"manifest: count {self.count} must be positive")
        if self.start < 0:
            raise ValueError(f"manifest: negative start {self.start}")
        if self.noise_sigma < 0:
            raise ValueError(f"manifest: negative noise sigma {self.noise_sigma}")
        self.profile.validate()
        self.geometry.validate()
        self.rig.validate()


def manifest_from_dict(doc: dict, path: str = "dataset") -> DatasetManifest:
    seed = _integer(_field(doc, "seed", path), f"{path}.seed", lo=0)
    count = _integer(_field(doc, "count", path), f"{path}.count", lo=1)
    prof_raw = doc.get("profile")
    if prof_raw is None:
        profile = default_profile()
    else:
        shares = _vector(prof_raw, f"{path}.profile", len(CLASS_NAMES))
        profile = ClassProfile(shares=shares)
        try:
            profile.validate()
        except ValueError as e:
            raise SchemaError(f"{path}.profile", str(e)) from e
    g = doc.get("geometry", {})
    geometry = Geometry(
        range_m=_number(g.get("range_m", 12.8), f"{path}.geometry.range_m", lo=1e-6),
        bev_h=_integer(g.get("bev_h", 16), f"{path}.geometry.bev_h", lo=1),
        bev_w=_integer(g.get("bev_w", 16), f"{path}.geometry.bev_w", lo=1),
        max_instances=_integer(g.get("max_instances", 12),
                               f"{path}.geometry.max_instances", lo=1),
        min_separation=_number(g.get("min_separation", 0.5),
                               f"{path}.geometry.min_separation", lo=0.0),
    )
    r = doc.get("rig", {})
    rig = CameraRig(
        views=_integer(r.get("views", 6), f"{path}.rig.views", lo=1),
        view_h=_integer(r.get("view_h", 6), f"{path}.rig.view_h", lo=2),
        view_w=_integer(r.get("view_w", 6), f"{path}.rig.view_w", lo=2),
        channels=_integer(r.get("channels", 16), f"{path}.rig.channels", lo=1),
    )
    noise = _number(doc.get("noise_sigma", 0.02), f"{path}.noise_sigma", lo=0.0)
    start = _integer(doc.get("start", 0), f"{path}.start", lo=0)
    return DatasetManifest(seed=seed, count=count, profile=profile,
                           geometry=geometry, rig=rig, noise_sigma=noise,
                           start=start)


def manifest_to_dict(m: DatasetManifest) -> dict:
    return {
        "seed": m.seed,
        "count": m.count,
        "start": m.start,
        "profile": list(m.profile.shares),
        "geometry": {
            "range_m": m.geometry.range_m, "bev_h": m.geometry.bev_h,
            "bev_w": m.geometry.bev_w, "max_instances": m.geometry.max_instances,
            "min_separation": m.geometry.min_separation,
        },
        "rig": {
            "views": m.rig.views, "view_h": m.rig.view_h,
            "view_w": m.rig.view_w, "channels": m.rig.channels,
        },
        "noise_sigma": m.noise_sigma,
    }


def load_manifest(path) -> DatasetManifest:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError("$", f"invalid JSON: {e}") from e
    m = manifest_from_dict(doc, "")
    m.validate()
    return m


def save_manifest(path, m: DatasetManifest) -> None:
    with open(path, "w") as f:
        json.dump(manifest_to_dict(m), f, indent=1)
        f.write("\n")


def build_dataset(m: DatasetManifest) -> list[GtScene]:
    """The scene list named by a manifest; scene i uses seed XOR (start+i)."""
    m.validate()
    return [
        generate_scene(m.profile, m.geometry, scene_seed(m.seed, m.start + i),
                       scene_id=f"s{m.start + i:06d}")
        for i in range(m.count)
    ]


def render_dataset(m: DatasetManifest, scenes=None, dtype=np.float32):
    """Views for every scene of the manifest (one frozen signature matrix)."""
    if scenes is None:
        scenes = build_dataset(m)
    sig = class_signatures(m.rig.channels, signature_seed(m.seed))
    views = [
        render_views(s, m.rig, m.geometry, sig, m.noise_sigma,
                     render_seed(m.seed, m.start + i), dtype=dtype)
        for i, s in enumerate(scenes)
    ]
    return scenes, views
