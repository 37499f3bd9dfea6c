"""Synthetic driving scenes and their multi-view feature rendering.

A scene is a set of ground-truth boxes on a flat plane inside a square
perception range.  Class frequencies follow a fixed long-tail road-object
profile; five of the ten classes together account for under seven percent of
instances, which is what makes the per-class metrics interesting.

Rendering stands in for a camera-plus-backbone: each instance paints a small
Gaussian blob, tagged with a per-class signature vector, into the one view
whose azimuth sector owns the instance's bearing.  Blob position encodes
bearing (horizontal) and range (vertical); amplitude falls off with range;
iid Gaussian noise with configurable sigma is added on top.  With sigma zero
the renderer is a pure function of the scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "CLASS_NAMES", "CLASS_SHARES", "SIZE_MEANS", "LONG_TAIL_CLASSES",
    "REPORT_CLASS_ORDER", "ATTRIBUTE_NAMES", "MOVING_SPEED",
    "Geometry", "CameraRig", "ClassProfile", "GtInstance", "GtScene",
    "ViewFeatures", "default_profile", "generate_scene", "class_signatures",
    "render_views", "mask_view", "sector_of",
]

# class ids are positions in this tuple
CLASS_NAMES = (
    "car", "pedestrian", "barrier", "traffic_cone", "truck",
    "trailer", "bicycle", "motorcycle", "bus", "construction_vehicle",
)

# instance share of each class in percent; the long tail is everything <= 2%
CLASS_SHARES = {
    "car": 43.1, "pedestrian": 18.0, "barrier": 15.9, "traffic_cone": 10.2,
    "truck": 6.5, "trailer": 1.7, "bicycle": 1.3, "motorcycle": 1.2,
    "bus": 1.0, "construction_vehicle": 1.0,
}

LONG_TAIL_CLASSES = tuple(
    name for name in CLASS_NAMES if CLASS_SHARES[name] <= 2.0)

# ascending share, rarest first (used by per-class report tables)
REPORT_CLASS_ORDER = (
    "construction_vehicle", "bus", "motorcycle", "bicycle", "trailer",
    "truck", "traffic_cone", "barrier", "pedestrian", "car",
)

# per-class mean (width, length, height) in meters
SIZE_MEANS = {
    "car": (1.9, 4.6, 1.7), "pedestrian": (0.7, 0.7, 1.8),
    "barrier": (2.5, 0.5, 1.0), "traffic_cone": (0.4, 0.4, 1.1),
    "truck": (2.5, 6.9, 2.8), "trailer": (2.9, 12.3, 3.9),
    "bicycle": (0.6, 1.7, 1.3), "motorcycle": (0.8, 2.1, 1.5),
    "bus": (2.9, 11.0, 3.5), "construction_vehicle": (2.8, 6.4, 3.2),
}

ATTRIBUTE_NAMES = ("stopped", "moving")
MOVING_SPEED = 0.5          # m/s threshold separating the two attributes
MAX_SPEED = 15.0
SIZE_JITTER = 0.2           # sizes drawn mean * (1 +- 20%)
REJECTION_BUDGET = 1000     # placement retries per scene before giving up
BLOB_SIGMA = 1.0            # pixels
SIGNATURE_NORM = 3.0        # L2 norm of each class signature vector
RANGE_FALLOFF = 0.05        # amplitude = 1 / (1 + falloff * range)


@dataclass(frozen=True)
class Geometry:
    """Perception range and BEV grid resolution."""

    range_m: float = 12.8
    bev_h: int = 16
    bev_w: int = 16
    max_instances: int = 12
    min_separation: float = 0.5

    def validate(self):
        if self.range_m <= 0 or self.bev_h < 1 or self.bev_w < 1:
            raise ValueError(f"geometry: bad range/grid {self}")

    @property
    def cell_h(self) -> float:
        return 2.0 * self.range_m / self.bev_h

    @property
    def cell_w(self) -> float:
        return 2.0 * self.range_m / self.bev_w


@dataclass(frozen=True)
class CameraRig:
    """Ring of outward views; sector v covers [v*width, (v+1)*width)."""

    views: int = 6
    view_h: int = 6
    view_w: int = 6
    channels: int = 16

    def validate(self):
        if self.views < 1 or self.view_h < 2 or self.view_w < 2 or self.channels < 1:
            raise ValueError(f"camera rig: bad dimensions {self}")

    @property
    def sector_width(self) -> float:
        return 2.0 * math.pi / self.views


def sector_of(bearing: float, views: int) -> int:
    """Index of the view owning ``bearing``; sectors tile [0, 2pi) exactly."""
    b = bearing % (2.0 * math.pi)
    return min(int(b * views / (2.0 * math.pi)), views - 1)


@dataclass(frozen=True)
class ClassProfile:
    shares: tuple[float, ...]

    def validate(self):
        if len(self.shares) != len(CLASS_NAMES):
            raise ValueError(f"profile: expected {len(CLASS_NAMES)} shares")
        if any(s < 0 for s in self.shares):
            raise ValueError("profile: negative share")
        if abs(math.fsum(self.shares) - 1.0) > 1e-9:
            raise ValueError(f"profile: shares sum to {math.fsum(self.shares)!r}, not 1")


def default_profile() -> ClassProfile:
    raw = [CLASS_SHARES[name] for name in CLASS_NAMES]
    total = math.fsum(raw)
    return ClassProfile(shares=tuple(s / total for s in raw))


@dataclass(frozen=True)
class GtInstance:
    class_id: int
    center: tuple[float, float, float]      # x, y, z; z is half the height
    size: tuple[float, float, float]        # width, length, height
    yaw: float                              # in [-pi, pi)
    velocity: tuple[float, float]           # vx, vy in m/s
    attribute_id: int                       # index into ATTRIBUTE_NAMES

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]

    @property
    def speed(self) -> float:
        return math.hypot(self.velocity[0], self.velocity[1])


@dataclass(frozen=True)
class GtScene:
    scene_id: str
    instances: tuple[GtInstance, ...]
    truncated: bool = False     # placement gave up before reaching its count


@dataclass(frozen=True)
class PredictedBox:
    """A detector output row: the same geometry as a GT box plus a score."""

    class_id: int
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float]
    attribute_id: int
    score: float

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]


@dataclass
class ViewFeatures:
    """Stacked per-view feature maps (V, H, W, C) plus a view-alive mask."""

    data: np.ndarray
    mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"view features: expected 4 axes, got {self.data.shape}")
        if self.mask is None:
            self.mask = np.ones(self.data.shape[0], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.data.shape[0],):
            raise ValueError(
                f"view features: mask {self.mask.shape} does not match {self.data.shape[0]} views")


def generate_scene(profile: ClassProfile, geometry: Geometry, seed: int,
                   scene_id: str | None = None) -> GtScene:
    """Draw one scene; deterministic in (profile, geometry, seed).

    Draw order per instance is fixed: class, center (with retry on
    separation), size, yaw, speed, heading.  A shared budget of
    ``REJECTION_BUDGET`` failed placements ends the scene early with the
    ``truncated`` flag set.
    """
    profile.validate()
    geometry.validate()
    rng = np.random.default_rng(np.random.PCG64(seed))
    shares = np.asarray(profile.shares)
    n = int(rng.integers(1, geometry.max_instances + 1))
    r = geometry.range_m
    placed_xy: list[tuple[float, float]] = []
    instances: list[GtInstance] = []
    rejections = 0
    truncated = False
    for _ in range(n):
        class_id = int(rng.choice(len(CLASS_NAMES), p=shares))
        xy = None
        while True:
            cand = rng.uniform(-r, r, size=2)
            ok = all((cand[0] - px) ** 2 + (cand[1] - py) ** 2
                     >= geometry.min_separation ** 2
                     for px, py in placed_xy)
            if ok:
                xy = (float(cand[0]), float(cand[1]))
                break
            rejections += 1
            if rejections >= REJECTION_BUDGET:
                break
        if xy is None:
            truncated = True
            break
        mean_w, mean_l, mean_h = SIZE_MEANS[CLASS_NAMES[class_id]]
        jitter = rng.uniform(-SIZE_JITTER, SIZE_JITTER, size=3)
        w, l, h = (mean_w * (1 + jitter[0]), mean_l * (1 + jitter[1]),
                   mean_h * (1 + jitter[2]))
        yaw = float(rng.uniform(-math.pi, math.pi))
        speed = float(rng.uniform(0.0, MAX_SPEED))
        heading = float(rng.uniform(0.0, 2.0 * math.pi))
        placed_xy.append(xy)
        instances.append(GtInstance(
            class_id=class_id,
            center=(xy[0], xy[1], h / 2.0),
            size=(float(w), float(l), float(h)),
            yaw=yaw,
            velocity=(speed * math.cos(heading), speed * math.sin(heading)),
            attribute_id=int(speed >= MOVING_SPEED),
        ))
    return GtScene(
        scene_id=scene_id if scene_id is not None else f"scene_{seed:016x}",
        instances=tuple(instances),
        truncated=truncated,
    )


def class_signatures(channels: int, seed: int) -> np.ndarray:
    """Frozen per-class channel signatures, one unit direction per class.

    Drawn once per dataset from its manifest seed; every render of that
    dataset reuses the same matrix.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    sig = rng.normal(size=(len(CLASS_NAMES), channels))
    sig *= SIGNATURE_NORM / np.linalg.norm(sig, axis=1, keepdims=True)
    return sig


def render_views(scene: GtScene, rig: CameraRig, geometry: Geometry,
                 signatures: np.ndarray, noise_sigma: float,
                 seed: int, dtype=np.float32) -> ViewFeatures:
    """Render the scene into (V, H_v, W_v, C) feature maps.

    Each instance lands in exactly one view: the sector owning its bearing.
    The blob center is (u_frac * (W_v - 1), range / R_max * (H_v - 1)) with
    R_max the range of the far corner, so everything inside the perception
    square stays on the image.  With ``noise_sigma`` zero the seed is unused
    and the output is a pure function of the scene.
    """
    rig.validate()
    if signatures.shape != (len(CLASS_NAMES), rig.channels):
        raise ValueError(
            f"render: signatures {signatures.shape} do not match "
            f"({len(CLASS_NAMES)}, {rig.channels})")
    v, hv, wv, c = rig.views, rig.view_h, rig.view_w, rig.channels
    data = np.zeros((v, hv, wv, c), dtype=np.float64)
    r_max = math.sqrt(2.0) * geometry.range_m
    ys = np.arange(hv, dtype=np.float64)[:, None]
    xs = np.arange(wv, dtype=np.float64)[None, :]
    width = rig.sector_width
    for inst in scene.instances:
        x, y = inst.center[0], inst.center[1]
        bearing = math.atan2(y, x) % (2.0 * math.pi)
        view = sector_of(bearing, v)
        u_frac = (bearing - view * width) / width
        px = u_frac * (wv - 1)
        py = min(math.hypot(x, y) / r_max, 1.0) * (hv - 1)
        blob = np.exp(-((xs - px) ** 2 + (ys - py) ** 2) / (2.0 * BLOB_SIGMA ** 2))
        amp = 1.0 / (1.0 + RANGE_FALLOFF * math.hypot(x, y))
        data[view] += blob[:, :, None] * (amp * signatures[inst.class_id])
    if noise_sigma > 0:
        rng = np.random.default_rng(np.random.PCG64(seed))
        data += rng.normal(0.0, noise_sigma, size=data.shape)
    return ViewFeatures(data=data.astype(dtype), mask=np.ones(v, dtype=bool))


def mask_view(views: ViewFeatures, idx: int) -> ViewFeatures:
    """Copy with view ``idx`` zeroed out and its mask bit cleared."""
    if not (0 <= idx < views.data.shape[0]):
        raise ValueError(
            f"mask_view: index {idx} out of range for {views.data.shape[0]} views")
    data = views.data.copy()
    data[idx] = 0.0
    mask = views.mask.copy()
    mask[idx] = False
    return ViewFeatures(data=data, mask=mask)


def scene_seed(dataset_seed: int, index: int) -> int:
    """Per-scene generation seed: dataset seed XOR scene index."""
    return int(dataset_seed) ^ int(index)


def render_seed(dataset_seed: int, index: int) -> int:
    """Per-scene noise seed, independent of the generation seed stream."""
    ss = np.random.SeedSequence([int(dataset_seed) & (2 ** 63 - 1), 1, int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def signature_seed(dataset_seed: int) -> int:
    ss = np.random.SeedSequence([int(dataset_seed) & (2 ** 63 - 1), 2])
    return int(ss.generate_state(1, np.uint64)[0])


def masking_seed(dataset_seed: int, index: int) -> int:
    """Seed for choosing which view to drop in robustness evaluations."""
    ss = np.random.SeedSequence([int(dataset_seed) & (2 ** 63 - 1), 3, int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


# convenience for tests and the harness
def replace_instances(scene: GtScene, instances) -> GtScene:
    return replace(scene, instances=tuple(instances))
