"""Box parameterizations shared by the detector head, matching and guidance.

Regression rows (10 wide, what the box head emits and the L1 loss compares):

    [x_hat, y_hat, z/5, log w, log l, log h, sin yaw, cos yaw, vx/15, vy/15]

with x_hat = (x + R) / 2R so the sigmoid-squashed head output lands in [0, 1].

Instance feature rows (20 wide, the ground-truth encoder input) use linear
size normalization instead of logs:

    one_hot(class, 10) ++ [x_hat, y_hat, z/5, w/10, l/10, h/10,
                           sin yaw, cos yaw, vx/15, vy/15]
"""

from __future__ import annotations

import math

import numpy as np

from .scene import CLASS_NAMES, MAX_SPEED, Geometry, GtInstance, PredictedBox

__all__ = [
    "BOX_DIM", "FEATURE_DIM", "Z_NORM", "SIZE_NORM", "VEL_NORM",
    "regression_targets", "instance_features", "decode_box_row",
]

BOX_DIM = 10
FEATURE_DIM = len(CLASS_NAMES) + BOX_DIM
Z_NORM = 5.0
SIZE_NORM = 10.0
VEL_NORM = MAX_SPEED


def regression_targets(instances, geometry: Geometry) -> np.ndarray:
    """(N, 10) float64 regression rows for the given instances."""
    r = geometry.range_m
    out = np.zeros((len(instances), BOX_DIM))
    for i, inst in enumerate(instances):
        x, y, z = inst.center
        w, l, h = inst.size
        out[i] = (
            (x + r) / (2.0 * r), (y + r) / (2.0 * r), z / Z_NORM,
            math.log(w), math.log(l), math.log(h),
            math.sin(inst.yaw), math.cos(inst.yaw),
            inst.velocity[0] / VEL_NORM, inst.velocity[1] / VEL_NORM,
        )
    return out


def instance_features(instances, geometry: Geometry) -> np.ndarray:
    """(N, 20) float64 ground-truth encoder inputs."""
    r = geometry.range_m
    k = len(CLASS_NAMES)
    out = np.zeros((len(instances), FEATURE_DIM))
    for i, inst in enumerate(instances):
        x, y, z = inst.center
        w, l, h = inst.size
        out[i, inst.class_id] = 1.0
        out[i, k:] = (
            (x + r) / (2.0 * r), (y + r) / (2.0 * r), z / Z_NORM,
            w / SIZE_NORM, l / SIZE_NORM, h / SIZE_NORM,
            math.sin(inst.yaw), math.cos(inst.yaw),
            inst.velocity[0] / VEL_NORM, inst.velocity[1] / VEL_NORM,
        )
    return out


def decode_box_row(row, geometry: Geometry, class_id: int, attribute_id: int,
                   score: float) -> PredictedBox:
    """Invert a regression row back into world coordinates.

    atan2 of the (sin, cos) pair tolerates unnormalized outputs, which is the
    renormalization step before any metric sees the yaw.
    """
    r = geometry.range_m
    x = float(row[0]) * 2.0 * r - r
    y = float(row[1]) * 2.0 * r - r
    z = float(row[2]) * Z_NORM
    w, l, h = (math.exp(float(row[3])), math.exp(float(row[4])),
               math.exp(float(row[5])))
    yaw = math.atan2(float(row[6]), float(row[7]))
    if yaw >= math.pi:   # atan2 returns (-pi, pi]; the schema wants [-pi, pi)
        yaw = -math.pi
    return PredictedBox(
        class_id=int(class_id),
        center=(x, y, z),
        size=(w, l, h),
        yaw=yaw,
        velocity=(float(row[8]) * VEL_NORM, float(row[9]) * VEL_NORM),
        attribute_id=int(attribute_id),
        score=float(score),
    )
