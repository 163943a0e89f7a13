"""Procedural indoor scenes and a pinhole depth camera.

World frame is z-up, right-handed; yaw 0 faces +x. Image x points right,
image y points down, so the camera basis is right=(sin yaw, -cos yaw, 0),
down=(0, 0, -1), forward=(cos yaw, sin yaw, 0). Depth is planar z-depth
(distance along the camera forward axis), not ray length.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import json
import math

import numpy as np

CLASS_NAMES = ("toilet", "couch", "bed", "dining table", "potting plant", "tv")
NUM_CLASSES = len(CLASS_NAMES)

# Nominal object footprints (dx, dy, height) in meters, per class.
CLASS_SIZES = (
    (0.5, 0.5, 0.8),    # toilet
    (1.8, 0.9, 0.9),    # couch
    (2.0, 1.5, 0.7),    # bed
    (1.4, 0.9, 0.78),   # dining table
    (0.4, 0.4, 1.1),    # potting plant
    (1.1, 0.15, 1.6),   # tv (panel on a stand)
)


class SceneInfeasibleError(ValueError):
    """Rejection sampling could not satisfy a placement constraint."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned 3D box, meters."""

    xmin: float
    ymin: float
    zmin: float
    xmax: float
    ymax: float
    zmax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin and self.zmax > self.zmin):
            raise ValueError(f"box has non-positive extent: {self}")

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin, self.zmin])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.xmax, self.ymax, self.zmax])

    def contains_xy(self, x: float, y: float, margin: float = 0.0) -> bool:
        return (self.xmin - margin <= x <= self.xmax + margin
                and self.ymin - margin <= y <= self.ymax + margin)

    def to_json(self) -> list[float]:
        return [self.xmin, self.ymin, self.zmin, self.xmax, self.ymax, self.zmax]

    @classmethod
    def from_json(cls, data) -> "Box":
        return cls(*[float(v) for v in data])


def _boxes_xy_gap(a: Box, b: Box) -> float:
    """Smallest horizontal gap between two boxes' footprints (0 if overlapping)."""
    dx = max(a.xmin - b.xmax, b.xmin - a.xmax, 0.0)
    dy = max(a.ymin - b.ymax, b.ymin - a.ymax, 0.0)
    return math.hypot(dx, dy)


@dataclass(frozen=True)
class ObjectInstance:
    gt_id: int
    class_id: int
    box: Box

    def __post_init__(self):
        if not 0 <= self.class_id < NUM_CLASSES:
            raise ValueError(f"class_id out of range: {self.class_id}")


@dataclass(frozen=True)
class SceneSpec:
    """Ground-truth world: room bounds, obstacle boxes, labeled object boxes."""

    bounds: Box
    obstacles: tuple[Box, ...]
    objects: tuple[ObjectInstance, ...]
    seed: int = 0

    def __post_init__(self):
        ids = [o.gt_id for o in self.objects]
        if ids != list(range(len(ids))):
            raise ValueError("object ids must be unique and dense from 0")

    def object_by_id(self, gt_id: int) -> ObjectInstance:
        return self.objects[gt_id]

    def all_solid_boxes(self) -> list[Box]:
        return list(self.obstacles) + [o.box for o in self.objects]

    def to_json(self) -> dict:
        return {
            "bounds": self.bounds.to_json(),
            "obstacles": [b.to_json() for b in self.obstacles],
            "objects": [
                {"gt_id": o.gt_id, "class_id": o.class_id, "box": o.box.to_json()}
                for o in self.objects
            ],
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SceneSpec":
        return cls(
            bounds=Box.from_json(data["bounds"]),
            obstacles=tuple(Box.from_json(b) for b in data["obstacles"]),
            objects=tuple(
                ObjectInstance(int(o["gt_id"]), int(o["class_id"]), Box.from_json(o["box"]))
                for o in data["objects"]
            ),
            seed=int(data.get("seed", 0)),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside image")

    @classmethod
    def default(cls, width: int = 64, height: int = 48) -> "CameraIntrinsics":
        # ~53 degree horizontal FOV; keeps the pixel footprint at typical
        # viewing distances no larger than the 5 cm voxel, so voxelized
        # surfaces stay 26-connected
        f = float(width)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def normalize_angle(a: float) -> float:
    """Wrap to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    yaw: float
    camera_height: float = 1.25

    def __post_init__(self):
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.camera_height])

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Camera basis vectors (right, down, forward) in world coordinates."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        right = np.array([s, -c, 0.0])
        down = np.array([0.0, 0.0, -1.0])
        forward = np.array([c, s, 0.0])
        return right, down, forward

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "yaw": self.yaw,
                "camera_height": self.camera_height}

    @classmethod
    def from_json(cls, d: dict) -> "Pose":
        return cls(float(d["x"]), float(d["y"]), float(d["yaw"]),
                   float(d.get("camera_height", 1.25)))


NO_INSTANCE = -1


@dataclass
class FrameObservation:
    """Per-step sensor bundle: pose, planar z-depth image, gt instance-id image.

    depth == 0 means no hit within max range; gt_instance is NO_INSTANCE there.
    """

    pose: Pose
    depth: np.ndarray       # (H, W) float64
    gt_instance: np.ndarray  # (H, W) int32, NO_INSTANCE where not an object


@dataclass(frozen=True)
class SceneParams:
    """Scene-generation knobs. Counts are per class, inclusive ranges."""

    room_size_min: float = 10.0
    room_size_max: float = 12.0
    objects_per_class_min: int = 1
    objects_per_class_max: int = 1
    min_separation: float = 0.4
    wall_thickness: float = 0.1
    wall_height: float = 3.0
    n_partitions: int = 3
    size_jitter: float = 0.1
    max_retries: int = 200

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, d: dict) -> "SceneParams":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def generate_scene(params: SceneParams, seed: int) -> SceneSpec:
    """Deterministic rejection-sampled room with perimeter walls and objects."""
    rng = np.random.default_rng(seed)
    sx = float(rng.uniform(params.room_size_min, params.room_size_max))
    sy = float(rng.uniform(params.room_size_min, params.room_size_max))
    h = params.wall_height
    t = params.wall_thickness
    bounds = Box(0.0, 0.0, 0.0, sx, sy, h)
    walls = (
        Box(0.0, 0.0, 0.0, sx, t, h),
        Box(0.0, sy - t, 0.0, sx, sy, h),
        Box(0.0, 0.0, 0.0, t, sy, h),
        Box(sx - t, 0.0, 0.0, sx, sy, h),
    )

    # interior partition walls with a doorway, so coverage requires exploring
    partitions: list[Box] = []
    for k in range(params.n_partitions):
        along_x = bool(rng.integers(2))
        span = sx if along_x else sy
        other = sy if along_x else sx
        pos = float(rng.uniform(0.3 * other, 0.7 * other))
        length = 0.55 * span
        from_low = bool(rng.integers(2))
        lo = t if from_low else span - t - length
        hi = lo + length
        if along_x:
            partitions.append(Box(lo, pos - t / 2, 0.0, hi, pos + t / 2, h))
        else:
            partitions.append(Box(pos - t / 2, lo, 0.0, pos + t / 2, hi, h))

    counts = [int(rng.integers(params.objects_per_class_min,
                               params.objects_per_class_max + 1))
              for _ in range(NUM_CLASSES)]
    objects: list[ObjectInstance] = []
    gt_id = 0
    for class_id in range(NUM_CLASSES):
        for _ in range(counts[class_id]):
            dx0, dy0, dz = CLASS_SIZES[class_id]
            placed = False
            for _ in range(params.max_retries):
                jx = 1.0 + float(rng.uniform(-params.size_jitter, params.size_jitter))
                jy = 1.0 + float(rng.uniform(-params.size_jitter, params.size_jitter))
                dx, dy = dx0 * jx, dy0 * jy
                lo_x, hi_x = t + 0.05, sx - t - 0.05 - dx
                lo_y, hi_y = t + 0.05, sy - t - 0.05 - dy
                if hi_x <= lo_x or hi_y <= lo_y:
                    continue
                x = float(rng.uniform(lo_x, hi_x))
                y = float(rng.uniform(lo_y, hi_y))
                box = Box(x, y, 0.0, x + dx, y + dy, dz)
                if (all(_boxes_xy_gap(box, o.box) >= params.min_separation
                        for o in objects)
                        and all(_boxes_xy_gap(box, w) >= 0.35 for w in partitions)):
                    objects.append(ObjectInstance(gt_id, class_id, box))
                    gt_id += 1
                    placed = True
                    break
            if not placed:
                raise SceneInfeasibleError(
                    f"scene infeasible: could not place class {CLASS_NAMES[class_id]} "
                    f"with min_separation={params.min_separation} "
                    f"after {params.max_retries} retries")
    return SceneSpec(bounds=bounds, obstacles=walls + tuple(partitions),
                     objects=tuple(objects), seed=seed)


def _ray_dirs(K: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """World-frame direction per pixel, scaled so t equals planar depth. (H, W, 3)."""
    right, down, forward = pose.basis()
    us = (np.arange(K.width) + 0.0 - K.cx) / K.fx
    vs = (np.arange(K.height) + 0.0 - K.cy) / K.fy
    dirs = (us[None, :, None] * right[None, None, :]
            + vs[:, None, None] * down[None, None, :]
            + forward[None, None, :])
    return dirs


def render_frame(scene: SceneSpec, pose: Pose, K: CameraIntrinsics,
                 max_range: float = 10.0) -> FrameObservation:
    """Nearest ray/box hit per pixel via the slab method, vectorized over boxes."""
    H, W = K.height, K.width
    boxes = scene.all_solid_boxes()
    depth = np.zeros((H, W))
    gt = np.full((H, W), NO_INSTANCE, dtype=np.int32)
    if not boxes:
        return FrameObservation(pose=pose, depth=depth, gt_instance=gt)

    dirs = _ray_dirs(K, pose)                       # (H, W, 3)
    origin = pose.position
    mins = np.stack([b.mins for b in boxes])        # (M, 3)
    maxs = np.stack([b.maxs for b in boxes])

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs                            # (H, W, 3); inf on zero components
        t1 = (mins[None, None] - origin) * inv[:, :, None, :]   # (H, W, M, 3)
        t2 = (maxs[None, None] - origin) * inv[:, :, None, :]
    tnear = np.nanmax(np.minimum(t1, t2), axis=-1)  # (H, W, M)
    tfar = np.nanmin(np.maximum(t1, t2), axis=-1)
    eps = 1e-9
    hit = (tfar >= tnear) & (tnear > eps) & (tnear <= max_range)
    tnear = np.where(hit, tnear, np.inf)
    best = np.argmin(tnear, axis=-1)                # (H, W)
    tbest = np.take_along_axis(tnear, best[..., None], axis=-1)[..., 0]
    valid = np.isfinite(tbest)
    depth[valid] = tbest[valid]

    n_obstacles = len(scene.obstacles)
    is_object = valid & (best >= n_obstacles)
    gt[is_object] = (best[is_object] - n_obstacles).astype(np.int32)
    return FrameObservation(pose=pose, depth=depth, gt_instance=gt)


def pixel_to_world(u, v, d, K: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Lift pixel(s) at planar depth d to world points. Accepts arrays; (..., 3)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("invalid depth")
    right, down, forward = pose.basis()
    X = (u - K.cx) * d / K.fx
    Y = (v - K.cy) * d / K.fy
    pts = (X[..., None] * right + Y[..., None] * down + d[..., None] * forward
           + pose.position)
    return pts


def world_to_pixel(p, K: CameraIntrinsics, pose: Pose):
    """Project world point(s) to (u, v, planar depth).

    Returns None for a single point behind the camera (Z <= 0). For arrays,
    returns (u, v, d) with d <= 0 marking behind-camera points; the caller
    clips to image bounds.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    rel = p - pose.position
    right, down, forward = pose.basis()
    X = rel @ right
    Y = rel @ down
    Z = rel @ forward
    with np.errstate(divide="ignore", invalid="ignore"):
        u = X / Z * K.fx + K.cx
        v = Y / Z * K.fy + K.cy
    if single:
        if Z <= 0:
            return None
        return float(u), float(v), float(Z)
    return u, v, Z
