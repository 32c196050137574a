"""Procedural Lambertian scenes with exact analytic intrinsics.

One ray per pixel against spheres, axis-aligned boxes, and an infinite ground
plane (z = 0, world z is up), so every pixel has a hit and the ground-truth
normal/depth/albedo/shading are exact. Shading is s = ambient + I * max(0, n.l)
and rgb01 = albedo * s; the sampling ranges keep ambient + I <= 1 so no pixel
clips and rgb01 == albedo * shading holds exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .intrinsics import Image, IntrinsicKind, IntrinsicMap

# Sampling ranges for shading terms; their maxima define shading_max for the
# dataset codec (ambient_max + intensity_max).
AMBIENT_RANGE = (0.05, 0.30)
INTENSITY_RANGE = (0.40, 0.70)
SHADING_MAX = AMBIENT_RANGE[1] + INTENSITY_RANGE[1]

PALETTE = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.80, 0.20],
        [0.15, 0.25, 0.90],
        [0.92, 0.85, 0.15],
        [0.85, 0.20, 0.85],
        [0.15, 0.85, 0.85],
        [0.95, 0.55, 0.15],
        [0.85, 0.85, 0.85],
        [0.35, 0.20, 0.10],
        [0.50, 0.85, 0.40],
    ],
    dtype=np.float64,
)

GROUND_PALETTE = np.array(
    [[0.45, 0.45, 0.45], [0.60, 0.55, 0.45], [0.40, 0.50, 0.40], [0.55, 0.45, 0.55]],
    dtype=np.float64,
)


class Shape(Enum):
    SPHERE = "sphere"
    BOX = "box"


@dataclass(frozen=True)
class ObjectSpec:
    shape: Shape
    center: tuple[float, float, float]
    size: float  # sphere radius / box half-extent
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class CameraSpec:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    fov_deg: float


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...]
    ground_albedo: tuple[float, float, float]
    light_dir: tuple[float, float, float]
    ambient: float
    light_intensity: float
    camera: CameraSpec

    def to_json(self) -> str:
        d = asdict(self)
        for o in d["objects"]:
            o["shape"] = o["shape"].value
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(s: str) -> "SceneSpec":
        d = json.loads(s)
        objs = tuple(
            ObjectSpec(
                shape=Shape(o["shape"]),
                center=tuple(o["center"]),
                size=o["size"],
                albedo=tuple(o["albedo"]),
            )
            for o in d["objects"]
        )
        return SceneSpec(
            objects=objs,
            ground_albedo=tuple(d["ground_albedo"]),
            light_dir=tuple(d["light_dir"]),
            ambient=d["ambient"],
            light_intensity=d["light_intensity"],
            camera=CameraSpec(
                position=tuple(d["camera"]["position"]),
                look_at=tuple(d["camera"]["look_at"]),
                fov_deg=d["camera"]["fov_deg"],
            ),
        )


@dataclass(frozen=True)
class SceneSample:
    rgb: Image  # model space [-1, 1]
    normal: IntrinsicMap
    depth: IntrinsicMap
    albedo: IntrinsicMap
    shading: IntrinsicMap
    spec: SceneSpec
    seed: int

    def intrinsic(self, kind: IntrinsicKind) -> IntrinsicMap:
        return {
            IntrinsicKind.NORMAL: self.normal,
            IntrinsicKind.DEPTH: self.depth,
            IntrinsicKind.ALBEDO: self.albedo,
            IntrinsicKind.SHADING: self.shading,
        }[kind]


def sample_scene_spec(seed: int, difficulty: str = "standard") -> SceneSpec:
    """Deterministically draw a valid scene; `easy` has 1-2 objects, `standard` 2-6."""
    if difficulty not in ("easy", "standard"):
        raise ValueError(f"unknown difficulty {difficulty!r}")
    rng = np.random.default_rng([0x5CE11E, seed])
    n_obj = int(rng.integers(1, 3)) if difficulty == "easy" else int(rng.integers(2, 7))

    objects = []
    for _ in range(n_obj):
        shape = Shape.SPHERE if rng.random() < 0.6 else Shape.BOX
        size = float(rng.uniform(0.5, 1.1))
        # spread objects along the view axis so their depths cover the range
        # the ground rows do; lateral extent follows the widening frustum
        cy = float(rng.uniform(-2.8, 4.6))
        cx = float(rng.uniform(-1.0, 1.0)) * 0.38 * (cy + 5.0)
        # rest on the ground or float slightly
        cz = size + (float(rng.uniform(0.0, 0.8)) if rng.random() < 0.25 else 0.0)
        albedo = PALETTE[int(rng.integers(len(PALETTE)))]
        objects.append(
            ObjectSpec(
                shape=shape,
                center=(float(cx), float(cy), float(cz)),
                size=size,
                albedo=tuple(float(a) for a in albedo),
            )
        )

    ground = GROUND_PALETTE[int(rng.integers(len(GROUND_PALETTE)))]

    # light direction: uniform on the upper hemisphere, bounded away from grazing
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n < 1e-8:
            continue
        v = v / n
        v[2] = abs(v[2])
        if v[2] > 0.25:
            break
    light_dir = v / np.linalg.norm(v)

    ambient = float(rng.uniform(*AMBIENT_RANGE))
    intensity = float(rng.uniform(*INTENSITY_RANGE))

    # camera: a nearly fixed vantage point south of the scene, pitched shallow
    # enough that ground depth spans several multiples across image rows but
    # with every ray still hitting the ground plane (bounded depth, mask
    # all-true). A stable vantage keeps the world frame inferable from the
    # image, which is what makes world-space normals recoverable at all; a
    # free-orbiting camera makes the horizontal normal components unobservable.
    fov = float(rng.uniform(42.0, 46.0))
    for _ in range(64):
        az = -np.pi / 2 + rng.uniform(-0.08, 0.08)
        radius = rng.uniform(4.8, 5.2)
        height = rng.uniform(3.5, 3.7)
        pos = np.array([radius * np.cos(az), radius * np.sin(az), height])
        look = np.array([rng.uniform(-0.25, 0.25), rng.uniform(1.3, 1.5), 0.0])
        if _all_rays_downward(pos, look, fov):
            break
    else:  # pragma: no cover - ranges above always admit a valid camera
        raise RuntimeError("failed to sample a camera with bounded depth")

    return SceneSpec(
        objects=tuple(objects),
        ground_albedo=tuple(float(a) for a in ground),
        light_dir=tuple(float(x) for x in light_dir),
        ambient=ambient,
        light_intensity=intensity,
        camera=CameraSpec(
            position=tuple(float(x) for x in pos),
            look_at=tuple(float(x) for x in look),
            fov_deg=fov,
        ),
    )


def _camera_basis(position: np.ndarray, look_at: np.ndarray):
    fwd = look_at - position
    dist = np.linalg.norm(fwd)
    if dist < 1e-9:
        raise ValueError("degenerate camera: position == look_at")
    fwd = fwd / dist
    world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, world_up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        world_up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, world_up)
        rn = np.linalg.norm(right)
    right = right / rn
    up = np.cross(right, fwd)
    return fwd, right, up


def _ray_grid(camera: CameraSpec, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(camera.position, dtype=np.float64)
    look = np.asarray(camera.look_at, dtype=np.float64)
    fwd, right, up = _camera_basis(pos, look)
    half = np.tan(np.deg2rad(camera.fov_deg) / 2.0)
    # pixel centers; row 0 is the top of the image
    coords = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    u, v = np.meshgrid(coords * half, -coords * half)
    dirs = fwd[None, None] + u[..., None] * right[None, None] + v[..., None] * up[None, None]
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    return pos, dirs


def _all_rays_downward(pos: np.ndarray, look: np.ndarray, fov_deg: float) -> bool:
    cam = CameraSpec(tuple(pos), tuple(look), fov_deg)
    try:
        _, dirs = _ray_grid(cam, 8)
    except ValueError:
        return False
    return bool((dirs[..., 2] < -0.05).all())


def _intersect_plane(origin, dirs):
    dz = dirs[..., 2]
    t = np.where(np.abs(dz) > 1e-12, -origin[2] / dz, np.inf)
    t = np.where(t > 1e-6, t, np.inf)
    normal = np.zeros(dirs.shape)
    normal[..., 2] = 1.0
    return t, normal


def _intersect_sphere(origin, dirs, center, radius):
    oc = origin - center
    b = np.sum(dirs * oc, axis=-1)
    c = np.dot(oc, oc) - radius * radius
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-6, t0, np.where(t1 > 1e-6, t1, np.inf))
    t = np.where(disc >= 0.0, t, np.inf)
    t_safe = np.where(np.isfinite(t), t, 0.0)
    hit = origin + dirs * t_safe[..., None]
    normal = (hit - center) / radius
    return t, normal


def _intersect_box(origin, dirs, center, half):
    lo = center - half
    hi = center + half
    inv = np.where(np.abs(dirs) > 1e-12, 1.0 / np.where(dirs == 0, 1e-12, dirs), 1e12)
    t_lo = (lo - origin) * inv
    t_hi = (hi - origin) * inv
    t_near_ax = np.minimum(t_lo, t_hi)
    t_far_ax = np.maximum(t_lo, t_hi)
    t_near = t_near_ax.max(axis=-1)
    t_far = t_far_ax.min(axis=-1)
    ok = (t_near <= t_far) & (t_far > 1e-6)
    t = np.where(ok & (t_near > 1e-6), t_near, np.where(ok, t_far, np.inf))
    # face normal: the axis whose slab produced the entering t
    axis = np.argmax(t_near_ax == t_near[..., None], axis=-1)
    normal = np.zeros(dirs.shape)
    idx = np.indices(t.shape)
    normal[idx[0], idx[1], axis] = -np.sign(dirs[idx[0], idx[1], axis])
    return t, normal


def render_scene(spec: SceneSpec, resolution: int, seed: int = 0) -> SceneSample:
    """Ray-cast one scene at the given resolution (32/48/64/128)."""
    if resolution not in (32, 48, 64, 128):
        raise ValueError(f"resolution must be one of 32/48/64/128, got {resolution}")
    origin, dirs = _ray_grid(spec.camera, resolution)

    best_t, best_n = _intersect_plane(origin, dirs)
    albedo = np.broadcast_to(np.asarray(spec.ground_albedo), dirs.shape).copy()

    for obj in spec.objects:
        center = np.asarray(obj.center, dtype=np.float64)
        if obj.shape is Shape.SPHERE:
            t, n = _intersect_sphere(origin, dirs, center, obj.size)
        else:
            t, n = _intersect_box(origin, dirs, center, obj.size)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[..., None], n, best_n)
        albedo = np.where(closer[..., None], np.asarray(obj.albedo), albedo)

    if not np.isfinite(best_t).all():
        raise ValueError("a camera ray escaped the scene; camera must face the ground")

    light = np.asarray(spec.light_dir, dtype=np.float64)
    ndotl = np.maximum(np.sum(best_n * light, axis=-1), 0.0)
    shading = spec.ambient + spec.light_intensity * ndotl
    rgb01 = np.clip(albedo * shading[..., None], 0.0, 1.0)

    f32 = np.float32
    return SceneSample(
        rgb=Image(data=(rgb01 * 2.0 - 1.0).astype(f32)),
        normal=IntrinsicMap(IntrinsicKind.NORMAL, best_n.astype(f32)),
        depth=IntrinsicMap(IntrinsicKind.DEPTH, best_t[..., None].astype(f32)),
        albedo=IntrinsicMap(IntrinsicKind.ALBEDO, albedo.astype(f32)),
        shading=IntrinsicMap(IntrinsicKind.SHADING, shading[..., None].astype(f32)),
        spec=spec,
        seed=seed,
    )
