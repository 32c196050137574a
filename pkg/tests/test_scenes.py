import numpy as np
import pytest

from ilora.scenes import (
    AMBIENT_RANGE,
    INTENSITY_RANGE,
    SHADING_MAX,
    CameraSpec,
    ObjectSpec,
    SceneSpec,
    Shape,
    render_scene,
    sample_scene_spec,
)


def test_sampling_is_deterministic():
    a = sample_scene_spec(123)
    b = sample_scene_spec(123)
    assert a == b
    assert a.to_json() == b.to_json()
    assert sample_scene_spec(124) != a


def test_spec_json_round_trip():
    spec = sample_scene_spec(5)
    assert SceneSpec.from_json(spec.to_json()) == spec


def test_object_count_ranges():
    counts_easy = {len(sample_scene_spec(s, "easy").objects) for s in range(200)}
    counts_std = {len(sample_scene_spec(s).objects) for s in range(400)}
    assert counts_easy == {1, 2}
    assert counts_std == {2, 3, 4, 5, 6}


def test_spec_invariants_over_many_seeds():
    for seed in range(1000):
        spec = sample_scene_spec(seed)
        light = np.array(spec.light_dir)
        assert abs(np.linalg.norm(light) - 1.0) < 1e-9
        assert light[2] > 0.25
        assert AMBIENT_RANGE[0] <= spec.ambient <= AMBIENT_RANGE[1]
        assert INTENSITY_RANGE[0] <= spec.light_intensity <= INTENSITY_RANGE[1]
        assert spec.ambient + spec.light_intensity <= SHADING_MAX
        assert 20.0 < spec.camera.fov_deg < 90.0
        assert spec.camera.position[2] >= 3.0


def test_bad_resolution_rejected():
    with pytest.raises(ValueError):
        render_scene(sample_scene_spec(0), 33)


def test_render_consistency_invariants():
    for seed in range(40):
        s = render_scene(sample_scene_spec(seed), 32)
        n = s.normal.data.astype(np.float64)
        assert np.abs(np.linalg.norm(n, axis=2) - 1.0).max() < 1e-4
        assert s.depth.data.min() > 0
        rgb01 = (s.rgb.data.astype(np.float64) + 1.0) / 2.0
        product = s.albedo.data.astype(np.float64) * s.shading.data.astype(np.float64)
        assert np.abs(rgb01 - np.clip(product, 0, 1)).max() < 1e-5
        assert s.shading.data.max() <= SHADING_MAX + 1e-6
        assert s.depth.mask.all() and s.normal.mask.all()


def test_shading_matches_lambert_oracle():
    spec = sample_scene_spec(17)
    s = render_scene(spec, 32)
    light = np.array(spec.light_dir)
    expect = spec.ambient + spec.light_intensity * np.maximum(
        (s.normal.data.astype(np.float64) * light).sum(axis=2), 0.0
    )
    assert np.abs(s.shading.data[..., 0] - expect).max() < 1e-4


def empty_scene(camera):
    return SceneSpec(
        objects=(),
        ground_albedo=(0.5, 0.5, 0.5),
        light_dir=(0.0, 0.0, 1.0),
        ambient=0.2,
        light_intensity=0.5,
        camera=camera,
    )


def test_plane_depth_matches_closed_form():
    # camera straight down: ray through a pixel with angle theta to vertical
    # hits z=0 at depth h / cos(theta)
    cam = CameraSpec(position=(0.0, 0.0, 5.0), look_at=(0.0, 0.0, 0.0), fov_deg=40.0)
    s = render_scene(empty_scene(cam), 32)
    half = np.tan(np.deg2rad(40.0) / 2.0)
    coords = (np.arange(32) + 0.5) / 32 * 2.0 - 1.0
    u, v = np.meshgrid(coords * half, -coords * half)
    cos_theta = 1.0 / np.sqrt(1.0 + u * u + v * v)
    assert np.abs(s.depth.data[..., 0] - 5.0 / cos_theta).max() < 1e-5
    assert np.allclose(s.normal.data, [0.0, 0.0, 1.0])


def test_sphere_depth_matches_closed_form():
    # sphere centered on the optical axis, camera straight down: the central
    # ray travels exactly height - (center_z + radius)
    cam = CameraSpec(position=(0.0, 0.0, 6.0), look_at=(0.0, 0.0, 0.0), fov_deg=40.0)
    spec = SceneSpec(
        objects=(ObjectSpec(Shape.SPHERE, (0.0, 0.0, 1.0), 1.0, (0.8, 0.2, 0.2)),),
        ground_albedo=(0.5, 0.5, 0.5),
        light_dir=(0.0, 0.0, 1.0),
        ambient=0.2,
        light_intensity=0.5,
        camera=cam,
    )
    s = render_scene(spec, 32)
    origin = np.array([0.0, 0.0, 6.0])
    center = np.array([0.0, 0.0, 1.0])
    d = s.depth.data[..., 0].astype(np.float64)
    # every sphere pixel satisfies |origin + t*dir - center| = r; check via the
    # quadratic solved independently per pixel
    from ilora.scenes import _ray_grid

    _, dirs = _ray_grid(cam, 32)
    oc = origin - center
    b = (dirs * oc).sum(axis=2)
    disc = b * b - (oc @ oc - 1.0)
    hit = disc >= 0
    t_oracle = -b - np.sqrt(np.maximum(disc, 0.0))
    assert hit.any()
    assert np.abs(d[hit] - t_oracle[hit]).max() < 1e-5
    # center pixels are the nearest point of the sphere
    assert abs(d[15, 15] - 4.0) < 5e-3 and abs(d[16, 16] - 4.0) < 5e-3


def test_box_top_face_depth_and_normal():
    cam = CameraSpec(position=(0.0, 0.0, 6.0), look_at=(0.0, 0.0, 0.0), fov_deg=35.0)
    spec = SceneSpec(
        objects=(ObjectSpec(Shape.BOX, (0.0, 0.0, 0.5), 0.5, (0.2, 0.2, 0.9)),),
        ground_albedo=(0.5, 0.5, 0.5),
        light_dir=(0.0, 0.0, 1.0),
        ambient=0.1,
        light_intensity=0.6,
        camera=cam,
    )
    s = render_scene(spec, 32)
    on_box = np.abs(s.albedo.data - np.float32([0.2, 0.2, 0.9])).max(axis=2) < 1e-6
    assert on_box.any()
    # depth along the ray to the z=1 top face is 5 / cos(angle to vertical)
    from ilora.scenes import _ray_grid

    _, dirs = _ray_grid(cam, 32)
    expect = 5.0 / (-dirs[..., 2])
    assert np.abs(s.depth.data[on_box, 0] - expect[on_box]).max() < 1e-5
    assert np.allclose(s.normal.data[on_box], [0.0, 0.0, 1.0])


def test_render_independent_of_resolution_statistics():
    spec = sample_scene_spec(3)
    lo = render_scene(spec, 32)
    hi = render_scene(spec, 64)
    # 2x2 average of the hi-res depth approximates the lo-res depth; relative
    # error because far-ground rows have steep depth gradients
    pooled = hi.depth.data[..., 0].reshape(32, 2, 32, 2).mean(axis=(1, 3))
    lo_d = lo.depth.data[..., 0]
    assert (np.abs(pooled - lo_d) / lo_d).mean() < 0.02
