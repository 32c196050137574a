import math

import numpy as np
import pytest

from ilora.intrinsics import IntrinsicKind, IntrinsicMap
from ilora.metrics import (
    MetricError,
    MetricsReport,
    angular_errors,
    config_hash,
    depth_metrics,
    embed_images,
    evaluate_maps,
    frechet_distance,
    l1_error_x100,
    quality_proxy,
    rms_error,
    spearman,
)


def rand_normals(rng, h, w):
    v = rng.normal(size=(h, w, 3))
    return (v / np.linalg.norm(v, axis=2, keepdims=True)).astype(np.float32)


def scalar_angular(pred, gt, mask):
    vals = []
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if not mask[i, j]:
                continue
            p, g = pred[i, j].astype(float), gt[i, j].astype(float)
            pn = math.sqrt(sum(v * v for v in p))
            gn = math.sqrt(sum(v * v for v in g))
            if pn <= 1e-9:
                vals.append(90.0)
                continue
            cos = sum(a * b for a, b in zip(p, g)) / (pn * gn)
            vals.append(math.degrees(math.acos(max(-1.0, min(1.0, cos)))))
    return float(np.mean(vals)), float(np.median(vals))


def test_identical_maps_trivial_anchors():
    rng = np.random.default_rng(0)
    n = rand_normals(rng, 4, 4)
    m = IntrinsicMap(IntrinsicKind.NORMAL, n)
    mean, med = angular_errors(m, m)
    assert mean == pytest.approx(0.0, abs=1e-5)
    assert med == pytest.approx(0.0, abs=1e-5)
    assert l1_error_x100(m, m) == 0.0
    d = IntrinsicMap(IntrinsicKind.DEPTH, rng.uniform(1, 5, (4, 4, 1)).astype(np.float32))
    dm = depth_metrics(d, d)
    assert dm.rms == 0.0 and dm.delta_125 == 1.0


def test_delta_boundary_anchor():
    gt = IntrinsicMap(IntrinsicKind.DEPTH, np.full((4, 4, 1), 2.0, dtype=np.float32))
    pred = IntrinsicMap(IntrinsicKind.DEPTH, np.full((4, 4, 1), 2.6, dtype=np.float32))
    assert depth_metrics(pred, gt).delta_125 == 0.0  # ratio 1.3 >= 1.25
    pred2 = IntrinsicMap(IntrinsicKind.DEPTH, np.full((4, 4, 1), 2.4, dtype=np.float32))
    assert depth_metrics(pred2, gt).delta_125 == 1.0  # ratio 1.2 < 1.25


def test_angular_matches_scalar_loop():
    rng = np.random.default_rng(2)
    for _ in range(100):
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        pred = rng.normal(size=(h, w, 3)).astype(np.float32)
        gt = rand_normals(rng, h, w)
        mask = rng.random((h, w)) > 0.2
        if not mask.any():
            mask[0, 0] = True
        got = angular_errors(
            IntrinsicMap(IntrinsicKind.NORMAL, pred, mask),
            IntrinsicMap(IntrinsicKind.NORMAL, gt, mask),
        )
        want = scalar_angular(pred, gt, mask)
        assert got[0] == pytest.approx(want[0], abs=1e-9)
        assert got[1] == pytest.approx(want[1], abs=1e-9)


def test_zero_norm_prediction_counts_ninety():
    pred = np.zeros((1, 1, 3), dtype=np.float32)
    gt = np.zeros((1, 1, 3), dtype=np.float32)
    gt[0, 0, 2] = 1.0
    mean, med = angular_errors(
        IntrinsicMap(IntrinsicKind.NORMAL, pred), IntrinsicMap(IntrinsicKind.NORMAL, gt)
    )
    assert mean == 90.0 and med == 90.0


def test_l1_rms_depth_match_scalar_loop():
    rng = np.random.default_rng(3)
    for _ in range(100):
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        pred = rng.uniform(0.5, 5, (h, w, 1)).astype(np.float32)
        gt = rng.uniform(0.5, 5, (h, w, 1)).astype(np.float32)
        mask = rng.random((h, w)) > 0.2
        if not mask.any():
            mask[0, 0] = True
        pm = IntrinsicMap(IntrinsicKind.DEPTH, pred, mask)
        gm = IntrinsicMap(IntrinsicKind.DEPTH, gt, mask)
        diffs, ratios, sq = [], [], []
        for i in range(h):
            for j in range(w):
                if mask[i, j]:
                    p, g = float(pred[i, j, 0]), float(gt[i, j, 0])
                    diffs.append(abs(p - g))
                    sq.append((p - g) ** 2)
                    ratios.append(max(p / g, g / p))
        assert l1_error_x100(pm, gm) == pytest.approx(100 * np.mean(diffs), abs=1e-9)
        assert rms_error(pm, gm) == pytest.approx(math.sqrt(np.mean(sq)), abs=1e-9)
        dm = depth_metrics(pm, gm)
        assert dm.rms == pytest.approx(math.sqrt(np.mean(sq)), abs=1e-9)
        assert dm.delta_125 == pytest.approx(np.mean([r < 1.25 for r in ratios]), abs=1e-12)


def test_empty_mask_rejected():
    m = IntrinsicMap(IntrinsicKind.DEPTH, np.ones((2, 2, 1), dtype=np.float32), np.zeros((2, 2), bool))
    with pytest.raises(MetricError):
        depth_metrics(m, m)


def test_frechet_mean_shift_closed_form():
    # two point clouds with identical covariance and mean shift m: distance m^2
    rng = np.random.default_rng(4)
    base = rng.normal(size=(4000, 64))
    shift = np.zeros(64)
    shift[0] = 1.5
    d = frechet_distance(base, base + shift)
    assert d == pytest.approx(1.5**2, abs=0.01)
    assert frechet_distance(base, base) == pytest.approx(0.0, abs=1e-6)


def test_frechet_isotropic_covariance_closed_form():
    # N(0, a I) vs N(0, b I) in dim k: trace term k (sqrt(a) - sqrt(b))^2
    rng = np.random.default_rng(5)
    k = 8
    a, b = 1.0, 4.0
    fa = rng.normal(size=(200000, k)) * math.sqrt(a)
    fb = rng.normal(size=(200000, k)) * math.sqrt(b)
    want = k * (math.sqrt(a) - math.sqrt(b)) ** 2
    assert frechet_distance(fa, fb) == pytest.approx(want, rel=0.05)


def test_frechet_symmetry_and_nonnegativity():
    rng = np.random.default_rng(6)
    fa = rng.normal(size=(300, 64))
    fb = rng.normal(size=(300, 64)) * 1.3 + 0.2
    d1, d2 = frechet_distance(fa, fb), frechet_distance(fb, fa)
    assert d1 == pytest.approx(d2, rel=1e-6)
    assert d1 >= 0


def test_quality_proxy_requires_enough_images():
    imgs = np.zeros((16, 32, 32, 3), dtype=np.float32)
    with pytest.raises(MetricError):
        quality_proxy(imgs, imgs)


def test_embed_images_deterministic():
    rng = np.random.default_rng(7)
    imgs = rng.uniform(-1, 1, (4, 32, 32, 3)).astype(np.float32)
    a = embed_images(imgs, seed=3)
    b = embed_images(imgs, seed=3)
    c = embed_images(imgs, seed=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.shape == (4, 64)


def scalar_spearman(xs, ys):
    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        r = [0.0] * len(v)
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            avg = (i + j) / 2 + 1
            for k in range(i, j + 1):
                r[order[k]] = avg
            i = j + 1
        return r

    rx, ry = ranks(xs), ranks(ys)
    mx, my = np.mean(rx), np.mean(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    return num / den if den else 0.0


def test_spearman_matches_brute_force_with_ties():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(3, 12))
        xs = list(rng.integers(0, 5, n).astype(float))
        ys = list(rng.integers(0, 5, n).astype(float))
        assert spearman(xs, ys) == pytest.approx(scalar_spearman(xs, ys), abs=1e-12)


def test_spearman_anchors():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    with pytest.raises(MetricError):
        spearman([1, 2], [3, 4])


def test_evaluate_maps_pools_pixels():
    rng = np.random.default_rng(9)
    gts = [IntrinsicMap(IntrinsicKind.NORMAL, rand_normals(rng, 4, 4)) for _ in range(3)]
    preds = [IntrinsicMap(IntrinsicKind.NORMAL, rand_normals(rng, 4, 4)) for _ in range(3)]
    rep = evaluate_maps(preds, gts, IntrinsicKind.NORMAL)
    assert rep.n_pixels == 48
    big_p = np.concatenate([p.data for p in preds]).reshape(-1, 1, 3)
    big_g = np.concatenate([g.data for g in gts]).reshape(-1, 1, 3)
    mean, med = angular_errors(
        IntrinsicMap(IntrinsicKind.NORMAL, big_p), IntrinsicMap(IntrinsicKind.NORMAL, big_g)
    )
    assert rep.mean_deg == pytest.approx(mean, abs=1e-12)
    assert rep.median_deg == pytest.approx(med, abs=1e-12)


def test_metrics_report_round_trip(tmp_path):
    rep = MetricsReport(
        kind=IntrinsicKind.DEPTH,
        mean_deg=None,
        median_deg=None,
        l1_x100=None,
        rms=1.25,
        delta_125=0.5,
        n_pixels=100,
        provenance={"config_hash": "abc"},
    )
    path = tmp_path / "metrics.json"
    rep.write(path)
    rep.write(tmp_path / "again.json")
    assert path.read_bytes() == (tmp_path / "again.json").read_bytes()
    import json

    d = json.loads(path.read_text())
    assert d["rms"] == 1.25 and d["kind"] == "depth"


def test_config_hash_stable_and_order_free():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 16
