import json

import numpy as np
import pytest
from PIL import Image as PilImage

from ilora.intrinsics import CodecParams, IntrinsicKind, IntrinsicMap
from ilora.runs import RunDirError, create_run_dir, read_config, read_metrics
from ilora.viz import intrinsic_to_rgb8, model_space_to_rgb8, save_grid

CODEC = CodecParams(depth_min=2.0, depth_max=14.0, shading_max=1.0)


def test_run_dir_create_and_refuse_overwrite(tmp_path):
    run = tmp_path / "r1"
    create_run_dir(run, {"a": 1})
    cfg = read_config(run)
    assert cfg["a"] == 1
    assert len(cfg["config_hash"]) == 16
    with pytest.raises(RunDirError):
        create_run_dir(run, {"a": 2})


def test_read_metrics_missing(tmp_path):
    run = create_run_dir(tmp_path / "r2", {})
    with pytest.raises(RunDirError):
        read_metrics(run)
    (run / "metrics.json").write_text(json.dumps({"rms": 1.0}))
    assert read_metrics(run) == {"rms": 1.0}


def test_normal_visualization_anchors():
    up = np.tile(np.float32([0, 0, 1]), (2, 2, 1))
    vis = intrinsic_to_rgb8(IntrinsicMap(IntrinsicKind.NORMAL, up), CODEC)
    assert vis.dtype == np.uint8
    assert (vis == [128, 128, 255]).all()


def test_depth_visualization_endpoints():
    lo = np.full((1, 1, 1), 2.0, dtype=np.float32)
    hi = np.full((1, 1, 1), 14.0, dtype=np.float32)
    assert (intrinsic_to_rgb8(IntrinsicMap(IntrinsicKind.DEPTH, lo), CODEC) == 0).all()
    assert (intrinsic_to_rgb8(IntrinsicMap(IntrinsicKind.DEPTH, hi), CODEC) == 255).all()


def test_model_space_conversion():
    x = np.float32([[[-1, 0, 1]]])
    assert model_space_to_rgb8(x).tolist() == [[[0, 128, 255]]]


def test_save_grid_dimensions(tmp_path):
    tile = np.zeros((8, 8, 3), dtype=np.uint8)
    path = tmp_path / "grid.png"
    save_grid([[tile, tile], [tile, tile]], path, pad=2)
    img = PilImage.open(path)
    assert img.size == (2 * 10 + 2, 2 * 10 + 2)
