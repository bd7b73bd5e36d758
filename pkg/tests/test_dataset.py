import json

import numpy as np
import pytest

from affordmotion.dataset import (DatasetError, load_arrays, load_dataset, save_arrays, save_dataset)
from affordmotion.scene_synth import TaskConfig, generate_dataset


def assert_same(a, b):
    np.testing.assert_array_equal(a.scene.positions, b.scene.positions)
    np.testing.assert_array_equal(a.scene.colors, b.scene.colors)
    np.testing.assert_array_equal(a.scene.object_ids, b.scene.object_ids)
    np.testing.assert_array_equal(a.motion.joints, b.motion.joints)
    assert a.motion.frame_rate == b.motion.frame_rate
    assert a.prompt.raw == b.prompt.raw and list(a.prompt.tokens) == list(b.prompt.tokens)
    np.testing.assert_array_equal(a.prompt.embedding, b.prompt.embedding)
    np.testing.assert_array_equal(a.affordance.values, b.affordance.values)
    assert a.affordance.sigma == b.affordance.sigma
    assert a.target_object == b.target_object and a.action == b.action
    assert len(a.objects) == len(b.objects)
    for x, y in zip(a.objects, b.objects):
        assert x.label == y.label and x.seat_height == y.seat_height
        for f in ("point_indices", "centroid", "boxes", "front"):
            np.testing.assert_array_equal(getattr(x, f), getattr(y, f))


def test_empty_roundtrip(tmp_path):
    save_dataset([], tmp_path / "d")
    assert load_dataset(tmp_path / "d") == []


def test_hundred_sample_roundtrip(tmp_path):
    data = generate_dataset(100, seed=0, n_points=128, task_config=TaskConfig(n_frames=20, frame_rate=10))
    save_dataset(data, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert len(back) == 100
    for a, b in zip(data, back):
        assert_same(a, b)


@pytest.fixture
def saved(tmp_path, walk_samples):
    path = tmp_path / "d"
    save_dataset(walk_samples[:2], path)
    return path


def test_truncated_blob(saved):
    blob = saved / "arrays.bin"
    blob.write_bytes(blob.read_bytes()[:-10])
    with pytest.raises(DatasetError, match="corrupt dataset"):
        load_dataset(saved)


def test_corrupt_shape_header(saved):
    man = json.loads((saved / "manifest.json").read_text())
    man["records"][0]["scene"]["positions"]["shape"] = [7, 3]
    (saved / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(DatasetError, match="corrupt dataset"):
        load_dataset(saved)


def test_version_mismatch(saved):
    man = json.loads((saved / "manifest.json").read_text())
    man["format_version"] = 99
    (saved / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(DatasetError, match="version"):
        load_dataset(saved)


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_blob_is_little_endian_f4(saved):
    man = json.loads((saved / "manifest.json").read_text())
    ref = man["records"][0]["motion"]["joints"]
    raw = (saved / "arrays.bin").read_bytes()
    off = ref["offset"]
    assert raw[off:off + 4] == b"AMAR" and raw[off + 4] == 0 and raw[off + 5] == 3
    start = off + 8 + 4 * 3
    first = np.frombuffer(raw, dtype="<f4", count=1, offset=start)[0]
    assert first == load_dataset(saved)[0].motion.joints[0, 0, 0]


def test_generic_arrays_roundtrip(tmp_path):
    recs = [{"index": 3, "name": "x", "joints": np.arange(12, dtype=np.float32).reshape(2, 2, 3),
             "ids": np.array([1, 2], dtype=np.int32)}]
    save_arrays(tmp_path / "a", recs, "thing")
    back, man = load_arrays(tmp_path / "a", "thing")
    assert back[0]["index"] == 3 and back[0]["name"] == "x"
    np.testing.assert_array_equal(back[0]["joints"], recs[0]["joints"])
    np.testing.assert_array_equal(back[0]["ids"], recs[0]["ids"])
    with pytest.raises(DatasetError):
        load_arrays(tmp_path / "a", "other")


def test_float64_precision_loss_rejected(tmp_path):
    with pytest.raises(DatasetError):
        save_arrays(tmp_path / "a", [{"v": np.array([0.1])}], "thing")
