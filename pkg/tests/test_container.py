import json
import struct

import numpy as np
import pytest

from vitq.container import (
    BlobLengthError, ContainerShapeError, ManifestError, load_calibration, load_model, read_container,
    save_calibration, save_model, write_container,
)


def rewrite_manifest(path, edit):
    data = path.read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    man = json.loads(data[8:8 + n])
    edit(man)
    head = json.dumps(man).encode()
    path.write_bytes(struct.pack("<Q", len(head)) + head + data[8 + n:])


def test_model_round_trip(tmp_path, small_model):
    p = tmp_path / "m.vitm"
    save_model(small_model, p)
    back = load_model(p)
    assert back.equals(small_model)
    q = tmp_path / "again.vitm"
    save_model(back, q)
    assert p.read_bytes() == q.read_bytes()


def test_little_endian_layout(tmp_path):
    p = tmp_path / "t.vitt"
    write_container(p, {"a": np.array([1.0, -2.0], np.float32)}, "vitt")
    data = p.read_bytes()
    assert data[-8:] == struct.pack("<2f", 1.0, -2.0)


def test_calibration_round_trip(tmp_path, small_images):
    p = tmp_path / "c.vitt"
    labels = np.arange(12) % 5
    save_calibration(p, small_images, labels)
    imgs, lab = load_calibration(p)
    assert imgs.tobytes() == small_images.tobytes()
    np.testing.assert_array_equal(lab, labels)
    save_calibration(p, small_images)
    assert load_calibration(p)[1] is None


def test_truncated_blob(tmp_path, small_model):
    p = tmp_path / "m.vitm"
    save_model(small_model, p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(BlobLengthError):
        load_model(p)


def test_trailing_bytes(tmp_path, small_model):
    p = tmp_path / "m.vitm"
    save_model(small_model, p)
    p.write_bytes(p.read_bytes() + b"\0\0\0\0")
    with pytest.raises(BlobLengthError):
        load_model(p)


def test_shape_conflict(tmp_path, small_model):
    p = tmp_path / "m.vitm"
    save_model(small_model, p)

    def edit(man):
        man["tensors"][0]["shape"] = [7, 7]

    rewrite_manifest(p, edit)
    with pytest.raises(ContainerShapeError):
        load_model(p)


def test_shape_against_config(tmp_path, small_model):
    p = tmp_path / "m.vitm"
    save_model(small_model, p)

    def edit(man):
        cfg = man["meta"]["config"]
        cfg["num_classes"] = 6

    rewrite_manifest(p, edit)
    with pytest.raises(ContainerShapeError):
        load_model(p)


@pytest.mark.parametrize("payload", [b"", b"\x05\0\0\0\0\0\0\0ab", struct.pack("<Q", 3) + b"{x}"])
def test_bad_manifest(tmp_path, payload):
    p = tmp_path / "bad.vitm"
    p.write_bytes(payload)
    with pytest.raises(ManifestError):
        read_container(p)


def test_wrong_format(tmp_path, small_images):
    p = tmp_path / "c.vitt"
    save_calibration(p, small_images)
    with pytest.raises(ManifestError):
        load_model(p)


def test_missing_key(tmp_path, small_model):
    p = tmp_path / "m.vitm"
    save_model(small_model, p)
    rewrite_manifest(p, lambda man: man.pop("blob_bytes"))
    with pytest.raises(ManifestError):
        load_model(p)


def test_errors_are_distinct():
    assert not issubclass(BlobLengthError, (ManifestError, ContainerShapeError))
    assert not issubclass(ContainerShapeError, ManifestError)
