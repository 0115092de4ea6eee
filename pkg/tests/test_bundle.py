from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from ssdistill.bundle import (
    JsonlWriter,
    load_bundle,
    load_tree,
    read_jsonl,
    read_pnm,
    save_bundle,
    save_tree,
    write_pnm,
)
from ssdistill.core.rng import RngState
from ssdistill.errors import FormatError


def independent_bundle_read(path: Path):
    """Minimal reader written from the format description alone: parse the
    JSON manifest, unpack the blob with struct, build the nested list shape.
    Deliberately avoids numpy's frombuffer/reshape so it cannot share a bug
    with the package reader."""
    manifest = json.loads((path / "manifest.json").read_text())
    assert manifest["layout"] == "row-major"
    assert manifest["byte_order"] == "little-endian"
    fmt = {"f32": "f", "f64": "d"}[manifest["dtype"]]
    blob = (path / manifest["file"]).read_bytes()
    n = 1
    for s in manifest["shape"]:
        n *= s
    values = list(struct.unpack("<" + fmt * n, blob))

    def build(shape, flat):
        if not shape:
            return flat.pop(0)
        k = len(flat) // shape[0]
        return [build(shape[1:], flat[i * k : (i + 1) * k]) for i in range(shape[0])]

    flat = values[:]
    if manifest["shape"]:
        k = n // manifest["shape"][0]
        nested = [
            build(manifest["shape"][1:], flat[i * k : (i + 1) * k])
            for i in range(manifest["shape"][0])
        ]
    else:
        nested = flat[0]
    return nested, manifest


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_bit_exact(tmp_path, dtype):
    arr = RngState(1).normal((3, 4, 2)).astype(dtype)
    save_bundle(tmp_path / "b", arr, name="demo")
    back, manifest = load_bundle(tmp_path / "b")
    assert back.dtype == arr.dtype
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()
    assert manifest["name"] == "demo"
    assert manifest["dtype"] == ("f32" if dtype == np.float32 else "f64")


def test_independent_reader_agrees(tmp_path):
    arr = RngState(2).normal((2, 3))
    save_bundle(tmp_path / "b", arr)
    nested, _ = independent_bundle_read(tmp_path / "b")
    assert np.allclose(np.array(nested), arr, rtol=0, atol=0)


def test_extra_manifest_keys_survive(tmp_path):
    stats = {"channel_mean": [0.1, 0.2, 0.3], "channel_std": [1.0, 1.0, 1.0]}
    save_bundle(tmp_path / "b", np.zeros((2, 2)), extra=stats)
    _, manifest = load_bundle(tmp_path / "b")
    assert manifest["channel_mean"] == [0.1, 0.2, 0.3]


def test_extra_key_collision_rejected(tmp_path):
    with pytest.raises(FormatError):
        save_bundle(tmp_path / "b", np.zeros(2), extra={"shape": [9]})


def test_missing_field_named_in_error(tmp_path):
    save_bundle(tmp_path / "b", np.zeros(3))
    m = json.loads((tmp_path / "b" / "manifest.json").read_text())
    del m["byte_order"]
    (tmp_path / "b" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(FormatError, match="byte_order"):
        load_bundle(tmp_path / "b")


def test_wrong_blob_length_rejected(tmp_path):
    save_bundle(tmp_path / "b", np.zeros(4))
    (tmp_path / "b" / "tensor.bin").write_bytes(b"\x00" * 17)
    with pytest.raises(FormatError, match="length"):
        load_bundle(tmp_path / "b")


def test_big_endian_rejected(tmp_path):
    save_bundle(tmp_path / "b", np.zeros(2))
    m = json.loads((tmp_path / "b" / "manifest.json").read_text())
    m["byte_order"] = "big-endian"
    (tmp_path / "b" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(FormatError):
        load_bundle(tmp_path / "b")


def test_corrupt_json_rejected(tmp_path):
    d = tmp_path / "b"
    d.mkdir()
    (d / "manifest.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_bundle(d)


def test_tree_round_trip(tmp_path):
    arrays = {
        "conv0.w": RngState(3).normal((3, 3, 3, 8)),
        "conv0.b": np.zeros(8),
    }
    state = {"step": 7, "rng": {"seed": 1, "counter": 42}}
    save_tree(tmp_path / "ckpt", arrays, state)
    back, st = load_tree(tmp_path / "ckpt")
    assert st == state
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()


def test_ppm_round_trip(tmp_path):
    img = RngState(4).uniform((8, 6, 3))
    p = write_pnm(tmp_path / "x.ppm", img)
    back = read_pnm(p)
    assert back.shape == (8, 6, 3)
    expected = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    assert np.array_equal(back, expected)
    # uint8 passes through exactly
    p2 = write_pnm(tmp_path / "y.ppm", expected)
    assert np.array_equal(read_pnm(p2), expected)


def test_pgm_round_trip(tmp_path):
    img = RngState(5).uniform((5, 7))
    p = write_pnm(tmp_path / "x.pgm", img)
    back = read_pnm(p)
    assert back.shape == (5, 7)
    assert np.array_equal(back, np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8))


def test_ppm_header_is_standard(tmp_path):
    img = np.zeros((2, 3, 3), dtype=np.uint8)
    p = write_pnm(tmp_path / "x.ppm", img)
    data = p.read_bytes()
    assert data.startswith(b"P6\n3 2\n255\n")
    assert len(data) == len(b"P6\n3 2\n255\n") + 2 * 3 * 3


def test_bad_image_shape_rejected(tmp_path):
    with pytest.raises(FormatError):
        write_pnm(tmp_path / "x.ppm", np.zeros((2, 2, 4)))


def test_jsonl_round_trip(tmp_path):
    p = tmp_path / "log.jsonl"
    with JsonlWriter(p) as w:
        w.write({"step": 0, "loss": 1.5})
        w.write({"step": 1, "loss": 0.75})
    records = read_jsonl(p)
    assert records == [{"step": 0, "loss": 1.5}, {"step": 1, "loss": 0.75}]


def test_save_is_deterministic(tmp_path):
    arr = RngState(6).normal((4, 4))
    save_bundle(tmp_path / "a", arr, extra={"tag": "x"})
    save_bundle(tmp_path / "b", arr, extra={"tag": "x"})
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (
        tmp_path / "b" / "manifest.json"
    ).read_bytes()
    assert (tmp_path / "a" / "tensor.bin").read_bytes() == (
        tmp_path / "b" / "tensor.bin"
    ).read_bytes()
