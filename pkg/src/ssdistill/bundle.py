"""On-disk tensor bundles, checkpoint trees, image export, JSON-lines logs.

A bundle is a directory holding `manifest.json` plus one raw little-endian
row-major blob. The manifest carries name/shape/dtype/layout/byte_order and
the blob filename; extra keys (normalization stats, label metadata) ride
along untouched. Round-trips are bit-exact because we never convert dtype on
either side, only enforce byte order.

A tree is a directory of bundles plus a `state.json`, used for model and
run checkpoints: every array of a checkpoint becomes one bundle, scalars and
structure go in the JSON. Nothing here ever writes a timestamp, so re-running
a command with the same inputs reproduces every byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

_DTYPE_TO_NAME = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_NAME_TO_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_REQUIRED = ("name", "shape", "dtype", "layout", "byte_order", "file")


def save_bundle(path, arr: np.ndarray, name: str = "tensor", extra: dict | None = None) -> Path:
    """Write `arr` as a bundle directory at `path`. Returns the path."""
    path = Path(path)
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_TO_NAME:
        raise FormatError(f"bundles hold f32/f64 tensors only, got dtype {arr.dtype}")
    path.mkdir(parents=True, exist_ok=True)
    dtname = _DTYPE_TO_NAME[arr.dtype]
    blob = arr.astype(_NAME_TO_DTYPE[dtname], copy=False)  # forces little-endian
    manifest = {
        "name": name,
        "shape": list(arr.shape),
        "dtype": dtname,
        "layout": "row-major",
        "byte_order": "little-endian",
        "file": "tensor.bin",
    }
    if extra:
        for k in _REQUIRED:
            if k in extra:
                raise FormatError(f"extra manifest key {k!r} collides with a required field")
        manifest.update(extra)
    (path / "tensor.bin").write_bytes(np.ascontiguousarray(blob).tobytes())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_bundle(path) -> tuple[np.ndarray, dict]:
    """Read a bundle directory; returns (array, full manifest dict)."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FormatError(f"no manifest.json under {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest.json is not valid JSON: {e}") from None
    for field in _REQUIRED:
        if field not in manifest:
            raise FormatError(f"bundle manifest missing field {field!r}")
    if manifest["layout"] != "row-major":
        raise FormatError(f"unsupported layout {manifest['layout']!r}")
    if manifest["byte_order"] != "little-endian":
        raise FormatError(f"unsupported byte order {manifest['byte_order']!r}")
    if manifest["dtype"] not in _NAME_TO_DTYPE:
        raise FormatError(f"unsupported dtype {manifest['dtype']!r}")
    dt = _NAME_TO_DTYPE[manifest["dtype"]]
    shape = tuple(int(s) for s in manifest["shape"])
    if any(s < 0 for s in shape):
        raise FormatError(f"negative entry in shape {shape}")
    blob_path = path / manifest["file"]
    if not blob_path.is_file():
        raise FormatError(f"bundle blob {manifest['file']!r} missing under {path}")
    blob = blob_path.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(blob) != expected:
        raise FormatError(
            f"blob length {len(blob)} does not match shape {shape} x {dt.itemsize} "
            f"bytes = {expected}"
        )
    arr = np.frombuffer(blob, dtype=dt).reshape(shape)
    # native-endian working copy; values are bit-identical
    return arr.astype(arr.dtype.newbyteorder("="), copy=True), manifest


def save_tree(path, arrays: dict[str, np.ndarray], state: dict) -> Path:
    """Write a checkpoint tree: one bundle per named array plus state.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for key, arr in arrays.items():
        save_bundle(path / key, arr, name=key)
    (path / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")
    return path


def load_tree(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    spath = path / "state.json"
    if not spath.is_file():
        raise FormatError(f"no state.json under {path}; not a checkpoint tree")
    state = json.loads(spath.read_text())
    arrays: dict[str, np.ndarray] = {}
    for sub in sorted(path.iterdir()):
        if sub.is_dir() and (sub / "manifest.json").is_file():
            arr, manifest = load_bundle(sub)
            arrays[manifest["name"]] = arr
    return arrays, state


# -- images ----------------------------------------------------------------------


def write_pnm(path, img: np.ndarray) -> Path:
    """Write one image as binary PPM (H,W,3) or PGM (H,W), uint8 in [0,255].

    Float input is expected in [0,1] and is scaled and clipped; uint8 passes
    through untouched.
    """
    path = Path(path)
    img = np.asarray(img)
    if img.dtype != np.uint8:
        if not np.issubdtype(img.dtype, np.floating):
            raise FormatError(f"image must be float in [0,1] or uint8, got {img.dtype}")
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise FormatError(f"image shape {img.shape} is neither (H,W,3) nor (H,W)")
    h, w = img.shape[0], img.shape[1]
    header = magic + f"\n{w} {h}\n255\n".encode()
    path.write_bytes(header + img.tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    """Read a binary PPM/PGM written by write_pnm. Returns uint8 array."""
    data = Path(path).read_bytes()
    # header: magic, whitespace-separated width height maxval, single byte, raster
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4 and i < len(data):
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":  # comment line
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        fields.append(data[i:j])
        i = j
    if len(fields) < 4:
        raise FormatError(f"truncated pnm header in {path}")
    magic, wtxt, htxt, maxtxt = fields
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported pnm magic {magic!r}")
    w, h, maxval = int(wtxt), int(htxt), int(maxtxt)
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}")
    i += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    raster = data[i : i + w * h * channels]
    if len(raster) != w * h * channels:
        raise FormatError(f"pnm raster truncated: expected {w * h * channels} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


# -- run logs ----------------------------------------------------------------------


class JsonlWriter:
    """Append-only JSON-lines log; one dict per line, keys sorted."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out
