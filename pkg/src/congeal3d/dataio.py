"""File formats shared across the pipeline and the external featurizer.

Tensor container (TNSR): magic "CNG3TNSR", u32 LE version (=1), u8 dtype
(0 = float32), u8 rank, rank x u32 LE dims, then row-major little-endian
payload. Images travel as binary PPM (P6, color) and PGM (P5, 8-bit masks).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ConfigError,
    NonFinite,
    SizeMismatch,
    UnsupportedFormat,
    UnsupportedVersion,
)
from .field import Aabb, VoxelField
from .geometry import CameraPose

TENSOR_MAGIC = b"CNG3TNSR"
TENSOR_VERSION = 1
_DTYPE_F32 = 0


def write_tensor(path, values: np.ndarray) -> None:
    """Write a float32 tensor file; refuses NaN/inf payloads."""
    a = np.ascontiguousarray(values, dtype=np.float32)
    if not np.all(np.isfinite(a)):
        raise NonFinite(f"refusing to write non-finite values to {path}")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", TENSOR_VERSION))
        f.write(struct.pack("<BB", _DTYPE_F32, a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(a.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a tensor file, validating magic, version, and payload size."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:8] != TENSOR_MAGIC:
        raise BadMagic(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 14:
        raise SizeMismatch(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != TENSOR_VERSION:
        raise UnsupportedVersion(f"{path}: version {version}")
    dtype, rank = struct.unpack_from("<BB", data, 12)
    if dtype != _DTYPE_F32:
        raise UnsupportedVersion(f"{path}: unsupported dtype code {dtype}")
    if len(data) < 14 + 4 * rank:
        raise SizeMismatch(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", data, 14)
    payload = data[14 + 4 * rank:]
    count = int(np.prod(dims)) if rank else 1
    if len(payload) != 4 * count:
        raise SizeMismatch(
            f"{path}: payload holds {len(payload) // 4} values, header implies {count}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary PPM."""
    a = np.asarray(image, dtype=float)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    b = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        f.write(b.tobytes())


def _read_pnm_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise UnsupportedFormat(f"expected {magic.decode()} file")
    # Header tokens may be separated by whitespace and '#' comments.
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise UnsupportedFormat("truncated PNM header")
        fields.append(int(data[start:pos]))
    return fields[0], fields[1], fields[2], pos + 1


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) float image in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, maxval, off = _read_pnm_header(data, b"P6")
    if maxval != 255:
        raise UnsupportedFormat(f"{path}: only 8-bit PPM supported")
    body = data[off : off + w * h * 3]
    if len(body) != w * h * 3:
        raise SizeMismatch(f"{path}: truncated PPM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(float) / 255.0


def write_mask(path, mask: np.ndarray) -> None:
    """Write an (H, W) float mask in [0, 1] as 8-bit binary PGM."""
    a = np.asarray(mask, dtype=float)
    if a.ndim != 2:
        raise ValueError("PGM needs an (H, W) mask")
    b = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        f.write(b.tobytes())


def read_mask(path) -> np.ndarray:
    """Read an 8-bit binary PGM into an (H, W) mask in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, maxval, off = _read_pnm_header(data, b"P5")
    if maxval != 255:
        raise UnsupportedFormat(f"{path}: only 8-bit PGM supported")
    body = data[off : off + w * h]
    if len(body) != w * h:
        raise SizeMismatch(f"{path}: truncated PGM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(float) / 255.0


def write_field(field: VoxelField, meta_path) -> None:
    """Write a voxel field: JSON metadata plus one tensor file per channel."""
    meta_path = Path(meta_path)
    stem = meta_path.name.removesuffix(".json")
    channels = {"density": f"{stem}.density.tnsr", "color": f"{stem}.color.tnsr"}
    write_tensor(meta_path.parent / channels["density"], field.density)
    write_tensor(meta_path.parent / channels["color"], field.color)
    if field.descriptors is not None:
        channels["descriptors"] = f"{stem}.descriptors.tnsr"
        write_tensor(meta_path.parent / channels["descriptors"], field.descriptors)
    meta = {
        "resolution": list(field.resolution),
        "domain_min": [float(x) for x in field.domain.p_min],
        "domain_max": [float(x) for x in field.domain.p_max],
        "channels": channels,
    }
    with open(meta_path, "w") as f:
        json.dump(meta, f, indent=1)
        f.write("\n")


def read_field(meta_path) -> VoxelField:
    meta_path = Path(meta_path)
    try:
        with open(meta_path) as f:
            meta = json.load(f)
        res = tuple(int(n) for n in meta["resolution"])
        domain = Aabb(np.array(meta["domain_min"]), np.array(meta["domain_max"]))
        channels = meta["channels"]
    except (OSError, KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"bad field metadata {meta_path}: {e}") from e
    density = read_tensor(meta_path.parent / channels["density"])
    color = read_tensor(meta_path.parent / channels["color"])
    desc = None
    if "descriptors" in channels:
        desc = read_tensor(meta_path.parent / channels["descriptors"])
    return VoxelField(res, domain, density, color, desc)


def write_pose(pose: CameraPose, path) -> None:
    with open(path, "w") as f:
        json.dump(pose.to_json_dict(), f, indent=1)
        f.write("\n")


def read_pose(path) -> CameraPose:
    try:
        with open(path) as f:
            return CameraPose.from_json_dict(json.load(f))
    except (OSError, KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"bad pose file {path}: {e}") from e


def read_manifest(path) -> list[dict]:
    """Read a dataset manifest; checks ids are unique and files exist."""
    path = Path(path)
    try:
        with open(path) as f:
            doc = json.load(f)
        entries = doc["images"]
    except (OSError, KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"bad manifest {path}: {e}") from e
    if not isinstance(entries, list):
        raise ConfigError(f"bad manifest {path}: images must be a list")
    seen = set()
    out = []
    for e in entries:
        try:
            eid = str(e["id"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad manifest entry in {path}: {exc}") from exc
        if eid in seen:
            raise ConfigError(f"duplicate manifest id {eid!r} in {path}")
        seen.add(eid)
        entry = {"id": eid}
        for key in ("image_path", "mask_path", "features_path", "pose_path"):
            if key in e and e[key] is not None:
                p = path.parent / e[key]
                if not os.path.exists(p):
                    raise ConfigError(f"manifest {path}: missing file {p}")
                entry[key] = str(p)
        out.append(entry)
    return out


def write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1)
        f.write("\n")


def read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, ValueError) as e:
        raise ConfigError(f"bad JSON file {path}: {e}") from e
