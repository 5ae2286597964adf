"""Binary/text file formats used between pipeline stages.

Depth maps: magic "DMAP", little-endian u32 width, u32 height, then
width*height little-endian float32 meters (NaN marks invalid pixels).
Color frames: binary PPM (P6), 8-bit RGB. IMU streams: CSV with header
t,ax,ay,az,gx,gy,gz,mx,my,mz plus a JSON sidecar with stream metadata.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

DMAP_MAGIC = b"DMAP"


def atomic_write_bytes(path, data: bytes):
    """Write-then-rename so partially written files are never observed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_depth(path, depth: np.ndarray):
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    atomic_write_bytes(path, DMAP_MAGIC + struct.pack("<II", w, h) + depth.tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DMAP_MAGIC:
        raise ValueError(f"{path}: bad depth magic")
    w, h = struct.unpack("<II", raw[4:12])
    expect = 12 + 4 * w * h
    if len(raw) != expect:
        raise ValueError(f"{path}: truncated depth map ({len(raw)} bytes, expected {expect})")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(h, w).astype(np.float32)


def write_ppm(path, rgb: np.ndarray):
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w = rgb.shape[:2]
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM")
    # header: magic, width, height, maxval; whitespace separated, no comments emitted by us
    parts = raw.split(maxsplit=4)
    if len(parts) < 5:
        raise ValueError(f"{path}: truncated PPM header")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = parts[4]
    if len(data) < w * h * 3:
        raise ValueError(f"{path}: truncated PPM payload")
    return np.frombuffer(data[:w * h * 3], dtype=np.uint8).reshape(h, w, 3)


IMU_CSV_HEADER = "t,ax,ay,az,gx,gy,gz,mx,my,mz"


def write_imu_csv(path, t: np.ndarray, accel: np.ndarray, gyro: np.ndarray,
                  mag: np.ndarray):
    rows = [IMU_CSV_HEADER]
    for i in range(t.shape[0]):
        vals = [t[i], *accel[i], *gyro[i], *mag[i]]
        rows.append(",".join(f"{v:.9g}" for v in vals))
    atomic_write_text(path, "\n".join(rows) + "\n")


def read_imu_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != IMU_CSV_HEADER:
            raise ValueError(f"{path}: unexpected IMU CSV header {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        raise ValueError(f"{path}: empty IMU CSV")
    if data.shape[1] != 10:
        raise ValueError(f"{path}: expected 10 columns, found {data.shape[1]}")
    return data[:, 0], data[:, 1:4], data[:, 4:7], data[:, 7:10]


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_jsonl(path, objs):
    atomic_write_text(path, "".join(json.dumps(o) + "\n" for o in objs))
