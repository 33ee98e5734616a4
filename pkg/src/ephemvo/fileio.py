"""File formats shared by the pipeline stages.

* ``.evpc``  binary multi-session pointclouds (little-endian).
* ``.pfm``   float images, grayscale or 3-channel, scale -1.0, NaN = invalid.
* ``.pgm``   16-bit intensity images for rendered frames.
* trajectory text: ``timestamp_ns r00 r01 r02 t0 r10 ... t2`` per line.
* camera text: TOML-style ``key = value`` lines.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import CameraModel, Pose, Trajectory

EVPC_MAGIC = b"EVPC"
EVPC_VERSION = 1

_POINT_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("session", "<u4")])


def write_evpc(path, positions: np.ndarray, sessions: np.ndarray, session_count: int) -> None:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    sessions = np.asarray(sessions, dtype=np.uint32).reshape(-1)
    if len(positions) != len(sessions):
        raise DataError("position and session counts differ")
    records = np.empty(len(positions), dtype=_POINT_DTYPE)
    records["x"], records["y"], records["z"] = positions.T
    records["session"] = sessions
    with open(path, "wb") as f:
        f.write(EVPC_MAGIC)
        f.write(struct.pack("<IIQ", EVPC_VERSION, int(session_count), len(records)))
        f.write(records.tobytes())


def read_evpc(path):
    """Returns (positions (N,3) float64, sessions (N,) uint32, session_count)."""
    raw = Path(path).read_bytes()
    if raw[:4] != EVPC_MAGIC:
        raise DataError(f"{path}: not an EVPC file")
    version, session_count, count = struct.unpack("<IIQ", raw[4:20])
    if version != EVPC_VERSION:
        raise DataError(f"{path}: unsupported EVPC version {version}")
    body = raw[20:]
    if len(body) != count * _POINT_DTYPE.itemsize:
        raise DataError(f"{path}: truncated EVPC body")
    records = np.frombuffer(body, dtype=_POINT_DTYPE)
    positions = np.stack([records["x"], records["y"], records["z"]], axis=1)
    if not np.all(np.isfinite(positions)):
        raise DataError(f"{path}: non-finite point positions")
    if count and sessions_out_of_range(records["session"], session_count):
        raise DataError(f"{path}: session index out of range")
    return positions, records["session"].copy(), session_count


def sessions_out_of_range(sessions: np.ndarray, session_count: int) -> bool:
    return bool(len(sessions)) and int(sessions.max()) >= session_count


def write_pfm(path, data: np.ndarray) -> None:
    """Write a grayscale (H,W) or color (H,W,3) float32 PFM, little-endian."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
    else:
        raise DataError("PFM data must be (H,W) or (H,W,3)")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(arr[::-1].tobytes())  # PFM stores rows bottom-to-top


def _read_header_tokens(raw: bytes, count: int, path) -> tuple[list[bytes], int]:
    """Read `count` whitespace-delimited tokens; the binary body starts one
    single whitespace byte after the last token."""
    tokens = []
    pos = 0
    for _ in range(count):
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, body_start = _read_header_tokens(raw, 4, path)
    if tokens[0] not in (b"Pf", b"PF"):
        raise DataError(f"{path}: not a PFM file")
    channels = 3 if tokens[0] == b"PF" else 1
    try:
        w, h, scale = int(tokens[1]), int(tokens[2]), float(tokens[3])
    except ValueError as e:
        raise DataError(f"{path}: bad PFM header") from e
    body = raw[body_start:]
    expected = w * h * channels * 4
    if len(body) < expected:
        raise DataError(f"{path}: truncated PFM body")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(body[:expected], dtype=dtype).astype(np.float32)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return arr.reshape(shape)[::-1].copy()


def write_pgm16(path, image: np.ndarray) -> None:
    """Write intensities in [0, 1] as a 16-bit binary PGM."""
    img = np.asarray(image, dtype=np.float64)
    quantized = np.clip(np.rint(img * 65535.0), 0, 65535).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(quantized.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into float intensities in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, body_start = _read_header_tokens(raw, 4, path)
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM file")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise DataError(f"{path}: bad PGM header") from e
    body = raw[body_start:]
    dtype = ">u2" if maxval > 255 else "u1"
    expected = w * h * (2 if maxval > 255 else 1)
    if len(body) < expected:
        raise DataError(f"{path}: truncated PGM body")
    arr = np.frombuffer(body[:expected], dtype=dtype).reshape(h, w)
    return arr.astype(np.float64) / float(maxval)


def write_trajectory(path, traj: Trajectory) -> None:
    lines = []
    for ts, pose in zip(traj.timestamps_ns, traj.poses):
        m = pose.matrix()[:3]  # row-major 3x4
        values = " ".join(f"{v:.17g}" for v in m.reshape(-1))
        lines.append(f"{int(ts)} {values}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> Trajectory:
    timestamps = []
    poses = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 13:
            raise DataError(f"{path}:{line_no}: expected 13 fields, got {len(fields)}")
        timestamps.append(int(fields[0]))
        m = np.array([float(v) for v in fields[1:]]).reshape(3, 4)
        poses.append(Pose(m[:, :3], m[:, 3]))
    if not poses:
        raise DataError(f"{path}: empty trajectory")
    return Trajectory(np.array(timestamps, dtype=np.int64), poses)


_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "baseline", "width", "height")


def write_camera(path, cam: CameraModel) -> None:
    lines = [f"{key} = {getattr(cam, key):.17g}" for key in ("fx", "fy", "cx", "cy", "baseline")]
    lines += [f"width = {cam.width}", f"height = {cam.height}"]
    Path(path).write_text("\n".join(lines) + "\n")


def read_camera(path) -> CameraModel:
    values = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{line_no}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    missing = [k for k in _CAMERA_KEYS if k not in values]
    if missing:
        raise DataError(f"{path}: missing camera keys {missing}")
    try:
        return CameraModel(
            fx=float(values["fx"]),
            fy=float(values["fy"]),
            cx=float(values["cx"]),
            cy=float(values["cy"]),
            baseline=float(values["baseline"]),
            width=int(values["width"]),
            height=int(values["height"]),
        )
    except ValueError as e:
        raise DataError(f"{path}: bad camera value: {e}") from e


def write_speeds(path, timestamps_ns: np.ndarray, speeds: np.ndarray) -> None:
    lines = [
        f"{int(ts)} {speed:.17g}"
        for ts, speed in zip(np.asarray(timestamps_ns), np.asarray(speeds))
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_speeds(path):
    timestamps = []
    speeds = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        ts, speed = line.split()
        timestamps.append(int(ts))
        speeds.append(float(speed))
    return np.array(timestamps, dtype=np.int64), np.array(speeds)
