"""Readers and writers for depth frames, camera files and ASCII PLY clouds."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, DepthFrame, RigidTransform, as_cloud, invert


class FormatError(ValueError):
    """A file does not follow its declared format."""


def _read_reals(path, count: int) -> np.ndarray:
    text = Path(path).read_text()
    try:
        vals = np.array([float(tok) for tok in text.split()])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric token ({exc})") from None
    if vals.size != count:
        raise FormatError(f"{path}: expected {count} numbers, found {vals.size}")
    return vals


# ---------------------------------------------------------------- depth (PGM)

def write_depth_pgm(path, depth_m: np.ndarray) -> None:
    """16-bit big-endian binary PGM, millimeter units."""
    mm = np.rint(np.asarray(depth_m, dtype=np.float64) * 1000.0)
    if np.any(mm > 65535):
        raise ValueError("depth exceeds 65.535 m")
    h, w = mm.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(mm.astype(">u2").tobytes())


def read_depth_pgm(path) -> np.ndarray:
    """Depth grid in meters from a 16-bit PGM of millimeters."""
    data = Path(path).read_bytes()
    # magic, width, height, maxval separated by whitespace (comments allowed)
    fields = []
    pos = 0
    token = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")
    for _ in range(4):
        m = token.match(data, pos)
        if m is None:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(m.group(2))
        pos = m.end()
    if fields[0] != b"P5":
        raise FormatError(f"{path}: bad magic {fields[0]!r}, expected P5")
    try:
        w, h, maxval = (int(x) for x in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if maxval != 65535:
        raise FormatError(f"{path}: maxval {maxval}, expected 65535")
    pos += 1  # single whitespace byte after maxval
    body = data[pos:]
    if len(body) < 2 * w * h:
        raise FormatError(f"{path}: unexpected end of file")
    mm = np.frombuffer(body, dtype=">u2", count=w * h).reshape(h, w)
    return mm.astype(np.float64) / 1000.0


# ---------------------------------------------------------- intrinsics / pose

def read_intrinsics(path, width: int, height: int) -> CameraIntrinsics:
    k = _read_reals(path, 9).reshape(3, 3)
    if k[0, 1] != 0 or k[1, 0] != 0 or not np.array_equal(k[2], [0, 0, 1]):
        raise FormatError(f"{path}: not a pinhole intrinsics matrix")
    return CameraIntrinsics(k[0, 0], k[1, 1], k[0, 2], k[1, 2], width, height)


def write_intrinsics(path, k: CameraIntrinsics) -> None:
    _write_matrix(path, k.matrix())


def read_pose(path, world_to_camera: bool = False) -> RigidTransform:
    """4x4 camera-to-world pose; pass ``world_to_camera=True`` for inverted files."""
    m = _read_reals(path, 16).reshape(4, 4)
    try:
        t = RigidTransform.from_matrix(m)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return invert(t) if world_to_camera else t


def write_pose(path, t: RigidTransform) -> None:
    _write_matrix(path, t.matrix())


def _write_matrix(path, m: np.ndarray) -> None:
    lines = [" ".join(f"{v:.12g}" for v in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n")


def load_frame(depth_path, intrinsics_path, pose_path, invert_pose: bool = False) -> DepthFrame:
    depth = read_depth_pgm(depth_path)
    h, w = depth.shape
    return DepthFrame(depth, read_intrinsics(intrinsics_path, w, h), read_pose(pose_path, invert_pose))


# ------------------------------------------------------------------- PLY

def write_ply(path, points, scalars: dict[str, np.ndarray] | None = None) -> None:
    """ASCII PLY with float x, y, z and optional extra float properties."""
    pts = as_cloud(points)
    scalars = scalars or {}
    cols = [pts.astype(np.float32)]
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    for name, vals in scalars.items():
        header.append(f"property float {name}")
        cols.append(np.asarray(vals, dtype=np.float32).reshape(-1, 1))
    header.append("end_header")
    table = np.hstack(cols) if cols else pts
    with open(path, "w") as f:
        f.write("\n".join(header) + "\n")
        for row in table:
            f.write(" ".join(_fmt32(v) for v in row) + "\n")


def _fmt32(v) -> str:
    v = float(v)
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    # 9 significant digits round-trip any float32
    return f"{v:.9g}"


def read_ply(path, extra: tuple[str, ...] = ()) -> np.ndarray | tuple[np.ndarray, dict]:
    """Read an ASCII PLY with float x, y, z (plus any ``extra`` float properties)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: bad magic, expected 'ply'")
    n = None
    props: list[str] = []
    i = 1
    while i < len(lines) and lines[i].strip() != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["format", "ascii"]:
            pass
        elif parts[:1] == ["format"]:
            raise FormatError(f"{path}: only ASCII PLY is supported")
        elif parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["element"]:
            raise FormatError(f"{path}: unsupported element {parts[1]!r}")
        elif parts[:1] == ["property"]:
            if parts[1] != "float":
                raise FormatError(f"{path}: property {parts[-1]!r} is not float")
            props.append(parts[2])
        i += 1
    if i == len(lines) or n is None:
        raise FormatError(f"{path}: malformed header")
    if props[:3] != ["x", "y", "z"] or set(props[3:]) != set(extra):
        raise FormatError(f"{path}: expected properties x y z {' '.join(extra)}, got {' '.join(props)}")
    body = lines[i + 1:i + 1 + n]
    if len(body) < n:
        raise FormatError(f"{path}: unexpected end of file")
    try:
        table = np.array(" ".join(body).split(), dtype=np.float64)
    except ValueError:
        raise FormatError(f"{path}: non-numeric vertex data") from None
    if table.size != n * len(props):
        raise FormatError(f"{path}: vertex rows do not match the header")
    # properties are declared float: round to float32 so reads are exact inverses of writes
    table = table.reshape(n, len(props)).astype(np.float32).astype(np.float64)
    pts = table[:, :3].copy()
    if not extra:
        return pts
    return pts, {name: table[:, props.index(name)] for name in extra}
