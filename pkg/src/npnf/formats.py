"""Binary and text file formats: PPM images, PFM depth maps, trajectories, checkpoints."""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

CHECKPOINT_MAGIC = b"NPNF"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


# ----------------------------------------------------------------------- PPM


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, 8 bits per channel.  Floats are taken to be in [0, 1]."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(image[..., :3]).tobytes())


def read_ppm(path, as_float: bool = True) -> np.ndarray:
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval separated by whitespace (comments allowed)
    tokens = []
    pos = 0
    pattern = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")
    for _ in range(4):
        m = pattern.match(data, pos)
        if m is None:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported")
    pos += 1  # single whitespace byte after maxval
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    img = raw.reshape(h, w, 3).copy()
    return img.astype(np.float64) / 255.0 if as_float else img


# ----------------------------------------------------------------------- PFM


def write_pfm(path, depth: np.ndarray) -> None:
    """Single-channel little-endian PFM (scale -1.0), rows stored bottom to top."""
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise ValueError("PFM depth maps are 2-D")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        f.write(np.ascontiguousarray(depth[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"Pf", b"PF"):
            raise FormatError(f"{path}: not a PFM file")
        channels = 3 if magic == b"PF" else 1
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise FormatError(f"{path}: expected {w * h * channels} samples, found {data.size}")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


# ---------------------------------------------------------------- trajectories


def write_trajectory(path, cam_to_world: np.ndarray) -> None:
    """Lines ``frame_id tx ty tz qx qy qz qw`` for (N, 4, 4) camera-to-world poses."""
    lines = []
    for k, T in enumerate(np.asarray(cam_to_world)):
        q = Rotation.from_matrix(T[:3, :3]).as_quat()
        if q[3] < 0:
            q = -q
        vals = " ".join(repr(float(v)) for v in (*T[:3, 3], *q))
        lines.append(f"{k} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> np.ndarray:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{path}: bad trajectory line {line!r}")
        t = np.array([float(v) for v in parts[1:4]])
        q = np.array([float(v) for v in parts[4:8]])
        T = np.eye(4)
        T[:3, :3] = Rotation.from_quat(q).as_matrix()
        T[:3, 3] = t
        out.append(T)
    return np.stack(out)


# ------------------------------------------------------------------ checkpoints


def _pack_u128(x: int) -> list[float]:
    return [float((x >> (16 * k)) & 0xFFFF) for k in range(8)]


def _unpack_u128(vals) -> int:
    return sum(int(v) << (16 * k) for k, v in enumerate(vals))


def encode_rng(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generators can be checkpointed")
    s = st["state"]
    u = int(st["uinteger"])
    return np.array(_pack_u128(s["state"]) + _pack_u128(s["inc"])
                    + [float(st["has_uint32"]), float(u & 0xFFFF), float(u >> 16)])


def decode_rng(vals: np.ndarray) -> np.random.Generator:
    vals = np.asarray(vals)
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": _unpack_u128(vals[0:8]), "inc": _unpack_u128(vals[8:16])},
        "has_uint32": int(vals[16]),
        "uinteger": int(vals[17]) | (int(vals[18]) << 16),
    }
    return np.random.Generator(bg)


def write_blocks(path, blocks: dict) -> None:
    """``NPNF`` magic, u32 version, u32 block count, then per block a 4-byte tag,
    u64 length and that many little-endian f64 values."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blocks)))
        for tag, arr in blocks.items():
            tb = tag.encode("ascii")
            if len(tb) != 4:
                raise ValueError(f"block tag must be 4 ASCII characters: {tag!r}")
            arr = np.asarray(arr, dtype="<f8").ravel()
            f.write(tb)
            f.write(struct.pack("<Q", arr.size))
            f.write(arr.tobytes())


def read_blocks(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(n):
        tag = data[pos:pos + 4].decode("ascii")
        (count,) = struct.unpack_from("<Q", data, pos + 4)
        pos += 12
        out[tag] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after last block")
    return out
