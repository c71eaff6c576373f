"""Readers and writers for PFM, PGM, PLY, intrinsics sidecars and weight files.

Every writer goes through a temporary file in the target directory and a
rename, so readers never observe a half-written file.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, PointCloud

WEIGHTS_MAGIC = b"NDGW"
WEIGHTS_VERSION = 1


class FormatError(ValueError):
    pass


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_token(data: bytes, pos: int) -> tuple[str, int]:
    """Next whitespace-delimited header token, skipping '#' comments."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of header")
    return data[start:pos].decode("ascii", errors="replace"), pos


# -- PFM --------------------------------------------------------------------

def write_pfm(path, image: np.ndarray, scale: float = 1.0, little_endian: bool = True) -> None:
    """Write an (H, W) or (H, W, 3) float map; rows are stored bottom-up."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise FormatError(f"PFM holds 1 or 3 channels, got shape {img.shape}")
    h, w = img.shape[:2]
    endian = "<" if little_endian else ">"
    s = -abs(scale) if little_endian else abs(scale)
    header = tag + b"\n" + f"{w} {h}\n{s!r}\n".encode("ascii")
    payload = np.flipud(img).astype(endian + "f4").tobytes()
    _atomic_write(path, header + payload)


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into float32, top row first; (H, W) or (H, W, 3)."""
    data = Path(path).read_bytes()
    tag, pos = _read_token(data, 0)
    if tag == "Pf":
        channels = 1
    elif tag == "PF":
        channels = 3
    else:
        raise FormatError(f"not a PFM file (header {tag!r})")
    try:
        w_tok, pos = _read_token(data, pos)
        h_tok, pos = _read_token(data, pos)
        s_tok, pos = _read_token(data, pos)
        width, height, scale = int(w_tok), int(h_tok), float(s_tok)
    except ValueError:
        raise FormatError("malformed PFM header") from None
    if width < 0 or height < 0 or scale == 0:
        raise FormatError("malformed PFM header")
    pos += 1  # single whitespace byte ends the header
    endian = "<" if scale < 0 else ">"
    count = width * height * channels
    if len(data) - pos < 4 * count:
        raise FormatError(f"truncated PFM payload: need {4 * count} bytes, have {len(data) - pos}")
    arr = np.frombuffer(data, dtype=endian + "f4", count=count, offset=pos)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.flipud(arr.reshape(shape)).astype(np.float32)


# -- PGM --------------------------------------------------------------------

def write_pgm(path, image: np.ndarray, maxval: int | None = None) -> None:
    """Binary (P5) PGM; 16-bit samples are big-endian."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise FormatError("PGM holds a single-channel image")
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    if img.size and (img.min() < 0):
        raise FormatError("PGM values must be non-negative")
    peak = int(img.max()) if img.size else 0
    if maxval is None:
        maxval = 255 if peak <= 255 else 65535
    if peak > 65535 or maxval > 65535:
        raise FormatError(f"value {peak} does not fit a 16-bit PGM")
    if peak > maxval:
        raise FormatError(f"value {peak} exceeds maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    h, w = img.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    _atomic_write(path, header + img.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tag, pos = _read_token(data, 0)
    if tag != "P5":
        raise FormatError(f"not a binary PGM (header {tag!r})")
    try:
        w_tok, pos = _read_token(data, pos)
        h_tok, pos = _read_token(data, pos)
        m_tok, pos = _read_token(data, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError:
        raise FormatError("malformed PGM header") from None
    if not 0 < maxval <= 65535:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = width * height
    if len(data) - pos < count * np.dtype(dtype).itemsize:
        raise FormatError("truncated PGM payload")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(height, width)
    return arr.astype(np.uint8 if maxval < 256 else np.uint16)


def write_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, np.asarray(mask, dtype=bool).astype(np.uint8) * 255, maxval=255)


def read_mask(path) -> np.ndarray:
    return read_pgm(path) > 0


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.size and labels.max() > 65535:
        raise FormatError(f"label id {int(labels.max())} exceeds the 16-bit PGM range")
    write_pgm(path, labels.astype(np.int64), maxval=65535)


def read_labels(path) -> np.ndarray:
    return read_pgm(path).astype(np.int64)


# -- PLY --------------------------------------------------------------------

def write_ply(cloud: PointCloud, path, binary: bool = False) -> None:
    pts = cloud.points.astype(np.float32)
    has_color = cloud.colors is not None
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(pts)}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    if binary:
        fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
        if has_color:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        rec = np.empty(len(pts), dtype=fields)
        rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
        if has_color:
            rec["red"], rec["green"], rec["blue"] = cloud.colors.T
        body = rec.tobytes()
    else:
        rows = []
        for i, p in enumerate(pts):
            row = " ".join(f"{float(c):.9g}" for c in p)
            if has_color:
                row += " " + " ".join(str(int(c)) for c in cloud.colors[i])
            rows.append(row)
        body = ("\n".join(rows) + ("\n" if rows else "")).encode("ascii")
    _atomic_write(path, head + body)


_PLY_TYPES = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
              "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
              "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
              "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4"}


def read_ply(path) -> PointCloud:
    """Read vertex positions (and RGB if present) from an ASCII or binary PLY."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file")
    body_start = data.index(b"\n", end) + 1
    fmt, n_vertex, props, in_vertex = None, 0, [], False
    for line in data[:end].decode("ascii").splitlines()[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise FormatError("list properties on vertices are not supported")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    names = [p[0] for p in props]
    if names[:3] != ["x", "y", "z"]:
        raise FormatError("vertex element must start with x, y, z")

    if fmt == "ascii":
        text = data[body_start:].decode("ascii").split()
        vals = np.array(text[:n_vertex * len(props)], dtype=np.float64).reshape(n_vertex, len(props))
        pts = vals[:, :3].astype(np.float32)
        cols = vals[:, names.index("red"):names.index("red") + 3].astype(np.uint8) if "red" in names else None
    elif fmt in ("binary_little_endian", "binary_big_endian"):
        e = "<" if fmt == "binary_little_endian" else ">"
        dt = np.dtype([(n, e + t) for n, t in props])
        if len(data) - body_start < dt.itemsize * n_vertex:
            raise FormatError("truncated PLY payload")
        rec = np.frombuffer(data, dtype=dt, count=n_vertex, offset=body_start)
        pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float32)
        cols = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1) if "red" in names else None
    else:
        raise FormatError(f"unsupported PLY format {fmt!r}")
    return PointCloud(pts.astype(np.float64), cols)


# -- intrinsics sidecar -----------------------------------------------------

def write_intrinsics(path, k: Intrinsics) -> None:
    _atomic_write(path, f"{k.fx!r}\n{k.fy!r}\n{k.cx!r}\n{k.cy!r}\n".encode("ascii"))


def read_intrinsics(path) -> Intrinsics:
    """Four numbers fx fy cx cy, whitespace separated (one per line when written)."""
    tokens = Path(path).read_text().split()
    if len(tokens) != 4:
        raise FormatError(f"intrinsics file needs 4 numbers, found {len(tokens)}")
    try:
        return Intrinsics(*(float(t) for t in tokens))
    except ValueError as exc:
        raise FormatError(f"bad intrinsics: {exc}") from None


# -- weight container -------------------------------------------------------

def write_weights(path, tensors: dict[str, np.ndarray]) -> None:
    """Little-endian container: magic, version, count, then named f64 tensors."""
    out = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.astype("<f8").tobytes())
    _atomic_write(path, b"".join(out))


def read_weights(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise FormatError("not a weight container (bad magic)")
    pos = 4

    def unpack(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError("truncated weight container")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, count = unpack("<II")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weight container version {version} (expected {WEIGHTS_VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n_name,) = unpack("<I")
        (raw,) = unpack(f"<{n_name}s")
        (rank,) = unpack("<I")
        dims = unpack(f"<{rank}I")
        n = int(np.prod(dims, dtype=np.int64))
        if pos + 8 * n > len(data):
            raise FormatError("truncated weight container")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
        tensors[raw.decode("utf-8")] = arr
    return tensors
