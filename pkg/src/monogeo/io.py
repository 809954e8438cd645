"""File formats: PFM maps, 16-bit PNG depth, normal PNG, OBJ/PLY meshes.

Readers never let a malformed file escape as a crash or as silently wrong
data: every structural problem raises :class:`FormatError` naming the byte
offset where parsing failed. Writers go through an atomic
write-to-temp-then-rename so a crash cannot leave a half-written artifact.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np
from PIL import Image, UnidentifiedImageError

from .geometry import DepthMap, Intrinsics, NormalMap, decode_normal_rgb, encode_normal_rgb
from .integration import TriangleMesh


class FormatError(ValueError):
    """A file does not conform to its declared format."""


def atomic_write_bytes(path, data: bytes) -> None:
    """Write bytes to ``path`` via a same-directory temp file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# PFM

def _next_token(blob: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(blob) and blob[pos : pos + 1].isspace():
        pos += 1
    if pos >= len(blob):
        raise FormatError(f"unexpected end of file at byte {pos} while reading header")
    start = pos
    while pos < len(blob) and not blob[pos : pos + 1].isspace():
        pos += 1
    return blob[start:pos], pos


def _read_pfm_bytes(blob: bytes) -> np.ndarray:
    magic, pos = _next_token(blob, 0)
    if magic not in (b"PF", b"Pf"):
        raise FormatError(f"bad PFM magic {magic!r} at byte 0, expected b'PF' or b'Pf'")
    channels = 3 if magic == b"PF" else 1

    dims = []
    for name in ("width", "height"):
        token, new_pos = _next_token(blob, pos)
        try:
            value = int(token)
        except ValueError:
            raise FormatError(f"invalid {name} token {token!r} at byte {pos}") from None
        if value <= 0:
            raise FormatError(f"{name} must be positive, got {value} at byte {pos}")
        dims.append(value)
        pos = new_pos
    width, height = dims

    token, new_pos = _next_token(blob, pos)
    try:
        scale = float(token)
    except ValueError:
        raise FormatError(f"invalid scale token {token!r} at byte {pos}") from None
    if scale == 0:
        raise FormatError(f"scale must be nonzero at byte {pos}")
    pos = new_pos
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise FormatError(f"expected single whitespace after scale at byte {pos}")
    pos += 1

    count = width * height * channels
    expected = count * 4
    available = len(blob) - pos
    if available < expected:
        raise FormatError(
            f"truncated pixel data at byte {pos}: need {expected} bytes, have {available}"
        )
    if available > expected:
        raise FormatError(
            f"{available - expected} trailing bytes after pixel data at byte {pos + expected}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    shape = (height, width, 3) if channels == 3 else (height, width)
    # PFM rows run bottom to top; malformed payloads may hold signaling NaNs
    with np.errstate(invalid="ignore"):
        return data.reshape(shape)[::-1].astype(np.float32)


def _write_pfm_bytes(values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 2:
        magic = b"Pf"
    elif values.ndim == 3 and values.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"PFM stores (H, W) or (H, W, 3) arrays, got shape {values.shape}")
    h, w = values.shape[:2]
    header = magic + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    return header + values[::-1].astype("<f4").tobytes()


def read_pfm(path) -> np.ndarray:
    """Raw PFM contents as float32, shape (H, W) or (H, W, 3), top row first."""
    with open(path, "rb") as fh:
        return _read_pfm_bytes(fh.read())


def write_pfm(path, values: np.ndarray) -> None:
    atomic_write_bytes(path, _write_pfm_bytes(values))


def read_pfm_depth(path, kind: str = "metric") -> DepthMap:
    """Load a grayscale PFM as depth; non-finite samples are invalid."""
    values = read_pfm(path)
    if values.ndim != 2:
        raise FormatError(f"depth PFM must be grayscale ('Pf'), got a color file: {path}")
    with np.errstate(invalid="ignore"):
        return DepthMap.from_values(values.astype(np.float64), kind=kind)


def write_pfm_depth(path, depth: DepthMap) -> None:
    """Store depth as grayscale PFM with NaN marking invalid pixels."""
    values = np.where(depth.mask, depth.values, np.nan).astype(np.float32)
    write_pfm(path, values)


def read_pfm_normal(path) -> NormalMap:
    """Load a color PFM as normals, renormalizing; zero vectors are invalid."""
    values = read_pfm(path)
    if values.ndim != 3:
        raise FormatError(f"normal PFM must be color ('PF'), got a grayscale file: {path}")
    with np.errstate(invalid="ignore"):
        values = values.astype(np.float64)
    finite = np.all(np.isfinite(values), axis=-1)
    norms = np.linalg.norm(values, axis=-1)
    mask = finite & (norms > 1e-8)
    out = np.zeros_like(values)
    np.divide(values, norms[..., None], out=out, where=mask[..., None])
    return NormalMap(values=out, mask=mask)


def write_pfm_normal(path, normals: NormalMap) -> None:
    values = np.where(normals.mask[..., None], normals.values, 0.0).astype(np.float32)
    write_pfm(path, values)


# ---------------------------------------------------------------------------
# PNG

def read_depth_png16(path, divisor: float = 256.0, kind: str = "metric") -> DepthMap:
    """Load 16-bit grayscale PNG depth; raw value 0 marks invalid pixels.

    ``divisor`` converts stored integers to scene units (256 for KITTI-style
    files, 1000 for millimeter NYU-style files).
    """
    if not divisor > 0:
        raise ValueError(f"divisor must be positive, got {divisor}")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"not a readable PNG file: {path} ({exc})") from exc
    if img.mode not in ("I;16", "I;16B", "I"):
        raise FormatError(f"expected 16-bit grayscale PNG, got mode {img.mode!r}: {path}")
    raw = np.asarray(img)
    if raw.dtype not in (np.uint16, np.int32) or np.any(raw < 0) or np.any(raw > 65535):
        raise FormatError(f"PNG samples out of 16-bit range: {path}")
    raw = raw.astype(np.float64)
    mask = raw > 0
    values = np.where(mask, raw / divisor, np.nan)
    return DepthMap(values=values, mask=mask, kind=kind)


def write_depth_png16(path, depth: DepthMap, divisor: float = 256.0) -> None:
    """Store depth as 16-bit grayscale PNG; invalid pixels become raw 0."""
    if not divisor > 0:
        raise ValueError(f"divisor must be positive, got {divisor}")
    raw = np.zeros(depth.shape, dtype=np.uint16)
    scaled = np.round(depth.values[depth.mask] * divisor)
    if scaled.size and (scaled.max() > 65535 or scaled.min() < 1):
        raise ValueError("depth values fall outside the representable 16-bit range")
    raw[depth.mask] = scaled.astype(np.uint16)
    import io as _io

    buf = _io.BytesIO()
    Image.fromarray(raw).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_normal_png(path) -> NormalMap:
    """Load an 8-bit RGB normal visualization back into unit vectors."""
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"not a readable PNG file: {path} ({exc})") from exc
    if img.mode != "RGB":
        raise FormatError(f"expected 8-bit RGB PNG, got mode {img.mode!r}: {path}")
    return decode_normal_rgb(np.asarray(img, dtype=np.uint8))


def write_normal_png(path, normals: NormalMap, sky_mask: np.ndarray | None = None) -> None:
    rgb = encode_normal_rgb(normals, sky_mask=sky_mask)
    import io as _io

    buf = _io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Meshes

def write_mesh_obj(path, mesh: TriangleMesh) -> None:
    """Wavefront OBJ text: one ``v`` line per vertex, 1-based ``f`` triangles."""
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {x:.9g} {y:.9g} {z:.9g}")
    for i, j, k in mesh.faces + 1:
        lines.append(f"f {i} {j} {k}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def _ply_header(n_vertices: int, n_faces: int) -> bytes:
    return (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n_vertices}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        f"element face {n_faces}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    ).encode("ascii")


def write_mesh_ply(path, mesh: TriangleMesh) -> None:
    """Binary little-endian PLY with float32 vertices and int32 face indices."""
    n_v, n_f = len(mesh.vertices), len(mesh.faces)
    body = [mesh.vertices.astype("<f4").tobytes()]
    if n_f:
        idx_bytes = np.frombuffer(mesh.faces.astype("<i4").tobytes(), dtype=np.uint8)
        rows = np.empty((n_f, 13), dtype=np.uint8)
        rows[:, 0] = 3
        rows[:, 1:] = idx_bytes.reshape(n_f, 12)
        body.append(rows.tobytes())
    atomic_write_bytes(path, _ply_header(n_v, n_f) + b"".join(body))


def read_mesh_ply(path) -> TriangleMesh:
    """Read back the binary PLY subset produced by :func:`write_mesh_ply`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end_marker = b"end_header\n"
    end = blob.find(end_marker)
    if not blob.startswith(b"ply\n"):
        raise FormatError("missing 'ply' magic at byte 0")
    if end < 0:
        raise FormatError(f"missing 'end_header' in the first {len(blob)} bytes")
    header_lines = blob[:end].decode("ascii", errors="replace").splitlines()
    pos = end + len(end_marker)

    n_vertices = n_faces = None
    fmt_ok = False
    expect = None
    vertex_props: list[str] = []
    for line_no, line in enumerate(header_lines[1:], start=2):
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise FormatError(f"unsupported format {line!r} (header line {line_no})")
            fmt_ok = True
        elif parts[0] == "element":
            if len(parts) != 3:
                raise FormatError(f"malformed element line {line!r} (header line {line_no})")
            try:
                count = int(parts[2])
            except ValueError:
                raise FormatError(f"bad element count in {line!r} (header line {line_no})") from None
            if count < 0:
                raise FormatError(f"negative element count in {line!r} (header line {line_no})")
            if parts[1] == "vertex":
                n_vertices, expect = count, "vertex"
            elif parts[1] == "face":
                n_faces, expect = count, "face"
            else:
                raise FormatError(f"unsupported element {parts[1]!r} (header line {line_no})")
        elif parts[0] == "property":
            if expect == "vertex":
                if parts[1] != "float" or len(parts) != 3:
                    raise FormatError(f"unsupported vertex property {line!r} (header line {line_no})")
                vertex_props.append(parts[2])
            elif expect == "face":
                if parts[1:] != ["list", "uchar", "int", "vertex_indices"]:
                    raise FormatError(f"unsupported face property {line!r} (header line {line_no})")
            else:
                raise FormatError(f"property before any element (header line {line_no})")
        else:
            raise FormatError(f"unrecognized header line {line!r} (header line {line_no})")
    if not fmt_ok or n_vertices is None or n_faces is None:
        raise FormatError("header missing format or element declarations")
    if vertex_props != ["x", "y", "z"]:
        raise FormatError(f"vertex properties must be x, y, z; got {vertex_props}")

    need = n_vertices * 12
    if len(blob) - pos < need:
        raise FormatError(
            f"truncated vertex data at byte {pos}: need {need} bytes, have {len(blob) - pos}"
        )
    vertices = np.frombuffer(blob, dtype="<f4", count=n_vertices * 3, offset=pos)
    with np.errstate(invalid="ignore"):  # fuzzed payloads may hold signaling NaNs
        vertices = vertices.reshape(n_vertices, 3).astype(np.float64)
    if not np.all(np.isfinite(vertices)):
        raise FormatError(f"non-finite vertex coordinates in block starting at byte {pos}")
    pos += need

    need = n_faces * 13
    if len(blob) - pos < need:
        raise FormatError(
            f"truncated face data at byte {pos}: need {need} bytes, have {len(blob) - pos}"
        )
    if len(blob) - pos > need:
        raise FormatError(f"{len(blob) - pos - need} trailing bytes at byte {pos + need}")
    faces = np.empty((n_faces, 3), dtype=np.int64)
    for i in range(n_faces):
        (n_idx,) = struct.unpack_from("<B", blob, pos)
        if n_idx != 3:
            raise FormatError(f"face {i} at byte {pos} has {n_idx} vertices, expected 3")
        faces[i] = struct.unpack_from("<3i", blob, pos + 1)
        pos += 13
    if n_faces and (faces.min() < 0 or faces.max() >= n_vertices):
        raise FormatError("face indices out of vertex range")
    return TriangleMesh(vertices=vertices, faces=faces)


def write_mesh(path, mesh: TriangleMesh, fmt: str | None = None) -> None:
    """Write OBJ or PLY, chosen by ``fmt`` or the file extension."""
    if fmt is None:
        fmt = os.path.splitext(os.fspath(path))[1].lstrip(".").lower()
    if fmt == "obj":
        write_mesh_obj(path, mesh)
    elif fmt in ("ply", "ply_binary"):
        write_mesh_ply(path, mesh)
    else:
        raise ValueError(
            f"unsupported mesh format {fmt!r}, expected 'obj', 'ply' or 'ply_binary'"
        )


# ---------------------------------------------------------------------------
# Intrinsics config

_INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def parse_intrinsics(text: str, origin: str = "<string>") -> Intrinsics:
    """Parse ``key = value`` lines (# comments allowed) into Intrinsics."""
    found: dict[str, float] = {}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{origin}:{line_no}: expected 'key = value', got {raw_line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _INTRINSIC_KEYS:
            raise FormatError(
                f"{origin}:{line_no}: unknown key {key!r}, expected one of {_INTRINSIC_KEYS}"
            )
        if key in found:
            raise FormatError(f"{origin}:{line_no}: duplicate key {key!r}")
        try:
            found[key] = float(value.strip())
        except ValueError:
            raise FormatError(f"{origin}:{line_no}: invalid number {value.strip()!r}") from None
    missing = [k for k in _INTRINSIC_KEYS if k not in found]
    if missing:
        raise FormatError(f"{origin}: missing required keys {missing}")
    for k in ("width", "height"):
        if found[k] != int(found[k]):
            raise FormatError(f"{origin}: {k} must be an integer, got {found[k]}")
    try:
        return Intrinsics(
            fx=found["fx"], fy=found["fy"], cx=found["cx"], cy=found["cy"],
            width=int(found["width"]), height=int(found["height"]),
        )
    except ValueError as exc:
        raise FormatError(f"{origin}: {exc}") from exc


def read_intrinsics(path) -> Intrinsics:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_intrinsics(fh.read(), origin=os.fspath(path))


def write_intrinsics(path, intrinsics: Intrinsics) -> None:
    text = "".join(
        f"{key} = {getattr(intrinsics, key)}\n" for key in _INTRINSIC_KEYS
    )
    atomic_write_text(path, text)
