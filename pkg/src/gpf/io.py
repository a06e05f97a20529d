"""Readers and writers: PLY points, GPFF feature sidecars, PFM depth, PNG images, camera JSON.

Every reader validates its header and raises :class:`FormatError` naming the
byte offset where parsing failed.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from .core import FEATURE_DIM, CameraView, NeuralPointField

GPFF_MAGIC = b"GPFF"
GPFF_VERSION = 1
GPFF_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Malformed file contents; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.offset = offset


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _ply_header(path, data: bytes):
    if not data.startswith(b"ply\n") and not data.startswith(b"ply\r\n"):
        raise FormatError(path, 0, "missing 'ply' magic")
    end = data.find(b"end_header")
    if end < 0:
        raise FormatError(path, len(data), "no end_header line")
    stop = data.find(b"\n", end)
    if stop < 0:
        raise FormatError(path, len(data), "end_header line not terminated")
    fmt, elements = None, []
    pos = 0
    for raw in data[:stop + 1].split(b"\n"):
        line_off = pos
        pos += len(raw) + 1
        tok = raw.decode("ascii", "replace").strip().split()
        if not tok or tok[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise FormatError(path, line_off, f"unsupported format line {' '.join(tok)!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise FormatError(path, line_off, "bad element line")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise FormatError(path, line_off, "property before any element")
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise FormatError(path, line_off, "bad list property")
                elements[-1][2].append((tok[4], "list", tok[2], tok[3]))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise FormatError(path, line_off, f"unknown property type in {' '.join(tok)!r}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise FormatError(path, line_off, f"unexpected header keyword {tok[0]!r}")
    if fmt is None:
        raise FormatError(path, 4, "no format line")
    return fmt, elements, stop + 1


def ply_read(path):
    """Vertices of a PLY file as ``(positions (N,3) float64, colors (N,3) in [0,1] or None)``."""
    data = _read_bytes(path)
    fmt, elements, body = _ply_header(path, data)
    if not elements or elements[0][0] != "vertex":
        raise FormatError(path, body, "first element must be 'vertex'")
    name, n, props = elements[0]
    if any(p[1] == "list" for p in props):
        raise FormatError(path, body, "list properties on vertices are not supported")
    names = [p[0] for p in props]
    for c in "xyz":
        if c not in names:
            raise FormatError(path, body, f"vertex property {c!r} missing")
    if fmt == "ascii":
        text = data[body:].decode("ascii", "replace").split("\n")
        rows = [ln.split() for ln in text if ln.strip()][:n]
        if len(rows) < n or any(len(r) != len(props) for r in rows):
            raise FormatError(path, body, f"expected {n} vertex rows of {len(props)} values")
        try:
            arr = np.array(rows, dtype=np.float64)
        except ValueError:
            raise FormatError(path, body, "non-numeric vertex value") from None
        cols = {nm: arr[:, i] for i, nm in enumerate(names)}
    else:
        order = "<" if fmt == "binary_little_endian" else ">"
        dt = np.dtype([(nm, order + t) for nm, t in props])
        need = body + n * dt.itemsize
        if len(data) < need:
            raise FormatError(path, len(data), f"truncated vertex data: need {need} bytes, have {len(data)}")
        rec = np.frombuffer(data, dtype=dt, count=n, offset=body)
        cols = {nm: rec[nm].astype(np.float64) for nm in names}
    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    colors = None
    if all(c in cols for c in ("red", "green", "blue")):
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1) / 255.0
    if not np.isfinite(pos).all():
        raise FormatError(path, body, "non-finite vertex position")
    return pos, colors


def ply_write(path, positions, colors=None) -> None:
    """Binary little-endian PLY with float32 x,y,z and optional uchar red,green,blue."""
    positions = np.asarray(positions)
    n = len(positions)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(n, dtype=np.dtype(fields))
    for i, c in enumerate("xyz"):
        rec[c] = positions[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        c8 = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
        for i, c in enumerate(("red", "green", "blue")):
            rec[c] = c8[:, i]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


# ---------------------------------------------------------------- GPFF

def gpff_write(path, features) -> None:
    """Feature sidecar: 16-byte header then N x dim float32, little-endian."""
    feats = np.ascontiguousarray(features, dtype="<f4")
    if feats.ndim != 2:
        raise ValueError("features must be 2-D")
    with open(path, "wb") as f:
        f.write(GPFF_HEADER.pack(GPFF_MAGIC, GPFF_VERSION, feats.shape[0], feats.shape[1]))
        f.write(feats.tobytes())


def gpff_read(path, expected_dim: Optional[int] = FEATURE_DIM) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < GPFF_HEADER.size:
        raise FormatError(path, len(data), f"header needs {GPFF_HEADER.size} bytes")
    magic, version, n, dim = GPFF_HEADER.unpack_from(data)
    if magic != GPFF_MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}")
    if version != GPFF_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(path, 12, f"feature dim {dim}, expected {expected_dim}")
    need = GPFF_HEADER.size + 4 * n * dim
    if len(data) != need:
        raise FormatError(path, min(len(data), need), f"payload size {len(data) - GPFF_HEADER.size}, expected {4 * n * dim}")
    return np.frombuffer(data, dtype="<f4", offset=GPFF_HEADER.size).reshape(n, dim).copy()


# ---------------------------------------------------------------- PFM

def pfm_write(path, image) -> None:
    """Little-endian PFM; rows are stored bottom-to-top as the format requires."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError("PFM holds (H,W) or (H,W,3) arrays")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def pfm_read(path) -> np.ndarray:
    data = _read_bytes(path)
    lines, off = [], 0
    for _ in range(3):
        nl = data.find(b"\n", off)
        if nl < 0:
            raise FormatError(path, len(data), "truncated header")
        lines.append((off, data[off:nl].decode("ascii", "replace").strip()))
        off = nl + 1
    (o0, tag), (o1, dims), (o2, sc) = lines
    if tag not in ("Pf", "PF"):
        raise FormatError(path, o0, f"bad magic {tag!r}")
    try:
        w, h = (int(v) for v in dims.split())
    except ValueError:
        raise FormatError(path, o1, f"bad dimensions line {dims!r}") from None
    if w <= 0 or h <= 0:
        raise FormatError(path, o1, "dimensions must be positive")
    try:
        scale = float(sc)
    except ValueError:
        raise FormatError(path, o2, f"bad scale line {sc!r}") from None
    if scale == 0:
        raise FormatError(path, o2, "scale must be non-zero")
    ch = 1 if tag == "Pf" else 3
    need = off + 4 * w * h * ch
    if len(data) < need:
        raise FormatError(path, len(data), f"truncated pixel data: need {need} bytes")
    arr = np.frombuffer(data, dtype="<f4" if scale < 0 else ">f4", count=w * h * ch, offset=off)
    arr = arr.astype(np.float32).reshape((h, w) if ch == 1 else (h, w, 3))
    return arr[::-1].copy()


# ---------------------------------------------------------------- PNG

def png_write(path, image) -> None:
    img = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


def png_read(path) -> np.ndarray:
    """RGB image as float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as e:
        raise FormatError(path, 0, f"not a readable image ({e})") from None


# ---------------------------------------------------------------- cameras

def cameras_write(path, views: Sequence[CameraView], image_names: Optional[Sequence[str]] = None) -> None:
    out = []
    for i, v in enumerate(views):
        out.append({
            "K": [float(x) for x in np.asarray(v.intrinsics).ravel()],
            "w2c": [float(x) for x in np.asarray(v.world_to_cam).ravel()],
            "width": int(v.width),
            "height": int(v.height),
            "image": image_names[i] if image_names else None,
        })
    Path(path).write_text(json.dumps(out, indent=1))


def cameras_read(path, image_dir=None, load_images: bool = True) -> List[CameraView]:
    """Camera list; images resolve against ``image_dir`` (default: the JSON's folder)."""
    text = _read_bytes(path)
    try:
        items = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(path, e.pos, f"invalid JSON: {e.msg}") from None
    if not isinstance(items, list):
        raise FormatError(path, 0, "camera file must hold a JSON array")
    base = Path(image_dir) if image_dir is not None else Path(path).parent
    views = []
    for i, it in enumerate(items):
        try:
            K = np.array(it["K"], dtype=np.float64).reshape(3, 3)
            P = np.array(it["w2c"], dtype=np.float64).reshape(4, 4)
            w, h = int(it["width"]), int(it["height"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(path, 0, f"camera {i}: bad entry ({e})") from None
        img = None
        name = it.get("image")
        if load_images and name:
            ipath = base / name
            if not ipath.exists() and image_dir is not None:
                ipath = base / Path(name).name
            img = png_read(ipath)
            if img.shape[:2] != (h, w):
                raise FormatError(ipath, 0, f"image is {img.shape[1]}x{img.shape[0]}, camera says {w}x{h}")
        views.append(CameraView(K, P, w, h, image=img))
    return views


# ---------------------------------------------------------------- scenes and parameters

def sibling_ply(gpff_path) -> Path:
    return Path(gpff_path).with_suffix(".ply")


def save_field(path, field: NeuralPointField) -> None:
    """``path`` (.gpff features) plus a sibling .ply with positions and colors."""
    ply_write(sibling_ply(path), field.positions, field.f_c)
    gpff_write(path, field.features)


def load_field(path, points=None) -> NeuralPointField:
    """Field from a GPFF sidecar and its positions (``points`` or the sibling .ply)."""
    pos, colors = ply_read(points if points is not None else sibling_ply(path))
    feats = gpff_read(path).astype(np.float64)
    if len(feats) != len(pos):
        raise FormatError(path, 8, f"{len(feats)} feature rows for {len(pos)} points")
    f = NeuralPointField.from_positions(pos)
    return f.with_features(feats)


def field_from_ply(path) -> NeuralPointField:
    pos, colors = ply_read(path)
    return NeuralPointField.from_positions(pos, colors)


def save_params(path, weights: dict, aggregator: str, fetch: bool) -> None:
    meta = np.array(json.dumps({"aggregator": aggregator, "fetch": bool(fetch)}))
    with open(path, "wb") as f:
        np.savez(f, __meta__=meta, **weights)


def load_params(path):
    """``(weights, aggregator, fetch)`` from :func:`save_params` output."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            weights = {k: z[k].astype(np.float64) for k in z.files if k != "__meta__"}
    except (OSError, ValueError, KeyError) as e:
        raise FormatError(path, 0, f"not a parameter archive ({e})") from None
    return weights, meta["aggregator"], meta["fetch"]


def ensure_dir(path) -> None:
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
