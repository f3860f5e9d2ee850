"""Low-level readers and writers: PFM, binary PLY, PNG, correspondence files."""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image

SPRC_MAGIC = b"SPRC"


class FormatError(ValueError):
    """A file does not follow its expected layout."""


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM; ``(H, W, 3)`` as ``PF``, ``(H, W)`` as ``Pf``; rows stored bottom-up."""
    data = np.asarray(data)
    if data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    elif data.ndim == 2:
        header = "Pf"
    else:
        raise ValueError(f"PFM holds H x W or H x W x 3 data, got shape {data.shape}")
    h, w = data.shape[:2]
    body = np.ascontiguousarray(np.flipud(data).astype("<f4"))
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(body.tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if not m:
        raise FormatError(f"{path}: not a PFM file (bad header)")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    offset = m.end()
    need = w * h * channels * 4
    have = len(raw) - offset
    if have < need:
        raise FormatError(f"{path}: truncated PFM, pixel data starts at byte {offset} and needs {need} bytes "
                          f"but only {have} remain (file ends at byte {len(raw)})")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(raw, dtype=dtype, count=w * h * channels, offset=offset)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(arr.reshape(shape)).astype(np.float32)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2", "int": "<i4", "uint": "<u4",
    "float": "<f4", "double": "<f8", "int8": "i1", "uint8": "u1", "int32": "<i4", "uint32": "<u4",
    "float32": "<f4", "float64": "<f8",
}
_PLY_NAMES = {"f4": "float", "f8": "double", "i4": "int", "u1": "uchar"}


def write_ply(path, elements: List[Tuple[str, Dict[str, np.ndarray]]], comments=(), faces=None) -> None:
    """Binary little-endian PLY with scalar-property elements and an optional triangle list.

    Args:
        elements: ``[(name, {property: 1-D array})]``, property order preserved.
        faces: optional ``(F, 3)`` int array written as ``element face`` with
            ``property list uchar int vertex_indices``.
    """
    lines = ["ply", "format binary_little_endian 1.0"]
    lines += [f"comment {c}" for c in comments]
    blobs = []
    for name, props in elements:
        count = len(next(iter(props.values()))) if props else 0
        lines.append(f"element {name} {count}")
        dt = []
        for pname, arr in props.items():
            kind = np.asarray(arr).dtype.str[1:]
            if kind not in _PLY_NAMES:
                raise ValueError(f"unsupported PLY property dtype {arr.dtype} for {pname}")
            lines.append(f"property {_PLY_NAMES[kind]} {pname}")
            dt.append((pname, "<" + kind if kind != "u1" else "u1"))
        rec = np.empty(count, dtype=dt)
        for pname, arr in props.items():
            rec[pname] = arr
        blobs.append(rec.tobytes())
    if faces is not None:
        faces = np.asarray(faces, dtype="<i4").reshape(-1, 3)
        lines.append(f"element face {len(faces)}")
        lines.append("property list uchar int vertex_indices")
        rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        rec["n"] = 3
        rec["idx"] = faces
        blobs.append(rec.tobytes())
    lines.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for b in blobs:
            f.write(b)


def read_ply(path):
    """Parse a binary little-endian PLY.

    Returns:
        ``(elements, comments)`` where ``elements`` maps element name to a dict
        of property arrays; a triangle list is returned under ``"face"`` as
        ``{"vertex_indices": (F, 3) array}``.
    """
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    body = raw[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(f"{path}: only binary_little_endian PLY is supported")
    comments = [ln[len("comment "):] for ln in header if ln.startswith("comment ")]
    specs = []
    for ln in header:
        tok = ln.split()
        if not tok:
            continue
        if tok[0] == "element":
            specs.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if tok[1] == "list":
                specs[-1][2].append((tok[4], ("list", tok[2], tok[3])))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise FormatError(f"{path}: unknown PLY type {tok[1]}")
                specs[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    out = {}
    pos = 0
    for name, count, props in specs:
        if any(isinstance(t, tuple) for _, t in props):
            if len(props) != 1:
                raise FormatError(f"{path}: list elements with extra properties are unsupported")
            pname, (_, ctype, itype) = props[0]
            dt = np.dtype([("n", _PLY_TYPES[ctype]), ("idx", _PLY_TYPES[itype], (3,))])
            need = dt.itemsize * count
            if len(body) - pos < need:
                raise FormatError(f"{path}: truncated element {name} at byte {end + pos}")
            rec = np.frombuffer(body, dtype=dt, count=count, offset=pos)
            if count and np.any(rec["n"] != 3):
                raise FormatError(f"{path}: only triangle faces are supported")
            out[name] = {pname: rec["idx"].astype(np.int64)}
            pos += need
        else:
            dt = np.dtype([(p, t) for p, t in props])
            need = dt.itemsize * count
            if len(body) - pos < need:
                raise FormatError(f"{path}: truncated element {name} at byte {end + pos}")
            rec = np.frombuffer(body, dtype=dt, count=count, offset=pos)
            out[name] = {p: rec[p].copy() for p, _ in props}
            pos += need
    return out, comments


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------


def write_png(path, img: np.ndarray) -> None:
    """Write ``[0, 1]`` floats as 8-bit PNG (gray for 2-D input, RGB otherwise)."""
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    """8-bit PNG mapped to float64 in ``[0, 1]``; RGB images are ``(H, W, 3)``, gray ``(H, W)``."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64)
    return arr / 255.0


# ---------------------------------------------------------------------------
# Correspondences
# ---------------------------------------------------------------------------


def write_matches_json(path, p_a: np.ndarray, p_b: np.ndarray, w: np.ndarray) -> None:
    recs = [{"xa": float(a[0]), "ya": float(a[1]), "xb": float(b[0]), "yb": float(b[1]), "w": float(c)}
            for a, b, c in zip(p_a, p_b, w)]
    Path(path).write_text(json.dumps({"count": len(recs), "matches": recs}))


def read_matches_json(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        recs = doc["matches"]
        if doc.get("count", len(recs)) != len(recs):
            raise FormatError(f"{path}: count {doc['count']} disagrees with {len(recs)} records")
        arr = np.array([[r["xa"], r["ya"], r["xb"], r["yb"], r["w"]] for r in recs], dtype=np.float64).reshape(-1, 5)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed correspondence file ({exc})") from exc
    return arr[:, 0:2], arr[:, 2:4], arr[:, 4]


def write_matches_bin(path, p_a, p_b, w) -> None:
    rec = np.concatenate([np.asarray(p_a), np.asarray(p_b), np.asarray(w).reshape(-1, 1)], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(SPRC_MAGIC)
        f.write(struct.pack("<I", len(rec)))
        f.write(rec.tobytes())


def read_matches_bin(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != SPRC_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {SPRC_MAGIC!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    (count,) = struct.unpack("<I", raw[4:8])
    need = 8 + count * 20
    if len(raw) < need:
        raise FormatError(f"{path}: truncated records, need {need} bytes, file ends at byte {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", count=count * 5, offset=8).reshape(count, 5).astype(np.float64)
    return arr[:, 0:2], arr[:, 2:4], arr[:, 4]
