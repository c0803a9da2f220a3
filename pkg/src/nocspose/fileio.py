"""Readers and writers for meshes, images, depth and pose files."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import cv2
import numpy as np

from .geometry import PoseSE3
from .posesolve import NocsMap
from .raster import RenderBuffers, TriangleMesh

NPD_MAGIC = b"NPD1"


# --- meshes ----------------------------------------------------------------

def read_obj(path) -> TriangleMesh:
    """OBJ with ``v x y z [r g b]`` and ``f`` records (polygons are fanned)."""
    verts, colors, faces = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vals = [float(x) for x in parts[1:]]
                verts.append(vals[:3])
                colors.append(vals[3:6] if len(vals) >= 6 else None)
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for a in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[a], idx[a + 1]])
    vcol = None
    if verts and all(c is not None for c in colors):
        vcol = np.asarray(colors, dtype=np.float64)
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    return TriangleMesh(v, np.asarray(faces, dtype=np.int64).reshape(-1, 3), vertex_color=vcol)


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = []
    col = mesh.vertex_color
    for i, v in enumerate(mesh.vertices):
        rec = "v {!r} {!r} {!r}".format(*map(float, v))
        if col is not None:
            rec += " {!r} {!r} {!r}".format(*map(float, col[i]))
        lines.append(rec)
    lines += ["f {} {} {}".format(*(t + 1)) for t in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


# --- images ----------------------------------------------------------------

def _write(path, img) -> None:
    if not cv2.imwrite(str(path), img):
        raise OSError(f"failed to write {path}")


def _read(path, flags=cv2.IMREAD_UNCHANGED) -> np.ndarray:
    img = cv2.imread(str(path), flags)
    if img is None:
        raise OSError(f"failed to read {path}")
    return img


def to_u8(values) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_rgb_png(path, rgb) -> None:
    _write(path, to_u8(rgb)[..., ::-1])


def read_rgb_png(path) -> np.ndarray:
    return _read(path, cv2.IMREAD_COLOR)[..., ::-1].astype(np.float64) / 255.0


def write_mask_png(path, mask) -> None:
    _write(path, to_u8(mask))


def read_mask_png(path) -> np.ndarray:
    return _read(path, cv2.IMREAD_GRAYSCALE).astype(np.float64) / 255.0


def write_nocs_png(path, nocs_map: NocsMap) -> None:
    """16-bit RGBA: value = round(coord * 65535); alpha 65535 marks valid pixels."""
    rgb = np.round(np.clip(nocs_map.coords, 0.0, 1.0) * 65535.0).astype(np.uint16)
    alpha = np.where(nocs_map.valid, 65535, 0).astype(np.uint16)
    _write(path, np.dstack([rgb[..., ::-1], alpha]))


def read_nocs_png(path, mask_path=None) -> NocsMap:
    """16-bit NOCS PNG; validity from alpha (> 32767) or from a sibling 8-bit mask."""
    img = _read(path)
    if img.dtype != np.uint16 or img.ndim != 3:
        raise ValueError(f"{path} is not a 16-bit colour PNG")
    coords = img[..., 2::-1][..., :3].astype(np.float64) / 65535.0
    if img.shape[2] == 4:
        valid = img[..., 3] > 32767
    else:
        if mask_path is None:
            raise ValueError("RGB NOCS PNG needs a mask PNG for validity")
        valid = read_mask_png(mask_path) > 0.5
    return NocsMap(np.where(valid[..., None], coords, 0.0), valid)


def write_depth(path, depth) -> None:
    d = np.ascontiguousarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(NPD_MAGIC + struct.pack("<III", w, h, 0))
        fh.write(d.tobytes())


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != NPD_MAGIC:
        raise ValueError(f"{path} is not an NPD1 depth file")
    w, h, _ = struct.unpack("<III", data[4:16])
    return np.frombuffer(data[16:], dtype="<f4").reshape(h, w).astype(np.float64)


def write_render_buffers(prefix, buf: RenderBuffers) -> None:
    prefix = str(prefix)
    write_rgb_png(prefix + "_rgb.png", buf.rgb)
    write_mask_png(prefix + "_mask.png", buf.mask)
    write_nocs_png(prefix + "_nocs.png", NocsMap(buf.nocs, buf.valid))
    write_depth(prefix + "_depth.npd", buf.depth)


# --- poses -----------------------------------------------------------------

def dump_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def poses_to_json(poses) -> list:
    return [None if p is None else p.to_json() for p in poses]


def poses_from_json(items) -> list:
    return [None if d is None else PoseSE3.from_json(d) for d in items]
