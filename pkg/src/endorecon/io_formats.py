"""Readers and writers for the on-disk formats the pipeline exchanges.

Covered here: PFM float maps, .flo optical flow, 8-bit PNG masks and images,
timestamped trajectory text files, binary PLY meshes, and per-frame score
tables.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .errors import InputError

# Flow vectors with magnitude beyond this are "unknown" markers, not motion.
FLOW_INVALID_THRESHOLD = 1e9
FLOW_INVALID_VALUE = 1e10

_FLO_MAGIC = 202021.25


# ---------------------------------------------------------------------------
# PFM float maps


def read_pfm(path):
    """Read a PFM file into a float32 array, (H, W) or (H, W, 3).

    Rows are stored bottom-to-top in the file and flipped on read; the sign
    of the scale line selects the byte order.
    """
    path = Path(path)
    with path.open("rb") as f:
        header = f.readline().strip()
        if header == b"Pf":
            channels = 1
        elif header == b"PF":
            channels = 3
        else:
            raise InputError(f"{path}: not a PFM file (header {header!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise InputError(f"{path}: malformed PFM dimension line")
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        endian = "<" if scale < 0 else ">"
        count = width * height * channels
        data = np.frombuffer(f.read(count * 4), dtype=endian + "f4")
        if data.size != count:
            raise InputError(f"{path}: truncated PFM payload")
    shape = (height, width) if channels == 1 else (height, width, channels)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_pfm(path, array):
    """Write a 2-D float array as a grayscale little-endian PFM file."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise InputError("write_pfm expects a 2-D array")
    path = Path(path)
    data = np.flipud(array.astype("<f4"))
    with path.open("wb") as f:
        f.write(b"Pf\n")
        f.write(f"{array.shape[1]} {array.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(data.tobytes())


# ---------------------------------------------------------------------------
# Optical flow (.flo)


def read_flo(path):
    """Read a .flo optical flow file into an (H, W, 2) float32 array."""
    path = Path(path)
    with path.open("rb") as f:
        magic = struct.unpack("<f", f.read(4))[0]
        if magic != _FLO_MAGIC:
            raise InputError(f"{path}: bad flow magic {magic!r}")
        width, height = struct.unpack("<ii", f.read(8))
        data = np.frombuffer(f.read(width * height * 2 * 4), dtype="<f4")
        if data.size != width * height * 2:
            raise InputError(f"{path}: truncated flow payload")
    return data.reshape(height, width, 2).astype(np.float32)


def write_flo(path, flow):
    """Write an (H, W, 2) array as a .flo optical flow file."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise InputError("write_flo expects an (H, W, 2) array")
    path = Path(path)
    with path.open("wb") as f:
        f.write(struct.pack("<f", _FLO_MAGIC))
        f.write(struct.pack("<ii", flow.shape[1], flow.shape[0]))
        f.write(flow.astype("<f4").tobytes())


def flow_valid_mask(flow):
    """Mask of flow vectors that carry real motion, not unknown markers."""
    flow = np.asarray(flow)
    return (np.abs(flow) < FLOW_INVALID_THRESHOLD).all(axis=-1) & np.isfinite(
        flow
    ).all(axis=-1)


# ---------------------------------------------------------------------------
# PNG images and masks


def read_mask(path):
    """Read an 8-bit mask PNG; zero pixels are invalid, anything else valid."""
    img = np.asarray(Image.open(path).convert("L"))
    return img > 0


def write_mask(path, mask):
    """Write a boolean mask as an 8-bit PNG (valid = 255)."""
    mask = np.asarray(mask, dtype=bool)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def read_image_rgb(path):
    """Read a color image as an (H, W, 3) uint8 array."""
    return np.asarray(Image.open(path).convert("RGB"))


def write_image_rgb(path, array):
    """Write an (H, W, 3) uint8 array as a PNG."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise InputError("write_image_rgb expects uint8 data")
    Image.fromarray(array, mode="RGB").save(path)


def read_image_gray(path):
    """Read an image as float64 intensity in [0, 1], from PFM or PNG."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path).astype(np.float64)
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# Trajectories: "timestamp tx ty tz qx qy qz qw" per line


def read_trajectory(path):
    """Read a trajectory text file.

    Returns (timestamps, poses): a float array of length N and an (N, 4, 4)
    array of camera-to-world transforms. Lines starting with '#' and blank
    lines are skipped.
    """
    path = Path(path)
    timestamps = []
    quats = []
    trans = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise InputError(
                f"{path}:{lineno}: expected 8 fields, got {len(parts)}"
            )
        vals = [float(p) for p in parts]
        timestamps.append(vals[0])
        trans.append(vals[1:4])
        quats.append(vals[4:8])
    if not timestamps:
        return np.zeros(0), np.zeros((0, 4, 4))
    rot = Rotation.from_quat(np.asarray(quats)).as_matrix()
    poses = np.tile(np.eye(4), (len(timestamps), 1, 1))
    poses[:, :3, :3] = rot
    poses[:, :3, 3] = np.asarray(trans)
    return np.asarray(timestamps), poses


def write_trajectory(path, timestamps, poses, comment=None):
    """Write camera-to-world poses as trajectory text lines.

    Quaternions are written (qx, qy, qz, qw) with the sign normalized so
    qw >= 0, keeping output stable across equivalent rotations.
    """
    timestamps = np.asarray(timestamps, dtype=np.float64)
    poses = np.asarray(poses, dtype=np.float64)
    if len(timestamps) != len(poses):
        raise InputError("timestamp and pose counts differ")
    lines = []
    if comment:
        lines.append(f"# {comment}")
    for ts, pose in zip(timestamps, poses):
        q = Rotation.from_matrix(pose[:3, :3]).as_quat()
        if q[3] < 0.0:
            q = -q
        t = pose[:3, 3]
        lines.append(
            f"{ts:.6f} "
            f"{t[0]:.12f} {t[1]:.12f} {t[2]:.12f} "
            f"{q[0]:.12f} {q[1]:.12f} {q[2]:.12f} {q[3]:.12f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# PLY meshes (binary little-endian)


def write_ply_mesh(path, vertices, faces, colors=None):
    """Write a triangle mesh as binary little-endian PLY.

    Vertices are float32 x, y, z plus uchar red, green, blue; faces are
    uchar-counted int32 index triples. Missing colors default to gray.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    n = len(vertices)
    if colors is None:
        colors = np.full((n, 3), 180, dtype=np.uint8)
    else:
        colors = np.asarray(colors)
        if colors.dtype != np.uint8:
            colors = np.clip(np.round(colors), 0, 255).astype(np.uint8)
    if faces.size and (faces.min() < 0 or faces.max() >= n):
        raise InputError("face indices out of range")

    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        f"element face {len(faces)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )

    vert_dtype = np.dtype(
        [("xyz", "<f4", 3), ("rgb", "u1", 3)]
    )
    vert_rec = np.empty(n, dtype=vert_dtype)
    vert_rec["xyz"] = vertices.astype("<f4")
    vert_rec["rgb"] = colors

    face_dtype = np.dtype([("count", "u1"), ("idx", "<i4", 3)])
    face_rec = np.empty(len(faces), dtype=face_dtype)
    face_rec["count"] = 3
    face_rec["idx"] = faces.astype("<i4")

    with Path(path).open("wb") as f:
        f.write(header.encode("ascii"))
        f.write(vert_rec.tobytes())
        f.write(face_rec.tobytes())


def read_ply_mesh(path):
    """Read a binary PLY mesh written by :func:`write_ply_mesh`.

    Returns (vertices float64 (N, 3), faces int64 (M, 3), colors uint8 (N, 3)).
    """
    path = Path(path)
    with path.open("rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise InputError(f"{path}: not a PLY file")
        n_vertex = n_face = None
        while True:
            line = f.readline()
            if not line:
                raise InputError(f"{path}: unterminated PLY header")
            line = line.strip()
            if line.startswith(b"element vertex"):
                n_vertex = int(line.split()[-1])
            elif line.startswith(b"element face"):
                n_face = int(line.split()[-1])
            elif line == b"end_header":
                break
        if n_vertex is None or n_face is None:
            raise InputError(f"{path}: missing element declarations")
        vert_dtype = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)])
        verts = np.frombuffer(f.read(n_vertex * vert_dtype.itemsize), dtype=vert_dtype)
        face_dtype = np.dtype([("count", "u1"), ("idx", "<i4", 3)])
        faces = np.frombuffer(f.read(n_face * face_dtype.itemsize), dtype=face_dtype)
    if len(verts) != n_vertex or len(faces) != n_face:
        raise InputError(f"{path}: truncated PLY payload")
    if n_face and not (faces["count"] == 3).all():
        raise InputError(f"{path}: non-triangle face present")
    return (
        verts["xyz"].astype(np.float64),
        faces["idx"].astype(np.int64),
        verts["rgb"].copy(),
    )


# ---------------------------------------------------------------------------
# Per-frame score tables


def read_scores_csv(path):
    """Read a frame score table into {frame_index: score}.

    Requires 'frame_index' and 'score' columns; extra columns are ignored.
    """
    path = Path(path)
    with path.open(newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {
            "frame_index",
            "score",
        }.issubset(reader.fieldnames):
            raise InputError(
                f"{path}: needs 'frame_index' and 'score' columns, "
                f"got {reader.fieldnames}"
            )
        out = {}
        for row in reader:
            out[int(row["frame_index"])] = float(row["score"])
    return out


def write_scores_csv(path, scores):
    """Write {frame_index: score} as a two-column CSV sorted by frame."""
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_index", "score"])
        for idx in sorted(scores):
            writer.writerow([idx, f"{scores[idx]:.6f}"])
