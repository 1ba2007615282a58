"""Truncated signed distance fusion and isosurface mesh extraction.

Registered grayscale-plus-depth frames are integrated into a voxel grid
of truncated signed distances with per-voxel running averages, and the
zero isosurface is triangulated with the 256-case marching cubes tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .depth_scale import valid_depth_mask
from .errors import InputError, SurfaceError
from .geometry import se3_inverse
from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE

# Truncation band in voxels and the weight ceiling of the running average.
MU_FACTOR = 4.0
W_MAX = 100.0

# Frustum-derived grid bounds get this many voxels of margin on each side.
PADDING_VOXELS = 10

_MIN_TRIANGLE_AREA = 1e-12


@dataclass(frozen=True)
class GridConfig:
    """Voxel grid parameters; origin and dims override the frustum bounds.

    origin is the world position of the center of voxel (0, 0, 0); both
    origin and dims must be given together or not at all.
    """

    voxel_size: float = 0.005
    mu: float | None = None
    w_max: float = W_MAX
    origin: tuple | None = None
    dims: tuple | None = None

    def __post_init__(self):
        if not self.voxel_size > 0.0:
            raise InputError(f"voxel size must be positive, got {self.voxel_size}")
        if self.mu is not None and self.mu < self.voxel_size:
            raise InputError("truncation distance must be at least one voxel")
        if not self.w_max > 0.0:
            raise InputError("weight ceiling must be positive")
        if (self.origin is None) != (self.dims is None):
            raise InputError("origin and dims overrides must be given together")

    @property
    def truncation(self) -> float:
        return MU_FACTOR * self.voxel_size if self.mu is None else self.mu


class VoxelGrid:
    """Dense TSDF volume with per-voxel weight and color accumulators."""

    def __init__(self, origin, dims, voxel_size, mu=None, w_max=W_MAX):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise InputError(f"grid needs at least 2 voxels per axis, got {self.dims}")
        self.voxel_size = float(voxel_size)
        self.mu = MU_FACTOR * self.voxel_size if mu is None else float(mu)
        if self.mu < self.voxel_size:
            raise InputError("truncation distance must be at least one voxel")
        self.w_max = float(w_max)
        self.tsdf = np.ones(self.dims)
        self.weight = np.zeros(self.dims)
        self.color = np.zeros(self.dims + (3,))
        self.has_color = False

    @classmethod
    def for_frame(cls, frame, world_pose, config: GridConfig):
        """Grid sized from the frame's observed frustum, or the override.

        Bounds cover the world-space backprojections of all valid-depth
        pixels, padded by PADDING_VOXELS on every side.
        """
        if config.origin is not None:
            return cls(config.origin, config.dims, config.voxel_size,
                       config.truncation, config.w_max)
        mask = valid_depth_mask(frame.depth)
        if not mask.any():
            raise InputError("first frame has no valid depth to bound the grid")
        v, u = np.nonzero(mask)
        pts = frame.camera.backproject(
            u.astype(np.float64), v.astype(np.float64), frame.depth[mask]
        )
        pose = np.asarray(world_pose, dtype=np.float64)
        world = pts @ pose[:3, :3].T + pose[:3, 3]
        pad = PADDING_VOXELS * config.voxel_size
        lo = world.min(axis=0) - pad
        hi = world.max(axis=0) + pad
        dims = np.ceil((hi - lo) / config.voxel_size).astype(int) + 1
        return cls(lo, dims, config.voxel_size, config.truncation, config.w_max)

    def voxel_centers(self):
        """World coordinates of every voxel center, flattened C-order (N, 3)."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        idx = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=-1)
        return self.origin + self.voxel_size * idx.astype(np.float64)

    def occupancy_stats(self):
        observed = int((self.weight > 0.0).sum())
        total = int(np.prod(self.dims))
        return {
            "voxels_total": total,
            "voxels_observed": observed,
            "observed_fraction": observed / total,
        }


@dataclass
class TriangleMesh:
    """Indexed triangle soup in meters, with optional per-vertex color."""

    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise InputError("triangle indices out of range")


def integrate(grid: VoxelGrid, frame, world_pose):
    """Merge one posed frame into the grid's running averages.

    Voxel centers are projected into the frame; with measured depth z at
    the nearest pixel and voxel camera-depth z_v, the signed distance
    z - z_v updates the voxel whenever it exceeds -mu (no carving deep
    behind observed surfaces). A frame without valid depth or overlap
    leaves the grid unchanged.
    """
    depth = np.asarray(frame.depth, dtype=np.float64)
    if not valid_depth_mask(depth).any():
        return grid
    T = se3_inverse(world_pose)
    pts = grid.voxel_centers() @ T[:3, :3].T + T[:3, 3]
    z_v = pts[:, 2]
    uv = frame.camera.project(pts)
    # Nearest-neighbor depth lookup; interpolating across depth edges
    # would invent surfaces between foreground and background.
    with np.errstate(invalid="ignore"):
        u = np.rint(uv[:, 0])
        v = np.rint(uv[:, 1])
        inb = (
            np.isfinite(u) & np.isfinite(v)
            & (u >= 0) & (u <= frame.camera.width - 1)
            & (v >= 0) & (v <= frame.camera.height - 1)
        )
    idx = np.flatnonzero(inb)
    if idx.size == 0:
        return grid
    ui = u[idx].astype(np.intp)
    vi = v[idx].astype(np.intp)
    z = depth[vi, ui]
    ok = np.isfinite(z) & (z > 0.0)
    idx, ui, vi, z = idx[ok], ui[ok], vi[ok], z[ok]
    sdf = z - z_v[idx]
    upd = sdf > -grid.mu
    idx, ui, vi, sdf = idx[upd], ui[upd], vi[upd], sdf[upd]
    if idx.size == 0:
        return grid

    val = np.minimum(1.0, sdf / grid.mu)
    w = grid.weight.reshape(-1)[idx]
    grid.tsdf.reshape(-1)[idx] = (w * grid.tsdf.reshape(-1)[idx] + val) / (w + 1.0)
    grid.weight.reshape(-1)[idx] = np.minimum(w + 1.0, grid.w_max)
    if frame.color is not None:
        col = np.asarray(frame.color)
        if col.dtype == np.uint8:
            col = col.astype(np.float64) / 255.0
        samples = col[vi, ui]
        flat = grid.color.reshape(-1, 3)
        flat[idx] = (w[:, None] * flat[idx] + samples) / (w[:, None] + 1.0)
        grid.has_color = True
    return grid


# Each cube edge, keyed by its lexicographically smaller corner offset and
# the axis along which it runs; shared edges of neighboring cells then map
# to one global key, which is what welds the mesh together.
_EDGE_BASE = []
_EDGE_AXIS = []
for _a, _b in EDGE_CORNERS:
    _oa = np.array(CORNER_OFFSETS[_a])
    _ob = np.array(CORNER_OFFSETS[_b])
    _EDGE_BASE.append(np.minimum(_oa, _ob))
    _EDGE_AXIS.append(int(np.nonzero(_oa != _ob)[0][0]))


def extract_mesh(grid: VoxelGrid) -> TriangleMesh:
    """Triangulate the zero isosurface of the observed volume.

    Cells touching any zero-weight voxel are skipped; vertices are
    deduplicated per grid edge and positioned by linear interpolation of
    the adjacent signed distances. Raises SurfaceError when no observed
    cell crosses zero.
    """
    inside = grid.tsdf < 0.0
    observed = grid.weight > 0.0
    nx, ny, nz = grid.dims
    cases = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint16)
    complete = np.ones((nx - 1, ny - 1, nz - 1), dtype=bool)
    for bit, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        corner_in = inside[dx : nx - 1 + dx, dy : ny - 1 + dy, dz : nz - 1 + dz]
        cases |= corner_in.astype(np.uint16) << bit
        complete &= observed[dx : nx - 1 + dx, dy : ny - 1 + dy, dz : nz - 1 + dz]
    active = np.argwhere(complete & (cases != 0) & (cases != 255))
    if active.size == 0:
        raise SurfaceError("no isosurface crossing in the observed volume")

    edge_vertex: dict = {}
    vertices: list = []
    vertex_colors: list = []
    triangles: list = []

    def vertex_on_edge(cell, edge):
        ca, cb = EDGE_CORNERS[edge]
        ia = cell + CORNER_OFFSETS[ca]
        ib = cell + CORNER_OFFSETS[cb]
        va = grid.tsdf[ia[0], ia[1], ia[2]]
        vb = grid.tsdf[ib[0], ib[1], ib[2]]
        t = va / (va - vb)
        # A crossing this close to a corner is shared by every edge into
        # that corner; keying it by the corner welds the coincident
        # copies, and the sliver triangles between them collapse to
        # repeated indices instead of leaving pinhole gaps.
        if t < 1e-6:
            t = 0.0
            key = ("c", int(ia[0]), int(ia[1]), int(ia[2]))
        elif t > 1.0 - 1e-6:
            t = 1.0
            key = ("c", int(ib[0]), int(ib[1]), int(ib[2]))
        else:
            base = cell + _EDGE_BASE[edge]
            key = ("e", int(base[0]), int(base[1]), int(base[2]), _EDGE_AXIS[edge])
        known = edge_vertex.get(key)
        if known is not None:
            return known
        pos = grid.origin + grid.voxel_size * (ia + t * (ib - ia))
        edge_vertex[key] = len(vertices)
        vertices.append(pos)
        if grid.has_color:
            col_a = grid.color[ia[0], ia[1], ia[2]]
            col_b = grid.color[ib[0], ib[1], ib[2]]
            vertex_colors.append(col_a + t * (col_b - col_a))
        return edge_vertex[key]

    for cell in active:
        for tri in TRI_TABLE[int(cases[cell[0], cell[1], cell[2]])]:
            i0 = vertex_on_edge(cell, tri[0])
            i1 = vertex_on_edge(cell, tri[1])
            i2 = vertex_on_edge(cell, tri[2])
            if i0 == i1 or i1 == i2 or i2 == i0:
                continue
            p0, p1, p2 = vertices[i0], vertices[i1], vertices[i2]
            area = 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0))
            if area > _MIN_TRIANGLE_AREA:
                triangles.append((i0, i1, i2))

    if not triangles:
        raise SurfaceError("isosurface degenerate; no triangles survived")
    verts = np.asarray(vertices)
    tris = np.asarray(triangles)
    # Welding may strand corner vertices whose triangles all collapsed.
    used, tris = np.unique(tris, return_inverse=True)
    verts = verts[used]
    tris = tris.reshape(-1, 3)
    colors = None
    if grid.has_color:
        colors = np.clip(
            np.rint(np.asarray(vertex_colors)[used] * 255.0), 0, 255
        ).astype(np.uint8)
    return TriangleMesh(vertices=verts, triangles=tris, colors=colors)


def fuse_sequence(frames, poses, config: GridConfig | None = None, *, stats=None):
    """Integrate all posed frames in order and extract the fused mesh.

    When stats is a dict it receives the grid occupancy numbers and the
    active cell count. The grid bounds come from the first frame unless
    the configuration pins them.
    """
    if len(frames) != len(poses):
        raise InputError(f"{len(frames)} frames vs {len(poses)} poses")
    if not frames:
        raise InputError("need at least one frame")
    config = config or GridConfig()
    grid = VoxelGrid.for_frame(frames[0], poses[0], config)
    for frame, pose in zip(frames, poses):
        integrate(grid, frame, pose)
    mesh = extract_mesh(grid)
    if stats is not None:
        stats.update(grid.occupancy_stats())
        stats["mesh_vertices"] = len(mesh.vertices)
        stats["mesh_triangles"] = len(mesh.triangles)
    return mesh


def dump_volume(path_base, grid: VoxelGrid):
    """Write the raw float32 tsdf volume next to a JSON header.

    Produces {path_base}.raw (C-order float32 little-endian) and
    {path_base}.json describing dims, origin, voxel_size, and mu.
    """
    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    raw = base.with_suffix(".raw")
    raw.write_bytes(grid.tsdf.astype("<f4").tobytes())
    header = {
        "dims": list(grid.dims),
        "origin": [float(x) for x in grid.origin],
        "voxel_size": grid.voxel_size,
        "mu": grid.mu,
        "dtype": "<f4",
        "order": "C",
    }
    base.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")


def load_volume(path_base):
    """Read a volume written by :func:`dump_volume`; returns a VoxelGrid.

    Weights are not stored; the loaded grid marks every voxel observed.
    """
    base = Path(path_base)
    header = json.loads(base.with_suffix(".json").read_text())
    grid = VoxelGrid(
        header["origin"], header["dims"], header["voxel_size"], header["mu"]
    )
    data = np.frombuffer(base.with_suffix(".raw").read_bytes(), dtype="<f4")
    if data.size != np.prod(grid.dims):
        raise InputError(f"{base}: volume size does not match header dims")
    grid.tsdf = data.astype(np.float64).reshape(grid.dims)
    grid.weight = np.ones(grid.dims)
    return grid
