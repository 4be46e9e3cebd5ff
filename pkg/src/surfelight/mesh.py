"""Depth-map normals, TSDF fusion, mesh extraction, and mesh utilities.

The proxy mesh used for shadow rays is built by integrating rendered depth
maps into a truncated signed distance volume and running marching cubes.
Also provides analytic primitive meshes (rectangles, boxes, icospheres) used
by the synthetic data generator and the tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from skimage import measure

from .camera import Camera
from .common import DTYPE, to_tensor

log = logging.getLogger(__name__)


def normal_from_depth(depth: torch.Tensor, cam: Camera, frame: str = "camera",
                      valid: torch.Tensor | None = None
                      ) -> tuple[torch.Tensor, torch.Tensor]:
    """Normals from a depth map via central differences of back-projections.

    Returns ``(normals, valid_mask)`` with normals oriented along the viewing
    direction (a fronto-parallel wall maps to (0, 0, -1) in the camera
    frame).  Border pixels use one-sided differences (replicate padding).
    ``frame`` selects "camera" or "world" output coordinates.  Pixels whose
    3x3 neighborhood contains non-positive or non-finite depth are invalid.
    """
    d = to_tensor(depth)
    h, w = d.shape
    dirs = to_tensor(cam.pixel_ray_dirs_cam())          # [H, W, 3], z = -1
    pts = dirs * d.unsqueeze(-1)

    ok = torch.isfinite(d) & (d > 0)
    if valid is not None:
        ok = ok & to_tensor(valid).bool()
    ok_f = ok.to(DTYPE).unsqueeze(0).unsqueeze(0)
    ok_eroded = -torch.nn.functional.max_pool2d(-ok_f, 3, stride=1, padding=1)
    good = ok_eroded.squeeze(0).squeeze(0) > 0.5

    pad = torch.nn.functional.pad(
        pts.permute(2, 0, 1).unsqueeze(0), (1, 1, 1, 1), mode="replicate"
    ).squeeze(0).permute(1, 2, 0)                        # [H+2, W+2, 3]
    du = pad[1:h + 1, 2:] - pad[1:h + 1, :w]            # along +x (columns)
    dv = pad[2:, 1:w + 1] - pad[:h, 1:w + 1]            # along increasing row
    n = torch.cross(du, dv, dim=-1)
    norm = torch.linalg.norm(n, dim=-1, keepdim=True)
    n = n / torch.clamp(norm, min=1e-12)
    good = good & (norm.squeeze(-1) > 1e-12)

    # Orient along the viewing direction (negative z component in camera frame).
    flip = (n * dirs).sum(-1, keepdim=True) < 0
    n = torch.where(flip, -n, n)
    if frame == "world":
        rows = to_tensor(cam.R)
        n = n @ rows                                     # R^T applied row-wise
    elif frame != "camera":
        raise ValueError(f"unknown frame {frame!r}")
    return n, good


# --------------------------------------------------------------------- meshes
@dataclass
class SurfaceMesh:
    """Indexed triangle mesh; ``triangles`` holds vertex indices [T, 3]."""

    vertices: np.ndarray
    triangles: np.ndarray
    empty: bool = field(default=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        self.empty = len(self.triangles) == 0

    def triangle_vertices(self) -> np.ndarray:
        """Per-triangle corner positions, [T, 3, 3]."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        tv = self.triangle_vertices()
        cr = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
        return 0.5 * np.linalg.norm(cr, axis=-1)

    def save_obj(self, path) -> None:
        lines = [f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}" for v in self.vertices]
        lines += [f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}" for t in self.triangles]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load_obj(cls, path) -> "SurfaceMesh":
        verts, tris = [], []
        for line in Path(path).read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):       # fan-triangulate
                    tris.append([idx[0], idx[k], idx[k + 1]])
        return cls(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                   np.asarray(tris, dtype=np.int64).reshape(-1, 3))


def merge_meshes(meshes: list[SurfaceMesh]) -> SurfaceMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    if not verts:
        return SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return SurfaceMesh(np.concatenate(verts), np.concatenate(tris))


def rect_mesh(center, u_axis, v_axis) -> SurfaceMesh:
    """Two-triangle rectangle spanned by half-extent vectors u and v."""
    c = np.asarray(center, dtype=np.float64)
    u = np.asarray(u_axis, dtype=np.float64)
    v = np.asarray(v_axis, dtype=np.float64)
    verts = np.stack([c - u - v, c + u - v, c + u + v, c - u + v])
    tris = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    return SurfaceMesh(verts, tris)


def box_mesh(center, half_extents, rotation: np.ndarray | None = None) -> SurfaceMesh:
    """Closed 12-triangle box, optionally rotated (rows = box axes in world)."""
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half_extents, dtype=np.float64)
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1)
                        for sz in (-1, 1)], dtype=np.float64) * h
    if rotation is not None:
        corners = corners @ np.asarray(rotation, dtype=np.float64)
    verts = corners + c
    # Outward-facing faces; corner index bit order is (x, y, z).
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),     # x- , x+
        (0, 4, 5, 1), (2, 3, 7, 6),     # y- , y+
        (0, 2, 6, 4), (1, 5, 7, 3),     # z- , z+
    ]
    tris = []
    for a, b, cc, d in quads:
        tris += [[a, b, cc], [a, cc, d]]
    return SurfaceMesh(verts, np.asarray(tris, dtype=np.int64))


def icosphere(subdivisions: int = 3, radius: float = 1.0,
              center=(0.0, 0.0, 0.0)) -> SurfaceMesh:
    """Unit icosahedron subdivided and projected to the sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    tris = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        edge_mid: dict[tuple[int, int], int] = {}
        new_tris = []
        vlist = list(verts)

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in edge_mid:
                m = vlist[a] + vlist[b]
                m = m / np.linalg.norm(m)
                edge_mid[key] = len(vlist)
                vlist.append(m)
            return edge_mid[key]

        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_tris += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(vlist)
        tris = np.asarray(new_tris, dtype=np.int64)
    return SurfaceMesh(verts * radius + np.asarray(center, dtype=np.float64), tris)


# ----------------------------------------------------------------------- TSDF
class TSDFVolume:
    """Truncated signed distance volume with per-voxel fusion weights."""

    def __init__(self, origin, voxel_size: float, dims, truncation: float):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        self.truncation = float(truncation)
        if self.voxel_size <= 0 or self.truncation <= 0 or min(self.dims) < 2:
            raise ValueError("bad TSDF volume parameters")
        self.sdf = np.zeros(self.dims, dtype=np.float64)
        self.weight = np.zeros(self.dims, dtype=np.float64)

    @classmethod
    def for_bounds(cls, lo, hi, resolution: int = 256,
                   truncation_voxels: float = 4.0) -> "TSDFVolume":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        extent = float(np.max(hi - lo))
        voxel = extent / resolution
        margin = truncation_voxels * voxel
        lo_m, hi_m = lo - margin, hi + margin
        dims = np.maximum(np.ceil((hi_m - lo_m) / voxel).astype(int) + 1, 2)
        return cls(lo_m, voxel, dims, truncation_voxels * voxel)

    def voxel_centers(self, z_index: int) -> np.ndarray:
        nx, ny, _ = self.dims
        ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        grid = np.stack([ii, jj, np.full_like(ii, z_index)], axis=-1)
        return self.origin + (grid + 0.0) * self.voxel_size

    def integrate(self, depth: np.ndarray, cam: Camera,
                  keep_mask: np.ndarray | None = None) -> None:
        """Fuse one depth map; ``keep_mask`` excludes sky/moving pixels."""
        depth = np.asarray(depth, dtype=np.float64)
        h, w = depth.shape
        usable = np.isfinite(depth) & (depth > 0)
        if keep_mask is not None:
            usable &= np.asarray(keep_mask).astype(bool)
        rows = np.asarray(cam.R)
        t = np.asarray(cam.t)
        for k in range(self.dims[2]):
            pts = self.voxel_centers(k).reshape(-1, 3)
            pc = pts @ rows.T + t
            d_vox = -pc[:, 2]
            front = d_vox > cam.near
            u = cam.fx * pc[:, 0] / np.where(front, d_vox, 1.0) + cam.cx
            v = cam.cy - cam.fy * pc[:, 1] / np.where(front, d_vox, 1.0)
            j = np.floor(u).astype(int)
            i = np.floor(v).astype(int)
            inside = front & (i >= 0) & (i < h) & (j >= 0) & (j < w)
            idx = np.where(inside)[0]
            if idx.size == 0:
                continue
            samp_ok = usable[i[idx], j[idx]]
            idx = idx[samp_ok]
            if idx.size == 0:
                continue
            sdf = depth[i[idx], j[idx]] - d_vox[idx]
            keep = sdf > -self.truncation
            idx = idx[keep]
            if idx.size == 0:
                continue
            d_clamped = np.clip(sdf[keep], -self.truncation, self.truncation)
            flat_sdf = self.sdf[:, :, k].reshape(-1)
            flat_w = self.weight[:, :, k].reshape(-1)
            w_old = flat_w[idx]
            flat_sdf[idx] = (flat_sdf[idx] * w_old + d_clamped) / (w_old + 1.0)
            flat_w[idx] = w_old + 1.0
            self.sdf[:, :, k] = flat_sdf.reshape(self.dims[:2])
            self.weight[:, :, k] = flat_w.reshape(self.dims[:2])


def extract_mesh(volume: TSDFVolume, min_area: float = 1e-12,
                 min_weight: float = 0.0) -> SurfaceMesh:
    """Marching cubes over observed voxels; degenerate triangles dropped.

    ``min_weight`` restricts extraction to voxels with at least that much
    fusion weight; requiring a few observations suppresses phantom surfaces
    from single grazing views in sparse captures.
    """
    observed = volume.weight > max(min_weight, 0.0)
    if not observed.any():
        log.warning("extract_mesh: empty volume, returning empty mesh")
        return SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    try:
        verts, faces, _, _ = measure.marching_cubes(
            volume.sdf, level=0.0, mask=observed,
            spacing=(volume.voxel_size,) * 3)
    except (ValueError, RuntimeError) as exc:
        log.warning("extract_mesh: no zero crossing (%s), returning empty mesh", exc)
        return SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    mesh = SurfaceMesh(verts + volume.origin, faces.astype(np.int64))
    keep = mesh.areas() >= min_area
    return SurfaceMesh(mesh.vertices, mesh.triangles[keep])
