"""Pinhole camera model and pose utilities.

Convention (asserted in every loader): right-handed world and camera frames,
the camera looks down its local -z axis with +y up and +x right.  Image rows
grow downward, so a point with camera coordinates (X, Y, Z), depth d = -Z > 0,
projects to::

    u = cx + fx * X / d        (columns, continuous; pixel j has center j + 0.5)
    v = cy - fy * Y / d        (rows; pixel i has center i + 0.5)

Poses are stored world-to-camera: ``x_cam = R @ x_world + t``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Camera:
    """Calibrated pinhole camera with a world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"camera rotation is not orthonormal (max deviation {err:.2e})")
        if np.linalg.det(R) < 0:
            raise ValueError("camera rotation is a reflection (det < 0)")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera resolution must be positive")

    # ------------------------------------------------------------------ poses
    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.t

    def cam_to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.t) @ self.R

    # ------------------------------------------------------------- projection
    def project(self, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points; returns ((u, v) array, depth array).

        Depth is distance along the viewing axis (-Z in camera frame); points
        with depth <= 0 are behind the camera and get non-finite pixel coords.
        """
        pc = self.world_to_cam(points_world)
        depth = -pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.cx + self.fx * pc[..., 0] / depth
            v = self.cy - self.fy * pc[..., 1] / depth
        uv = np.stack([u, v], axis=-1)
        uv[depth <= 0] = np.nan
        return uv, depth

    def pixel_ray_dirs_cam(self) -> np.ndarray:
        """Per-pixel ray directions in the camera frame, shape (H, W, 3).

        Directions are left unnormalized with z = -1, so the ray parameter of
        ``origin + t * dir`` equals the depth along the viewing axis.
        """
        j = np.arange(self.width, dtype=np.float64) + 0.5
        i = np.arange(self.height, dtype=np.float64) + 0.5
        u, v = np.meshgrid(j, i)
        x = (u - self.cx) / self.fx
        y = -(v - self.cy) / self.fy
        return np.stack([x, y, -np.ones_like(x)], axis=-1)

    def pixel_ray_dirs_world(self, normalized: bool = False) -> np.ndarray:
        """Per-pixel ray directions rotated into the world frame."""
        dirs = self.pixel_ray_dirs_cam() @ self.R
        if normalized:
            dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
        return dirs

    def backproject(self, depth: np.ndarray) -> np.ndarray:
        """Lift a full-resolution depth map to world points, shape (H, W, 3)."""
        pc = self.pixel_ray_dirs_cam() * np.asarray(depth)[..., None]
        return self.cam_to_world(pc)

    # ---------------------------------------------------------- serialization
    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "world_to_cam_rotation": self.R.tolist(),
            "world_to_cam_translation": self.t.tolist(),
            "near": self.near,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            R=np.asarray(d["world_to_cam_rotation"], dtype=np.float64),
            t=np.asarray(d["world_to_cam_translation"], dtype=np.float64),
            near=float(d.get("near", 0.01)),
        )


def look_at(eye, target, up=(0.0, 0.0, 1.0), **intrinsics) -> Camera:
    """Build a camera at ``eye`` looking toward ``target``.

    ``up`` is the world up hint; the camera's -z axis points from eye to
    target.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, up)
    norm = np.linalg.norm(right)
    if norm < 1e-9:  # looking straight along up: pick an arbitrary right axis
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        norm = np.linalg.norm(right)
    right = right / norm
    cam_up = np.cross(right, forward)
    # Rows of the world-to-camera rotation are the camera axes in world coords;
    # the camera looks down -z, so the third row is -forward.
    R = np.stack([right, cam_up, -forward], axis=0)
    t = -R @ eye
    return Camera(R=R, t=t, **intrinsics)


def save_cameras(path: str | Path, cameras: list[Camera],
                 names: list[str] | None = None,
                 extra: dict | None = None) -> None:
    """Write a camera set as a documented JSON schema."""
    names = names or [f"frame_{i:04d}" for i in range(len(cameras))]
    payload = {
        "convention": "right-handed; camera looks down -z, +y up; x_cam = R @ x_world + t",
        "cameras": [{"name": n, **c.to_dict()} for n, c in zip(names, cameras)],
        **(extra or {}),
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_cameras(path: str | Path) -> dict[str, Camera]:
    """Load a camera set; validation happens in the Camera constructor."""
    payload = json.loads(Path(path).read_text())
    return {rec["name"]: Camera.from_dict(rec) for rec in payload["cameras"]}
