"""Raster file formats and the on-disk dataset layout.

A dataset directory holds::

    cameras.json                 intrinsics + world-to-camera poses (+ scene aabb)
    images/<frame>.tiff|.png     float32 linear TIFF, or 8-bit sRGB PNG
    masks/<frame>.png            8-bit semantic labels: 0 static, 1 sky, 2 dynamic
    normals/<frame>.png          16-bit RGB, camera-space normals encoded (n+1)/2
    envmaps/<name>.hdr           optional lat-long environment maps (linear RGBE)
    gt/                          optional ground truth (synthetic scenes):
        lighting.json, surfels.ply, mesh.obj, albedo/, shadow/, depth/

Images are stored either as float rasters (linear radiance, no transfer
function) or 8-bit sRGB; loading linearizes to float64 torch tensors.
Masks and normals are optional: missing masks fall back to all-static,
missing normals disable the normal-prior loss — both with a warning.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import cv2
import numpy as np
import torch

from .camera import Camera, load_cameras, save_cameras
from .common import DTYPE
from .losses import canny_nonedge_mask
from .scene import (LABEL_DYNAMIC, LABEL_SKY, LABEL_STATIC, LightingEnvironment,
                    TrainingFrame, load_lighting)


# ------------------------------------------------------------------ transfer fn
def srgb_encode(linear: np.ndarray) -> np.ndarray:
    x = np.clip(linear, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    x = np.clip(encoded, 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


# ------------------------------------------------------------------- raster IO
def save_image(path, image: np.ndarray | torch.Tensor) -> None:
    """Float TIFF keeps linear values; PNG applies the sRGB transfer."""
    img = image.detach().numpy() if torch.is_tensor(image) else np.asarray(image)
    img = img.astype(np.float64)
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        ok = cv2.imwrite(str(path), cv2.cvtColor(img.astype(np.float32),
                                                 cv2.COLOR_RGB2BGR))
    elif path.suffix.lower() == ".png":
        enc = (srgb_encode(img) * 255.0).round().astype(np.uint8)
        ok = cv2.imwrite(str(path), cv2.cvtColor(enc, cv2.COLOR_RGB2BGR))
    else:
        raise ValueError(f"unsupported image format {path.suffix!r}")
    if not ok:
        raise OSError(f"failed to write {path}")


def load_image(path) -> torch.Tensor:
    """Linear [H, W, 3] float64 tensor from float TIFF or sRGB PNG."""
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"failed to read {path}")
    if raw.ndim == 2:
        raw = raw[:, :, None].repeat(3, axis=2)
    raw = cv2.cvtColor(raw[:, :, :3], cv2.COLOR_BGR2RGB)
    if raw.dtype == np.uint8:
        linear = srgb_decode(raw.astype(np.float64) / 255.0)
    elif raw.dtype == np.uint16:
        linear = srgb_decode(raw.astype(np.float64) / 65535.0)
    else:
        linear = raw.astype(np.float64)
    return torch.tensor(linear, dtype=DTYPE)


def save_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask).astype(np.uint8)
    if not np.isin(m, (LABEL_STATIC, LABEL_SKY, LABEL_DYNAMIC)).all():
        raise ValueError("mask labels must be 0 (static), 1 (sky), or 2 (dynamic)")
    if not cv2.imwrite(str(path), m):
        raise OSError(f"failed to write {path}")


def load_mask(path) -> np.ndarray:
    m = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if m is None:
        raise OSError(f"failed to read {path}")
    bad = ~np.isin(m, (LABEL_STATIC, LABEL_SKY, LABEL_DYNAMIC))
    if bad.any():
        raise ValueError(f"{path}: {int(bad.sum())} pixels carry unknown labels")
    return m.astype(np.uint8)


def save_normal_map(path, normals: np.ndarray, valid: np.ndarray | None = None) -> None:
    """16-bit PNG of camera-space normals, (n+1)/2; invalid pixels all-zero."""
    n = np.asarray(normals, dtype=np.float64)
    enc = (np.clip((n + 1.0) / 2.0, 0.0, 1.0) * 65535.0).round().astype(np.uint16)
    if valid is not None:
        enc[~np.asarray(valid).astype(bool)] = 0
    if not cv2.imwrite(str(path), cv2.cvtColor(enc, cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write {path}")


def load_normal_map(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (normals [H, W, 3], valid [H, W]); renormalizes unit length."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"failed to read {path}")
    if raw.dtype != np.uint16:
        raise ValueError(f"{path}: normal maps must be 16-bit PNG")
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    n = rgb.astype(np.float64) / 65535.0 * 2.0 - 1.0
    length = np.linalg.norm(n, axis=-1)
    # Invalid pixels are written as raw zeros; a genuine unit normal can never
    # encode to (0, 0, 0), so the all-zero test is unambiguous.
    valid = (rgb != 0).any(axis=-1) & (np.abs(length - 1.0) < 0.2)
    n = np.where(valid[..., None], n / np.maximum(length, 1e-12)[..., None], 0.0)
    return n, valid


def save_envmap(path, envmap: np.ndarray) -> None:
    """Radiance .hdr (RGBE); ~0.5% quantization from the shared exponent."""
    img = np.asarray(envmap, dtype=np.float32)
    if not cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write {path}")


def load_envmap(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED | cv2.IMREAD_ANYDEPTH)
    if raw is None:
        raise OSError(f"failed to read {path}")
    return cv2.cvtColor(raw.astype(np.float32), cv2.COLOR_BGR2RGB).astype(np.float64)


# ------------------------------------------------------------- dataset lifecycle
def save_points(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """Plain point cloud (positions + optional uint8 colors) as binary PLY."""
    from .plyio import write_ply

    pts = np.asarray(points, dtype=np.float64)
    channels = {"x": pts[:, 0], "y": pts[:, 1], "z": pts[:, 2]}
    if colors is not None:
        c = np.asarray(colors)
        if c.dtype != np.uint8:
            c = (np.clip(c, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        channels.update(red=c[:, 0], green=c[:, 1], blue=c[:, 2])
    write_ply(path, channels, comments=["point cloud"])


def load_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a point cloud saved by :func:`save_points` (or any xyz[+rgb] PLY)."""
    from .plyio import read_ply

    channels, _ = read_ply(path)
    pts = np.stack([channels["x"], channels["y"], channels["z"]], axis=1).astype(np.float64)
    colors = None
    if "red" in channels:
        colors = np.stack([channels["red"], channels["green"], channels["blue"]],
                          axis=1).astype(np.float64)
        if colors.max() > 1.001:
            colors /= 255.0
    return pts, colors


def load_scene_aabb(root) -> np.ndarray | None:
    """Scene bounding box stored with the cameras, [2, 3] (lo, hi) or None."""
    meta = json.loads((Path(root) / "cameras.json").read_text())
    if "scene_aabb" not in meta:
        return None
    return np.asarray(meta["scene_aabb"], dtype=np.float64).reshape(2, 3)


def save_dataset(root, frames: list[TrainingFrame],
                 image_format: str = "tiff",
                 aabb: np.ndarray | None = None) -> None:
    root = Path(root)
    for sub in ("images", "masks", "normals"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    cams, names = [], []
    for fr in frames:
        names.append(fr.name)
        cams.append(fr.camera)
        save_image(root / "images" / f"{fr.name}.{image_format}", fr.image)
        save_mask(root / "masks" / f"{fr.name}.png", fr.semantic_mask)
        if fr.prior_normals is not None:
            # stored camera-space: rotate back from world
            rows = np.asarray(fr.camera.R)
            n_cam = np.asarray(fr.prior_normals) @ rows.T
            valid = fr.normal_valid if fr.normal_valid is not None else None
            save_normal_map(root / "normals" / f"{fr.name}.png", n_cam, valid)
    extra = {"scene_aabb": np.asarray(aabb).tolist()} if aabb is not None else {}
    save_cameras(root / "cameras.json", cams, names, extra=extra)


def _orient_toward_camera(n_world: np.ndarray, cam: Camera) -> np.ndarray:
    dirs = cam.pixel_ray_dirs_world()
    flip = np.einsum("ijk,ijk->ij", n_world, dirs) > 0
    return np.where(flip[..., None], -n_world, n_world)


def load_dataset(root, require_masks: bool = False) -> list[TrainingFrame]:
    """Load and validate a dataset directory into TrainingFrames.

    Frames are ordered by name; ``embedding_index`` follows that order.
    """
    root = Path(root)
    cam_path = root / "cameras.json"
    if not cam_path.exists():
        raise FileNotFoundError(f"{cam_path} missing")
    cameras = load_cameras(cam_path)
    meta = json.loads(cam_path.read_text())
    aabb = np.asarray(meta["scene_aabb"], dtype=np.float64) \
        if "scene_aabb" in meta else None

    img_dir = root / "images"
    frames = []
    missing_normals_any = False
    missing_masks_any = False
    for idx, name in enumerate(sorted(cameras)):
        cam = cameras[name]
        matches = sorted(img_dir.glob(f"{name}.*"))
        if not matches:
            raise FileNotFoundError(f"no image for frame {name!r} in {img_dir}")
        image = load_image(matches[0])
        if image.shape[:2] != (cam.height, cam.width):
            raise ValueError(
                f"{matches[0]}: image is {tuple(image.shape[:2])} but camera "
                f"{name!r} expects {(cam.height, cam.width)}")
        if aabb is not None:
            center = aabb.reshape(2, 3).mean(axis=0)
            pc = cam.world_to_cam(center[None])[0]
            if -pc[2] <= cam.near:
                raise ValueError(f"camera {name!r} does not face the scene box")

        mask_path = root / "masks" / f"{name}.png"
        if mask_path.exists():
            mask = load_mask(mask_path)
            if mask.shape != (cam.height, cam.width):
                raise ValueError(
                    f"{mask_path}: mask is {mask.shape} but camera {name!r} "
                    f"expects {(cam.height, cam.width)}")
        else:
            if require_masks:
                raise FileNotFoundError(f"{mask_path} missing")
            missing_masks_any = True
            mask = np.full((cam.height, cam.width), LABEL_STATIC, np.uint8)

        normal_path = root / "normals" / f"{name}.png"
        prior = valid = None
        if normal_path.exists():
            n_cam, valid_np = load_normal_map(normal_path)
            if n_cam.shape[:2] != (cam.height, cam.width):
                raise ValueError(f"{normal_path}: resolution mismatch")
            rows = np.asarray(cam.R)
            n_world = _orient_toward_camera(n_cam @ rows, cam)
            prior = torch.tensor(n_world, dtype=DTYPE)
            valid = torch.tensor(valid_np)
        else:
            missing_normals_any = True

        nonedge = canny_nonedge_mask(srgb_encode(image.numpy()))
        frames.append(TrainingFrame(
            name=name, image=image, camera=cam, semantic_mask=mask,
            nonedge_mask=nonedge, prior_normals=prior, normal_valid=valid,
            embedding_index=idx, lighting=None))
    if missing_masks_any:
        warnings.warn("dataset has frames without masks: assuming all-static",
                      stacklevel=2)
    if missing_normals_any:
        warnings.warn("dataset has frames without prior normals: the normal-"
                      "prior loss will be disabled for them", stacklevel=2)
    return frames


def load_gt(root) -> dict:
    """Optional ground-truth bundle written by the synthetic generator."""
    root = Path(root) / "gt"
    out: dict = {}
    if (root / "lighting.json").exists():
        out["lighting"] = load_lighting(root / "lighting.json")
    if (root / "scene.json").exists():
        out["scene"] = json.loads((root / "scene.json").read_text())
    for sub, loader in (("albedo", load_image), ("depth", None), ("shadow", None)):
        d = root / sub
        if d.is_dir():
            entry = {}
            for p in sorted(d.iterdir()):
                if sub == "albedo":
                    entry[p.stem] = load_image(p)
                elif sub == "depth":
                    entry[p.stem] = cv2.imread(str(p), cv2.IMREAD_UNCHANGED).astype(np.float64)
                else:
                    entry[p.stem] = cv2.imread(str(p), cv2.IMREAD_GRAYSCALE) > 127
            out[sub] = entry
    return out
