"""Persistent domain types: surfels, lighting, training frames, G-buffers.

Surfel attributes are stored pre-activation (log-scales, logits) so gradient
steps can never leave the valid domain; :meth:`SurfelModel.activate` maps them
to their physical ranges.  Types are treated as immutable snapshots during
rendering — mutation happens only in the optimizer between renders.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .camera import Camera
from .common import DTYPE, check_finite, normalize, to_tensor
from .plyio import read_ply, write_ply

# Semantic mask labels.
LABEL_STATIC = 0
LABEL_SKY = 1
LABEL_DYNAMIC = 2

EMBED_DIM = 24        # per-surfel appearance embedding (stage 1)
TRANSFER_DIM = 9      # order-2 SH radiance-transfer coefficients (stage 2)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternion (w, x, y, z) to rotation matrix, batched and differentiable.

    Columns of the result are the surfel tangent axes; the third column is the
    surfel normal.
    """
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], -2)


def quat_from_normal(normals: np.ndarray) -> np.ndarray:
    """Quaternions whose rotation's third column equals the given unit normals.

    The tangent directions are an arbitrary (deterministic) completion of the
    frame; only the normal is meaningful.
    """
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    tu = np.cross(helper, n)
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = np.cross(n, tu)
    mats = np.stack([tu, tv, n], axis=-1)
    from scipy.spatial.transform import Rotation

    xyzw = Rotation.from_matrix(mats).as_quat()
    return np.concatenate([xyzw[:, 3:4], xyzw[:, :3]], axis=1)


# --------------------------------------------------------------------- surfels
@dataclass
class GaussianSurfel:
    """One surfel record; ``activated`` marks whether fields are physical values."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray            # quaternion (w, x, y, z)
    opacity: float
    albedo: np.ndarray
    embedding: np.ndarray | None = None   # stage 1 only
    transfer: np.ndarray | None = None    # stage 2 only
    activated: bool = False

    def __post_init__(self):
        if (self.embedding is None) == (self.transfer is None):
            raise ValueError("exactly one of embedding/transfer must be set")


def activate_surfel(raw: GaussianSurfel, index: int | None = None) -> GaussianSurfel:
    """Map one raw surfel to physical ranges (exp / logistic / renormalize)."""
    label = f"surfel {index}" if index is not None else "surfel"
    fields = [raw.position, raw.log_scale, raw.rotation, raw.opacity, raw.albedo]
    for f in fields:
        if not np.all(np.isfinite(np.asarray(f, dtype=np.float64))):
            raise ValueError(f"non-finite attribute in {label}")
    q = np.asarray(raw.rotation, dtype=np.float64)
    return GaussianSurfel(
        position=np.asarray(raw.position, dtype=np.float64).copy(),
        log_scale=np.exp(np.asarray(raw.log_scale, dtype=np.float64)),
        rotation=q / np.linalg.norm(q),
        opacity=float(1.0 / (1.0 + np.exp(-raw.opacity))),
        albedo=1.0 / (1.0 + np.exp(-np.asarray(raw.albedo, dtype=np.float64))),
        embedding=None if raw.embedding is None else np.asarray(raw.embedding).copy(),
        transfer=None if raw.transfer is None else np.asarray(raw.transfer).copy(),
        activated=True,
    )


@dataclass
class ActivatedSurfels:
    """Physical-range surfel attributes as torch tensors (shared leading dim)."""

    position: torch.Tensor          # [S, 3]
    scale: torch.Tensor             # [S, 2], > 0
    rotation: torch.Tensor          # [S, 4], unit quaternions
    rot_mat: torch.Tensor           # [S, 3, 3]
    opacity: torch.Tensor           # [S], in [0, 1]
    albedo: torch.Tensor            # [S, 3], in [0, 1]
    embedding: torch.Tensor | None  # [S, 24] or None
    transfer: torch.Tensor | None   # [S, 9] or None
    stage: int

    def __len__(self) -> int:
        return self.position.shape[0]

    @property
    def normal(self) -> torch.Tensor:
        """World normals (third tangent axis), not camera-flipped."""
        return self.rot_mat[..., :, 2]


def surfel_normal(surfels: ActivatedSurfels, cam: Camera | None = None) -> torch.Tensor:
    """Surfel normals, flipped toward the camera when one is supplied."""
    n = surfels.normal
    if cam is None:
        return n
    center = to_tensor(cam.center, n.dtype)
    view = surfels.position - center          # camera -> surfel
    flip = (n * view).sum(-1, keepdim=True) > 0
    return torch.where(flip, -n, n)


class SurfelModel:
    """The optimizable surfel set: raw (pre-activation) attribute tensors.

    Stage 1 carries per-surfel appearance embeddings; stage 2 replaces them
    with radiance-transfer coefficients.  All tensors are float64 leaves so
    they can be registered directly with an optimizer.
    """

    GEOMETRY_FIELDS = ("positions", "log_scales", "rotations", "opacities_raw")

    def __init__(self, positions, log_scales, rotations, opacities_raw,
                 albedos_raw, embeddings=None, transfer=None, stage: int = 1):
        self.positions = to_tensor(positions)
        self.log_scales = to_tensor(log_scales)
        self.rotations = to_tensor(rotations)
        self.opacities_raw = to_tensor(opacities_raw)
        self.albedos_raw = to_tensor(albedos_raw)
        self.embeddings = None if embeddings is None else to_tensor(embeddings)
        self.transfer = None if transfer is None else to_tensor(transfer)
        self.stage = stage
        self._validate()

    def _validate(self):
        s = len(self)
        shapes = {
            "positions": (s, 3), "log_scales": (s, 2), "rotations": (s, 4),
            "opacities_raw": (s,), "albedos_raw": (s, 3),
        }
        for name, shape in shapes.items():
            t = getattr(self, name)
            if tuple(t.shape) != shape:
                raise ValueError(f"{name} has shape {tuple(t.shape)}, expected {shape}")
        if self.stage == 1:
            if self.embeddings is None or self.transfer is not None:
                raise ValueError("stage-1 model must carry embeddings and no transfer")
            if tuple(self.embeddings.shape) != (s, EMBED_DIM):
                raise ValueError("embeddings must be [S, 24]")
        elif self.stage == 2:
            if self.transfer is None or self.embeddings is not None:
                raise ValueError("stage-2 model must carry transfer and no embeddings")
            if tuple(self.transfer.shape) != (s, TRANSFER_DIM):
                raise ValueError("transfer must be [S, 9]")
        else:
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    # ------------------------------------------------------------- parameters
    def parameters(self) -> dict[str, torch.Tensor]:
        out = {name: getattr(self, name) for name in
               ("positions", "log_scales", "rotations", "opacities_raw", "albedos_raw")}
        if self.embeddings is not None:
            out["embeddings"] = self.embeddings
        if self.transfer is not None:
            out["transfer"] = self.transfer
        return out

    def requires_grad_(self, enabled: bool = True, only: tuple[str, ...] | None = None):
        for name, t in self.parameters().items():
            if only is None or name in only:
                t.requires_grad_(enabled)
        return self

    def renormalize_rotations(self):
        """Project raw quaternions back to unit norm (after an optimizer step)."""
        with torch.no_grad():
            self.rotations /= self.rotations.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    # ------------------------------------------------------------- activation
    def activate(self) -> ActivatedSurfels:
        for name, t in self.parameters().items():
            check_finite(name, t)
        rot = normalize(self.rotations)
        return ActivatedSurfels(
            position=self.positions,
            scale=torch.exp(self.log_scales),
            rotation=rot,
            rot_mat=quat_to_rotmat(rot),
            opacity=torch.sigmoid(self.opacities_raw),
            albedo=torch.sigmoid(self.albedos_raw),
            embedding=self.embeddings,
            transfer=self.transfer,
            stage=self.stage,
        )

    def surfel(self, index: int) -> GaussianSurfel:
        """Extract one raw surfel record (numpy copies)."""
        return GaussianSurfel(
            position=self.positions[index].detach().numpy().copy(),
            log_scale=self.log_scales[index].detach().numpy().copy(),
            rotation=self.rotations[index].detach().numpy().copy(),
            opacity=float(self.opacities_raw[index]),
            albedo=self.albedos_raw[index].detach().numpy().copy(),
            embedding=(None if self.embeddings is None
                       else self.embeddings[index].detach().numpy().copy()),
            transfer=(None if self.transfer is None
                      else self.transfer[index].detach().numpy().copy()),
        )

    # ---------------------------------------------------------- constructors
    @classmethod
    def from_points(cls, points, colors, normals=None, scale: float | None = None,
                    opacity: float = 0.1, rng: np.random.Generator | None = None):
        """Seed a stage-1 model from a point cloud.

        ``colors`` are physical albedos in (0, 1) and get logit-encoded;
        ``scale`` defaults to the mean nearest-neighbor spacing estimate.
        """
        rng = rng or np.random.default_rng(0)
        pts = np.asarray(points, dtype=np.float64)
        n = len(pts)
        if scale is None:
            extent = pts.max(0) - pts.min(0) + 1e-6
            scale = float((extent.prod() / max(n, 1)) ** (1 / 3))
        if normals is None:
            quats = rng.normal(size=(n, 4))
            quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        else:
            quats = quat_from_normal(normals)
        colors = np.clip(np.asarray(colors, dtype=np.float64), 1e-4, 1 - 1e-4)
        return cls(
            positions=pts,
            log_scales=np.full((n, 2), np.log(scale)),
            rotations=quats,
            opacities_raw=np.full(n, _logit(opacity)),
            albedos_raw=_logit(colors),
            embeddings=rng.normal(scale=0.01, size=(n, EMBED_DIM)),
            stage=1,
        )

    # -------------------------------------------------------- stage transition
    def to_stage2(self) -> "SurfelModel":
        """Stage 1 -> 2: keep geometry and albedo bit-exactly, init transfer.

        Transfer coefficients start at the order-2 SH projection of the
        clamped cosine about each surfel normal — the analytic unshadowed
        diffuse transfer.
        """
        from .lighting import clamped_cosine_sh

        with torch.no_grad():
            normals = self.activate().normal
            transfer = clamped_cosine_sh(normals)
        return SurfelModel(
            positions=self.positions.detach().clone(),
            log_scales=self.log_scales.detach().clone(),
            rotations=self.rotations.detach().clone(),
            opacities_raw=self.opacities_raw.detach().clone(),
            albedos_raw=self.albedos_raw.detach().clone(),
            transfer=transfer,
            stage=2,
        )

    # ---------------------------------------------------------- serialization
    def save(self, path: str | Path) -> None:
        chans: dict[str, np.ndarray] = {}
        p = self.positions.detach().numpy()
        chans.update(x=p[:, 0], y=p[:, 1], z=p[:, 2])
        ls = self.log_scales.detach().numpy()
        chans.update(log_scale_u=ls[:, 0], log_scale_v=ls[:, 1])
        q = self.rotations.detach().numpy()
        chans.update(rot_w=q[:, 0], rot_x=q[:, 1], rot_y=q[:, 2], rot_z=q[:, 3])
        chans["opacity_raw"] = self.opacities_raw.detach().numpy()
        a = self.albedos_raw.detach().numpy()
        chans.update(albedo_raw_r=a[:, 0], albedo_raw_g=a[:, 1], albedo_raw_b=a[:, 2])
        if self.embeddings is not None:
            e = self.embeddings.detach().numpy()
            for i in range(EMBED_DIM):
                chans[f"embed_{i}"] = e[:, i]
        if self.transfer is not None:
            t = self.transfer.detach().numpy()
            for i in range(TRANSFER_DIM):
                chans[f"transfer_{i}"] = t[:, i]
        write_ply(path, {k: np.ascontiguousarray(v) for k, v in chans.items()},
                  comments=[f"stage {self.stage}"])

    @classmethod
    def load(cls, path: str | Path) -> "SurfelModel":
        chans, comments = read_ply(path)
        stage = 1
        for c in comments:
            if c.startswith("stage "):
                stage = int(c.split()[1])
        stack = lambda names: np.stack([chans[n] for n in names], axis=1)
        kwargs = dict(
            positions=stack(["x", "y", "z"]),
            log_scales=stack(["log_scale_u", "log_scale_v"]),
            rotations=stack(["rot_w", "rot_x", "rot_y", "rot_z"]),
            opacities_raw=chans["opacity_raw"],
            albedos_raw=stack(["albedo_raw_r", "albedo_raw_g", "albedo_raw_b"]),
            stage=stage,
        )
        if stage == 1:
            kwargs["embeddings"] = stack([f"embed_{i}" for i in range(EMBED_DIM)])
        else:
            kwargs["transfer"] = stack([f"transfer_{i}" for i in range(TRANSFER_DIM)])
        return cls(**kwargs)

    def clone(self) -> "SurfelModel":
        return SurfelModel(
            **{k: v.detach().clone() for k, v in self.parameters().items()
               if k not in ("embeddings", "transfer")},
            embeddings=None if self.embeddings is None else self.embeddings.detach().clone(),
            transfer=None if self.transfer is None else self.transfer.detach().clone(),
            stage=self.stage,
        )

    def state_hashes(self, names: tuple[str, ...] | None = None) -> dict[str, str]:
        """SHA-256 of each raw tensor's bytes; the freeze-audit primitive."""
        out = {}
        for name, t in self.parameters().items():
            if names is None or name in names:
                out[name] = hashlib.sha256(
                    np.ascontiguousarray(t.detach().numpy()).tobytes()).hexdigest()
        return out

    @property
    def extent(self) -> float:
        """Scene scale estimate: diagonal of the surfel bounding box."""
        with torch.no_grad():
            span = self.positions.max(0).values - self.positions.min(0).values
            return float(span.norm())


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


# -------------------------------------------------------------------- lighting
@dataclass
class LightingEnvironment:
    """Per-image illumination: one SG sun lobe plus order-2 SH sky."""

    sun_amplitude: np.ndarray       # (3,) RGB radiance, >= 0
    sun_sharpness: float            # > 0
    sun_direction: np.ndarray       # (3,) unit
    sky_sh: np.ndarray              # (3, 9) rows = color channels

    def __post_init__(self):
        self.sun_amplitude = np.asarray(self.sun_amplitude, dtype=np.float64).reshape(3)
        self.sun_direction = np.asarray(self.sun_direction, dtype=np.float64).reshape(3)
        self.sky_sh = np.asarray(self.sky_sh, dtype=np.float64).reshape(3, 9)
        self.sun_sharpness = float(self.sun_sharpness)
        if np.any(self.sun_amplitude < 0):
            raise ValueError("sun amplitude must be componentwise >= 0")
        if self.sun_sharpness <= 0:
            raise ValueError("sun sharpness must be > 0")
        norm = np.linalg.norm(self.sun_direction)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"sun direction must be unit (|xi| = {norm:.8f})")

    def as_tensors(self, dtype: torch.dtype = DTYPE):
        return (to_tensor(self.sun_amplitude, dtype),
                torch.tensor(self.sun_sharpness, dtype=dtype),
                to_tensor(self.sun_direction, dtype),
                to_tensor(self.sky_sh, dtype))

    def to_dict(self) -> dict:
        return {
            "sun_amplitude": self.sun_amplitude.tolist(),
            "sun_sharpness": self.sun_sharpness,
            "sun_direction": self.sun_direction.tolist(),
            "sky_sh": self.sky_sh.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LightingEnvironment":
        return cls(
            sun_amplitude=np.asarray(d["sun_amplitude"], dtype=np.float64),
            sun_sharpness=float(d["sun_sharpness"]),
            sun_direction=np.asarray(d["sun_direction"], dtype=np.float64),
            sky_sh=np.asarray(d["sky_sh"], dtype=np.float64),
        )


def save_lighting(path: str | Path, environments: dict[str, LightingEnvironment]) -> None:
    payload = {
        "convention": "sun SG mu*exp(lambda*(dot(nu,xi)-1)); sky 3x9 order-2 SH rows RGB",
        "frames": {name: env.to_dict() for name, env in environments.items()},
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_lighting(path: str | Path) -> dict[str, LightingEnvironment]:
    payload = json.loads(Path(path).read_text())
    return {name: LightingEnvironment.from_dict(d)
            for name, d in payload["frames"].items()}


# --------------------------------------------------------------------- frames
@dataclass
class TrainingFrame:
    """One capture: image + camera + masks + priors + per-image latents."""

    name: str
    image: torch.Tensor                    # [H, W, 3] linear radiance
    camera: Camera
    semantic_mask: np.ndarray              # [H, W] uint8 labels (see LABEL_*)
    nonedge_mask: np.ndarray               # [H, W] bool, 1 away from dilated edges
    prior_normals: torch.Tensor | None = None   # [H, W, 3] world frame
    normal_valid: torch.Tensor | None = None    # [H, W] bool
    embedding_index: int = 0
    lighting: LightingEnvironment | None = None

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if (self.camera.height, self.camera.width) != (h, w):
            raise ValueError(f"frame {self.name}: camera is {self.camera.height}x"
                             f"{self.camera.width}, image is {h}x{w}")
        for label, buf in [("semantic_mask", self.semantic_mask),
                           ("nonedge_mask", self.nonedge_mask),
                           ("prior_normals", self.prior_normals),
                           ("normal_valid", self.normal_valid)]:
            if buf is not None and tuple(buf.shape[:2]) != (h, w):
                raise ValueError(f"frame {self.name}: {label} resolution mismatch")

    @property
    def static_mask(self) -> np.ndarray:
        return self.semantic_mask == LABEL_STATIC

    @property
    def sky_mask(self) -> np.ndarray:
        return self.semantic_mask == LABEL_SKY

    @property
    def dynamic_mask(self) -> np.ndarray:
        return self.semantic_mask == LABEL_DYNAMIC


# -------------------------------------------------------------------- gbuffer
@dataclass
class GBuffer:
    """Screen-space deferred-shading inputs and outputs."""

    normal: torch.Tensor        # [H, W, 3] accumulated, renormalized where valid
    depth: torch.Tensor         # [H, W] expected depth (alpha-normalized)
    alpha: torch.Tensor         # [H, W] in [0, 1]
    albedo: torch.Tensor        # [H, W, 3]
    ambient: torch.Tensor       # [H, W, 3] splatted ambient irradiance
    visibility: torch.Tensor | None = None   # [H, W] sun visibility
    color: torch.Tensor | None = None        # [H, W, 3] composed color
    render_output: object | None = None      # rasterizer output backing the buffers

    def foreground(self, threshold: float = 0.5) -> torch.Tensor:
        return self.alpha > threshold
