"""Two-stage optimization: geometry first, then lighting decomposition.

Stage 1 fits surfel geometry and a per-image appearance transform to the
images, with adaptive density control.  Stage 2 freezes all geometry
attributes and decomposes illumination in three phases: (1) shading omitted,
albedo alone explains the images; (2) every surfel attribute frozen, only the
per-image sun and sky parameters move; (3) joint refinement of albedo,
transfer, and lighting.  Both stages abort on non-finite losses, keeping the
last good checkpoint, and are bitwise-reproducible in deterministic mode.

Checkpoints are directory bundles: ``surfels.ply`` (the model),
``appearance.pt`` (MLP + embeddings, stage 1), ``lighting.json`` (per-frame
environments, stage 2), ``optimizer.pt``, and ``meta.json`` (iteration, phase,
loss history, freeze audit).
"""

from __future__ import annotations

import contextlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .appearance import AppearanceMLP, apply_affine, make_image_embeddings
from .bvh import build_bvh, sun_visibility
from .camera import Camera
from .common import DTYPE, deterministic_mode, seed_all, to_tensor
from .config import Stage1Config, Stage2Config
from .datasets import load_points, load_scene_aabb
from .lighting import ambient_irradiance, default_sun_curve, eval_sky, \
    sg_irradiance, sun_elevation
from .losses import ambient_tv_loss, mask_loss, normal_prior_loss, reg_loss, \
    render_loss, sun_prior_loss, sun_prior_weight
from .mesh import SurfaceMesh, normal_from_depth
from .rasterizer import rasterize
from .scene import LightingEnvironment, SurfelModel, TrainingFrame, \
    load_lighting, quat_to_rotmat, save_lighting
from .shading import TAU_FG


class TrainingDiverged(RuntimeError):
    """Raised when the loss or parameters go non-finite.

    ``checkpoint`` names the bundle holding the last good state.
    """

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(out_dir, model: SurfelModel, *, mlp=None, embeddings=None,
                    lighting: dict[str, LightingEnvironment] | None = None,
                    optimizer=None, meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "surfels.ply")
    if mlp is not None or embeddings is not None:
        payload = {}
        if mlp is not None:
            payload["mlp"] = mlp.state_dict()
        if embeddings is not None:
            payload["image_embeddings"] = embeddings.detach().clone()
        torch.save(payload, out / "appearance.pt")
    if lighting is not None:
        save_lighting(out / "lighting.json", lighting)
    if optimizer is not None:
        torch.save(optimizer.state_dict(), out / "optimizer.pt")
    if meta is not None:
        (out / "meta.json").write_text(json.dumps(meta, indent=2))
    return out


def load_checkpoint(ckpt_dir) -> dict:
    """Read a checkpoint bundle back: model, appearance, lighting, meta."""
    ckpt = Path(ckpt_dir)
    out: dict = {"model": SurfelModel.load(ckpt / "surfels.ply")}
    app = ckpt / "appearance.pt"
    if app.exists():
        payload = torch.load(app, weights_only=True)
        if "mlp" in payload:
            mlp = AppearanceMLP()
            mlp.load_state_dict(payload["mlp"])
            out["mlp"] = mlp
        if "image_embeddings" in payload:
            out["image_embeddings"] = payload["image_embeddings"]
    if (ckpt / "lighting.json").exists():
        out["lighting"] = load_lighting(ckpt / "lighting.json")
    if (ckpt / "meta.json").exists():
        out["meta"] = json.loads((ckpt / "meta.json").read_text())
    return out


# ------------------------------------------------------------------ stage-1 init


def estimate_normals(points: np.ndarray, k: int = 8,
                     orient_toward: np.ndarray | None = None) -> np.ndarray:
    """Local-PCA normals (smallest covariance axis over k neighbors)."""
    pts = np.asarray(points, dtype=np.float64)
    k = min(k, len(pts) - 1)
    if k < 2:
        n = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
        return n
    _, idx = cKDTree(pts).query(pts, k=k + 1)
    nbrs = pts[idx[:, 1:]] - pts[:, None, :]
    cov = np.einsum("nki,nkj->nij", nbrs, nbrs)
    _, vecs = np.linalg.eigh(cov)
    n = vecs[..., 0]
    if orient_toward is not None:
        flip = ((orient_toward - pts) * n).sum(-1) < 0
        n[flip] *= -1.0
    return n


def init_stage1_model(frames: list[TrainingFrame], config: Stage1Config,
                      rng: np.random.Generator,
                      dataset_root=None) -> SurfelModel:
    """Seed surfels from the dataset's point cloud (or random-in-box fallback).

    Scales come from each point's nearest-neighbor spacing, orientations from
    local PCA turned toward the cameras.
    """
    points = colors = None
    if dataset_root is not None:
        ply = Path(dataset_root) / "points.ply"
        if ply.exists():
            points, colors = load_points(ply)
    if points is None:
        aabb = load_scene_aabb(dataset_root) if dataset_root is not None else None
        if aabb is None:
            centers = np.stack([f.camera.center for f in frames])
            mid = centers.mean(axis=0)
            r = np.abs(centers - mid).max()
            aabb = np.stack([mid - 0.5 * r, mid + 0.5 * r])
        warnings.warn("no points.ply in dataset: initializing surfels uniformly "
                      "inside the scene box", stacklevel=2)
        points = rng.uniform(aabb[0], aabb[1], size=(config.init_points, 3))
    if colors is None:
        colors = np.full_like(points, 0.5)

    cam_mid = np.stack([f.camera.center for f in frames]).mean(axis=0)
    normals = estimate_normals(points, orient_toward=cam_mid)
    spacing = cKDTree(points).query(points, k=2)[0][:, 1]
    spacing = np.clip(spacing, 1e-4, None)

    model = SurfelModel.from_points(points, colors, normals=normals,
                                    opacity=config.init_opacity, rng=rng)
    with torch.no_grad():
        s = np.log(np.maximum(config.init_scale_factor * spacing, 1e-5))
        model.log_scales.copy_(torch.from_numpy(np.repeat(s[:, None], 2, axis=1)))
    return model


# ------------------------------------------------------------------ stage 1


class Stage1Trainer:
    """Geometry optimization over one dataset with adaptive density control."""

    def __init__(self, frames: list[TrainingFrame], config: Stage1Config,
                 out_dir, model: SurfelModel | None = None, dataset_root=None):
        self.frames = frames
        self.config = config
        self.out_dir = Path(out_dir)
        self.rng = seed_all(config.seed)
        self.model = model if model is not None else init_stage1_model(
            frames, config, self.rng, dataset_root)
        if self.model.stage != 1:
            raise ValueError("stage-1 trainer needs a stage-1 model")
        self.model.requires_grad_(True)
        self.mlp = AppearanceMLP()
        self.image_embeddings = make_image_embeddings(len(frames), config.seed)
        self.image_embeddings.requires_grad_(True)
        self._extent = self.model.extent
        self.loss_history: list[dict] = []
        self._cap_warned = False
        self._reset_optimizer()
        self._reset_grad_stats()

    # -------------------------------------------------------------- optimizer
    def _reset_optimizer(self):
        c = self.config
        m = self.model
        groups = [
            {"params": [m.positions], "lr": c.lr_position, "name": "positions"},
            {"params": [m.rotations], "lr": c.lr_rotation, "name": "rotations"},
            {"params": [m.log_scales], "lr": c.lr_scale, "name": "scales"},
            {"params": [m.opacities_raw], "lr": c.lr_opacity, "name": "opacity"},
            {"params": [m.albedos_raw], "lr": c.lr_color, "name": "color"},
            {"params": [m.embeddings], "lr": c.lr_embedding,
             "name": "surfel_embeddings"},
            {"params": [self.image_embeddings], "lr": c.lr_embedding,
             "name": "image_embeddings"},
            {"params": list(self.mlp.parameters()), "lr": c.lr_mlp, "name": "mlp"},
        ]
        self.optimizer = torch.optim.Adam(groups, eps=1e-15)
        total = max(self.config.iterations, 1)
        self._pos_lr_gamma = self.config.lr_position_final_scale ** (1.0 / total)

    def _decay_position_lr(self):
        for g in self.optimizer.param_groups:
            if g.get("name") == "positions":
                g["lr"] *= self._pos_lr_gamma

    def _reset_grad_stats(self):
        n = len(self.model)
        self._grad_acc = torch.zeros(n, dtype=DTYPE)
        self._grad_cnt = torch.zeros(n, dtype=DTYPE)

    # ------------------------------------------------------------------ loss
    def _step_loss(self, frame: TrainingFrame, it: int):
        c = self.config
        act = self.model.activate()
        cam = frame.camera
        gamma, beta = self.mlp(act.albedo, act.embedding,
                               self.image_embeddings[frame.embedding_index])
        colors = apply_affine(gamma, beta, act.albedo)
        out = rasterize(act, cam, {"color": colors})

        static = torch.from_numpy(frame.static_mask)
        parts = {}
        loss = c.lambda_render * render_loss(out.channels["color"], frame.image,
                                             static)
        parts["render"] = float(loss.detach())
        lm = c.lambda_mask * mask_loss(out.alpha, frame.sky_mask,
                                       exclude=frame.dynamic_mask)
        parts["mask"] = float(lm.detach())
        loss = loss + lm

        depth_normal = None
        fg = out.alpha.detach() > TAU_FG
        if c.lambda_normal_prior > 0 and frame.prior_normals is not None:
            n_away, _ = normal_from_depth(out.expected_depth(), cam, frame="world")
            depth_normal = -n_away
            splat_n = out.channels["normal"]
            splat_n = splat_n / splat_n.detach().norm(dim=-1, keepdim=True).clamp_min(1e-12)
            m = torch.from_numpy(frame.nonedge_mask) & static & fg
            if frame.normal_valid is not None:
                m = m & frame.normal_valid
            lp = c.lambda_normal_prior * normal_prior_loss(
                frame.prior_normals, splat_n, depth_normal, m)
            parts["normal_prior"] = float(lp.detach())
            loss = loss + lp

        if c.lambda_reg > 0 and it >= c.reg_warmup_fraction * c.iterations:
            r = reg_loss(out, act, cam, depth_normal=depth_normal)
            lr_ = c.lambda_reg * (r["normal_consistency"] + r["distortion"])
            parts["reg"] = float(lr_.detach())
            loss = loss + lr_

        parts["total"] = float(loss.detach())
        return loss, parts

    # ------------------------------------------------------- density control
    def _accumulate_grad_stats(self, frame: TrainingFrame):
        g = self.model.positions.grad
        if g is None:
            return
        with torch.no_grad():
            cam = frame.camera
            p_c = self.model.positions.detach() @ to_tensor(cam.R).T + to_tensor(cam.t)
            depth = (-p_c[:, 2]).clamp_min(cam.near)
            screen = g.norm(dim=-1) * cam.fx / depth
            seen = screen > 0
            self._grad_acc[seen] += screen[seen]
            self._grad_cnt[seen] += 1.0

    def _density_control(self):
        c = self.config
        m = self.model
        with torch.no_grad():
            stats = self._grad_acc / self._grad_cnt.clamp_min(1.0)
            opac = torch.sigmoid(m.opacities_raw)
            prune = opac < c.prune_opacity
            grow = (stats > c.densify_grad_threshold) & ~prune

            kept_after_prune = len(m) - int(prune.sum())
            room = c.max_surfels - kept_after_prune
            if room <= 0 and bool(grow.any()):
                if not self._cap_warned:
                    warnings.warn(f"surfel cap {c.max_surfels} reached: "
                                  "densification stopped", stacklevel=2)
                    self._cap_warned = True
                grow[:] = False
            elif int(grow.sum()) > room:
                # Deterministic top-k by gradient statistic.
                order = torch.argsort(stats, descending=True, stable=True)
                allowed = order[:room]
                sel = torch.zeros_like(grow)
                sel[allowed] = True
                grow &= sel

            if not bool(grow.any()) and not bool(prune.any()):
                self._reset_grad_stats()
                return

            scale = torch.exp(m.log_scales)
            big = scale.max(dim=-1).values > 0.02 * self._extent
            split = grow & big
            clone = grow & ~big
            keep = ~prune & ~split

            rot = m.rotations / m.rotations.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            axes = quat_to_rotmat(rot)
            major_is_u = scale[:, 0] >= scale[:, 1]
            major_axis = torch.where(major_is_u[:, None], axes[..., 0], axes[..., 1])
            major_scale = scale.max(dim=-1).values

            def take(name, rows):
                return getattr(m, name)[rows].detach().clone()

            new = {name: [take(name, keep)] for name in
                   ("positions", "log_scales", "rotations", "opacities_raw",
                    "albedos_raw", "embeddings")}

            if bool(clone.any()):
                offset = 0.3 * major_scale[clone, None] * major_axis[clone]
                new["positions"].append(take("positions", clone) + offset)
                for name in ("log_scales", "rotations", "opacities_raw",
                             "albedos_raw", "embeddings"):
                    new[name].append(take(name, clone))
            if bool(split.any()):
                for sign in (1.0, -1.0):
                    offset = sign * 0.5 * major_scale[split, None] * major_axis[split]
                    new["positions"].append(take("positions", split) + offset)
                    new["log_scales"].append(take("log_scales", split) - np.log(1.6))
                    for name in ("rotations", "opacities_raw", "albedos_raw",
                                 "embeddings"):
                        new[name].append(take(name, split))

            tensors = {k: torch.cat(v, dim=0) for k, v in new.items()}
        self.model = SurfelModel(stage=1, transfer=None, **tensors)
        self.model.requires_grad_(True)
        # Optimizer state does not transfer across a changed surfel set: the
        # moments restart (recorded decision), keeping updates well-defined.
        self._reset_optimizer()
        self._reset_grad_stats()

    # ------------------------------------------------------------------- run
    def run(self) -> Path:
        c = self.config
        ctx = deterministic_mode(True) if c.deterministic else contextlib.nullcontext()
        with ctx:
            return self._run()

    def _meta(self, iteration: int, aborted: bool = False) -> dict:
        return {
            "stage": 1,
            "iterations": iteration,
            "configured_iterations": self.config.iterations,
            "seed": self.config.seed,
            "n_surfels": len(self.model),
            "aborted": aborted,
            "loss_history": self.loss_history,
        }

    def _run(self) -> Path:
        c = self.config
        out = self.out_dir
        save_checkpoint(out, self.model, mlp=self.mlp,
                        embeddings=self.image_embeddings,
                        optimizer=self.optimizer, meta=self._meta(0))
        if c.iterations == 0:
            return out

        n = len(self.frames)
        order = self.rng.permutation(n)
        densify_end = c.densify_until_fraction * c.iterations
        for it in range(c.iterations):
            if it % n == 0 and it > 0:
                order = self.rng.permutation(n)
            frame = self.frames[order[it % n]]

            try:
                loss, parts = self._step_loss(frame, it)
            except ValueError as exc:          # non-finite parameters
                return self._abort(it, str(exc))
            if not bool(torch.isfinite(loss)):
                return self._abort(it, "non-finite loss")

            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self._accumulate_grad_stats(frame)
            self.optimizer.step()
            self.model.renormalize_rotations()
            self._decay_position_lr()
            self.loss_history.append(parts)

            if (it + 1) % c.densify_interval == 0 and (it + 1) < densify_end:
                self._density_control()

            if (it + 1) % c.checkpoint_every == 0 or (it + 1) == c.iterations:
                save_checkpoint(out, self.model, mlp=self.mlp,
                                embeddings=self.image_embeddings,
                                optimizer=self.optimizer,
                                meta=self._meta(it + 1))
        return out

    def _abort(self, it: int, reason: str) -> Path:
        meta_path = self.out_dir / "meta.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else self._meta(0)
        meta["aborted"] = True
        meta["abort_iteration"] = it
        meta["abort_reason"] = reason
        meta_path.write_text(json.dumps(meta, indent=2))
        raise TrainingDiverged(
            f"stage 1 diverged at iteration {it}: {reason}", checkpoint=self.out_dir)


# ------------------------------------------------------------------ stage 2


def _softplus_inv(y: torch.Tensor) -> torch.Tensor:
    y = y.clamp_min(1e-8)
    return y + torch.log(-torch.expm1(-y))


@dataclass
class FrameCache:
    """Fixed per-frame quantities while geometry is frozen.

    ``weights`` is the sparse [H*W, S] splat-blend matrix; multiplying it by
    per-surfel attributes reproduces the rasterizer's accumulation exactly.
    """

    name: str
    camera: Camera
    image: torch.Tensor            # [H, W, 3]
    static: torch.Tensor           # bool [H, W]
    nondynamic: torch.Tensor       # bool [H, W]
    sky: torch.Tensor              # bool [H, W]
    weights: torch.Tensor          # sparse [H*W, S]
    alpha_flat: torch.Tensor       # [H*W]
    fg_flat: torch.Tensor          # bool [H*W]
    points_fg: np.ndarray          # [K, 3] world surface points
    normals_fg: torch.Tensor       # [K, 3] unit, toward camera
    normals_fg_np: np.ndarray
    bg_dirs: torch.Tensor          # [B, 3] unit view rays of background pixels
    embedding_index: int


def build_frame_cache(model: SurfelModel, frame: TrainingFrame) -> FrameCache:
    act = model.activate()
    cam = frame.camera
    with torch.no_grad():
        out = rasterize(act, cam, attributes={}, with_normal=True)
        h, w = cam.height, cam.width
        hw = h * w
        flat = out.flat
        idx = torch.stack([flat.pix, flat.surfel])
        weights = torch.sparse_coo_tensor(
            idx, flat.blend.detach(), (hw, len(act)),
            check_invariants=False).coalesce()
        alpha_flat = out.alpha.reshape(-1).detach()
        fg_flat = alpha_flat > TAU_FG

        nrm = out.channels["normal"].reshape(-1, 3).detach()[fg_flat]
        nrm = nrm / nrm.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        depth = (out.depth_sum.reshape(-1).detach()[fg_flat]
                 / alpha_flat[fg_flat].clamp_min(1e-12))
        dirs = to_tensor(cam.pixel_ray_dirs_world()).reshape(-1, 3)
        pts = to_tensor(cam.center) + dirs[fg_flat] * depth.unsqueeze(-1)

        bg = ~fg_flat
        bg_dirs = dirs[bg]
        bg_dirs = bg_dirs / bg_dirs.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    return FrameCache(
        name=frame.name, camera=cam, image=frame.image,
        static=torch.from_numpy(frame.static_mask),
        nondynamic=torch.from_numpy(~frame.dynamic_mask),
        sky=torch.from_numpy(frame.sky_mask),
        weights=weights, alpha_flat=alpha_flat, fg_flat=fg_flat,
        points_fg=pts.numpy(), normals_fg=nrm, normals_fg_np=nrm.numpy(),
        bg_dirs=bg_dirs, embedding_index=frame.embedding_index)


class Stage2Trainer:
    """Lighting decomposition on frozen geometry, in three phases."""

    PHASE_NAMES = ("albedo_init", "lighting_only", "joint")

    def __init__(self, frames: list[TrainingFrame], model: SurfelModel,
                 mesh: SurfaceMesh, config: Stage2Config, out_dir):
        self.frames = frames
        self.config = config
        self.out_dir = Path(out_dir)
        self.rng = seed_all(config.seed)
        if model.stage == 1:
            model = model.to_stage2()
        self.model = model
        self.model.requires_grad_(False)
        self.bvh = build_bvh(mesh)
        self.sun_curve = default_sun_curve()
        self.caches = [build_frame_cache(self.model, f) for f in frames]
        self._init_lighting()
        self.loss_history: list[dict] = []
        self.meta_phases: list[dict] = []

    # ------------------------------------------------------------- lighting
    def _init_lighting(self):
        n = len(self.frames)
        xi0 = np.zeros((n, 3))
        sky0 = np.zeros((n, 3, 9))
        mu0 = np.zeros((n, 3))
        for i, (frame, cache) in enumerate(zip(self.frames, self.caches)):
            xi0[i] = self._sun_direction_heuristic(frame)
            theta = float(np.arcsin(np.clip(xi0[i, 2], -1.0, 1.0)))
            mu0[i] = np.clip(self.sun_curve(max(theta, 0.0)), 1e-3, None)
            sky_px = frame.image.numpy()[frame.sky_mask]
            mean_sky = sky_px.mean(axis=0) if len(sky_px) else np.full(3, 0.5)
            sky0[i, :, 0] = np.clip(mean_sky, 1e-3, None) / 0.28209479177387814
        self.xi_raw = to_tensor(xi0).requires_grad_(True)
        self.mu_raw = _softplus_inv(to_tensor(mu0)).requires_grad_(True)
        n_sharp = 1 if self.config.share_sharpness else n
        self.sharp_raw = _softplus_inv(torch.full(
            (n_sharp,), float(self.config.init_sun_sharpness),
            dtype=DTYPE)).requires_grad_(True)
        self.sky_sh = to_tensor(sky0).requires_grad_(True)

    @staticmethod
    def _sun_direction_heuristic(frame: TrainingFrame) -> np.ndarray:
        """Initial sun direction from the brightest visible sky pixel.

        Cameras ringed around a scene mostly see sky near the horizon, so the
        brightest pixel's azimuth is informative (the sun side of the sky is
        brighter) while its elevation usually is not.  Steep rays are taken
        as-is; shallow ones keep their azimuth lifted to 45 degrees.  Exact
        zenith is never returned (asin gradients degenerate there).
        """
        quarter = np.pi / 4.0
        default = np.array([np.cos(quarter), 0.0, np.sin(quarter)])
        sky = frame.sky_mask
        if not sky.any():
            return default
        lum = frame.image.numpy() @ np.array([0.2126, 0.7152, 0.0722])
        lum = np.where(sky, lum, -np.inf)
        iy, ix = np.unravel_index(np.argmax(lum), lum.shape)
        d = frame.camera.pixel_ray_dirs_world()[iy, ix]
        d = d / np.linalg.norm(d)
        if d[2] > 0.3:
            return d
        az = np.arctan2(d[1], d[0])
        c = np.cos(quarter)
        return np.array([c * np.cos(az), c * np.sin(az), np.sin(quarter)])

    def _grid_init_sun(self):
        """Coarse per-frame sun-direction search before lighting optimization.

        The render loss over sun directions is multi-modal (shadows appear and
        vanish discontinuously), so gradient descent from a poor start stalls
        against a barrier.  Scoring a small azimuth x elevation grid with the
        cached forward picks the right basin first; the amplitude is reset to
        the prior curve at each candidate's elevation.
        """
        azimuths = np.arange(8) * (np.pi / 4.0)
        elevations = np.radians([20.0, 40.0, 60.0])
        grid = [np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
                for e in elevations for a in azimuths]
        with torch.no_grad():
            for cache in self.caches:
                i = cache.embedding_index
                candidates = [self.xi_raw[i].numpy().copy()] + grid
                best = (np.inf, None, None)
                for xi in candidates:
                    xi = xi / np.linalg.norm(xi)
                    theta = max(float(np.arcsin(np.clip(xi[2], -1.0, 1.0))), 0.0)
                    mu = np.clip(self.sun_curve(theta), 1e-4, None)
                    self.xi_raw[i] = to_tensor(xi)
                    self.mu_raw[i] = _softplus_inv(to_tensor(mu))
                    pred, _, _ = self.render_shaded(cache)
                    l1 = float((pred - cache.image).abs()[cache.nondynamic].mean())
                    if l1 < best[0]:
                        best = (l1, to_tensor(xi), self.mu_raw[i].clone())
                self.xi_raw[i] = best[1]
                self.mu_raw[i] = best[2]

    def lighting_params(self) -> list[torch.Tensor]:
        return [self.xi_raw, self.mu_raw, self.sharp_raw, self.sky_sh]

    def light_for(self, index: int):
        xi = self.xi_raw[index]
        xi = xi / xi.norm().clamp_min(1e-12)
        mu = torch.nn.functional.softplus(self.mu_raw[index])
        si = 0 if self.config.share_sharpness else index
        sharp = torch.nn.functional.softplus(self.sharp_raw[si])
        return mu, sharp, xi, self.sky_sh[index]

    def environments(self) -> dict[str, LightingEnvironment]:
        out = {}
        with torch.no_grad():
            for cache in self.caches:
                mu, sharp, xi, sky = self.light_for(cache.embedding_index)
                out[cache.name] = LightingEnvironment(
                    sun_amplitude=mu.numpy().copy(),
                    sun_sharpness=float(sharp),
                    sun_direction=xi.numpy().copy(),
                    sky_sh=sky.numpy().copy())
        return out

    # -------------------------------------------------------------- renders
    def _splat(self, cache: FrameCache, attr: torch.Tensor) -> torch.Tensor:
        return torch.sparse.mm(cache.weights, attr)

    def render_albedo(self, cache: FrameCache) -> torch.Tensor:
        """Shading-omitted prediction: the raw composited albedo splat."""
        albedo = torch.sigmoid(self.model.albedos_raw)
        h, w = cache.camera.height, cache.camera.width
        return self._splat(cache, albedo).reshape(h, w, 3)

    def render_shaded(self, cache: FrameCache):
        """Deferred-shaded prediction through the cached splat weights.

        Returns (color image, ambient irradiance map, shadow visibility on
        foreground pixels).  Differentiable in albedo, transfer, and lighting;
        visibility is a constant per evaluation.
        """
        mu, sharp, xi, sky = self.light_for(cache.embedding_index)
        albedo = torch.sigmoid(self.model.albedos_raw)
        irr = ambient_irradiance(self.model.transfer, sky)
        a = cache.alpha_flat.clamp_min(1e-12).unsqueeze(1)
        alb_px = self._splat(cache, albedo) / a
        amb_px = (self._splat(cache, irr) / a).clamp_min(0.0)

        fg = cache.fg_flat
        vis_np = sun_visibility(cache.points_fg, xi.detach().numpy(), self.bvh,
                                normals=cache.normals_fg_np, offset=1e-3)
        vis = torch.from_numpy(vis_np).to(DTYPE)
        i_sun = sg_irradiance(mu, sharp, xi, cache.normals_fg, visibility=vis)
        color_fg = alb_px[fg] / np.pi * (i_sun + amb_px[fg])

        h, w = cache.camera.height, cache.camera.width
        pred = torch.zeros(h * w, 3, dtype=DTYPE)
        pred = pred.index_put((torch.nonzero(fg).squeeze(-1),), color_fg)
        if len(cache.bg_dirs):
            sky_px = eval_sky(sky, cache.bg_dirs).clamp_min(0.0)
            pred = pred.index_put((torch.nonzero(~fg).squeeze(-1),), sky_px)
        amb_map = torch.where(fg.unsqueeze(1), amb_px,
                              torch.zeros_like(amb_px)).reshape(h, w, 3)
        return pred.reshape(h, w, 3), amb_map, vis

    # ----------------------------------------------------------------- loss
    def _phase_loss(self, phase: int, cache: FrameCache, global_step: int):
        c = self.config
        parts = {}
        if phase == 0:
            pred = self.render_albedo(cache)
            loss = c.lambda_render * render_loss(pred, cache.image, cache.static)
            parts["render"] = float(loss.detach())
        else:
            pred, amb_map, _ = self.render_shaded(cache)
            loss = c.lambda_render * render_loss(pred, cache.image,
                                                 cache.nondynamic)
            parts["render"] = float(loss.detach())
            mu, _, xi, _ = self.light_for(cache.embedding_index)
            theta = sun_elevation(xi)
            w5 = sun_prior_weight(global_step, c.total_iterations,
                                  c.sun_prior_start, c.sun_prior_end)
            lsp = w5 * sun_prior_loss(mu, theta, self.sun_curve)
            parts["sun_prior"] = float(lsp.detach())
            ltv = c.lambda_ambient_tv * ambient_tv_loss(amb_map, reduction="mean")
            parts["ambient_tv"] = float(ltv.detach())
            loss = loss + lsp + ltv
        parts["total"] = float(loss.detach())
        parts["phase"] = phase
        return loss, parts

    # ------------------------------------------------------------------- run
    def _phase_param_groups(self, phase: int):
        c = self.config
        if phase == 0:
            self.model.requires_grad_(False)
            self.model.requires_grad_(True, only=("albedos_raw",))
            for p in self.lighting_params():
                p.requires_grad_(False)
            return [{"params": [self.model.albedos_raw], "lr": c.lr_albedo,
                     "name": "albedo"}]
        if phase == 1:
            self.model.requires_grad_(False)
            for p in self.lighting_params():
                p.requires_grad_(True)
            return [{"params": self.lighting_params(), "lr": c.lr_lighting,
                     "name": "lighting"}]
        self.model.requires_grad_(False)
        self.model.requires_grad_(True, only=("albedos_raw", "transfer"))
        for p in self.lighting_params():
            p.requires_grad_(True)
        return [
            {"params": [self.model.albedos_raw], "lr": c.lr_albedo, "name": "albedo"},
            {"params": [self.model.transfer], "lr": c.lr_transfer, "name": "transfer"},
            {"params": self.lighting_params(), "lr": c.lr_lighting, "name": "lighting"},
        ]

    def _frozen_names(self, phase: int) -> tuple[str, ...]:
        if phase == 1:
            return ("positions", "log_scales", "rotations", "opacities_raw",
                    "albedos_raw", "transfer")
        return SurfelModel.GEOMETRY_FIELDS

    def _meta(self, iteration: int, phase: int, aborted: bool = False) -> dict:
        return {
            "stage": 2,
            "iterations": iteration,
            "phase": phase,
            "phase_iters": list(self.config.phase_iters),
            "seed": self.config.seed,
            "n_surfels": len(self.model),
            "aborted": aborted,
            "phases": self.meta_phases,
            "loss_history": self.loss_history,
        }

    def run(self) -> Path:
        ctx = (deterministic_mode(True) if self.config.deterministic
               else contextlib.nullcontext())
        with ctx:
            return self._run()

    def _run(self) -> Path:
        c = self.config
        out = self.out_dir
        save_checkpoint(out, self.model, lighting=self.environments(),
                        meta=self._meta(0, 0))
        global_step = 0
        n = len(self.caches)
        sun_grid_done = False
        for phase, budget in enumerate(c.phase_iters):
            if phase >= 1 and budget > 0 and not sun_grid_done:
                self._grid_init_sun()
                sun_grid_done = True
            frozen = self._frozen_names(phase)
            audit_before = self.model.state_hashes(frozen)
            groups = self._phase_param_groups(phase)
            # Fresh optimizer at every phase boundary (recorded decision):
            # moment state never leaks across a freeze change.
            optimizer = torch.optim.Adam(groups, eps=1e-15)
            order = self.rng.permutation(n)
            for it in range(budget):
                if it % n == 0 and it > 0:
                    order = self.rng.permutation(n)
                cache = self.caches[order[it % n]]
                try:
                    loss, parts = self._phase_loss(phase, cache, global_step)
                except ValueError as exc:
                    return self._abort(global_step, phase, str(exc))
                if not bool(torch.isfinite(loss)):
                    return self._abort(global_step, phase, "non-finite loss")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                self.loss_history.append(parts)
                global_step += 1
                if global_step % c.checkpoint_every == 0:
                    save_checkpoint(out, self.model, lighting=self.environments(),
                                    optimizer=optimizer,
                                    meta=self._meta(global_step, phase))
            audit_after = self.model.state_hashes(frozen)
            self.meta_phases.append({
                "phase": phase,
                "name": self.PHASE_NAMES[phase],
                "iterations": budget,
                "optimizer_reset": True,
                "frozen": list(frozen),
                "freeze_audit_before": audit_before,
                "freeze_audit_after": audit_after,
                "freeze_intact": audit_before == audit_after,
            })
            save_checkpoint(out, self.model, lighting=self.environments(),
                            optimizer=optimizer,
                            meta=self._meta(global_step, phase))
        return out

    def _abort(self, step: int, phase: int, reason: str) -> Path:
        meta_path = self.out_dir / "meta.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() \
            else self._meta(0, 0)
        meta["aborted"] = True
        meta["abort_iteration"] = step
        meta["abort_phase"] = phase
        meta["abort_reason"] = reason
        meta_path.write_text(json.dumps(meta, indent=2))
        raise TrainingDiverged(
            f"stage 2 diverged at step {step} (phase {phase}): {reason}",
            checkpoint=self.out_dir)
