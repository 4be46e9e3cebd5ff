"""Deferred shading: G-buffer assembly, sun/sky irradiance, final color.

Shading runs in screen space on accumulated splat buffers: per foreground
pixel the expected depth is back-projected to a world point, a shadow ray is
traced toward the sun, and the color is albedo / pi times the sum of the
sun irradiance and the (clamped) ambient sky irradiance.  Background pixels
show the spherical-harmonic sky evaluated along the view ray.  Everything is
linear radiance; sRGB conversion happens only at image I/O.
"""

from __future__ import annotations

import numpy as np
import torch

from .bvh import BVH, sun_visibility
from .camera import Camera
from .common import DTYPE, to_tensor
from .lighting import ambient_irradiance, eval_sky, sg_irradiance
from .rasterizer import rasterize
from .scene import ActivatedSurfels, GBuffer, LightingEnvironment

TAU_FG = 0.5
_ALPHA_FLOOR = 1e-12


def env_tensors(env) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """(mu, sharpness, xi, sky_sh) as tensors; tuples of live tensors pass
    through untouched so trainable lighting keeps its autograd graph."""
    if isinstance(env, LightingEnvironment):
        return env.as_tensors()
    mu, sharp, xi, sky = env
    return to_tensor(mu), to_tensor(sharp), to_tensor(xi), to_tensor(sky)


def build_gbuffer(act: ActivatedSurfels, cam: Camera, env=None,
                  retain_contributors: bool = False) -> GBuffer:
    """Rasterize albedo, normal, depth, alpha, and the ambient irradiance map.

    Channel buffers are the raw alpha-blended accumulations (not divided by
    alpha); ``shade`` normalizes where needed.  The ambient map splats each
    surfel's transfer-times-sky irradiance, so it requires a stage-2 model
    and a lighting environment (zeros otherwise).
    """
    attrs = {"albedo": act.albedo}
    if act.transfer is not None and env is not None:
        sky = env_tensors(env)[3]
        per_surfel_amb = ambient_irradiance(act.transfer, sky)   # [S, 3]
        attrs["ambient"] = per_surfel_amb
    out = rasterize(act, cam, attrs, with_normal=True, with_depth=True,
                    retain_contributors=retain_contributors)
    h, w = cam.height, cam.width
    ambient = out.channels.get(
        "ambient", torch.zeros(h, w, 3, dtype=DTYPE))
    gb = GBuffer(
        normal=out.channels["normal"],
        depth=out.expected_depth(),
        alpha=out.alpha,
        albedo=out.channels["albedo"],
        ambient=ambient,
        visibility=None,
        color=None,
    )
    gb.render_output = out
    return gb


def _normalized(buffer: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    return buffer / torch.clamp(alpha, min=_ALPHA_FLOOR).unsqueeze(-1)


def shade(gbuffer: GBuffer, env, bvh: BVH, cam: Camera,
          tau_fg: float = TAU_FG, shadow_offset: float = 1e-3,
          cone_half_angle: float = 0.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel color and sun shadow map from a completed G-buffer.

    Foreground (alpha > tau_fg): C = rho/pi * (I_sun + max(I_amb, 0)) with
    I_sun from the sun Gaussian lobe attenuated by ray-traced visibility.
    Background: SH sky radiance along the view ray, visibility 1.
    ``env`` is a LightingEnvironment or a (mu, sharpness, xi, sky_sh) tuple
    of tensors (kept live for trainable lighting).
    """
    mu, sharp, xi, sky = env_tensors(env)
    alpha = gbuffer.alpha
    h, w = alpha.shape
    fg = alpha.detach() > tau_fg

    albedo = _normalized(gbuffer.albedo, alpha)
    ambient = _normalized(gbuffer.ambient, alpha).clamp(min=0.0)
    nrm_len = torch.linalg.norm(gbuffer.normal, dim=-1, keepdim=True)
    normal = gbuffer.normal / torch.clamp(nrm_len, min=_ALPHA_FLOOR)

    vis = torch.ones(h, w, dtype=DTYPE)
    color = torch.zeros(h, w, 3, dtype=DTYPE)

    dirs_world = to_tensor(cam.pixel_ray_dirs_world())
    if bool(fg.any()):
        depth = gbuffer.depth[fg]
        pts = to_tensor(cam.center) + dirs_world[fg] * depth.unsqueeze(-1)
        n_fg = normal[fg]
        vis_np = sun_visibility(
            pts.detach().numpy(), xi.detach().numpy(), bvh,
            normals=n_fg.detach().numpy(), offset=shadow_offset,
            cone_half_angle=cone_half_angle)
        vis_fg = torch.from_numpy(vis_np).to(DTYPE)
        i_sun = sg_irradiance(mu, sharp, xi, n_fg, visibility=vis_fg)
        c_fg = albedo[fg] / np.pi * (i_sun + ambient[fg])
        color[fg] = c_fg
        vis[fg] = vis_fg
    bg = ~fg
    if bool(bg.any()):
        view = dirs_world[bg]
        view = view / torch.linalg.norm(view, dim=-1, keepdim=True)
        color[bg] = eval_sky(sky, view).clamp(min=0.0)
    return color, vis


def relight(act: ActivatedSurfels, cam: Camera, env, bvh: BVH,
            **shade_kwargs) -> tuple[torch.Tensor, torch.Tensor]:
    """Render the model under a substituted lighting environment."""
    gb = build_gbuffer(act, cam, env)
    return shade(gb, env, bvh, cam, **shade_kwargs)
