"""Independent reference computations anchoring the verification suite.

Everything here is deliberately implemented apart from the modules it
validates: the brute-force compositor re-derives the camera and surfel math
in world space with numpy (scipy supplies the quaternion convention), the
Monte-Carlo direct-lighting estimator integrates the rendering equation by
sampling, and visibility uses an exhaustive all-triangles intersection test.
No math helpers are shared with the checked paths beyond primitive vector
ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .camera import Camera
from .scene import LightingEnvironment

# The contribution cutoffs below are the *definition* of a surfel's pixel
# weight (mirrored by the rasterizer): 3-sigma Gaussian cutoff, 1/255
# contribution floor, 0.99 alpha ceiling, near-plane center culling.
_CUTOFF = np.exp(-4.5)
_FLOOR = 1.0 / 255.0
_CLAMP = 0.99
_PARALLEL_EPS = 1e-12


def _quat_to_mat_np(q: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternions to rotation matrices via scipy's convention."""
    from scipy.spatial.transform import Rotation

    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    xyzw = np.concatenate([q[..., 1:], q[..., :1]], axis=-1)
    return Rotation.from_quat(xyzw).as_matrix()


def reference_composite(act, cam: Camera,
                        attributes: dict[str, np.ndarray] | None = None,
                        with_normal: bool = True) -> dict[str, np.ndarray]:
    """Tiling-free per-pixel compositor over all surfels; the rasterizer's oracle.

    ``act`` is an ActivatedSurfels (tensors are detached to numpy).  Works in
    world space with a running-transmittance product — a formulation disjoint
    from the rasterizer's camera-space log-sum path.  Returns numpy buffers
    {channel: HxWxC, "alpha": HxW, "depth_sum": HxW}.
    """
    pos = act.position.detach().numpy()
    scale = act.scale.detach().numpy()
    rot = _quat_to_mat_np(act.rotation.detach().numpy())
    opacity = act.opacity.detach().numpy()
    attributes = dict(attributes or {})

    H, W = cam.height, cam.width
    center = -(cam.R.T @ cam.t)
    # Pixel-center rays from first principles: camera axes are the rows of R.
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    d_cam = np.stack([(jj - cam.cx) / cam.fx, -(ii - cam.cy) / cam.fy,
                      -np.ones_like(jj)], axis=-1)
    d_world = d_cam @ cam.R            # row-vector convention: R^T applied

    normal_w = rot[:, :, 2]
    if with_normal:
        to_surfel = pos - center[None, :]
        flip = np.sign((normal_w * to_surfel).sum(1, keepdims=True))
        attributes = {**attributes, "normal": np.where(flip > 0, -normal_w, normal_w)}

    forward = -cam.R[2]                # camera viewing axis in world coords
    depth_center = (pos - center[None, :]) @ forward
    order = np.argsort(depth_center, kind="stable")

    names = list(attributes)
    out = {n: np.zeros((H, W, attributes[n].shape[1])) for n in names}
    alpha = np.zeros((H, W))
    depth_sum = np.zeros((H, W))
    transmittance = np.ones((H, W))

    for k in order:
        if depth_center[k] <= cam.near:
            continue
        n_k = normal_w[k]
        denom = d_world @ n_k
        parallel = np.abs(denom) < _PARALLEL_EPS
        denom_safe = np.where(parallel, 1.0, denom)
        s = ((pos[k] - center) @ n_k) / denom_safe
        x_hit = center[None, None, :] + s[..., None] * d_world
        local = x_hit - pos[k]
        u = (local @ rot[k, :, 0]) / scale[k, 0]
        v = (local @ rot[k, :, 1]) / scale[k, 1]
        g = np.exp(-0.5 * (u * u + v * v))
        w = opacity[k] * g
        ok = (~parallel) & (s > cam.near) & (g >= _CUTOFF) & (w >= _FLOOR)
        w = np.where(ok, np.minimum(w, _CLAMP), 0.0)
        blend = w * transmittance
        for n in names:
            out[n] += blend[..., None] * attributes[n][k][None, None, :]
        alpha += blend
        depth_sum += blend * np.where(ok, s, 0.0)
        transmittance = transmittance * (1.0 - w)

    out["alpha"] = alpha
    out["depth_sum"] = depth_sum
    return out


# ----------------------------------------------------------- exhaustive rays
def exhaustive_any_hit(origins: np.ndarray, dirs: np.ndarray,
                       triangles: np.ndarray, t_min: float = 0.0,
                       chunk: int = 2_000_000) -> np.ndarray:
    """Any-hit test of N rays against every triangle (Moller-Trumbore).

    ``triangles`` is [T, 3, 3]; returns a bool [N] (True = occluded).  The
    barycentric bounds are inclusive, so rays through shared edges register in
    at least one adjacent triangle.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    tris = np.asarray(triangles, dtype=np.float64)
    n_rays = len(origins)
    hit = np.zeros(n_rays, dtype=bool)
    if len(tris) == 0:
        return hit
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    rows = max(1, int(chunk // max(len(tris), 1)))
    for lo in range(0, n_rays, rows):
        hi = min(lo + rows, n_rays)
        o = origins[lo:hi, None, :]
        d = dirs[lo:hi, None, :]
        pvec = np.cross(d, e2[None, :, :])
        det = (e1[None, :, :] * pvec).sum(-1)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = o - tris[None, :, 0, :]
        u = (tvec * pvec).sum(-1) * inv
        qvec = np.cross(tvec, e1[None, :, :])
        v = (d * qvec).sum(-1) * inv
        t = (e2[None, :, :] * qvec).sum(-1) * inv
        ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > t_min)
        hit[lo:hi] = ok.any(axis=1)
    return hit


# -------------------------------------------------------- Monte-Carlo lighting
def _sh_basis_np(dirs: np.ndarray) -> np.ndarray:
    """Real orthonormal SH bands 0-2 (independent spelling of the polynomials)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    return np.stack([
        np.full_like(x, 0.5 * np.sqrt(1.0 / np.pi)),
        np.sqrt(3.0 / (4.0 * np.pi)) * y,
        np.sqrt(3.0 / (4.0 * np.pi)) * z,
        np.sqrt(3.0 / (4.0 * np.pi)) * x,
        0.5 * np.sqrt(15.0 / np.pi) * x * y,
        0.5 * np.sqrt(15.0 / np.pi) * y * z,
        0.25 * np.sqrt(5.0 / np.pi) * (3.0 * z * z - 1.0),
        0.5 * np.sqrt(15.0 / np.pi) * x * z,
        0.25 * np.sqrt(15.0 / np.pi) * (x * x - y * y),
    ], axis=-1)


def _tangent_frame(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.where(np.abs(n[..., 2:3]) < 0.9, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    return t1, np.cross(n, t1)


def mc_radiance_batch(points: np.ndarray, normals: np.ndarray, albedos: np.ndarray,
                      env: LightingEnvironment, triangles: np.ndarray,
                      rng: np.random.Generator, n_sky: int = 64,
                      n_sun: int = 32, offset: float = 1e-4):
    """Vectorized MC estimate of outgoing radiance C = (rho/pi)(I_sun + I_amb).

    Splits the estimator: cosine-hemisphere sampling for the SH sky, SG
    importance sampling for the sun, both with exhaustive-mesh visibility.
    Returns (C [N, 3], standard error [N, 3]).
    """
    points = np.atleast_2d(points)
    normals = np.atleast_2d(normals)
    albedos = np.atleast_2d(albedos)
    n_pts = len(points)
    t1, t2 = _tangent_frame(normals)
    origins = points + offset * normals

    # --- sky: pdf = cos/pi  =>  I_amb = pi * mean(L_sky * V)
    u1 = rng.random((n_pts, n_sky))
    u2 = rng.random((n_pts, n_sky))
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    local = np.stack([r * np.cos(phi), r * np.sin(phi),
                      np.sqrt(np.clip(1.0 - u1, 0.0, None))], axis=-1)
    dirs_sky = (local[..., 0:1] * t1[:, None, :] + local[..., 1:2] * t2[:, None, :]
                + local[..., 2:3] * normals[:, None, :])
    basis = _sh_basis_np(dirs_sky)
    radiance = basis @ np.asarray(env.sky_sh, dtype=np.float64).T       # [N, S, 3]
    vis = ~exhaustive_any_hit(
        np.repeat(origins, n_sky, axis=0), dirs_sky.reshape(-1, 3), triangles)
    vis = vis.reshape(n_pts, n_sky, 1)
    sky_samples = np.pi * radiance * vis
    i_amb = sky_samples.mean(axis=1)
    se_amb = sky_samples.std(axis=1, ddof=1) / np.sqrt(n_sky)

    # --- sun: pdf proportional to the SG lobe  =>  SG/pdf = mu * S_full
    lam = env.sun_sharpness
    xi = np.asarray(env.sun_direction, dtype=np.float64)
    s_full = 2.0 * np.pi * (1.0 - np.exp(-2.0 * lam)) / lam
    x1, x2 = _tangent_frame(xi[None, :])
    u1 = rng.random((n_pts, n_sun))
    u2 = rng.random((n_pts, n_sun))
    cos_a = 1.0 + np.log(u1 * (1.0 - np.exp(-2.0 * lam)) + np.exp(-2.0 * lam)) / lam
    sin_a = np.sqrt(np.clip(1.0 - cos_a**2, 0.0, None))
    phi = 2.0 * np.pi * u2
    dirs_sun = (sin_a[..., None] * np.cos(phi)[..., None] * x1[None, 0]
                + sin_a[..., None] * np.sin(phi)[..., None] * x2[None, 0]
                + cos_a[..., None] * xi[None, None, :])
    cos_n = np.clip((dirs_sun * normals[:, None, :]).sum(-1), 0.0, None)
    vis_sun = ~exhaustive_any_hit(
        np.repeat(origins, n_sun, axis=0), dirs_sun.reshape(-1, 3), triangles)
    sun_scalars = cos_n * vis_sun.reshape(n_pts, n_sun)
    mean_s = sun_scalars.mean(axis=1)
    se_s = sun_scalars.std(axis=1, ddof=1) / np.sqrt(n_sun)
    mu = np.asarray(env.sun_amplitude, dtype=np.float64)
    i_sun = s_full * mean_s[:, None] * mu[None, :]
    se_sun = s_full * se_s[:, None] * mu[None, :]

    brdf = albedos / np.pi
    c_out = brdf * (i_sun + i_amb)
    se = brdf * np.sqrt(se_sun**2 + se_amb**2)
    return c_out, se


def mc_direct_lighting(point, normal, albedo, env: LightingEnvironment,
                       triangles: np.ndarray, n_samples: int,
                       rng: np.random.Generator | None = None):
    """Rendering-equation reference at one point (diffuse BRDF rho/pi).

    Splits ``n_samples`` 2:1 between sky and sun estimators; returns
    (RGB, standard error).
    """
    if n_samples < 10_000:
        raise ValueError(f"mc_direct_lighting needs >= 1e4 samples, got {n_samples}")
    rng = rng or np.random.default_rng(0)
    c, se = mc_radiance_batch(
        np.asarray(point, dtype=np.float64)[None, :],
        np.asarray(normal, dtype=np.float64)[None, :],
        np.asarray(albedo, dtype=np.float64)[None, :],
        env, triangles, rng,
        n_sky=(2 * n_samples) // 3, n_sun=n_samples // 3)
    return c[0], se[0]


# ----------------------------------------------------------- finite differences
def finite_diff(fn, params: dict[str, torch.Tensor], h: float = 1e-4,
                coords: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Central-difference gradients of ``fn(params) -> float`` per coordinate.

    ``coords`` optionally restricts each parameter to a flat-index subset
    (other entries stay NaN-free zero).  Coordinates whose perturbed
    evaluation is non-finite come back NaN, flagged rather than hidden.
    """
    grads = {}
    for name, tensor in params.items():
        flat = tensor.detach().reshape(-1)
        idx = np.arange(flat.numel()) if coords is None or name not in coords \
            else np.asarray(coords[name])
        g = np.zeros(flat.numel())
        for i in idx:
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
            f_plus = float(fn(params))
            with torch.no_grad():
                flat[i] = orig - h
            f_minus = float(fn(params))
            with torch.no_grad():
                flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * h) \
                if np.isfinite(f_plus) and np.isfinite(f_minus) else np.nan
        grads[name] = g.reshape(tuple(tensor.shape))
    return grads


# ------------------------------------------------------- synthetic scene oracle
@dataclass
class BoxSpec:
    center: tuple = (0.0, 0.0, 0.3)
    half_extents: tuple = (0.3, 0.25, 0.3)
    yaw_deg: float = 0.0
    albedo: tuple = (0.6, 0.6, 0.6)

    def rotation(self) -> np.ndarray:
        a = np.radians(self.yaw_deg)
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def corners(self) -> np.ndarray:
        h = np.asarray(self.half_extents)
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1)
                          for sz in (-1, 1)], dtype=np.float64)
        return (signs * h) @ self.rotation().T + np.asarray(self.center)


@dataclass
class SphereSpec:
    center: tuple = (0.0, 0.0, 0.4)
    radius: float = 0.35
    albedo: tuple = (0.8, 0.75, 0.3)


@dataclass
class SceneSpec:
    """Structured description of a synthetic outdoor scene."""

    plane_half: float = 3.0
    plane_albedo: tuple = (0.55, 0.50, 0.42)
    boxes: tuple = (
        BoxSpec((0.40, 0.15, 0.30), (0.30, 0.25, 0.30), 20.0, (0.70, 0.25, 0.20)),
        BoxSpec((-0.55, -0.35, 0.20), (0.22, 0.30, 0.20), -35.0, (0.20, 0.40, 0.75)),
    )
    sphere: SphereSpec | None = None
    n_lightings: int = 8
    n_views: int = 16
    width: int = 128
    height: int = 128
    focal_scale: float = 1.1          # fx = fy = focal_scale * width
    ring_radius: float = 4.2
    ring_heights: tuple = (1.8, 2.6)
    target: tuple = (0.0, 0.0, 0.25)
    sun_elevations_deg: tuple = (20.0, 35.0, 50.0, 65.0)
    sun_azimuth0_deg: float = 10.0
    sun_sharpness0: float = 250.0
    sky_base: tuple = (0.18, 0.24, 0.38)
    sky_gradient: tuple = (0.10, 0.12, 0.16)
    n_sky_samples: int = 256
    n_sun_samples: int = 64
    n_heldout: int = 2
    n_heldout_views: int = 4
    dynamic_frame: bool = True
    points_noise: float = 0.02        # jitter of the emitted init point cloud
    seed: int = 0


def _box_triangles(box: BoxSpec) -> np.ndarray:
    c = box.corners()
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
             (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, cc, d in quads:
        tris.append([c[a], c[b], c[cc]])
        tris.append([c[a], c[cc], c[d]])
    return np.asarray(tris)


def _plane_triangles(half: float) -> np.ndarray:
    v = np.array([[-half, -half, 0.0], [half, -half, 0.0],
                  [half, half, 0.0], [-half, half, 0.0]])
    return np.asarray([[v[0], v[1], v[2]], [v[0], v[2], v[3]]])


def _sphere_triangles(sphere: SphereSpec, subdivisions: int = 4) -> np.ndarray:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    vlist = list(verts)
    for _ in range(subdivisions):
        cache: dict = {}
        nxt = []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = vlist[a] + vlist[b]
                cache[key] = len(vlist)
                vlist.append(m / np.linalg.norm(m))
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nxt
    v = np.asarray(vlist) * sphere.radius + np.asarray(sphere.center)
    return v[np.asarray(faces, dtype=np.int64)]


def scene_triangles(spec: SceneSpec) -> np.ndarray:
    parts = [_plane_triangles(spec.plane_half)]
    parts += [_box_triangles(b) for b in spec.boxes]
    if spec.sphere is not None:
        parts.append(_sphere_triangles(spec.sphere))
    return np.concatenate(parts)


def _intersect_scene(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Analytic closest-hit over the primitives for rays origin + t * dirs.

    Returns (t, normal, albedo, hit) with t = +inf where nothing is hit.
    Independent per-primitive math (plane equation, box slabs, sphere
    quadratic); the triangle set is only used for visibility sampling.
    """
    flat = dirs.reshape(-1, 3)
    n_rays = len(flat)
    best_t = np.full(n_rays, np.inf)
    best_n = np.zeros((n_rays, 3))
    best_a = np.zeros((n_rays, 3))

    # ground plane z = 0, |x|,|y| <= half
    dz = flat[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_pl = np.where(np.abs(dz) > 1e-15, -origin[2] / dz, np.inf)
    hit_xy = origin[None, :2] + t_pl[:, None] * flat[:, :2]
    ok = (t_pl > 1e-9) & (np.abs(hit_xy) <= spec.plane_half).all(axis=1)
    upd = ok & (t_pl < best_t)
    best_t[upd] = t_pl[upd]
    best_n[upd] = [0.0, 0.0, 1.0]
    best_a[upd] = spec.plane_albedo

    for box in spec.boxes:
        rot = box.rotation()
        o_l = (origin - np.asarray(box.center)) @ rot
        d_l = flat @ rot
        h = np.asarray(box.half_extents)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(np.abs(d_l) > 1e-15, 1.0 / d_l, np.inf)
        t1 = (-h - o_l) * inv
        t2 = (h - o_l) * inv
        tn = np.minimum(t1, t2)
        tf = np.maximum(t1, t2)
        # parallel rays: keep the slab unconstrained only when inside it
        par = np.abs(d_l) <= 1e-15
        inside = np.abs(o_l) <= h
        tn = np.where(par, np.where(inside, -np.inf, np.inf), tn)
        tf = np.where(par, np.where(inside, np.inf, -np.inf), tf)
        t_near = tn.max(axis=1)
        t_far = tf.min(axis=1)
        axis = tn.argmax(axis=1)
        ok = (t_near <= t_far) & (t_near > 1e-9)
        upd = ok & (t_near < best_t)
        n_local = np.zeros((n_rays, 3))
        rows = np.arange(n_rays)
        n_local[rows, axis] = -np.sign(d_l[rows, axis])
        best_t[upd] = t_near[upd]
        best_n[upd] = n_local[upd] @ rot.T
        best_a[upd] = box.albedo

    if spec.sphere is not None:
        sc = np.asarray(spec.sphere.center)
        oc = origin - sc
        a = (flat * flat).sum(axis=1)
        b = (flat * oc).sum(axis=1)
        c0 = oc @ oc - spec.sphere.radius**2
        disc = b * b - a * c0
        with np.errstate(invalid="ignore"):
            t_s = (-b - np.sqrt(np.maximum(disc, 0.0))) / a
        ok = (disc > 0) & (t_s > 1e-9)
        upd = ok & (t_s < best_t)
        pts = origin + t_s[upd, None] * flat[upd]
        best_t[upd] = t_s[upd]
        best_n[upd] = (pts - sc) / spec.sphere.radius
        best_a[upd] = spec.sphere.albedo

    hit = np.isfinite(best_t)
    shape = dirs.shape[:-1]
    return (best_t.reshape(shape), best_n.reshape(shape + (3,)),
            best_a.reshape(shape + (3,)), hit.reshape(shape))


def _sky_coefficients(spec: SceneSpec, scale: float) -> np.ndarray:
    """Order-2 SH with radiance base + gradient * dir_z, nonnegative all over."""
    base = np.asarray(spec.sky_base) * scale
    grad = np.asarray(spec.sky_gradient) * scale
    sky = np.zeros((3, 9))
    sky[:, 0] = base / 0.28209479177387814
    sky[:, 2] = grad / 0.4886025119029199
    return sky


def scene_environments(spec: SceneSpec) -> tuple[list[LightingEnvironment],
                                                 list[LightingEnvironment]]:
    """Training and held-out lighting environments for a scene spec."""
    from .lighting import default_sun_curve

    curve = default_sun_curve()

    def make_env(az_deg: float, el_deg: float, sharp: float, sky_scale: float):
        az, el = np.radians(az_deg), np.radians(el_deg)
        xi = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                       np.sin(el)])
        mu = curve(np.array([el]))[0]
        return LightingEnvironment(sun_amplitude=mu, sun_sharpness=sharp,
                                   sun_direction=xi,
                                   sky_sh=_sky_coefficients(spec, sky_scale))

    envs = []
    for k in range(spec.n_lightings):
        el = spec.sun_elevations_deg[k % len(spec.sun_elevations_deg)]
        az = spec.sun_azimuth0_deg + 360.0 * k / spec.n_lightings
        envs.append(make_env(az, el, spec.sun_sharpness0 + 40.0 * k,
                             0.9 + 0.025 * k))
    heldout = []
    for k in range(spec.n_heldout):
        heldout.append(make_env(77.0 + 128.0 * k, 28.0 + 27.0 * k,
                                spec.sun_sharpness0 + 150.0 + 60.0 * k,
                                1.0 + 0.05 * k))
    return envs, heldout


def scene_cameras(spec: SceneSpec) -> list[Camera]:
    from .camera import look_at

    cams = []
    f = spec.focal_scale * spec.width
    for k in range(spec.n_views):
        az = 2.0 * np.pi * k / spec.n_views
        eye = (spec.ring_radius * np.cos(az), spec.ring_radius * np.sin(az),
               spec.ring_heights[k % len(spec.ring_heights)])
        cams.append(look_at(eye=eye, target=spec.target, fx=f, fy=f,
                            cx=spec.width / 2.0, cy=spec.height / 2.0,
                            width=spec.width, height=spec.height))
    return cams


def scene_surfel_samples(spec: SceneSpec, plane_n: int = 24, box_face_n: int = 5,
                         sphere_n: int = 220):
    """Ground-truth surface samples (positions, normals, albedos)."""
    pts, nrms, albs = [], [], []
    g = np.linspace(-1.0, 1.0, plane_n) * min(spec.plane_half, 2.2)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    n_pl = plane_n * plane_n
    pts.append(np.stack([xx.ravel(), yy.ravel(), np.zeros(n_pl)], axis=1))
    nrms.append(np.tile([[0.0, 0.0, 1.0]], (n_pl, 1)))
    albs.append(np.tile(spec.plane_albedo, (n_pl, 1)))
    for box in spec.boxes:
        rot = box.rotation()
        h = np.asarray(box.half_extents)
        for axis in range(3):
            for sign in (-1.0, 1.0):
                if axis == 2 and sign < 0:
                    continue                      # bottom face invisible
                u_ax, v_ax = [a for a in range(3) if a != axis]
                gu = np.linspace(-0.85, 0.85, box_face_n) * h[u_ax]
                gv = np.linspace(-0.85, 0.85, box_face_n) * h[v_ax]
                uu, vv = np.meshgrid(gu, gv, indexing="ij")
                local = np.zeros((box_face_n * box_face_n, 3))
                local[:, axis] = sign * h[axis]
                local[:, u_ax] = uu.ravel()
                local[:, v_ax] = vv.ravel()
                n_local = np.zeros(3)
                n_local[axis] = sign
                pts.append(local @ rot.T + np.asarray(box.center))
                nrms.append(np.tile(n_local @ rot.T, (len(local), 1)))
                albs.append(np.tile(box.albedo, (len(local), 1)))
    if spec.sphere is not None:
        i = np.arange(sphere_n)
        ga = np.pi * (3.0 - np.sqrt(5.0))
        z = 1.0 - 2.0 * (i + 0.5) / sphere_n
        r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
        d = np.stack([r * np.cos(ga * i), r * np.sin(ga * i), z], axis=1)
        pts.append(np.asarray(spec.sphere.center) + spec.sphere.radius * d)
        nrms.append(d)
        albs.append(np.tile(spec.sphere.albedo, (sphere_n, 1)))
    return np.concatenate(pts), np.concatenate(nrms), np.concatenate(albs)


def box_shadow_polygon(box: BoxSpec, sun_dir: np.ndarray) -> np.ndarray:
    """Convex hull (x, y) of the box shadow cast onto the z=0 plane."""
    from scipy.spatial import ConvexHull

    xi = np.asarray(sun_dir, dtype=np.float64)
    if xi[2] <= 1e-9:
        raise ValueError("sun must be above the horizon")
    corners = box.corners()
    proj = corners[:, :2] - (corners[:, 2] / xi[2])[:, None] * xi[:2]
    hull = ConvexHull(proj)
    return proj[hull.vertices]


def make_scene(spec: SceneSpec, out_dir=None, rng: np.random.Generator | None = None):
    """Generate the full synthetic dataset: MC images, exact auxiliaries, GT.

    Returns a dict with frames, lighting, triangles, and ground-truth maps;
    also writes the standard dataset layout plus a gt/ bundle when
    ``out_dir`` is given.
    """
    import cv2 as _cv2

    from .losses import canny_nonedge_mask
    from .scene import (LABEL_DYNAMIC, LABEL_SKY, LABEL_STATIC,
                        TrainingFrame)

    rng = rng or np.random.default_rng(spec.seed)
    tris = scene_triangles(spec)
    envs, heldout = scene_environments(spec)
    cams = scene_cameras(spec)
    frame_env = [k % spec.n_lightings for k in range(spec.n_views)]

    frames = []
    gt_maps = {"albedo": {}, "depth": {}, "shadow": {}}
    for k, cam in enumerate(cams):
        name = f"frame_{k:04d}"
        env = envs[frame_env[k]]
        dirs = cam.pixel_ray_dirs_world()
        t, n_map, a_map, hit = _intersect_scene(spec, cam.center, dirs)
        t_safe = np.where(hit, t, 0.0)
        pts = cam.center + t_safe[..., None] * dirs

        image = np.zeros((spec.height, spec.width, 3))
        # sky pixels: SH radiance along the (normalized) view ray
        view = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
        sky_rad = _sh_basis_np(view) @ env.sky_sh.T
        image[~hit] = np.clip(sky_rad[~hit], 0.0, None)

        idx = np.nonzero(hit)
        c_mc, _ = mc_radiance_batch(pts[idx], n_map[idx], a_map[idx], env, tris,
                                    rng, n_sky=spec.n_sky_samples,
                                    n_sun=spec.n_sun_samples)
        image[idx] = c_mc

        # exact hard-shadow map for the frame's sun
        vis = np.ones_like(t, dtype=bool)
        vis[idx] = ~exhaustive_any_hit(
            pts[idx] + 1e-5 * n_map[idx], np.broadcast_to(env.sun_direction,
                                                          (len(idx[0]), 3)),
            tris)

        mask = np.where(hit, LABEL_STATIC, LABEL_SKY).astype(np.uint8)
        if spec.dynamic_frame and k == 0:
            yy, xx = np.mgrid[0:spec.height, 0:spec.width]
            blob = ((yy - 0.32 * spec.height) ** 2 + (xx - 0.62 * spec.width) ** 2
                    <= (0.09 * spec.width) ** 2)
            mask[blob] = LABEL_DYNAMIC
            image[blob] = (0.75, 0.15, 0.10)

        from .datasets import srgb_encode
        nonedge = canny_nonedge_mask(srgb_encode(image))
        frames.append(TrainingFrame(
            name=name, image=torch.tensor(image, dtype=torch.float64),
            camera=cam, semantic_mask=mask, nonedge_mask=nonedge,
            prior_normals=torch.tensor(np.where(hit[..., None], n_map, 0.0)),
            normal_valid=torch.tensor(hit & (mask == LABEL_STATIC)),
            embedding_index=k, lighting=env))
        gt_maps["albedo"][name] = np.where(hit[..., None], a_map, 0.0)
        gt_maps["depth"][name] = np.where(hit, t, 0.0)
        gt_maps["shadow"][name] = (~vis) & hit

    # held-out relighting ground truth on the first few views
    relight_gt = {}
    for j, env in enumerate(heldout):
        for k in range(min(spec.n_heldout_views, spec.n_views)):
            cam = cams[k]
            dirs = cam.pixel_ray_dirs_world()
            t, n_map, a_map, hit = _intersect_scene(spec, cam.center, dirs)
            t_safe = np.where(hit, t, 0.0)
            pts = cam.center + t_safe[..., None] * dirs
            image = np.zeros((spec.height, spec.width, 3))
            view = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
            image[~hit] = np.clip((_sh_basis_np(view) @ env.sky_sh.T)[~hit], 0.0, None)
            idx = np.nonzero(hit)
            c_mc, _ = mc_radiance_batch(pts[idx], n_map[idx], a_map[idx], env,
                                        tris, rng, n_sky=spec.n_sky_samples,
                                        n_sun=spec.n_sun_samples)
            image[idx] = c_mc
            relight_gt[f"heldout_{j}/frame_{k:04d}"] = image

    sp, sn, sa = scene_surfel_samples(spec)
    lo = tris.reshape(-1, 3).min(axis=0)
    hi = tris.reshape(-1, 3).max(axis=0)
    result = {
        "spec": spec, "frames": frames, "environments": envs,
        "heldout": heldout, "frame_env_index": frame_env,
        "triangles": tris, "surfel_points": sp, "surfel_normals": sn,
        "surfel_albedos": sa, "aabb": np.stack([lo, hi]),
        "gt": gt_maps, "relight_gt": relight_gt,
    }
    if out_dir is not None:
        _write_scene_dataset(result, out_dir)
    return result


def _write_scene_dataset(result: dict, out_dir) -> None:
    import json
    from dataclasses import asdict
    from pathlib import Path

    import cv2 as _cv2

    from .datasets import save_dataset, save_envmap, save_image
    from .lighting import render_environment
    from .scene import SurfelModel, save_lighting

    out = Path(out_dir)
    save_dataset(out, result["frames"], image_format="tiff", aabb=result["aabb"])
    gt = out / "gt"
    for sub in ("albedo", "depth", "shadow", "relight"):
        (gt / sub).mkdir(parents=True, exist_ok=True)
    for name, img in result["gt"]["albedo"].items():
        save_image(gt / "albedo" / f"{name}.tiff", img)
    for name, d in result["gt"]["depth"].items():
        _cv2.imwrite(str(gt / "depth" / f"{name}.tiff"), d.astype(np.float32))
    for name, s in result["gt"]["shadow"].items():
        _cv2.imwrite(str(gt / "shadow" / f"{name}.png"),
                     (s * 255).astype(np.uint8))
    for key, img in result["relight_gt"].items():
        p = gt / "relight" / key
        p.parent.mkdir(parents=True, exist_ok=True)
        save_image(p.with_suffix(".tiff"), img)

    env_by_frame = {fr.name: fr.lighting for fr in result["frames"]}
    save_lighting(gt / "lighting.json", env_by_frame)
    save_lighting(gt / "heldout_lighting.json",
                  {f"heldout_{j}": e for j, e in enumerate(result["heldout"])})
    (out / "envmaps").mkdir(exist_ok=True)
    for j, env in enumerate(result["heldout"]):
        save_envmap(out / "envmaps" / f"heldout_{j}.hdr",
                    np.asarray(render_environment(env, 128, 256)))

    rng = np.random.default_rng(result["spec"].seed + 1)
    model = SurfelModel.from_points(result["surfel_points"],
                                    colors=result["surfel_albedos"],
                                    normals=result["surfel_normals"],
                                    rng=rng)
    model.save(gt / "surfels.ply")

    # Initialization point cloud (the stand-in for an SfM sparse cloud):
    # jittered surface positions with flat mid-gray colors, no normals.
    from .datasets import save_points
    noisy = result["surfel_points"] + rng.normal(
        scale=result["spec"].points_noise, size=result["surfel_points"].shape)
    save_points(out / "points.ply", noisy,
                np.full_like(noisy, 0.5))
    spec_dict = asdict(result["spec"])
    spec_dict["sphere"] = asdict(result["spec"].sphere) \
        if result["spec"].sphere is not None else None
    (gt / "scene.json").write_text(json.dumps({
        "scene": spec_dict,
        "aabb": result["aabb"].tolist(),
        "frame_env_index": result["frame_env_index"],
    }, indent=2, default=list))
