"""Spherical lighting math.

Covers the real spherical-harmonic basis (bands 0-2), SH projection, the
precomputed-radiance-transfer dot product, spherical-Gaussian sun algebra
including the hemispherical cosine integral, the physically fitted sun-color
prior curve, and environment-map fitting for relighting.

Band ordering of every 9-vector, fixed across the code base::

    [ (0,0), (1,-1), (1,0), (1,1), (2,-2), (2,-1), (2,0), (2,1), (2,2) ]

with the standard real orthonormal basis: Y00 = 0.2821, Y1m = 0.4886 * (y, z, x),
Y2m = (1.0925*xy, 1.0925*yz, 0.3154*(3z^2-1), 1.0925*xz, 0.5463*(x^2-y^2)).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .common import DTYPE, to_tensor
from .scene import LightingEnvironment

# Orthonormal real SH constants, bands 0-2.
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
       1.0925484305920792, 0.5462742152960396)

# Zonal coefficients of the clamped cosine max(cos, 0) about +z.
_COS_ZONAL = (0.8862269254527580,    # sqrt(pi)/2
              1.0233267079464885,    # sqrt(pi/3)
              0.4954159619920647)    # sqrt(5*pi)/8
# Convolution weights sqrt(4*pi / (2l + 1)) used to rotate zonal expansions.
_ZONAL_ROT = (3.5449077018110318, 2.0466534158929770, 1.5853309190424045)


def eval_sh_basis(dirs: torch.Tensor, validate: bool = True) -> torch.Tensor:
    """Real orthonormal SH bands 0-2 at unit directions; shape [..., 9]."""
    dirs = to_tensor(dirs)
    if validate:
        norms = dirs.norm(dim=-1)
        bad = (norms - 1.0).abs() > 1e-6
        if bad.any():
            worst = norms[bad].flatten()[0].item()
            raise ValueError(f"eval_sh_basis requires unit directions (|dir| = {worst:.8f})")
    x, y, z = dirs.unbind(-1)
    one = torch.ones_like(x)
    return torch.stack([
        _C0 * one,
        _C1 * y, _C1 * z, _C1 * x,
        _C2[0] * x * y, _C2[1] * y * z, _C2[2] * (3 * z * z - 1),
        _C2[3] * x * z, _C2[4] * (x * x - y * y),
    ], dim=-1)


def fibonacci_sphere(n: int) -> np.ndarray:
    """Quasi-uniform unit directions on the sphere (spherical Fibonacci set)."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def project_to_sh(f, n_samples: int) -> np.ndarray:
    """Project a direction-indexed sampler onto SH bands 0-2.

    ``f`` maps an [N, 3] array of unit directions to [N] or [N, C] values;
    returns a 9-vector or a [C, 9] matrix of coefficients.
    """
    if n_samples < 100:
        raise ValueError(f"project_to_sh needs >= 100 samples, got {n_samples}")
    dirs = fibonacci_sphere(n_samples)
    vals = np.asarray(f(dirs), dtype=np.float64)
    basis = eval_sh_basis(to_tensor(dirs), validate=False).numpy()
    weight = 4.0 * np.pi / n_samples
    if vals.ndim == 1:
        return weight * basis.T @ vals
    return weight * (vals.T @ basis)


def ambient_irradiance(transfer: torch.Tensor, sky_sh: torch.Tensor) -> torch.Tensor:
    """PRT dot product: per-channel <t, l_c>.

    ``transfer`` is [..., 9], ``sky_sh`` is [..., 3, 9]; returns [..., 3].
    The raw dot product may dip negative; clamping happens at the shading
    stage so the sign information stays observable here.
    """
    return torch.einsum("...j,...cj->...c", to_tensor(transfer), to_tensor(sky_sh))


def clamped_cosine_sh(normals: torch.Tensor) -> torch.Tensor:
    """Order-2 SH expansion of max(dot(omega, n), 0) about each normal.

    A zonal expansion rotated to axis n: coeff_lm = sqrt(4pi/(2l+1)) * c_l * Y_lm(n).
    """
    basis = eval_sh_basis(normals, validate=False)
    scale = torch.tensor(
        [_ZONAL_ROT[0] * _COS_ZONAL[0]] +
        [_ZONAL_ROT[1] * _COS_ZONAL[1]] * 3 +
        [_ZONAL_ROT[2] * _COS_ZONAL[2]] * 5, dtype=basis.dtype)
    return basis * scale


def eval_sky(sky_sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Sky radiance along unit directions: [..., 3] from SH coefficients [3, 9]."""
    basis = eval_sh_basis(dirs, validate=False)
    return torch.einsum("...j,cj->...c", basis, to_tensor(sky_sh))


# ------------------------------------------------------------------ SG algebra
def eval_sg(mu: torch.Tensor, sharp: torch.Tensor, xi: torch.Tensor,
            nu: torch.Tensor) -> torch.Tensor:
    """Spherical Gaussian mu * exp(lambda * (dot(nu, xi) - 1)); nu is [..., 3]."""
    mu, xi, nu = to_tensor(mu), to_tensor(xi), to_tensor(nu)
    sharp = to_tensor(sharp)
    cos = (nu * xi).sum(-1, keepdim=True)
    return mu * torch.exp(sharp * (cos - 1.0))


def sg_sphere_integral(mu, sharp):
    """Closed form of the SG integral over the full sphere."""
    mu = np.asarray(mu, dtype=np.float64)
    sharp = float(sharp)
    return mu * 2.0 * np.pi * (1.0 - np.exp(-2.0 * sharp)) / sharp


def sg_cosine_integral(sharp: torch.Tensor, cos_angle: torch.Tensor,
                       n_nodes: int = 64) -> torch.Tensor:
    """Hemispherical cosine integral of a unit-amplitude SG lobe.

    Computes A(lambda, c) = ∫ exp(lambda*(dot(omega, xi)-1)) * max(dot(omega, n), 0) domega
    where c = dot(xi, n), by reducing the sphere integral to 1-D: writing
    x = dot(omega, xi), the inner azimuthal integral of the clamped cosine has
    the closed form

        K(x, c) = 2*pi*a                      if a >= b
                = 0                           if a <= -b
                = 2*(a*phi0 + b*sin(phi0))    otherwise, phi0 = arccos(-a/b)

    with a = x*c and b = sqrt(1-x^2)*sqrt(1-c^2).  The remaining 1-D integral
    of exp(lambda*(x-1)) * K(x, c) over the lobe's support [1 - 40/lambda, 1]
    is evaluated with fixed-order Gauss-Legendre quadrature.  Smooth in both
    arguments, so gradients flow to the sun sharpness and direction.
    """
    sharp = to_tensor(sharp)
    cos_angle = to_tensor(cos_angle)
    sharp, cos_angle = torch.broadcast_tensors(sharp, cos_angle)
    shape = sharp.shape
    lam = sharp.reshape(-1, 1).clamp_min(1e-6)
    c = cos_angle.reshape(-1, 1).clamp(-1.0, 1.0)

    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    t = torch.tensor(nodes, dtype=lam.dtype)          # [n], on [-1, 1]
    w = torch.tensor(weights, dtype=lam.dtype)

    x0 = (1.0 - 40.0 / lam).clamp_min(-1.0)           # integrand ~ e^-40 below
    half = 0.5 * (1.0 - x0)
    x = 0.5 * (1.0 + x0) + half * t                   # [B, n]

    a = x * c
    sin_x = torch.sqrt((1.0 - x * x).clamp_min(0.0))
    sin_c = torch.sqrt((1.0 - c * c).clamp_min(0.0))
    b = sin_x * sin_c
    # arccos argument clamped slightly inside [-1, 1]: keeps the unselected
    # torch.where branch finite so no NaN leaks into the gradient.
    ratio = (-a / b.clamp_min(1e-300)).clamp(-1.0 + 1e-12, 1.0 - 1e-12)
    phi0 = torch.arccos(ratio)
    partial = 2.0 * (a * phi0 + b * torch.sin(phi0))
    kernel = torch.where(a >= b, 2.0 * np.pi * a,
                         torch.where(a <= -b, torch.zeros_like(a), partial))
    integrand = torch.exp(lam * (x - 1.0)) * kernel
    return (half * (integrand * w).sum(-1, keepdim=True)).reshape(shape)


def sg_irradiance(env_or_mu, sharp=None, xi=None, normal=None, visibility=None,
                  n_nodes: int = 64) -> torch.Tensor:
    """Sun irradiance V * mu * A(lambda, dot(xi, n)) at surface normals.

    Accepts either a :class:`LightingEnvironment` plus (normal, visibility) or
    the raw tensors (mu, sharp, xi, normal, visibility).  ``normal`` is
    [..., 3]; ``visibility`` broadcasts against [...]; returns [..., 3].
    Visibility is factored out along the lobe axis (one query per point),
    justified by the sun's high sharpness.
    """
    if isinstance(env_or_mu, LightingEnvironment):
        mu, sharp_t, xi_t, _ = env_or_mu.as_tensors()
    else:
        mu, sharp_t, xi_t = to_tensor(env_or_mu), to_tensor(sharp), to_tensor(xi)
    normal = to_tensor(normal)
    cos = (normal * xi_t).sum(-1)
    amp = sg_cosine_integral(sharp_t, cos, n_nodes=n_nodes)
    if visibility is not None:
        amp = amp * to_tensor(visibility)
    return amp.unsqueeze(-1) * mu


def sun_elevation(xi: torch.Tensor, up=(0.0, 0.0, 1.0)) -> torch.Tensor:
    """Elevation angle of a (batch of) sun direction(s) above the horizon.

    The dot product is clamped a hair inside [-1, 1]: asin has an infinite
    derivative at the poles, and an optimizer sitting exactly at the zenith
    would otherwise receive non-finite gradients.
    """
    xi = to_tensor(xi)
    up_t = to_tensor(up)
    return torch.asin((xi * up_t).sum(-1).clamp(-1.0 + 1e-9, 1.0 - 1e-9))


# ------------------------------------------------------- sun-color prior curve
# Single-scattering atmosphere constants (sea-level scattering coefficients,
# exponential density falloffs, spherical shell geometry).
_EARTH_RADIUS = 6360e3
_ATMOS_RADIUS = 6420e3
_RAYLEIGH_H = 8000.0
_MIE_H = 1200.0
_BETA_RAYLEIGH = np.array([5.8e-6, 13.5e-6, 33.1e-6])
_BETA_MIE_EXT = 21e-6 * 1.1
# Top-of-atmosphere sun radiance in scene units, scaled so that typical
# mid-elevation sun irradiance lands 2-3x above sky irradiance.
_SUN_TOP = np.array([60.0, 58.0, 55.0])


def atmosphere_sun_radiance(theta, n_steps: int = 64) -> np.ndarray:
    """Transmitted direct sun radiance at ground for elevation(s) theta.

    Beer-Lambert extinction through a spherical Rayleigh+Mie atmosphere,
    integrated numerically along the view ray.  Returns [..., 3].
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    mu_z = np.sin(theta)                       # cosine of the zenith angle
    horiz = np.cos(theta)
    # Ray from the ground point (0, 0, Re) toward the sun; distance to the
    # atmosphere top sphere solves |o + t d| = Ra.
    b = _EARTH_RADIUS * mu_z
    disc = b * b + (_ATMOS_RADIUS**2 - _EARTH_RADIUS**2)
    t_top = -b + np.sqrt(disc)
    dt = t_top / n_steps
    s = (np.arange(n_steps, dtype=np.float64) + 0.5)[None, :] * dt[:, None]
    height = np.sqrt(
        (s * horiz[:, None]) ** 2 + (_EARTH_RADIUS + s * mu_z[:, None]) ** 2
    ) - _EARTH_RADIUS
    dens_r = np.exp(-height / _RAYLEIGH_H).sum(1) * dt
    dens_m = np.exp(-height / _MIE_H).sum(1) * dt
    tau = _BETA_RAYLEIGH[None, :] * dens_r[:, None] + _BETA_MIE_EXT * dens_m[:, None]
    out = _SUN_TOP[None, :] * np.exp(-tau)
    return out if out.shape[0] > 1 else out[0]


@dataclass
class SunColorCurve:
    """Piecewise-cubic fit of log sun radiance vs elevation, per channel.

    Fitting in log space keeps the relative error bounded across the several
    decades between horizon and zenith; evaluation exponentiates, so the curve
    is continuous and componentwise positive by construction.
    """

    breaks: np.ndarray        # [P+1] interval edges over [0, pi/2]
    coeffs: np.ndarray        # [4, P, 3] cubic coefficients of log radiance

    def __call__(self, theta) -> np.ndarray:
        return self.eval_torch(to_tensor(theta)).numpy()

    def eval_torch(self, theta: torch.Tensor) -> torch.Tensor:
        """Differentiable evaluation; theta [...,] -> RGB [..., 3]."""
        theta = to_tensor(theta)
        lo, hi = float(self.breaks[0]), float(self.breaks[-1])
        if bool((theta.detach() < lo - 1e-9).any() or (theta.detach() > hi + 1e-9).any()):
            warnings.warn("sun elevation outside [0, pi/2]; clamped", stacklevel=2)
        th = theta.clamp(lo, hi)
        breaks = torch.tensor(self.breaks, dtype=th.dtype)
        idx = (torch.searchsorted(breaks, th.detach().reshape(-1), right=True) - 1)
        idx = idx.clamp(0, len(self.breaks) - 2)
        coeffs = torch.tensor(self.coeffs, dtype=th.dtype)      # [4, P, 3]
        local = (th.reshape(-1) - breaks[idx]).unsqueeze(-1)    # [N, 1]
        acc = coeffs[0, idx]
        for k in range(1, 4):
            acc = acc * local + coeffs[k, idx]
        return torch.exp(acc).reshape(*theta.shape, 3)

    def to_dict(self) -> dict:
        return {"breaks": self.breaks.tolist(), "coeffs": self.coeffs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SunColorCurve":
        return cls(breaks=np.asarray(d["breaks"]), coeffs=np.asarray(d["coeffs"]))


def fit_sun_color_curve(n_grid: int = 64,
                        knots=(0.03, 0.09, 0.22, 0.5)) -> SunColorCurve:
    """Fit the prior curve to the atmosphere oracle on an elevation grid.

    Least-squares cubic spline (4 interior knots) per channel in log space;
    knots cluster near the horizon where extinction varies fastest.
    """
    from scipy.interpolate import LSQUnivariateSpline, PPoly

    theta = np.linspace(0.0, np.pi / 2, n_grid)
    radiance = atmosphere_sun_radiance(theta)
    polys = [
        PPoly.from_spline(
            LSQUnivariateSpline(theta, np.log(radiance[:, ch]),
                                t=np.asarray(knots), k=3)._eval_args)
        for ch in range(3)
    ]
    # All channels share break points (same knots); PPoly.from_spline repeats
    # the boundary knots, leaving zero-length intervals to drop.
    breaks = polys[0].x
    nz = np.diff(breaks) > 0
    coeffs = np.stack([p.c for p in polys], axis=-1)      # [4, P_all, 3]
    return SunColorCurve(breaks=np.concatenate([breaks[:-1][nz], breaks[-1:]]),
                         coeffs=coeffs[:, nz, :])


_DEFAULT_CURVE: SunColorCurve | None = None


def default_sun_curve() -> SunColorCurve:
    global _DEFAULT_CURVE
    if _DEFAULT_CURVE is None:
        _DEFAULT_CURVE = fit_sun_color_curve()
    return _DEFAULT_CURVE


def sun_color_prior(theta) -> np.ndarray:
    """RGB target amplitude for a sun at elevation theta (radians)."""
    return default_sun_curve()(theta)


# ------------------------------------------------------- environment map fitting
def latlong_dirs(height: int, width: int) -> np.ndarray:
    """Unit directions of lat-long texel centers; row 0 is the +z (up) pole."""
    v = (np.arange(height) + 0.5) / height
    u = (np.arange(width) + 0.5) / width
    polar = v * np.pi
    azim = u * 2.0 * np.pi
    sp = np.sin(polar)[:, None]
    return np.stack([
        sp * np.cos(azim)[None, :],
        sp * np.sin(azim)[None, :],
        np.broadcast_to(np.cos(polar)[:, None], (height, width)),
    ], axis=-1)


def latlong_solid_angles(height: int, width: int) -> np.ndarray:
    """Per-texel solid angles (sum = 4*pi)."""
    v = (np.arange(height) + 0.5) / height
    w = np.sin(v * np.pi) * (np.pi / height) * (2.0 * np.pi / width)
    return np.broadcast_to(w[:, None], (height, width))


def render_environment(env: LightingEnvironment, height: int, width: int) -> np.ndarray:
    """Re-render an environment (SG sun + SH sky) to a lat-long map."""
    dirs = to_tensor(latlong_dirs(height, width))
    mu, sharp, xi, sky = env.as_tensors()
    sg = eval_sg(mu, sharp, xi, dirs)
    sh = eval_sky(sky, dirs)
    return (sg + sh).numpy()


def fit_environment(envmap: np.ndarray, default_sharpness: float = 50.0) -> LightingEnvironment:
    """Decompose a lat-long HDR map into an SG sun plus SH sky.

    The sun direction is the luminance-weighted centroid of the brightest
    region; (mu, lambda) come from a log-linear least-squares fit around the
    lobe after background subtraction; the sky SH is the projection of the
    residual after removing the fitted SG.
    """
    envmap = np.asarray(envmap, dtype=np.float64)
    if envmap.ndim != 3 or envmap.shape[2] != 3:
        raise ValueError("environment map must be HxWx3")
    h, w = envmap.shape[:2]
    dirs = latlong_dirs(h, w)
    omega = latlong_solid_angles(h, w)
    lum = envmap @ np.array([0.2126, 0.7152, 0.0722])
    peak = lum.max()
    up = np.array([0.0, 0.0, 1.0])

    if peak <= 0.0:
        return LightingEnvironment(np.zeros(3), default_sharpness, up, np.zeros((3, 9)))

    # Sun direction: centroid of the brightest decile of the peak.
    sel = lum >= 0.9 * peak
    weights = (lum * omega)[sel]
    xi = (dirs[sel] * weights[:, None]).sum(0)
    norm = np.linalg.norm(xi)
    xi = up.copy() if norm < 1e-12 else xi / norm

    # Background level (the SG lobe covers a small solid angle, so the median
    # over the sphere estimates the ambient floor robustly).
    background = np.median(envmap.reshape(-1, 3), axis=0)

    # Log-linear fit of mu, lambda on the lobe neighborhood.
    cos = dirs @ xi
    lobe = (lum >= 0.05 * peak) & (cos > 0.0)
    resid = np.clip(envmap[lobe] - background[None, :], 1e-9, None)
    n_px = resid.shape[0]
    if n_px >= 4 and np.ptp(cos[lobe]) > 1e-9:
        # Rows: log val = log mu_c + lambda * (cos - 1), channels stacked.
        y = np.log(resid).T.reshape(-1)
        a = np.zeros((3 * n_px, 4))
        for ch in range(3):
            a[ch * n_px:(ch + 1) * n_px, ch] = 1.0
        a[:, 3] = np.tile(cos[lobe] - 1.0, 3)
        sol, *_ = np.linalg.lstsq(a, y, rcond=None)
        mu = np.exp(sol[:3])
        sharp = float(sol[3])
        if sharp <= 1.0 or not np.isfinite(sharp):
            mu = np.zeros(3)
            sharp = default_sharpness
    else:
        mu = np.zeros(3)
        sharp = default_sharpness

    sg_map = eval_sg(to_tensor(mu), torch.tensor(sharp, dtype=DTYPE),
                     to_tensor(xi), to_tensor(dirs)).numpy()
    residual = envmap - sg_map
    basis = eval_sh_basis(to_tensor(dirs.reshape(-1, 3)), validate=False).numpy()
    wts = omega.reshape(-1, 1)
    sky = (residual.reshape(-1, 3) * wts).T @ basis
    return LightingEnvironment(mu, sharp, xi, sky)
