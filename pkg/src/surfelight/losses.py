"""Training losses and evaluation metrics.

Losses: photometric (L1 + D-SSIM), splat regularization (normal consistency +
depth distortion), monocular normal prior with edge masking, sky-alpha BCE,
sun-color prior with its decaying weight schedule, and ambient total
variation.  Metrics: PSNR, SSIM, MSE, normal mean angular error.

All losses are non-negative, exactly zero at their fixed points, and
differentiable w.r.t. their model-dependent inputs.
"""

from __future__ import annotations

import warnings

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .camera import Camera
from .common import DTYPE, to_tensor
from .rasterizer import RenderOutput
from .scene import ActivatedSurfels, surfel_normal

_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2.0
    g = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _window_mean(img: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    """Windowed local mean with reflection padding; img is [C, H, W].

    The Gaussian window is separable, so the 2-D mean runs as a vertical
    then a horizontal 1-D convolution.
    """
    c = img.shape[0]
    k = window.shape[0]
    pad = k // 2
    col = window.expand(c, 1, k).unsqueeze(-1)     # [C, 1, k, 1]
    row = window.expand(c, 1, k).unsqueeze(-2)     # [C, 1, 1, k]
    padded = F.pad(img.unsqueeze(0), (pad, pad, pad, pad), mode="reflect")
    return F.conv2d(F.conv2d(padded, col, groups=c), row, groups=c).squeeze(0)


def ssim(pred: torch.Tensor, gt: torch.Tensor,
         mask: torch.Tensor | None = None) -> torch.Tensor:
    """Structural similarity, 11x11 Gaussian window (sigma 1.5), per channel.

    ``pred``/``gt`` are [H, W, C] in [0, 1]; the optional bool mask selects
    the pixels entering the mean.  Borders are reflection-padded.
    """
    p = to_tensor(pred).permute(2, 0, 1)
    g = to_tensor(gt).permute(2, 0, 1)
    win = _gaussian_window()
    mu_p = _window_mean(p, win)
    mu_g = _window_mean(g, win)
    var_p = _window_mean(p * p, win) - mu_p * mu_p
    var_g = _window_mean(g * g, win) - mu_g * mu_g
    cov = _window_mean(p * g, win) - mu_p * mu_g
    num = (2 * mu_p * mu_g + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_p * mu_p + mu_g * mu_g + _SSIM_C1) * (var_p + var_g + _SSIM_C2)
    smap = num / den
    if mask is None:
        return smap.mean()
    m = to_tensor(mask).bool()
    if not bool(m.any()):
        return smap.sum() * 0.0 + 1.0
    return smap[:, m].mean()


def render_loss(pred: torch.Tensor, gt: torch.Tensor,
                mask: torch.Tensor | None = None) -> torch.Tensor:
    """Masked mean L1 plus structural dissimilarity (1 - SSIM) / 2."""
    pred = to_tensor(pred)
    gt = to_tensor(gt)
    if mask is not None:
        m = to_tensor(mask).bool()
        if not bool(m.any()):
            warnings.warn("render_loss: empty mask, loss is 0", stacklevel=2)
            return pred.sum() * 0.0
        l1 = (pred - gt).abs()[m].mean()
    else:
        l1 = (pred - gt).abs().mean()
    return l1 + (1.0 - ssim(pred, gt, mask)) / 2.0


# --------------------------------------------------------- splat regularization
def reg_loss(output: RenderOutput, act: ActivatedSurfels, cam: Camera,
             depth_normal: torch.Tensor | None = None,
             alpha_threshold: float = 0.5) -> dict[str, torch.Tensor]:
    """2DGS-style regularizers from retained per-pixel contributor data.

    Returns {"normal_consistency", "distortion"}; both are means over
    foreground pixels (alpha above threshold).  ``depth_normal`` is the
    world-frame normal map derived from the expected depth, oriented toward
    the camera; it is recomputed here when not supplied.  Consumes either the
    per-tile or the flat contributor record, whichever the rasterizer kept.
    """
    if output.tiles is None and output.flat is None:
        raise ValueError("reg_loss needs retained rasterizer contributors")
    if depth_normal is None:
        from .mesh import normal_from_depth

        n_away, _ = normal_from_depth(output.expected_depth(), cam, frame="world")
        depth_normal = -n_away            # toward-camera orientation
    fg = output.alpha.detach() > alpha_threshold
    n_fg = int(fg.sum())
    zero = output.alpha.sum() * 0.0
    if n_fg == 0:
        return {"normal_consistency": zero, "distortion": zero}

    normals = surfel_normal(act, cam)     # toward-camera, world frame
    if output.tiles is None:
        return _reg_loss_flat(output.flat, normals, depth_normal, fg, n_fg, zero)
    consistency = zero
    distortion = zero
    for tile in output.tiles:
        sel = fg[tile.y0:tile.y1, tile.x0:tile.x1]
        if not bool(sel.any()):
            continue
        w = tile.blend[:, sel]                       # [S, P]
        z = tile.depth[:, sel]
        n_tile = normals[tile.index]                 # [S, 3]
        ns = depth_normal[tile.y0:tile.y1, tile.x0:tile.x1][sel]   # [P, 3]
        dots = torch.einsum("sc,pc->sp", n_tile, ns)
        consistency = consistency + (w * (1.0 - dots)).sum()

        # Pairwise sum_i<j w_i w_j |z_i - z_j| via per-pixel depth sort and
        # exclusive prefix sums.
        z_sorted, perm = torch.sort(z, dim=0)
        w_sorted = torch.gather(w, 0, perm)
        cw = torch.cumsum(w_sorted, dim=0) - w_sorted
        cwz = torch.cumsum(w_sorted * z_sorted, dim=0) - w_sorted * z_sorted
        distortion = distortion + (w_sorted * (z_sorted * cw - cwz)).sum()
    return {"normal_consistency": consistency / n_fg, "distortion": distortion / n_fg}


def _reg_loss_flat(flat, normals: torch.Tensor, depth_normal: torch.Tensor,
                   fg: torch.Tensor, n_fg: int, zero: torch.Tensor) -> dict[str, torch.Tensor]:
    """Pair-list form of the splat regularizers (same sums as the tile form).

    Zero-blend pairs contribute nothing to either term, so the computation is
    restricted to active pairs inside foreground pixels.
    """
    keep = fg.reshape(-1)[flat.pix] & (flat.blend.detach() > 0)
    if not bool(keep.any()):
        return {"normal_consistency": zero, "distortion": zero}
    pix = flat.pix[keep]
    w = flat.blend[keep]
    z = flat.depth[keep]
    n_pair = normals[flat.surfel[keep]]                      # [K, 3]
    ns = depth_normal.reshape(-1, 3)[pix]                    # [K, 3]
    consistency = (w * (1.0 - (n_pair * ns).sum(-1))).sum()

    # Per-pixel depth sort via a composite-key lexsort (indices only), then
    # exclusive prefix sums with per-pixel offsets.
    perm = torch.from_numpy(
        np.lexsort((z.detach().numpy(), pix.numpy())).copy())
    pix_s = pix[perm]
    w_s = w[perm]
    z_s = z[perm]
    starts = torch.cat([torch.tensor([True]), pix_s[1:] != pix_s[:-1]])
    seg_of = torch.cumsum(starts, dim=0) - 1
    start_idx = torch.nonzero(starts, as_tuple=False).squeeze(-1)
    cw_g = torch.cumsum(w_s, dim=0) - w_s
    cwz_g = torch.cumsum(w_s * z_s, dim=0) - w_s * z_s
    cw = cw_g - cw_g[start_idx][seg_of]
    cwz = cwz_g - cwz_g[start_idx][seg_of]
    distortion = (w_s * (z_s * cw - cwz)).sum()
    return {"normal_consistency": consistency / n_fg, "distortion": distortion / n_fg}


# ------------------------------------------------------------------ normal prior
def normal_prior_loss(prior: torch.Tensor, splat_normal: torch.Tensor,
                      depth_normal: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of (1 - n_p . n_r) + (1 - n_p . n_s) over masked pixels.

    All three maps are [H, W, 3]; callers are responsible for presenting the
    normals in one consistent orientation.  ``mask`` combines the non-edge,
    static, and validity masks.
    """
    m = to_tensor(mask).bool()
    if not bool(m.any()):
        return splat_normal.sum() * 0.0
    p = to_tensor(prior)[m]
    r = splat_normal[m]
    s = depth_normal[m]
    return ((1.0 - (p * r).sum(-1)) + (1.0 - (p * s).sum(-1))).mean()


def canny_nonedge_mask(image: np.ndarray) -> np.ndarray:
    """Non-edge mask: Canny [100, 200] on 8-bit grayscale, 3x3 dilation, invert."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_RGB2GRAY)
    edges = cv2.Canny(img, 100, 200)
    dilated = cv2.dilate(edges, np.ones((3, 3), np.uint8))
    return dilated == 0


# ----------------------------------------------------------------------- alpha
def mask_loss(alpha: torch.Tensor, sky_mask: np.ndarray,
              exclude: np.ndarray | None = None, eps: float = 1e-6) -> torch.Tensor:
    """BCE pushing rendered alpha to 0 on sky and 1 on non-sky static pixels."""
    a = to_tensor(alpha).clamp(eps, 1.0 - eps)
    sky = to_tensor(sky_mask).bool()
    keep = torch.ones_like(sky)
    if exclude is not None:
        keep = ~to_tensor(exclude).bool()
    if not bool(keep.any()):
        return alpha.sum() * 0.0
    target = (~sky).to(DTYPE)
    bce = -(target * torch.log(a) + (1.0 - target) * torch.log(1.0 - a))
    return bce[keep].mean()


# ------------------------------------------------------------------- sun prior
def sun_prior_loss(mu: torch.Tensor, theta: torch.Tensor, curve=None) -> torch.Tensor:
    """L1 distance between the learned sun amplitude and the prior curve."""
    from .lighting import default_sun_curve

    curve = curve or default_sun_curve()
    target = curve.eval_torch(theta)
    return (target - mu).abs().sum()


def sun_prior_weight(step: int, total: int, start: float = 10.0,
                     end: float = 0.01) -> float:
    """Log-linear decay of the sun-prior weight over the stage-2 budget."""
    if total <= 0 or step >= total:
        return end
    frac = max(step, 0) / total
    return float(np.exp(np.log(start) + (np.log(end) - np.log(start)) * frac))


# ---------------------------------------------------------------- ambient TV
def ambient_tv_loss(amb: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Total variation of the ambient irradiance map ([H, W, C] or [H, W]).

    ``sum`` is the plain sum of horizontal and vertical absolute differences;
    ``mean`` divides by the pixel count so the magnitude is resolution-free
    (the trainer uses mean).
    """
    a = to_tensor(amb)
    dh = (a[:, 1:] - a[:, :-1]).abs().sum()
    dv = (a[1:, :] - a[:-1, :]).abs().sum()
    tv = dh + dv
    if reduction == "mean":
        return tv / float(a.shape[0] * a.shape[1])
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return tv


# -------------------------------------------------------------------- metrics
def mse(pred, gt) -> float:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    return float(((p - g) ** 2).mean())


def psnr(pred, gt, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio on [0, 1] images, capped for identical pairs."""
    m = mse(pred, gt)
    if m <= 0.0:
        return cap
    return float(min(-10.0 * np.log10(m), cap))


def metrics(pred, gt) -> dict[str, float]:
    return {
        "psnr": psnr(pred, gt),
        "ssim": float(ssim(to_tensor(pred), to_tensor(gt))),
        "mse": mse(pred, gt),
    }


def normal_mae(n_a, n_b, valid: np.ndarray | None = None) -> float:
    """Mean angular error between two unit-normal maps, in degrees."""
    a = np.asarray(n_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(n_b, dtype=np.float64).reshape(-1, 3)
    if valid is not None:
        keep = np.asarray(valid).reshape(-1).astype(bool)
        a, b = a[keep], b[keep]
    dots = np.clip((a * b).sum(-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dots)).mean())
