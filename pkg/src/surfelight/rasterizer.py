"""Differentiable 2D Gaussian surfel rasterization.

Each surfel is an oriented elliptical disk.  A pixel's ray is intersected with
the disk's plane; the intersection point expressed in the disk's scaled
tangent frame gives local coordinates (u, v) and the Gaussian weight
exp(-(u^2 + v^2)/2).  Weighted contributions are alpha-composited
front-to-back in view-space depth order, ties broken by surfel index.

Contribution cutoffs are part of the weight's *definition*, shared with the
brute-force reference compositor:

* Gaussian cutoff: weights below exp(-4.5) (the 3-sigma ellipse) are zero.
* Contribution floor: opacity * weight below 1/255 is zero.
* Per-contribution alpha is clamped to 0.99.
* Surfels whose center depth is at or behind the near plane are culled.
* A ray parallel to the disk's plane contributes zero at that pixel.

There is no early termination on accumulated transmittance, so the tiled path
and the reference are algebraically identical term by term.

Gradients for every input (positions, scales, rotations, opacities, attribute
vectors) flow through the full compositing chain via autograd; call
:func:`rasterize_backward` for the explicit-gradient interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from numba import njit

from .camera import Camera
from .common import DTYPE, to_tensor
from .scene import ActivatedSurfels, surfel_normal

WEIGHT_CUTOFF = float(np.exp(-4.5))   # 3-sigma Gaussian cutoff
CONTRIB_FLOOR = 1.0 / 255.0           # minimum opacity * weight to composite
ALPHA_CLAMP = 0.99                    # per-contribution alpha ceiling
_DENOM_EPS = 1e-12                    # |ray . plane normal| below this = parallel


@dataclass
class ProjectedSurfels:
    """Visible surfels in front-to-back order with their plane parameterization.

    The mapping from a pixel ray direction d (camera frame, z = -1) to local
    disk coordinates is::

        t*(d) = pn / (d . nrm)          depth of the plane intersection
        u(d)  = t* (d . tu) - ptu       tangent axes pre-divided by the scales
        v(d)  = t* (d . tv) - ptv

    ``aabb`` is the inclusive pixel-index bounding box of each surfel's
    influence (every pixel whose weight can exceed the cutoff lies inside).
    """

    index: torch.Tensor        # [M] original surfel index, sorted by (depth, index)
    center: torch.Tensor       # [M, 2] screen-space center (u, v)
    depth: torch.Tensor        # [M] view-space center depth
    aabb: np.ndarray           # [M, 4] int (x0, y0, x1, y1), inclusive
    tu: torch.Tensor           # [M, 3] tangent axis / scale_u, camera frame
    tv: torch.Tensor           # [M, 3]
    nrm: torch.Tensor          # [M, 3] disk normal, camera frame
    pn: torch.Tensor           # [M] center . nrm
    ptu: torch.Tensor          # [M] center . tu
    ptv: torch.Tensor          # [M] center . tv
    opacity: torch.Tensor      # [M] activated opacity
    near: float
    intrinsics: tuple[float, float, float, float] = (1.0, 1.0, 0.0, 0.0)  # fx, fy, cx, cy

    def __len__(self) -> int:
        return int(self.index.shape[0])

    def pixel_ray(self, pixel) -> torch.Tensor:
        """Camera-frame ray direction (z = -1) of a continuous pixel coord."""
        fx, fy, cx, cy = self.intrinsics
        u_px, v_px = float(pixel[0]), float(pixel[1])
        return torch.tensor([[(u_px - cx) / fx, -(v_px - cy) / fy, -1.0]], dtype=DTYPE)


@dataclass
class TileContributors:
    """Per-tile blend records retained for regularization losses."""

    y0: int
    y1: int
    x0: int
    x1: int
    index: torch.Tensor        # [S] global surfel ids, front-to-back
    blend: torch.Tensor        # [S, th, tw] composited weights alpha*G*T
    depth: torch.Tensor        # [S, th, tw] per-pixel plane-intersection depth


@dataclass
class FlatContributors:
    """Per-(pixel, surfel) blend records from the pair-list compositing path.

    Rows are grouped by pixel with surfels front-to-back inside each group;
    inactive pairs (below the cutoffs) carry blend = depth = 0.
    """

    pix: torch.Tensor          # [N] int64 flat pixel index (row-major)
    surfel: torch.Tensor       # [N] int64 global surfel ids
    blend: torch.Tensor        # [N] composited weights alpha*G*T
    depth: torch.Tensor        # [N] plane-intersection depth (0 if inactive)
    height: int = 0
    width: int = 0


@dataclass
class RenderOutput:
    """Composited screen buffers plus optional contributor retention."""

    channels: dict[str, torch.Tensor]      # name -> [H, W, C]
    alpha: torch.Tensor                    # [H, W]
    depth_sum: torch.Tensor                # [H, W] blend-weighted depth (unnormalized)
    tiles: list[TileContributors] | None = None
    flat: FlatContributors | None = None
    inputs: dict[str, torch.Tensor] | None = None   # leaves for rasterize_backward

    def expected_depth(self, floor: float = 1e-12) -> torch.Tensor:
        """Alpha-normalized depth map."""
        return self.depth_sum / self.alpha.clamp_min(floor)


def project(act: ActivatedSurfels, cam: Camera) -> ProjectedSurfels:
    """Transform surfels to the camera frame and derive the pixel->(u,v) maps.

    Culls surfels behind the near plane or with an empty on-screen footprint.
    """
    R = to_tensor(cam.R)
    t = to_tensor(cam.t)
    p_c = act.position @ R.T + t
    rot_c = torch.einsum("ij,sjk->sik", R, act.rot_mat)
    tu_c, tv_c, n_c = rot_c[..., 0], rot_c[..., 1], rot_c[..., 2]
    depth = -p_c[..., 2]

    su = act.scale[:, 0:1]
    sv = act.scale[:, 1:2]
    visible = depth > cam.near

    # Screen AABB from the disk's 3-sigma bounding parallelogram: central
    # projection maps the convex corner set to a convex screen quad containing
    # the whole projected disk.
    corners = (p_c[:, None, :]
               + 3.0 * su[:, :, None] * tu_c[:, None, :] * torch.tensor([1.0, 1.0, -1.0, -1.0])[None, :, None]
               + 3.0 * sv[:, :, None] * tv_c[:, None, :] * torch.tensor([1.0, -1.0, 1.0, -1.0])[None, :, None])
    cd = -corners[..., 2]
    spans_near = (cd <= cam.near).any(dim=1)
    cd_safe = cd.clamp_min(cam.near)
    cu = cam.cx + cam.fx * corners[..., 0] / cd_safe
    cv = cam.cy - cam.fy * corners[..., 1] / cd_safe
    with torch.no_grad():
        x0 = torch.floor(cu.min(dim=1).values - 0.5) - 1
        x1 = torch.ceil(cu.max(dim=1).values + 0.5) + 1
        y0 = torch.floor(cv.min(dim=1).values - 0.5) - 1
        y1 = torch.ceil(cv.max(dim=1).values + 0.5) + 1
        # A disk crossing the near plane gets a conservative full-screen box.
        x0 = torch.where(spans_near, torch.zeros_like(x0), x0.clamp(0, cam.width - 1))
        y0 = torch.where(spans_near, torch.zeros_like(y0), y0.clamp(0, cam.height - 1))
        x1 = torch.where(spans_near, torch.full_like(x1, cam.width - 1),
                         x1.clamp(0, cam.width - 1))
        y1 = torch.where(spans_near, torch.full_like(y1, cam.height - 1),
                         y1.clamp(0, cam.height - 1))
        on_screen = (cu.min(dim=1).values <= cam.width + 1) & (cu.max(dim=1).values >= -1) \
            & (cv.min(dim=1).values <= cam.height + 1) & (cv.max(dim=1).values >= -1)
        keep = visible & (on_screen | spans_near)

    order = _depth_order(depth, keep)

    dsel = depth[order]
    psel = p_c[order]
    tu = tu_c[order] / su[order]
    tv = tv_c[order] / sv[order]
    nrm = n_c[order]
    with torch.no_grad():
        center_u = cam.cx + cam.fx * psel[:, 0] / dsel
        center_v = cam.cy - cam.fy * psel[:, 1] / dsel
        aabb = torch.stack([x0[order], y0[order], x1[order], y1[order]], dim=1)
    return ProjectedSurfels(
        index=order,
        center=torch.stack([center_u, center_v], dim=1),
        depth=dsel,
        aabb=aabb.numpy().astype(np.int64),
        tu=tu, tv=tv, nrm=nrm,
        pn=(psel * nrm).sum(-1),
        ptu=(psel * tu).sum(-1),
        ptv=(psel * tv).sum(-1),
        opacity=act.opacity[order],
        near=cam.near,
        intrinsics=(cam.fx, cam.fy, cam.cx, cam.cy),
    )


def _depth_order(depth: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    """Indices of kept surfels sorted by (depth, original index)."""
    idx = torch.nonzero(keep, as_tuple=False).squeeze(-1)
    if idx.numel() == 0:
        return idx
    order = torch.argsort(depth[idx].detach(), stable=True)
    return idx[order]


def _pixel_dirs(cam: Camera) -> torch.Tensor:
    """Pixel-center ray directions, camera frame, z = -1; [H, W, 3]."""
    return to_tensor(cam.pixel_ray_dirs_cam())


def _ray_uv(ps: ProjectedSurfels, dirs: torch.Tensor, rows: torch.Tensor | None = None):
    """Vectorized pixel->(u, v, t*, valid) for a [P, 3] block of ray dirs.

    Returns tensors shaped [P, S] where S is the selected surfel count.
    """
    sel = slice(None) if rows is None else rows
    nrm, tu, tv = ps.nrm[sel], ps.tu[sel], ps.tv[sel]
    pn, ptu, ptv = ps.pn[sel], ps.ptu[sel], ps.ptv[sel]
    dn = dirs @ nrm.T                              # [P, S]
    parallel = dn.detach().abs() < _DENOM_EPS
    dn_safe = torch.where(parallel, torch.ones_like(dn), dn)
    tstar = pn.unsqueeze(0) / dn_safe
    u = tstar * (dirs @ tu.T) - ptu.unsqueeze(0)
    v = tstar * (dirs @ tv.T) - ptv.unsqueeze(0)
    valid = (~parallel) & (tstar.detach() > ps.near)
    return u, v, tstar, valid


def gaussian_weight(ps: ProjectedSurfels, pixel) -> torch.Tensor:
    """Gaussian weight of every projected surfel at one continuous pixel.

    ``pixel`` = (u_px, v_px); pixel (i, j) has center (j + 0.5, i + 0.5).
    Weights below the cutoff, behind the near plane, or at a parallel-ray
    degeneracy are exactly 0.
    """
    d = ps.pixel_ray(pixel)
    u, v, _, valid = _ray_uv(ps, d)
    g = torch.exp(-0.5 * (u * u + v * v))
    g = torch.where(valid & (g.detach() >= WEIGHT_CUTOFF), g, torch.zeros_like(g))
    return g[0]


def rasterize(act: ActivatedSurfels, cam: Camera,
              attributes: dict[str, torch.Tensor] | None = None,
              with_normal: bool = True, with_depth: bool = True,
              retain_contributors: bool = False, tile_size: int = 16) -> RenderOutput:
    """Composite per-surfel attribute vectors into screen buffers.

    ``attributes`` maps channel name -> [S, C] per-surfel vectors (the generic
    attribute splat); the accumulated-normal channel (camera-flipped world
    normals) is added automatically when ``with_normal``.  Empty scenes yield
    all-zero buffers with alpha 0.
    """
    attributes = dict(attributes or {})
    H, W = cam.height, cam.width
    if with_normal:
        attributes["normal"] = surfel_normal(act, cam)

    names = list(attributes)
    dims = [attributes[n].shape[1] for n in names]
    inputs = {
        "position": act.position, "scale": act.scale, "rotation": act.rotation,
        "opacity": act.opacity,
        **{f"attr:{n}": attributes[n] for n in names},
    }

    ps = project(act, cam)
    if len(ps) == 0:
        zeros = {n: torch.zeros(H, W, c, dtype=DTYPE) for n, c in zip(names, dims)}
        return RenderOutput(channels=zeros, alpha=torch.zeros(H, W, dtype=DTYPE),
                            depth_sum=torch.zeros(H, W, dtype=DTYPE),
                            tiles=[] if retain_contributors else None,
                            flat=None if retain_contributors else _empty_flat(H, W),
                            inputs=inputs)

    attr_cat = (torch.cat([attributes[n] for n in names], dim=1)[ps.index]
                if names else torch.zeros(len(ps), 0, dtype=DTYPE))
    dirs_full = _pixel_dirs(cam)

    if not retain_contributors:
        # Pair-list path: identical contributor sets and per-pixel order, one
        # batched op sequence instead of a Python loop over tiles.
        return _composite_pairs(ps, attr_cat, names, dims, H, W,
                                dirs_full, inputs)

    tiles_y = range(0, H, tile_size)
    tiles_x = range(0, W, tile_size)
    ntx = len(tiles_x)
    binned = _bin_tiles(ps.aabb, H, W, tile_size)

    retained: list[TileContributors] = [] if retain_contributors else None
    out_rows = []
    n_attr = attr_cat.shape[1]
    for ti, y0 in enumerate(tiles_y):
        row_blocks = []
        y1 = min(y0 + tile_size, H)
        for tj, x0 in enumerate(tiles_x):
            x1 = min(x0 + tile_size, W)
            th, tw = y1 - y0, x1 - x0
            rows = binned.get(ti * ntx + tj)
            if rows is None:
                row_blocks.append(torch.zeros(th, tw, n_attr + 2, dtype=DTYPE))
                continue
            rows_t = torch.from_numpy(rows)
            dirs = dirs_full[y0:y1, x0:x1].reshape(-1, 3)
            u, v, tstar, valid = _ray_uv(ps, dirs, rows_t)
            g = torch.exp(-0.5 * (u * u + v * v))
            w_raw = ps.opacity[rows_t].unsqueeze(0) * g
            ok = valid & (g.detach() >= WEIGHT_CUTOFF) & (w_raw.detach() >= CONTRIB_FLOOR)
            w = torch.where(ok, w_raw, torch.zeros_like(w_raw)).clamp_max(ALPHA_CLAMP)
            # Front-to-back transmittance in log space: exact and stable.
            log_t = torch.log1p(-w)
            log_t_prev = torch.cat(
                [torch.zeros_like(log_t[:, :1]), log_t[:, :-1].cumsum(dim=1)], dim=1)
            blend = w * torch.exp(log_t_prev)                      # [P, S]
            tstar_safe = torch.where(ok, tstar, torch.zeros_like(tstar))
            tile_attr = blend @ attr_cat[rows_t]                   # [P, n_attr]
            tile_alpha = blend.sum(dim=1, keepdim=True)
            tile_depth = (blend * tstar_safe).sum(dim=1, keepdim=True)
            block = torch.cat([tile_attr, tile_alpha, tile_depth], dim=1)
            row_blocks.append(block.reshape(th, tw, n_attr + 2))
            if retain_contributors:
                retained.append(TileContributors(
                    y0=y0, y1=y1, x0=x0, x1=x1,
                    index=ps.index[rows_t],
                    blend=blend.T.reshape(-1, th, tw),
                    depth=tstar_safe.T.reshape(-1, th, tw),
                ))
        out_rows.append(torch.cat(row_blocks, dim=1))
    full = torch.cat(out_rows, dim=0)

    channels = {}
    offset = 0
    for n, c in zip(names, dims):
        channels[n] = full[..., offset:offset + c]
        offset += c
    return RenderOutput(channels=channels, alpha=full[..., offset],
                        depth_sum=full[..., offset + 1],
                        tiles=retained, inputs=inputs)


def _bin_tiles(aabb: np.ndarray, H: int, W: int, tile: int) -> dict[int, np.ndarray]:
    """Group sorted-surfel row numbers by the tiles their AABBs touch.

    Returns {tile_id: row indices (ascending, i.e. front-to-back)}.
    """
    ntx = (W + tile - 1) // tile
    tx0 = aabb[:, 0] // tile
    ty0 = aabb[:, 1] // tile
    tx1 = aabb[:, 2] // tile
    ty1 = aabb[:, 3] // tile
    wspan = tx1 - tx0 + 1
    hspan = ty1 - ty0 + 1
    counts = wspan * hspan
    total = int(counts.sum())
    if total == 0:
        return {}
    rows = np.repeat(np.arange(len(aabb)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(starts, counts)
    w_rep = np.repeat(wspan, counts)
    tx = np.repeat(tx0, counts) + local % w_rep
    ty = np.repeat(ty0, counts) + local // w_rep
    tile_id = ty * ntx + tx
    order = np.argsort(tile_id, kind="stable")
    sorted_ids = tile_id[order]
    sorted_rows = rows[order]
    bounds = np.searchsorted(sorted_ids, np.unique(sorted_ids))
    uniq = np.unique(sorted_ids)
    out = {}
    for k, tid in enumerate(uniq):
        lo = bounds[k]
        hi = bounds[k + 1] if k + 1 < len(bounds) else total
        out[int(tid)] = np.ascontiguousarray(sorted_rows[lo:hi])
    return out


def _empty_flat(H: int, W: int) -> FlatContributors:
    empty_i = torch.zeros(0, dtype=torch.int64)
    empty_f = torch.zeros(0, dtype=DTYPE)
    return FlatContributors(pix=empty_i, surfel=empty_i, blend=empty_f,
                            depth=empty_f, height=H, width=W)


@njit(cache=True)
def _pair_scan(aabb, W, nrm, tu, tv, pn, ptu, ptv, opac, dirs, near,
               counts, cursor, pair_row, pair_pix, pair_u, pair_v, pair_g,
               pair_t, pair_dtu, pair_dtv, fill):
    """Walk surfel AABBs, apply the weight cutoffs, emit active pairs.

    ``fill`` False: count active pairs per pixel into ``counts``.  ``fill``
    True: place pairs at ``cursor`` slots (pixel-major; surfels ascending
    within a pixel = front-to-back), recording the per-pair intermediates the
    compositing kernels need.
    """
    M = aabb.shape[0]
    for s in range(M):
        x0 = aabb[s, 0]
        y0 = aabb[s, 1]
        x1 = aabb[s, 2]
        y1 = aabb[s, 3]
        nx, ny, nz = nrm[s, 0], nrm[s, 1], nrm[s, 2]
        ax, ay, az = tu[s, 0], tu[s, 1], tu[s, 2]
        bx, by, bz = tv[s, 0], tv[s, 1], tv[s, 2]
        pns = pn[s]
        ptus = ptu[s]
        ptvs = ptv[s]
        op = opac[s]
        for py in range(y0, y1 + 1):
            base = py * W
            for px in range(x0, x1 + 1):
                p = base + px
                dx, dy, dz = dirs[p, 0], dirs[p, 1], dirs[p, 2]
                dn = dx * nx + dy * ny + dz * nz
                if abs(dn) < _DENOM_EPS:
                    continue
                t = pns / dn
                if t <= near:
                    continue
                dtu = dx * ax + dy * ay + dz * az
                dtv = dx * bx + dy * by + dz * bz
                uu = t * dtu - ptus
                vv = t * dtv - ptvs
                g = np.exp(-0.5 * (uu * uu + vv * vv))
                if g < WEIGHT_CUTOFF:
                    continue
                if op * g < CONTRIB_FLOOR:
                    continue
                if fill:
                    slot = cursor[p]
                    cursor[p] = slot + 1
                    pair_row[slot] = s
                    pair_pix[slot] = p
                    pair_u[slot] = uu
                    pair_v[slot] = vv
                    pair_g[slot] = g
                    pair_t[slot] = t
                    pair_dtu[slot] = dtu
                    pair_dtv[slot] = dtv
                else:
                    counts[p] += 1


@njit(cache=True)
def _composite_fwd(offsets, pair_row, pair_g, pair_t, opac, attr,
                   out, w_arr, tprev_arr):
    """Front-to-back compositing over the pixel-grouped pair list."""
    HW = offsets.shape[0] - 1
    C = attr.shape[1]
    for p in range(HW):
        lo = offsets[p]
        hi = offsets[p + 1]
        if lo == hi:
            continue
        T = 1.0
        for i in range(lo, hi):
            r = pair_row[i]
            w = opac[r] * pair_g[i]
            if w > ALPHA_CLAMP:
                w = ALPHA_CLAMP
            b = w * T
            for c in range(C):
                out[p, c] += b * attr[r, c]
            out[p, C] += b
            out[p, C + 1] += b * pair_t[i]
            w_arr[i] = w
            tprev_arr[i] = T
            T *= 1.0 - w


@njit(cache=True)
def _composite_bwd(offsets, pair_row, pair_pix, pair_u, pair_v, pair_g,
                   pair_t, pair_dtu, pair_dtv, w_arr, tprev_arr,
                   opac, attr, dirs, pn,
                   gout, gblend, gtstar,
                   gnrm, gtu, gtv, gpn, gptu, gptv, gopac, gattr):
    """Reverse sweep: suffix-accumulated transmittance chain per pixel, then
    the per-pair chain through the Gaussian weight and plane intersection."""
    HW = offsets.shape[0] - 1
    C = attr.shape[1]
    for p in range(HW):
        lo = offsets[p]
        hi = offsets[p + 1]
        if lo == hi:
            continue
        ga = gout[p, C]
        gd = gout[p, C + 1]
        acc = 0.0
        for i in range(hi - 1, lo - 1, -1):
            r = pair_row[i]
            S = ga + gd * pair_t[i] + gblend[i]
            for c in range(C):
                S += attr[r, c] * gout[p, c]
            w = w_arr[i]
            T = tprev_arr[i]
            b = w * T
            grad_w = T * S - acc / (1.0 - w)
            acc += b * S
            for c in range(C):
                gattr[r, c] += b * gout[p, c]
            gt = b * gd + gtstar[i]
            w_raw = opac[r] * pair_g[i]
            if w_raw <= ALPHA_CLAMP:
                gopac[r] += grad_w * pair_g[i]
                gg = grad_w * opac[r]
            else:
                gg = 0.0
            gu = -pair_u[i] * pair_g[i] * gg
            gv = -pair_v[i] * pair_g[i] * gg
            t = pair_t[i]
            px = pair_pix[i]
            dx, dy, dz = dirs[px, 0], dirs[px, 1], dirs[px, 2]
            gptu[r] -= gu
            gptv[r] -= gv
            tgu = t * gu
            tgv = t * gv
            gtu[r, 0] += tgu * dx
            gtu[r, 1] += tgu * dy
            gtu[r, 2] += tgu * dz
            gtv[r, 0] += tgv * dx
            gtv[r, 1] += tgv * dy
            gtv[r, 2] += tgv * dz
            gt += gu * pair_dtu[i] + gv * pair_dtv[i]
            dn = pn[r] / t
            gpn[r] += gt / dn
            gdn = -gt * t / dn
            gnrm[r, 0] += gdn * dx
            gnrm[r, 1] += gdn * dy
            gnrm[r, 2] += gdn * dz


class _PairComposite(torch.autograd.Function):
    """Numba-backed compositing over the active pair list.

    Outputs (buffers [H*W, C+2], blend [N], depth [N]) are differentiable in
    every projected-surfel tensor and the attribute matrix; the pair list
    itself is index data computed under the same cutoff definition, and
    dropped pairs carry exactly zero value and gradient.
    """

    @staticmethod
    def forward(ctx, nrm, tu, tv, pn, ptu, ptv, opac, attr, pairs, dirs_np, hw):
        offsets, pair_row, pair_pix, pair_u, pair_v, pair_g, pair_t, \
            pair_dtu, pair_dtv = pairs
        n = len(pair_row)
        arrs = {
            "nrm": np.ascontiguousarray(nrm.detach().numpy()),
            "tu": np.ascontiguousarray(tu.detach().numpy()),
            "tv": np.ascontiguousarray(tv.detach().numpy()),
            "pn": np.ascontiguousarray(pn.detach().numpy()),
            "ptu": np.ascontiguousarray(ptu.detach().numpy()),
            "ptv": np.ascontiguousarray(ptv.detach().numpy()),
            "opac": np.ascontiguousarray(opac.detach().numpy()),
            "attr": np.ascontiguousarray(attr.detach().numpy()),
        }
        C = arrs["attr"].shape[1]
        out = np.zeros((hw, C + 2), dtype=np.float64)
        w_arr = np.zeros(n, dtype=np.float64)
        tprev_arr = np.zeros(n, dtype=np.float64)
        _composite_fwd(offsets, pair_row, pair_g, pair_t, arrs["opac"],
                       arrs["attr"], out, w_arr, tprev_arr)
        ctx.pairs = pairs
        ctx.saved = arrs
        ctx.w_arr = w_arr
        ctx.tprev_arr = tprev_arr
        ctx.dirs_np = dirs_np
        blend = torch.from_numpy(w_arr * tprev_arr)
        depth = torch.from_numpy(pair_t.copy())
        return torch.from_numpy(out), blend, depth

    @staticmethod
    def backward(ctx, gfull, gblend, gdepth):
        offsets, pair_row, pair_pix, pair_u, pair_v, pair_g, pair_t, \
            pair_dtu, pair_dtv = ctx.pairs
        arrs = ctx.saved
        n = len(pair_row)
        gout = np.ascontiguousarray(gfull.numpy())
        gb = (np.zeros(n) if gblend is None
              else np.ascontiguousarray(gblend.numpy()))
        gts = (np.zeros(n) if gdepth is None
               else np.ascontiguousarray(gdepth.numpy()))
        gnrm = np.zeros_like(arrs["nrm"])
        gtu = np.zeros_like(arrs["tu"])
        gtv = np.zeros_like(arrs["tv"])
        gpn = np.zeros_like(arrs["pn"])
        gptu = np.zeros_like(arrs["ptu"])
        gptv = np.zeros_like(arrs["ptv"])
        gopac = np.zeros_like(arrs["opac"])
        gattr = np.zeros_like(arrs["attr"])
        _composite_bwd(offsets, pair_row, pair_pix, pair_u, pair_v, pair_g,
                       pair_t, pair_dtu, pair_dtv, ctx.w_arr, ctx.tprev_arr,
                       arrs["opac"], arrs["attr"], ctx.dirs_np, arrs["pn"],
                       gout, gb, gts,
                       gnrm, gtu, gtv, gpn, gptu, gptv, gopac, gattr)
        return (torch.from_numpy(gnrm), torch.from_numpy(gtu),
                torch.from_numpy(gtv), torch.from_numpy(gpn),
                torch.from_numpy(gptu), torch.from_numpy(gptv),
                torch.from_numpy(gopac), torch.from_numpy(gattr),
                None, None, None)


def _composite_pairs(ps: ProjectedSurfels, attr_cat: torch.Tensor,
                     names: list[str], dims: list[int], H: int, W: int,
                     dirs_full: torch.Tensor,
                     inputs: dict[str, torch.Tensor]) -> RenderOutput:
    """Composite via the flat (pixel, surfel) pair list.

    Pair generation applies the identical cutoff arithmetic as the tiled
    path, so the surviving pairs are exactly the nonzero contributions; the
    compositing runs in a custom-gradient kernel over them.
    """
    n_attr = attr_cat.shape[1]
    dirs_np = np.ascontiguousarray(dirs_full.reshape(-1, 3).numpy())
    fields = (np.ascontiguousarray(ps.nrm.detach().numpy()),
              np.ascontiguousarray(ps.tu.detach().numpy()),
              np.ascontiguousarray(ps.tv.detach().numpy()),
              np.ascontiguousarray(ps.pn.detach().numpy()),
              np.ascontiguousarray(ps.ptu.detach().numpy()),
              np.ascontiguousarray(ps.ptv.detach().numpy()),
              np.ascontiguousarray(ps.opacity.detach().numpy()))
    hw = H * W
    counts = np.zeros(hw, dtype=np.int64)
    empty_i = np.zeros(0, dtype=np.int64)
    empty_f = np.zeros(0, dtype=np.float64)
    _pair_scan(ps.aabb, W, *fields, dirs_np, ps.near,
               counts, empty_i, empty_i, empty_i, empty_f, empty_f, empty_f,
               empty_f, empty_f, empty_f, False)
    n = int(counts.sum())
    if n == 0:
        zeros = {nm: torch.zeros(H, W, c, dtype=DTYPE) for nm, c in zip(names, dims)}
        return RenderOutput(channels=zeros, alpha=torch.zeros(H, W, dtype=DTYPE),
                            depth_sum=torch.zeros(H, W, dtype=DTYPE),
                            flat=_empty_flat(H, W), inputs=inputs)
    offsets = np.zeros(hw + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    cursor = offsets[:-1].copy()
    pair_row = np.zeros(n, dtype=np.int64)
    pair_pix = np.zeros(n, dtype=np.int64)
    pair_u = np.zeros(n, dtype=np.float64)
    pair_v = np.zeros(n, dtype=np.float64)
    pair_g = np.zeros(n, dtype=np.float64)
    pair_t = np.zeros(n, dtype=np.float64)
    pair_dtu = np.zeros(n, dtype=np.float64)
    pair_dtv = np.zeros(n, dtype=np.float64)
    _pair_scan(ps.aabb, W, *fields, dirs_np, ps.near,
               counts, cursor, pair_row, pair_pix, pair_u, pair_v, pair_g,
               pair_t, pair_dtu, pair_dtv, True)
    pairs = (offsets, pair_row, pair_pix, pair_u, pair_v, pair_g, pair_t,
             pair_dtu, pair_dtv)

    full, blend, depth = _PairComposite.apply(
        ps.nrm, ps.tu, ps.tv, ps.pn, ps.ptu, ps.ptv, ps.opacity, attr_cat,
        pairs, dirs_np, hw)
    full = full.reshape(H, W, n_attr + 2)

    channels = {}
    offset = 0
    for nm, c in zip(names, dims):
        channels[nm] = full[..., offset:offset + c]
        offset += c
    rows_t = torch.from_numpy(pair_row)
    flat = FlatContributors(pix=torch.from_numpy(pair_pix),
                            surfel=ps.index[rows_t], blend=blend,
                            depth=depth, height=H, width=W)
    return RenderOutput(channels=channels, alpha=full[..., offset],
                        depth_sum=full[..., offset + 1],
                        flat=flat, inputs=inputs)


def rasterize_backward(output: RenderOutput,
                       upstream: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Explicit-gradient interface: reverse-mode gradients of the compositing.

    ``upstream`` maps buffer names ("alpha", "depth_sum", or any channel name)
    to cotangents of matching shape.  Returns gradients keyed like the
    recorded inputs (position, scale, rotation, opacity, attr:*).  Fails
    loudly when the forward pass retained no differentiable state.
    """
    if output.inputs is None:
        raise RuntimeError("rasterize_backward: forward pass retained no saved state")
    leaves = {k: t for k, t in output.inputs.items() if t.requires_grad}
    if not leaves:
        raise RuntimeError("rasterize_backward: no forward input requires grad")
    total = None
    for name, cot in upstream.items():
        buf = (output.alpha if name == "alpha" else
               output.depth_sum if name == "depth_sum" else output.channels[name])
        term = (buf * to_tensor(cot)).sum()
        total = term if total is None else total + term
    grads = torch.autograd.grad(total, list(leaves.values()), allow_unused=True,
                                retain_graph=True)
    return {k: (g if g is not None else torch.zeros_like(t))
            for (k, t), g in zip(leaves.items(), grads)}
