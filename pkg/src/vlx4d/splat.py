"""Differentiable software splatter for 3D Gaussians.

Projection is standard EWA: the 3D covariance R diag(s^2) R^T is pushed
through the camera rotation and the perspective Jacobian at the mean, then
floored by adding 0.3 px^2 to keep the 2D covariance invertible. Compositing
is front-to-back with per-splat alpha clamped at 0.99 and a 3-sigma bounding
box per splat.

`render_image` is a single fused autodiff op: forward runs vectorized numpy
over (splat, pixel) pairs and the hand-written backward replays the stored
pair lists, treating depth order and bbox membership as constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geom import CameraModel

NEAR_PLANE = 0.01
COV_FLOOR = 0.3
ALPHA_CLAMP = 0.99
BBOX_SIGMA = 3.0


@dataclass
class Splat2D:
    mean: np.ndarray   # (u, v) pixel coords
    cov: np.ndarray    # 2 x 2
    depth: float
    opacity: float
    rgb: np.ndarray
    index: int = 0     # source Gaussian index; breaks depth ties


@dataclass
class RenderTarget:
    rgb: np.ndarray    # H x W x 3 in [0, 1]
    alpha: np.ndarray  # H x W accumulated opacity


def _rotation_matrices(qn: np.ndarray) -> np.ndarray:
    """Unit quaternions (N, 4) wxyz -> rotation matrices (N, 3, 3)."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    r = np.empty((qn.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _rotation_jacobians(qn: np.ndarray) -> np.ndarray:
    """d(rotation matrix entries)/d(quaternion components): (N, 4, 3, 3)."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    o = np.zeros_like(w)
    t = np.empty((qn.shape[0], 4, 3, 3))
    t[:, 0] = 2 * np.stack([np.stack([o, -z, y], -1),
                            np.stack([z, o, -x], -1),
                            np.stack([-y, x, o], -1)], -2)
    t[:, 1] = 2 * np.stack([np.stack([o, y, z], -1),
                            np.stack([y, -2 * x, -w], -1),
                            np.stack([z, w, -2 * x], -1)], -2)
    t[:, 2] = 2 * np.stack([np.stack([-2 * y, x, w], -1),
                            np.stack([x, o, z], -1),
                            np.stack([-w, z, -2 * y], -1)], -2)
    t[:, 3] = 2 * np.stack([np.stack([-2 * z, -w, x], -1),
                            np.stack([w, -2 * z, y], -1),
                            np.stack([x, y, o], -1)], -2)
    return t


def _normalize_quats(q: np.ndarray):
    norms = np.linalg.norm(q, axis=1)
    dead = norms == 0.0
    safe = np.where(dead, 1.0, norms)
    qn = q / safe[:, None]
    qn[dead] = np.array([1.0, 0.0, 0.0, 0.0])
    return qn, safe, dead


def _perspective_jacobians(xc: np.ndarray, fx: float, fy: float) -> np.ndarray:
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    j = np.zeros((xc.shape[0], 2, 3))
    j[:, 0, 0] = fx / z
    j[:, 0, 2] = -fx * x / z ** 2
    j[:, 1, 1] = fy / z
    j[:, 1, 2] = -fy * y / z ** 2
    return j


def _projected_covariance(scales, quats, camera_rotation, jac):
    """Per-splat 2D covariance before the floor; also returns intermediates."""
    qn, norms, dead = _normalize_quats(quats)
    rot = _rotation_matrices(qn)
    d = scales ** 2
    sigma3 = np.einsum("nij,nj,nkj->nik", rot, d, rot)
    sigma_c = np.einsum("ij,njk,lk->nil", camera_rotation, sigma3,
                        camera_rotation)
    sigma2 = np.einsum("nij,njk,nlk->nil", jac, sigma_c, jac)
    return sigma2, dict(qn=qn, norms=norms, dead=dead, rot=rot,
                        sigma_c=sigma_c)


def project_gaussian(position, scale, quat, opacity, rgb,
                     camera: CameraModel, index: int = 0) -> Splat2D | None:
    """One Gaussian -> 2D splat, or None when behind the near plane."""
    p = np.asarray(position, dtype=np.float64).reshape(1, 3)
    xc = camera.world_to_camera(p)
    z = float(xc[0, 2])
    if z <= NEAR_PLANE:
        return None
    jac = _perspective_jacobians(xc, camera.fx, camera.fy)
    sigma2, _ = _projected_covariance(
        np.asarray(scale, dtype=np.float64).reshape(1, 3),
        np.asarray(quat, dtype=np.float64).reshape(1, 4),
        camera.rotation, jac)
    cov = sigma2[0] + COV_FLOOR * np.eye(2)
    mean = np.array([camera.fx * xc[0, 0] / z + camera.cx,
                     camera.fy * xc[0, 1] / z + camera.cy])
    return Splat2D(mean=mean, cov=cov, depth=z, opacity=float(opacity),
                   rgb=np.asarray(rgb, dtype=np.float64), index=index)


def composite(splats, width: int, height: int,
              background=(0.0, 0.0, 0.0)) -> RenderTarget:
    """Reference front-to-back compositor over Splat2D records."""
    bg = np.asarray(background, dtype=np.float64)
    img = np.zeros((height, width, 3))
    transmit = np.ones((height, width))
    for s in sorted(splats, key=lambda s: (s.depth, s.index)):
        inv = np.linalg.inv(s.cov)
        rx = BBOX_SIGMA * np.sqrt(s.cov[0, 0])
        ry = BBOX_SIGMA * np.sqrt(s.cov[1, 1])
        c0 = max(0, int(np.ceil(s.mean[0] - 0.5 - rx)))
        c1 = min(width - 1, int(np.floor(s.mean[0] - 0.5 + rx)))
        r0 = max(0, int(np.ceil(s.mean[1] - 0.5 - ry)))
        r1 = min(height - 1, int(np.floor(s.mean[1] - 0.5 + ry)))
        if c0 > c1 or r0 > r1:
            continue
        cols, rows = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
        dx = cols + 0.5 - s.mean[0]
        dy = rows + 0.5 - s.mean[1]
        q = inv[0, 0] * dx ** 2 + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy ** 2
        alpha = np.minimum(ALPHA_CLAMP, s.opacity * np.exp(-0.5 * q))
        block = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        img[block] += (alpha * transmit[block])[..., None] * s.rgb
        transmit[block] *= 1.0 - alpha
    img += transmit[..., None] * bg
    return RenderTarget(rgb=img, alpha=1.0 - transmit)


# ---------------------------------------------------------------------------
# fused differentiable renderer

def _bbox(u, v, sigma2, width, height):
    rx = BBOX_SIGMA * np.sqrt(sigma2[:, 0, 0])
    ry = BBOX_SIGMA * np.sqrt(sigma2[:, 1, 1])
    c0 = np.maximum(0, np.ceil(u - 0.5 - rx)).astype(np.int64)
    c1 = np.minimum(width - 1, np.floor(u - 0.5 + rx)).astype(np.int64)
    r0 = np.maximum(0, np.ceil(v - 0.5 - ry)).astype(np.int64)
    r1 = np.minimum(height - 1, np.floor(v - 0.5 + ry)).astype(np.int64)
    return c0, c1, r0, r1


def _build_pairs(order, c0, c1, r0, r1, width, chunk: int = 512):
    """(splat, pixel) pair lists in depth order, chunked to bound memory."""
    cids, pixs = [], []
    for lo in range(0, len(order), chunk):
        part = order[lo:lo + chunk]
        nw = int((c1[part] - c0[part]).max()) + 1
        nh = int((r1[part] - r0[part]).max()) + 1
        cols = c0[part, None, None] + np.arange(nw)[None, None, :]
        rows = r0[part, None, None] + np.arange(nh)[None, :, None]
        ok = (cols <= c1[part, None, None]) & (rows <= r1[part, None, None])
        cid = np.broadcast_to(part[:, None, None], ok.shape)
        pix = rows * width + cols
        cids.append(cid[ok])
        pixs.append(np.broadcast_to(pix, ok.shape)[ok])
    if not cids:
        return (np.empty(0, dtype=np.int64),) * 2
    return np.concatenate(cids), np.concatenate(pixs)


def render_image(gaussians, camera: CameraModel, background=(0.0, 0.0, 0.0)):
    """GaussianSet -> H x W x 3 image tensor, differentiable in all five
    Gaussian parameter arrays (depth order and pixel coverage held fixed)."""
    pos = ad.wrap(gaussians.positions)
    sca = ad.wrap(gaussians.scales)
    qua = ad.wrap(gaussians.quats)
    opa = ad.wrap(gaussians.opacity)
    rgb = ad.wrap(gaussians.rgb)
    h, w = camera.height, camera.width
    bg = np.asarray(background, dtype=np.float64)
    rc = camera.rotation
    fx, fy = camera.fx, camera.fy

    p, s, q, o, c = (t.data for t in (pos, sca, qua, opa, rgb))
    n = p.shape[0]
    xc_all = p @ rc.T + camera.translation
    infront = xc_all[:, 2] > NEAR_PLANE

    flat_bg = np.tile(bg, (h * w, 1))
    if not infront.any():
        def bw_none(g):
            return
        return ad.reshape(ad.custom_op(flat_bg, (pos, sca, qua, opa, rgb),
                                       bw_none), (h, w, 3))

    vis = np.flatnonzero(infront)
    xc = xc_all[vis]
    z = xc[:, 2]
    u = fx * xc[:, 0] / z + camera.cx
    v = fy * xc[:, 1] / z + camera.cy
    jac = _perspective_jacobians(xc, fx, fy)
    sigma2, inter = _projected_covariance(s[vis], q[vis], rc, jac)
    sigma2 = sigma2 + COV_FLOOR * np.eye(2)

    c0, c1, r0, r1 = _bbox(u, v, sigma2, w, h)
    nonempty = (c0 <= c1) & (r0 <= r1)
    order = np.argsort(z, kind="stable")          # ties resolved by index
    order = order[nonempty[order]]

    det = sigma2[:, 0, 0] * sigma2[:, 1, 1] - sigma2[:, 0, 1] ** 2
    inv = np.empty_like(sigma2)
    inv[:, 0, 0] = sigma2[:, 1, 1] / det
    inv[:, 1, 1] = sigma2[:, 0, 0] / det
    inv[:, 0, 1] = inv[:, 1, 0] = -sigma2[:, 0, 1] / det

    cid, pix = _build_pairs(order, c0, c1, r0, r1, w)
    # stable sort by pixel keeps the existing depth order within each pixel
    reorder = np.argsort(pix, kind="stable")
    cid, pix = cid[reorder], pix[reorder]

    col = pix % w
    row = pix // w
    dx = col + 0.5 - u[cid]
    dy = row + 0.5 - v[cid]
    quad = (inv[cid, 0, 0] * dx ** 2 + 2 * inv[cid, 0, 1] * dx * dy
            + inv[cid, 1, 1] * dy ** 2)
    dens = np.exp(-0.5 * quad)
    a_raw = o[vis][cid] * dens
    alpha = np.minimum(ALPHA_CLAMP, a_raw)

    m = len(alpha)
    if m:
        is_start = np.empty(m, dtype=bool)
        is_start[0] = True
        is_start[1:] = pix[1:] != pix[:-1]
        first = np.flatnonzero(is_start)
        seg = np.cumsum(is_start) - 1
        lg = np.log1p(-alpha)
        cs = np.cumsum(lg)
        excl = cs - lg
        t_before = np.exp(excl - excl[first][seg])
        weight = alpha * t_before
        seg_total = np.exp(cs[np.append(first[1:] - 1, m - 1)] - excl[first])
    else:
        first = seg = np.empty(0, dtype=np.int64)
        t_before = weight = np.empty(0)
        seg_total = np.empty(0)

    img = np.zeros((h * w, 3))
    cvis = c[vis]
    np.add.at(img, pix, weight[:, None] * cvis[cid])
    t_map = np.ones(h * w)
    if m:
        t_map[pix[first]] = seg_total
    img += t_map[:, None] * bg

    def backward(gimg):
        g = gimg.reshape(h * w, 3)
        gpos = np.zeros_like(p)
        gsca = np.zeros_like(s)
        gqua = np.zeros_like(q)
        gopa = np.zeros_like(o)
        grgb = np.zeros_like(c)
        nv = len(vis)
        if m:
            gpix = g[pix]
            # color gradient: each pair deposits weight * rgb at its pixel
            grgb_v = np.zeros((nv, 3))
            np.add.at(grgb_v, cid, weight[:, None] * gpix)
            grgb[vis] = grgb_v

            # alpha gradient: own deposit minus everything it occludes
            dot = (cvis[cid] * gpix).sum(axis=1)
            contrib = weight * dot
            ics = np.cumsum(contrib)
            base = ics[first] - contrib[first]
            seg_cum = ics - base[seg]
            total = seg_cum[np.append(first[1:] - 1, m - 1)]
            bgdot = seg_total * (g[pix[first]] @ bg)
            after = (total + bgdot)[seg] - seg_cum
            galpha = t_before * dot - after / (1.0 - alpha)
            galpha = np.where(a_raw < ALPHA_CLAMP, galpha, 0.0)

            gopa_v = np.zeros(nv)
            np.add.at(gopa_v, cid, dens * galpha)
            gopa[vis] = gopa_v
            gquad = -0.5 * dens * o[vis][cid] * galpha

            gdx = gquad * 2 * (inv[cid, 0, 0] * dx + inv[cid, 0, 1] * dy)
            gdy = gquad * 2 * (inv[cid, 0, 1] * dx + inv[cid, 1, 1] * dy)
            gu = np.zeros(nv)
            gv = np.zeros(nv)
            np.add.at(gu, cid, -gdx)
            np.add.at(gv, cid, -gdy)

            ga = np.zeros((nv, 2, 2))
            np.add.at(ga[:, 0, 0], cid, gquad * dx ** 2)
            np.add.at(ga[:, 0, 1], cid, gquad * dx * dy)
            np.add.at(ga[:, 1, 1], cid, gquad * dy ** 2)
            ga[:, 1, 0] = ga[:, 0, 1]
        else:
            gu = gv = np.zeros(nv)
            ga = np.zeros((nv, 2, 2))

        gs2 = -np.einsum("nij,njk,nkl->nil", inv, ga, inv)
        gsc = np.einsum("nji,njk,nkl->nil", jac, gs2, jac)
        gj = 2 * np.einsum("nij,njk,nkl->nil", gs2, jac, inter["sigma_c"])
        gs3 = np.einsum("ji,njk,kl->nil", rc, gsc, rc)

        rot, d = inter["rot"], s[vis] ** 2
        w3 = gs3 + gs3.transpose(0, 2, 1)
        grot = np.einsum("nij,njk->nik", w3, rot) * d[:, None, :]
        gd = np.einsum("nji,njk,nkl->nil", rot, gs3, rot)
        gsca_v = 2 * s[vis] * np.einsum("nii->ni", gd)

        gqn = np.einsum("nij,ncij->nc", grot, _rotation_jacobians(inter["qn"]))
        qn, norms = inter["qn"], inter["norms"]
        gq_v = (gqn - qn * (qn * gqn).sum(axis=1, keepdims=True)) / norms[:, None]
        gq_v[inter["dead"]] = 0.0

        x, y = xc[:, 0], xc[:, 1]
        gxc = np.empty_like(xc)
        gxc[:, 0] = gu * fx / z + gj[:, 0, 2] * (-fx / z ** 2)
        gxc[:, 1] = gv * fy / z + gj[:, 1, 2] * (-fy / z ** 2)
        gxc[:, 2] = (gu * (-fx * x / z ** 2) + gv * (-fy * y / z ** 2)
                     + gj[:, 0, 0] * (-fx / z ** 2)
                     + gj[:, 1, 1] * (-fy / z ** 2)
                     + gj[:, 0, 2] * (2 * fx * x / z ** 3)
                     + gj[:, 1, 2] * (2 * fy * y / z ** 3))

        gpos[vis] = gxc @ rc
        gsca[vis] = gsca_v
        gqua[vis] = gq_v
        ad.accumulate(pos, gpos)
        ad.accumulate(sca, gsca)
        ad.accumulate(qua, gqua)
        ad.accumulate(opa, gopa)
        ad.accumulate(rgb, grgb)

    out = ad.custom_op(img, (pos, sca, qua, opa, rgb), backward)
    return ad.reshape(out, (h, w, 3))


def psnr(a, b) -> float:
    """10 log10(1/MSE) between [0,1] images, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 99.0
    return min(99.0, 10.0 * np.log10(1.0 / mse))
