"""Ray-traced RGBD rendering of textured triangle meshes.

Rays are cast through pixel centers in camera space, so the reported depth
is the camera-space z of the nearest intersection. Intersection is
Moller-Trumbore without backface culling; color comes from bilinear texture
lookup at barycentrically interpolated UVs.
"""

from __future__ import annotations

import numpy as np

from .geom import CameraModel

NEAR = 1e-6


def ray_triangles(origin: np.ndarray, dirs: np.ndarray, v0, v1, v2,
                  chunk: int = 256):
    """Nearest intersection of each ray with any triangle.

    dirs need not be normalized; the returned t is in units of the ray
    direction. Returns (t, tri_index, bary u, bary v); misses have t = inf
    and tri_index = -1. Ties in t resolve to the lower triangle index.
    """
    dirs = np.atleast_2d(dirs)
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_tri = np.full(n, -1, dtype=np.intp)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    if len(v0) == 0:
        return best_t, best_tri, best_u, best_v
    e1 = v1 - v0
    e2 = v2 - v0
    s = origin[None, :] - v0  # constant per triangle
    for lo in range(0, n, chunk):
        d = dirs[lo:lo + chunk]  # R x 3
        h = np.cross(d[:, None, :], e2[None, :, :])        # R x F x 3
        a = np.einsum("fk,rfk->rf", e1, h)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = 1.0 / a
            u = f * np.einsum("fk,rfk->rf", s, h)
            q = np.cross(s[None, :, :], e1[None, :, :])
            v = f * np.einsum("rk,rfk->rf", d, q)
            t = f * np.einsum("fk,rfk->rf", e2, q)
        hit = ((np.abs(a) > 1e-12) & (u >= -1e-12) & (v >= -1e-12)
               & (u + v <= 1 + 1e-12) & (t > NEAR))
        t = np.where(hit, t, np.inf)
        arg = np.argmin(t, axis=1)  # first min: lower triangle index on ties
        rows = np.arange(t.shape[0])
        tmin = t[rows, arg]
        found = np.isfinite(tmin)
        sl = slice(lo, lo + d.shape[0])
        best_t[sl] = np.where(found, tmin, np.inf)
        best_tri[sl] = np.where(found, arg, -1)
        best_u[sl] = np.where(found, u[rows, arg], 0.0)
        best_v[sl] = np.where(found, v[rows, arg], 0.0)
    return best_t, best_tri, best_u, best_v


def bilinear_sample(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample H x W x 3 texture at UV in [0,1]^2; (0,0) hits texel (0,0)."""
    h, w, _ = texture.shape
    x = np.clip(uv[:, 0], 0.0, 1.0) * (w - 1)
    y = np.clip(uv[:, 1], 0.0, 1.0) * (h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = texture[y0, x0] * (1 - fx) + texture[y0, x1] * fx
    bot = texture[y1, x0] * (1 - fx) + texture[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def render_rgbd(verts: np.ndarray, tris: np.ndarray, uv: np.ndarray,
                texture: np.ndarray, camera: CameraModel,
                background=(0.0, 0.0, 0.0)):
    """One frame -> (depth H x W, color H x W x 3, hit info).

    depth = camera-space z; invalid pixels carry depth 0 and background
    color. hit info is (tri_index H*W, bary_u, bary_v) for track seeding.
    """
    h, w = camera.height, camera.width
    cols, rows = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    # camera-space directions with unit z: intersection t equals depth
    dirs = np.stack([(cols.ravel() - camera.cx) / camera.fx,
                     (rows.ravel() - camera.cy) / camera.fy,
                     np.ones(h * w)], axis=1)
    vc = camera.world_to_camera(verts)
    v0, v1, v2 = vc[tris[:, 0]], vc[tris[:, 1]], vc[tris[:, 2]]
    t, tri, bu, bv = ray_triangles(np.zeros(3), dirs, v0, v1, v2)

    valid = tri >= 0
    depth = np.where(valid, t, 0.0).reshape(h, w)
    color = np.empty((h * w, 3))
    color[:] = np.asarray(background, dtype=np.float64)
    if valid.any():
        vt = tris[tri[valid]]
        bw = (1.0 - bu[valid] - bv[valid])[:, None]
        uv_hit = (bw * uv[vt[:, 0]] + bu[valid][:, None] * uv[vt[:, 1]]
                  + bv[valid][:, None] * uv[vt[:, 2]])
        color[valid] = bilinear_sample(texture, uv_hit)
    return depth, color.reshape(h, w, 3), (tri, bu, bv)


def closest_point_on_triangles(p: np.ndarray, v0, v1, v2):
    """Closest point to p on each triangle, with barycentric coordinates.

    Vectorized over triangles for one query point; standard region-based
    projection onto the triangle.
    """
    ab = v1 - v0
    ac = v2 - v0
    ap = p[None, :] - v0
    d1 = np.einsum("fk,fk->f", ab, ap)
    d2 = np.einsum("fk,fk->f", ac, ap)
    bp = p[None, :] - v1
    d3 = np.einsum("fk,fk->f", ab, bp)
    d4 = np.einsum("fk,fk->f", ac, bp)
    cp = p[None, :] - v2
    d5 = np.einsum("fk,fk->f", ab, cp)
    d6 = np.einsum("fk,fk->f", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = vb / denom
        w = vc / denom
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))

    u_bary = np.empty_like(va)
    v_bary = np.empty_like(va)
    # interior case
    u_bary[:] = v
    v_bary[:] = w
    # vertex regions
    reg_a = (d1 <= 0) & (d2 <= 0)
    reg_b = (d3 >= 0) & (d4 <= d3)
    reg_c = (d6 >= 0) & (d5 <= d6)
    # edge regions
    reg_ab = (~reg_a & ~reg_b & ~reg_c) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    reg_ac = (~reg_a & ~reg_b & ~reg_c & ~reg_ab) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    reg_bc = ((~reg_a & ~reg_b & ~reg_c & ~reg_ab & ~reg_ac)
              & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0))

    u_bary = np.where(reg_ab, np.clip(t_ab, 0, 1), u_bary)
    v_bary = np.where(reg_ab, 0.0, v_bary)
    u_bary = np.where(reg_ac, 0.0, u_bary)
    v_bary = np.where(reg_ac, np.clip(t_ac, 0, 1), v_bary)
    u_bary = np.where(reg_bc, 1.0 - np.clip(t_bc, 0, 1), u_bary)
    v_bary = np.where(reg_bc, np.clip(t_bc, 0, 1), v_bary)
    u_bary = np.where(reg_a, 0.0, u_bary)
    v_bary = np.where(reg_a, 0.0, v_bary)
    u_bary = np.where(reg_b, 1.0, u_bary)
    v_bary = np.where(reg_b, 0.0, v_bary)
    u_bary = np.where(reg_c, 0.0, u_bary)
    v_bary = np.where(reg_c, 1.0, v_bary)

    points = v0 + u_bary[:, None] * ab + v_bary[:, None] * ac
    d2q = ((points - p[None, :]) ** 2).sum(axis=1)
    return points, d2q, u_bary, v_bary


def locate_on_mesh(queries: np.ndarray, verts0: np.ndarray, tris: np.ndarray,
                   tolerance: float = 1e-6):
    """Containing triangle + barycentric coords of near-surface queries.

    Raises ValueError when a query sits farther than `tolerance` from the
    frame-0 surface.
    """
    v0, v1, v2 = verts0[tris[:, 0]], verts0[tris[:, 1]], verts0[tris[:, 2]]
    out_tri = np.empty(len(queries), dtype=np.intp)
    out_bary = np.empty((len(queries), 3))
    for i, q in enumerate(np.atleast_2d(queries)):
        _, d2, bu, bv = closest_point_on_triangles(q, v0, v1, v2)
        best = int(np.argmin(d2))
        if d2[best] > tolerance ** 2:
            raise ValueError(f"query {i} is {np.sqrt(d2[best]):.2e} from the "
                             f"surface (tolerance {tolerance:.0e})")
        out_tri[i] = best
        out_bary[i] = (1.0 - bu[best] - bv[best], bu[best], bv[best])
    return out_tri, out_bary
