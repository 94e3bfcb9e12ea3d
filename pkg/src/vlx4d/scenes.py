"""Procedural animated scenes with exact correspondence ground truth.

Four families cover rigid translation, rigid rotation, smooth non-rigid
bending, and a falling-rebounding sheet whose center of mass follows a
closed-form trajectory. Meshes are textured through fixed per-vertex UVs,
rendered to multiview RGBD, backprojected into spatiotemporal point clouds,
and tracked by propagating frame-0 barycentric coordinates.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .geom import (CameraModel, SceneTransform, SpatioTemporalPointCloud,
                   backproject, frame_time, look_at_camera, normalize_scene)
from .raytrace import locate_on_mesh, render_rgbd

FAMILIES = ("translating-sphere", "rotating-box", "bending-cylinder",
            "falling-sheet")

DEFAULT_CAMERA_RADIUS = 3.5
OCCLUSION_MARGIN = 0.01


def conditioning_fov(r: float) -> float:
    """Field of view that frames the [-1,1] object from distance r."""
    if r <= 0.5:
        raise ValueError("camera distance must exceed 0.5")
    return 2.0 * np.arctan(1.25 / (r - 0.5))


@dataclass
class AnimatedMesh:
    verts: np.ndarray  # T x V x 3
    tris: np.ndarray   # F x 3 int, constant over time
    uv: np.ndarray     # V x 2 in [0,1]

    @property
    def frames(self) -> int:
        return self.verts.shape[0]

    def validate(self) -> None:
        if self.uv.min() < 0 or self.uv.max() > 1:
            raise ValueError("UVs outside [0,1]")
        v0 = self.verts[0]
        a = v0[self.tris[:, 1]] - v0[self.tris[:, 0]]
        b = v0[self.tris[:, 2]] - v0[self.tris[:, 0]]
        areas = 0.5 * np.linalg.norm(np.cross(a, b), axis=1)
        if (areas < 1e-12).any():
            raise ValueError("degenerate triangle in frame 0")


@dataclass
class TrackSet:
    queries: np.ndarray       # Q x 3 at frame 0
    trajectories: np.ndarray  # Q x T x 3
    visibility: np.ndarray    # Q x T bool


@dataclass
class SceneBundle:
    mesh: AnimatedMesh
    texture: np.ndarray
    cameras: list
    depths: np.ndarray   # C x T x H x W
    colors: np.ndarray   # C x T x H x W x 3
    cloud: SpatioTemporalPointCloud
    tracks: TrackSet
    metadata: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return self.mesh.frames

    @property
    def frame_indices(self) -> list:
        """Source frame index of each stored frame (strided clips differ)."""
        stored = self.metadata.get("frame_indices")
        return list(stored) if stored is not None else list(range(self.frames))

    def frame_cloud(self, frame: int) -> SpatioTemporalPointCloud:
        mask = np.isclose(self.cloud.times, frame_time(frame))
        return self.cloud.subset(mask)


# ---------------------------------------------------------------------------
# mesh constructions (raw coordinates; normalized later)

def _sphere_mesh(rings: int = 9, segments: int = 14):
    """UV sphere with pole fans; no degenerate triangles."""
    verts = [np.array([0.0, 1.0, 0.0])]
    uvs = [np.array([0.5, 0.0])]
    for i in range(1, rings):
        polar = np.pi * i / rings
        for j in range(segments):
            az = 2 * np.pi * j / segments
            verts.append(np.array([np.sin(polar) * np.cos(az), np.cos(polar),
                                   np.sin(polar) * np.sin(az)]))
            uvs.append(np.array([j / segments, i / rings]))
    verts.append(np.array([0.0, -1.0, 0.0]))
    uvs.append(np.array([0.5, 1.0]))
    top, bottom = 0, len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * segments + (j % segments)

    tris = []
    for j in range(segments):
        tris.append([top, ring(1, j + 1), ring(1, j)])
    for i in range(1, rings - 1):
        for j in range(segments):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            tris.append([a, b, c])
            tris.append([b, d, c])
    for j in range(segments):
        tris.append([bottom, ring(rings - 1, j), ring(rings - 1, j + 1)])
    return np.array(verts), np.array(tris, dtype=np.intp), np.array(uvs)


def _box_mesh(half_sizes):
    """Axis-aligned box, 4 verts per face so each face gets its own UV tile."""
    hx, hy, hz = half_sizes
    faces = [
        (np.array([0.0, 0, 1]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0]), hz),
        (np.array([0.0, 0, -1]), np.array([-1.0, 0, 0]), np.array([0.0, 1, 0]), hz),
        (np.array([1.0, 0, 0]), np.array([0.0, 0, -1]), np.array([0.0, 1, 0]), hx),
        (np.array([-1.0, 0, 0]), np.array([0.0, 0, 1]), np.array([0.0, 1, 0]), hx),
        (np.array([0.0, 1, 0]), np.array([1.0, 0, 0]), np.array([0.0, 0, 1]), hy),
        (np.array([0.0, -1, 0]), np.array([1.0, 0, 0]), np.array([0.0, 0, -1]), hy),
    ]
    half = np.array([hx, hy, hz])
    verts, uvs, tris = [], [], []
    for f, (normal, tangent, bitangent, dist) in enumerate(faces):
        base = len(verts)
        tile = np.array([f % 3, f // 3], dtype=np.float64)
        for du, dv in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            verts.append(normal * dist + (tangent * du + bitangent * dv) * half)
            uvs.append((tile + [(du + 1) / 2, (dv + 1) / 2]) / np.array([3.0, 2.0]))
        tris.append([base, base + 1, base + 2])
        tris.append([base, base + 2, base + 3])
    return np.array(verts), np.array(tris, dtype=np.intp), np.array(uvs)


def _cylinder_mesh(radius: float, half_height: float, rings: int = 10,
                   segments: int = 12):
    verts, uvs = [], []
    for i in range(rings + 1):
        y = -half_height + 2 * half_height * i / rings
        for j in range(segments):
            az = 2 * np.pi * j / segments
            verts.append(np.array([radius * np.cos(az), y, radius * np.sin(az)]))
            uvs.append(np.array([j / segments, i / rings]))
    tris = []

    def vid(i, j):
        return i * segments + (j % segments)

    for i in range(rings):
        for j in range(segments):
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j), vid(i + 1, j + 1)
            tris.append([a, b, c])
            tris.append([b, d, c])
    return np.array(verts), np.array(tris, dtype=np.intp), np.array(uvs)


def _sheet_mesh(side: float, grid: int = 12):
    g = np.linspace(-side / 2, side / 2, grid)
    xs, zs = np.meshgrid(g, g, indexing="ij")
    verts = np.stack([xs.ravel(), np.zeros(grid * grid), zs.ravel()], axis=1)
    u = np.linspace(0, 1, grid)
    uu, vv = np.meshgrid(u, u, indexing="ij")
    uvs = np.stack([uu.ravel(), vv.ravel()], axis=1)
    tris = []
    for i in range(grid - 1):
        for j in range(grid - 1):
            a = i * grid + j
            b = a + 1
            c = a + grid
            d = c + 1
            tris.append([a, b, c])
            tris.append([b, d, c])
    return verts, np.array(tris, dtype=np.intp), uvs


def _axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def falling_sheet_height(tau, y0: float, g: float, ground: float,
                         restitution: float):
    """Closed-form sheet COM height: free fall, then one damped rebound."""
    tau = np.asarray(tau, dtype=np.float64)
    t_c = np.sqrt(2.0 * (y0 - ground) / g)
    v_c = g * t_c
    dt = tau - t_c
    before = y0 - 0.5 * g * tau ** 2
    after = ground + restitution * v_c * dt - 0.5 * g * dt ** 2
    y = np.where(tau < t_c, before, np.maximum(after, ground))
    return y, t_c


def make_scene(family: str, seed: int, frames: int,
               frame_indices=None) -> tuple[AnimatedMesh, dict]:
    """Raw (unnormalized) animated mesh plus closed-form motion metadata.

    frame_indices optionally picks non-contiguous source frames (still at the
    fixed frame rate), e.g. (0, 3, 7, ...) to spread `frames` stored frames
    over a longer clip. Defaults to 0..frames-1.
    """
    if frames < 2:
        raise ValueError("need at least 2 frames")
    if family not in FAMILIES:
        raise ValueError(f"unknown scene family {family!r}")
    if frame_indices is None:
        indices = np.arange(frames)
    else:
        indices = np.asarray(list(frame_indices), dtype=int)
        if indices.shape != (frames,):
            raise ValueError(f"{frames} frames need {frames} indices")
        if indices[0] < 0 or (np.diff(indices) <= 0).any():
            raise ValueError("frame indices must be non-negative increasing")
    rng = np.random.default_rng(np.random.SeedSequence(
        [zlib.crc32(family.encode()), seed, frames]))
    taus = np.array([frame_time(int(j)) for j in indices])
    info: dict = {"family": family, "seed": seed, "frames": frames,
                  "frame_indices": indices.tolist()}

    if family == "translating-sphere":
        base, tris, uv = _sphere_mesh()
        radius = rng.uniform(0.4, 0.55)
        base = base * radius
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        speed = rng.uniform(2.0, 3.5)
        velocity = direction * speed
        start = -velocity * taus[-1] / 2.0
        verts = base[None] + (start[None] + velocity[None] * taus[:, None])[:, None]
        info["velocity_raw"] = velocity.tolist()

    elif family == "rotating-box":
        half = rng.uniform(0.3, 0.6, size=3)
        base, tris, uv = _box_mesh(half)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        omega = rng.uniform(4.0, 8.0)  # rad/s
        verts = np.stack([base @ _axis_angle_matrix(axis, omega * t).T
                          for t in taus])
        info["axis"] = axis.tolist()
        info["omega"] = omega

    elif family == "bending-cylinder":
        radius = rng.uniform(0.18, 0.3)
        half_h = rng.uniform(0.7, 1.0)
        base, tris, uv = _cylinder_mesh(radius, half_h)
        kappa_max = rng.uniform(0.5, 1.0)
        spin = _axis_angle_matrix(np.array([0.0, 1.0, 0.0]),
                                  rng.uniform(0, 2 * np.pi))
        frames_verts = []
        for j, t in enumerate(taus):
            kappa = kappa_max * j / (frames - 1)
            if kappa < 1e-9:
                bent = base.copy()
            else:
                r = 1.0 / kappa
                theta = kappa * (base[:, 1] + half_h)  # bend from the base up
                x, z = base[:, 0], base[:, 2]
                bent = np.stack([
                    r * (1 - np.cos(theta)) + x * np.cos(theta),
                    -half_h + (r + x) * np.sin(theta),
                    z], axis=1)
            frames_verts.append(bent @ spin.T)
        verts = np.stack(frames_verts)
        info["kappa_max"] = kappa_max

    else:  # falling-sheet
        side = rng.uniform(1.4, 1.8)
        base, tris, uv = _sheet_mesh(side)
        y0 = rng.uniform(0.5, 0.7)
        ground = -0.6
        # fixed rebound damping and contact fraction: the trajectory is then
        # a function of the visible frame-0 state (drop height, sheet size),
        # which keeps image-conditioned generation well posed
        restitution = 0.4
        t_c_target = taus[-1] * 0.525
        g = 2.0 * (y0 - ground) / t_c_target ** 2
        y_com, t_c = falling_sheet_height(taus, y0, g, ground, restitution)
        fx, fz = rng.uniform(1.0, 2.0, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        amp = rng.uniform(0.05, 0.1)
        frames_verts = []
        for j, t in enumerate(taus):
            wrinkle_gain = 0.3 + 0.7 * min(1.0, t / max(t_c, 1e-9))
            w = amp * wrinkle_gain * (np.sin(2 * np.pi * fx * base[:, 0] + ph[0])
                                      * np.sin(2 * np.pi * fz * base[:, 2] + ph[1]))
            w = w - w.mean()  # keep the COM exactly on the closed form
            v = base.copy()
            v[:, 1] = y_com[j] + w
            frames_verts.append(v)
        verts = np.stack(frames_verts)
        info.update({"y0_raw": y0, "g_raw": g, "ground_raw": ground,
                     "restitution": restitution, "contact_time": float(t_c)})

    mesh = AnimatedMesh(np.ascontiguousarray(verts), tris, uv)
    mesh.validate()
    return mesh, info


# ---------------------------------------------------------------------------
# textures

TEXTURE_KINDS = ("checker", "stripes", "noise")


def make_texture(kind: str, seed: int, size: int = 64) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(
        [zlib.crc32(kind.encode()), seed]))
    c1 = rng.uniform(0.1, 1.0, 3)
    c2 = rng.uniform(0.1, 1.0, 3)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if kind == "checker":
        tiles = int(rng.integers(4, 9))
        cells = (xx * tiles // size + yy * tiles // size) % 2
        tex = np.where(cells[..., None] == 0, c1, c2)
    elif kind == "stripes":
        freq = int(rng.integers(3, 8))
        phase = rng.uniform(0, 2 * np.pi)
        s = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx + yy) / size + phase)
        tex = c1[None, None] * s[..., None] + c2[None, None] * (1 - s[..., None])
    elif kind == "noise":
        coarse = rng.uniform(0.05, 1.0, (9, 9, 3))
        g = np.linspace(0, 8, size)
        i0 = np.floor(g).astype(int)
        i1 = np.minimum(i0 + 1, 8)
        f = (g - i0)[:, None]
        rows = (coarse[i0][:, i0] * (1 - f[None, :, :]) +
                coarse[i0][:, i1] * f[None, :, :])
        tex = rows * (1 - f[:, None, :]) + \
            (coarse[i1][:, i0] * (1 - f[None, :, :]) +
             coarse[i1][:, i1] * f[None, :, :]) * f[:, None, :]
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    return np.clip(tex, 0.0, 1.0)


def texture_augment(mesh: AnimatedMesh, texture: np.ndarray, seed: int = 0):
    """Pair a mesh with a texture; UVs are fixed so colors track the surface."""
    if texture.size == 0:
        raise ValueError("empty texture")
    return mesh, np.asarray(texture, dtype=np.float64)


def surface_color(mesh: AnimatedMesh, texture: np.ndarray, tri_idx, bary):
    """Color of surface points given triangle + barycentric coordinates."""
    from .raytrace import bilinear_sample
    vt = mesh.tris[tri_idx]
    uv = (bary[:, 0:1] * mesh.uv[vt[:, 0]] + bary[:, 1:2] * mesh.uv[vt[:, 1]]
          + bary[:, 2:3] * mesh.uv[vt[:, 2]])
    return bilinear_sample(texture, uv)


# ---------------------------------------------------------------------------
# tracks and visibility

def propagate_barycentric(mesh: AnimatedMesh, tri_idx: np.ndarray,
                          bary: np.ndarray) -> np.ndarray:
    """Q x T x 3 trajectories: fixed (triangle, barycentric) re-evaluated
    on the animated vertices of every frame."""
    vt = mesh.tris[tri_idx]  # Q x 3
    traj = (bary[None, :, 0, None] * mesh.verts[:, vt[:, 0]]
            + bary[None, :, 1, None] * mesh.verts[:, vt[:, 1]]
            + bary[None, :, 2, None] * mesh.verts[:, vt[:, 2]])
    return traj.transpose(1, 0, 2)


def make_tracks(mesh: AnimatedMesh, queries: np.ndarray,
                tolerance: float = 1e-6) -> np.ndarray:
    """Q x T x 3 trajectories by barycentric propagation from frame 0."""
    tri, bary = locate_on_mesh(queries, mesh.verts[0], mesh.tris, tolerance)
    return propagate_barycentric(mesh, tri, bary)


def mark_visibility(trajectories: np.ndarray, camera: CameraModel,
                    depth_frames: np.ndarray,
                    margin: float = OCCLUSION_MARGIN) -> np.ndarray:
    """Visible iff the point's depth is within margin of the rendered surface.

    Points projecting outside the image, or onto pixels with no surface,
    are occluded.
    """
    q, t, _ = trajectories.shape
    vis = np.zeros((q, t), dtype=bool)
    for j in range(t):
        uv, z = camera.project(trajectories[:, j])
        col = np.floor(uv[:, 0]).astype(np.intp)
        row = np.floor(uv[:, 1]).astype(np.intp)
        inside = ((z > 0) & (col >= 0) & (col < camera.width)
                  & (row >= 0) & (row < camera.height))
        surf = np.zeros(q)
        surf[inside] = depth_frames[j][row[inside], col[inside]]
        vis[:, j] = inside & (surf > 0) & (z <= surf + margin)
    return vis


# ---------------------------------------------------------------------------
# full bundles

def sphere_cameras(count: int, radius: float, width: int, height: int,
                   azimuth_offset: float = 0.0) -> list:
    """Fibonacci-spiral cameras on a sphere, all looking at the origin."""
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    fov = conditioning_fov(radius)
    for i in range(count):
        y = 1.0 - 2.0 * (i + 0.5) / count
        r_xy = np.sqrt(max(0.0, 1.0 - y * y))
        az = golden * i + azimuth_offset
        pos = radius * np.array([r_xy * np.cos(az), y, r_xy * np.sin(az)])
        cams.append(look_at_camera(pos, [0.0, 0.0, 0.0], fov, width, height))
    return cams


def build_scene(family: str, seed: int, frames: int = 8, cameras: int = 4,
                resolution: int = 64, n_tracks: int = 64,
                texture_kind: str | None = None,
                frame_indices=None) -> SceneBundle:
    """Generate, normalize, texture, render, backproject, and track a scene."""
    mesh_raw, info = make_scene(family, seed, frames, frame_indices)
    verts, tf = normalize_scene(mesh_raw.verts)
    mesh = AnimatedMesh(verts, mesh_raw.tris, mesh_raw.uv)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    if texture_kind is None:
        texture_kind = TEXTURE_KINDS[int(rng.integers(0, len(TEXTURE_KINDS)))]
    texture = make_texture(texture_kind, seed)
    mesh, texture = texture_augment(mesh, texture, seed)

    cams = sphere_cameras(cameras, DEFAULT_CAMERA_RADIUS, resolution, resolution,
                          azimuth_offset=float(rng.uniform(0, 2 * np.pi)))

    source_frames = info["frame_indices"]
    depths = np.zeros((cameras, frames, resolution, resolution))
    colors = np.zeros((cameras, frames, resolution, resolution, 3))
    clouds = []
    hit0 = None
    for ci, cam in enumerate(cams):
        for j in range(frames):
            depth, color, hits = render_rgbd(mesh.verts[j], mesh.tris, mesh.uv,
                                             texture, cam)
            depths[ci, j] = depth
            colors[ci, j] = color
            clouds.append(backproject(depth, color, cam, source_frames[j]))
            if ci == 0 and j == 0:
                hit0 = hits
    cloud = SpatioTemporalPointCloud(
        np.concatenate([c.positions for c in clouds]),
        np.concatenate([c.colors for c in clouds]),
        np.concatenate([c.times for c in clouds]))
    cloud.validate(eps=1e-6, max_time=frame_time(source_frames[-1]) + 1e-9)

    # track queries: surface points seen by camera 0 in frame 0
    tri0, bu0, bv0 = hit0
    valid = np.flatnonzero(tri0 >= 0)
    pick = rng.choice(valid, size=min(n_tracks, valid.size), replace=False)
    pick.sort()
    bary = np.stack([1.0 - bu0[pick] - bv0[pick], bu0[pick], bv0[pick]], axis=1)
    traj = propagate_barycentric(mesh, tri0[pick], bary)
    queries = traj[:, 0].copy()
    vis = mark_visibility(traj, cams[0], depths[0])
    tracks = TrackSet(queries, traj, vis)

    info.update({"texture": texture_kind, "resolution": resolution,
                 "camera_radius": DEFAULT_CAMERA_RADIUS,
                 "center": tf.center.tolist(), "half_extent": tf.half_extent})
    if family == "translating-sphere":
        info["velocity"] = (np.asarray(info["velocity_raw"])
                            / tf.half_extent).tolist()
    if family == "falling-sheet":
        info["y0"] = (info["y0_raw"] - tf.center[1]) / tf.half_extent
        info["g"] = info["g_raw"] / tf.half_extent
        info["ground"] = (info["ground_raw"] - tf.center[1]) / tf.half_extent
    return SceneBundle(mesh, texture, cams, depths, colors, cloud, tracks, info)


def sheet_reference_height(bundle_info: dict, tau) -> np.ndarray:
    """Normalized-scene closed-form COM height for a falling-sheet bundle."""
    y, _ = falling_sheet_height(tau, bundle_info["y0"], bundle_info["g"],
                                bundle_info["ground"],
                                bundle_info["restitution"])
    return y


# ---------------------------------------------------------------------------
# directory layout

def save_scene(bundle: SceneBundle, root) -> None:
    os.makedirs(root, exist_ok=True)
    meta = dict(bundle.metadata)
    meta["cameras"] = [{
        "rotation": c.rotation.tolist(), "translation": c.translation.tolist(),
        "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
        "width": c.width, "height": c.height, "fov": c.fov,
    } for c in bundle.cameras]
    with open(os.path.join(root, "scene.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
    fileio.save_cloud(os.path.join(root, "cloud.vlxp"), bundle.cloud)
    fileio.save_tracks(os.path.join(root, "tracks.bin"),
                       bundle.tracks.trajectories, bundle.tracks.visibility)
    for ci in range(len(bundle.cameras)):
        cam_dir = os.path.join(root, f"cam{ci:02d}")
        os.makedirs(cam_dir, exist_ok=True)
        for j in range(bundle.frames):
            fileio.save_pfm(os.path.join(cam_dir, f"depth_{j:04d}.pfm"),
                            bundle.depths[ci, j])
            fileio.save_ppm(os.path.join(cam_dir, f"color_{j:04d}.ppm"),
                            bundle.colors[ci, j])


def load_scene(root) -> SceneBundle:
    """Rebuild a bundle from disk; the mesh is regenerated from metadata."""
    with open(os.path.join(root, "scene.json")) as f:
        meta = json.load(f)
    cams = [CameraModel(rotation=np.array(c["rotation"]),
                        translation=np.array(c["translation"]), fx=c["fx"],
                        fy=c["fy"], cx=c["cx"], cy=c["cy"], width=c["width"],
                        height=c["height"], fov=c["fov"])
            for c in meta.pop("cameras")]
    cloud = fileio.load_cloud(os.path.join(root, "cloud.vlxp"))
    traj, vis = fileio.load_tracks(os.path.join(root, "tracks.bin"))
    frames = meta["frames"]
    res = meta["resolution"]
    depths = np.zeros((len(cams), frames, res, res))
    colors = np.zeros((len(cams), frames, res, res, 3))
    for ci in range(len(cams)):
        cam_dir = os.path.join(root, f"cam{ci:02d}")
        for j in range(frames):
            depths[ci, j] = fileio.load_pfm(
                os.path.join(cam_dir, f"depth_{j:04d}.pfm"))
            colors[ci, j] = fileio.load_ppm(
                os.path.join(cam_dir, f"color_{j:04d}.ppm"))
    mesh_raw, _ = make_scene(meta["family"], meta["seed"], frames,
                             meta.get("frame_indices"))
    verts = SceneTransform(np.array(meta["center"]),
                           meta["half_extent"]).apply(mesh_raw.verts)
    mesh = AnimatedMesh(verts, mesh_raw.tris, mesh_raw.uv)
    texture = make_texture(meta["texture"], meta["seed"])
    tracks = TrackSet(traj[:, 0].copy(), traj, vis)
    return SceneBundle(mesh, texture, cams, depths, colors, cloud, tracks, meta)
