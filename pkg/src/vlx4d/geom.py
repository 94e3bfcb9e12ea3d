"""Non-differentiable geometry kernels: scene normalization, pinhole
cameras, 4D farthest-point sampling and k-nearest neighbors, voxel windows,
occupancy grids, and symmetric Chamfer distance.

All kernels are pure numpy on float64 and exactly reproducible: ties break
toward the lower index, and reductions run in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FRAME_RATE = 100.0


def frame_time(frame_index: int) -> float:
    """Timestamp of a frame at the fixed 100 fps convention."""
    if frame_index < 0:
        raise ValueError("frame_index must be non-negative")
    return frame_index / FRAME_RATE


@dataclass
class SpatioTemporalPointCloud:
    """The model input: N surface samples with color and frame time."""

    positions: np.ndarray  # N x 3, scene units in [-1, 1]
    colors: np.ndarray     # N x 3 in [0, 1]
    times: np.ndarray      # N, frame_index / 100

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def points4(self) -> np.ndarray:
        """N x 4 array of (x, y, z, tau)."""
        return np.concatenate([self.positions, self.times[:, None]], axis=1)

    def validate(self, eps: float = 1e-6, max_time: float | None = None) -> None:
        n = len(self)
        if self.colors.shape != (n, 3) or self.times.shape != (n,):
            raise ValueError("inconsistent field lengths")
        if n and (self.positions.min() < -1 - eps or self.positions.max() > 1 + eps):
            raise ValueError("positions outside [-1, 1] cube")
        if n and (self.colors.min() < 0 or self.colors.max() > 1):
            raise ValueError("colors outside [0, 1]")
        if n and self.times.min() < 0:
            raise ValueError("negative timestamps")
        if max_time is not None and n and self.times.max() >= max_time:
            raise ValueError("timestamps beyond frame range")

    def subset(self, idx) -> "SpatioTemporalPointCloud":
        return SpatioTemporalPointCloud(self.positions[idx], self.colors[idx],
                                        self.times[idx])


@dataclass
class SceneTransform:
    """Uniform scale + translation taking world points into [-1, 1]^3."""

    center: np.ndarray
    half_extent: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) / self.half_extent

    def invert(self, points: np.ndarray) -> np.ndarray:
        return points * self.half_extent + self.center


def normalize_scene(vertices_over_time: np.ndarray):
    """Map the animation's joint bounding box into [-1, 1]^3.

    Accepts T x V x 3 (or V x 3); returns (scaled vertices, SceneTransform).
    """
    v = np.asarray(vertices_over_time, dtype=np.float64)
    flat = v.reshape(-1, 3)
    lo, hi = flat.min(axis=0), flat.max(axis=0)
    half = float((hi - lo).max()) / 2.0
    if half <= 0.0:
        raise ValueError("degenerate bounding box: zero extent")
    tf = SceneTransform(center=(lo + hi) / 2.0, half_extent=half)
    return tf.apply(v), tf


@dataclass
class CameraModel:
    """Pinhole camera: world -> camera is x_c = R x_w + t, z forward."""

    rotation: np.ndarray     # 3 x 3
    translation: np.ndarray  # 3
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    fov: float = 0.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside image")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation not orthonormal (err {err:.2e})")

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    def project(self, points_world: np.ndarray):
        """Points -> (pixel coords N x 2, camera depth N). No culling."""
        pc = self.world_to_camera(np.atleast_2d(points_world))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def pixels_to_camera(self, u, v, depth) -> np.ndarray:
        """Continuous pixel coords + positive depth -> camera-space points."""
        u, v, depth = (np.asarray(a, dtype=np.float64) for a in (u, v, depth))
        return np.stack([(u - self.cx) / self.fx * depth,
                         (v - self.cy) / self.fy * depth, depth], axis=-1)


def look_at_camera(position, target, fov: float, width: int, height: int,
                   up=(0.0, 1.0, 0.0)) -> CameraModel:
    """Camera at `position` looking at `target`, square pixels, fov across width."""
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    nz = np.linalg.norm(z)
    if nz == 0:
        raise ValueError("camera position equals target")
    z = z / nz
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    f = (width / 2.0) / np.tan(fov / 2.0)
    return CameraModel(rotation=rot, translation=-rot @ position, fx=f, fy=f,
                       cx=width / 2.0, cy=height / 2.0, width=width,
                       height=height, fov=fov)


def backproject(depth: np.ndarray, color: np.ndarray, camera: CameraModel,
                frame_index: int) -> SpatioTemporalPointCloud:
    """Lift every valid (depth > 0) pixel to a world-space colored point.

    Rays pass through pixel centers (col + 0.5, row + 0.5).
    """
    depth = np.asarray(depth, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    if depth.shape != color.shape[:2]:
        raise ValueError("depth and color sizes disagree")
    rows, cols = np.nonzero(depth > 0)
    if rows.size == 0:
        raise ValueError("no valid pixels to backproject")
    cam_pts = camera.pixels_to_camera(cols + 0.5, rows + 0.5, depth[rows, cols])
    world = camera.camera_to_world(cam_pts)
    tau = np.full(rows.size, frame_time(frame_index))
    return SpatioTemporalPointCloud(world, color[rows, cols], tau)


# ---------------------------------------------------------------------------
# 4D sampling and neighborhoods

def fps4d(points4: np.ndarray, k: int, preselect_factor: int = 4,
          seed: int = 0) -> np.ndarray:
    """Greedy farthest-point selection of k indices in (x, y, z, tau).

    A seeded uniform preselection caps the candidate pool at
    preselect_factor * k points; the first pick is the lowest-index
    candidate and distance ties break toward the lower index.
    """
    pts = np.asarray(points4, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        raise ValueError("empty point set")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={n}")
    n_cand = min(preselect_factor * k, n)
    if n_cand < n:
        rng = np.random.default_rng(seed)
        cand = np.sort(rng.choice(n, size=n_cand, replace=False))
    else:
        cand = np.arange(n)
    cpts = pts[cand]
    chosen = np.empty(k, dtype=np.intp)
    chosen[0] = 0
    min_d2 = ((cpts - cpts[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_d2))  # argmax takes the first max: lowest index
        chosen[i] = nxt
        d2 = ((cpts - cpts[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return cand[chosen]


def knn4d(queries: np.ndarray, inputs: np.ndarray, m: int,
          chunk: int = 256) -> np.ndarray:
    """Exact m nearest inputs per query under 4D Euclidean distance.

    Returns Q x m indices ordered nearest-first; equal distances break
    toward the lower input index.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    x = np.asarray(inputs, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= N, got m={m}, N={n}")
    out = np.empty((q.shape[0], m), dtype=np.intp)
    for lo in range(0, q.shape[0], chunk):
        d2 = ((q[lo:lo + chunk, None, :] - x[None, :, :]) ** 2).sum(axis=2)
        # stable argsort keeps lower indices first among ties
        order = np.argsort(d2, axis=1, kind="stable")
        out[lo:lo + chunk] = order[:, :m]
    return out


@dataclass
class VoxelWindowAssignment:
    """Per-point 4D cell indices partitioning space-time into windows."""

    cells: np.ndarray  # N x 4 ints (ix, iy, iz, it)
    spatial_width: float
    temporal_width_frames: int

    def cell_keys(self) -> np.ndarray:
        """One opaque integer id per point; equal iff all 4 indices match."""
        _, keys = np.unique(self.cells, axis=0, return_inverse=True)
        return keys


def voxel_window(points4: np.ndarray, spatial_width: float = 0.5,
                 temporal_width_frames: int = 6,
                 frame_count: int | None = None) -> VoxelWindowAssignment:
    """Assign each (x, y, z, tau) point its 4D voxel cell.

    Spatial index = floor((v + 1) / w) over [-1, 1], temporal index =
    floor(frame / w_t) with frame = round(tau * 100); the upper domain
    boundary is clamped into the last cell.
    """
    if spatial_width <= 0 or temporal_width_frames <= 0:
        raise ValueError("widths must be positive")
    pts = np.atleast_2d(np.asarray(points4, dtype=np.float64))
    n_spatial = int(np.ceil(2.0 / spatial_width))
    sp = np.floor((pts[:, :3] + 1.0) / spatial_width).astype(np.int64)
    np.clip(sp, 0, n_spatial - 1, out=sp)
    frames = np.rint(pts[:, 3] * FRAME_RATE).astype(np.int64)
    tc = frames // temporal_width_frames
    tc = np.maximum(tc, 0)
    if frame_count is not None:
        n_temporal = max(1, int(np.ceil(frame_count / temporal_width_frames)))
        tc = np.minimum(tc, n_temporal - 1)
    return VoxelWindowAssignment(np.concatenate([sp, tc[:, None]], axis=1),
                                 spatial_width, temporal_width_frames)


def occupancy_grid(positions: np.ndarray, resolution: int):
    """Occupied voxels of the regular resolution^3 grid over [-1, 1]^3.

    Returns (indices M x 3, centers M x 3) in lexicographic index order.
    """
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    width = 2.0 / resolution
    idx = np.floor((pos + 1.0) / width).astype(np.int64)
    np.clip(idx, 0, resolution - 1, out=idx)
    uniq = np.unique(idx, axis=0)  # sorted lexicographically
    centers = -1.0 + (uniq + 0.5) * width
    return uniq, centers


def voxel_centers(resolution: int) -> np.ndarray:
    """All resolution^3 voxel centers in lexicographic index order."""
    width = 2.0 / resolution
    r = np.arange(resolution)
    ix, iy, iz = np.meshgrid(r, r, r, indexing="ij")
    idx = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
    return -1.0 + (idx + 0.5) * width


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric squared Chamfer: mean_a min_b d^2 + mean_b min_a d^2."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer requires non-empty point sets")
    return float(_nearest_sq(a, b).mean() + _nearest_sq(b, a).mean())


def _nearest_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    rows = max(1, int(2_000_000 // max(1, b.shape[0])))
    out = np.empty(a.shape[0])
    for lo in range(0, a.shape[0], rows):
        d2 = ((a[lo:lo + rows, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        out[lo:lo + rows] = d2.min(axis=1)
    return out
