"""Appearance decoder: occupied voxel centers cross-attend to the tokens and
emit a fixed number of Gaussians per voxel, plus an occupancy head that
predicts which voxels to decode and the photometric training loss.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoder import DynamicTokens, build_window_mask
from .geom import CameraModel, occupancy_grid, voxel_centers


@dataclass
class GaussianDecoderConfig:
    token_dim: int = 16
    hidden: int = 128
    heads: int = 4
    layers: int = 2
    occ_layers: int = 1
    per_voxel: int = 8
    resolution: int = 16
    window_width: float = 0.5
    fourier_space: int = 6
    fourier_time: int = 4
    scale_min: float = 0.001
    scale_max: float = 0.01

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.per_voxel < 1:
            raise ValueError("per_voxel must be >= 1")
        if not 0 < self.scale_min < self.scale_max:
            raise ValueError("need 0 < scale_min < scale_max")

    @property
    def query_feature_dim(self) -> int:
        return 3 * (2 * self.fourier_space + 1) + (2 * self.fourier_time + 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianDecoderConfig":
        names = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class VoxelQuery:
    """Occupied voxel centers to decode at one frame time."""

    centers: np.ndarray  # M x 3
    tau: float
    width: float

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))

    def validate(self, eps: float = 1e-9) -> None:
        if self.centers.shape[0] < 1:
            raise ValueError("voxel query needs at least one center")
        if self.width <= 0:
            raise ValueError("voxel width must be positive")
        # centers must sit on the regular grid: -1 + (i + 0.5) * width
        idx = (self.centers + 1.0) / self.width - 0.5
        if np.abs(idx - np.rint(idx)).max() > eps:
            raise ValueError("voxel centers are off the regular grid")

    @classmethod
    def from_points(cls, positions: np.ndarray, resolution: int,
                    tau: float) -> "VoxelQuery":
        _, centers = occupancy_grid(positions, resolution)
        return cls(centers=centers, tau=tau, width=2.0 / resolution)


@dataclass
class GaussianSet:
    """N Gaussians at one timestamp, in activated (physical) parameters."""

    positions: object  # N x 3 tensor or array
    scales: object     # N x 3
    quats: object      # N x 4, unit
    opacity: object    # N
    rgb: object        # N x 3
    tau: float = 0.0

    def __len__(self):
        return ad.wrap(self.positions).data.shape[0]

    def to_array(self) -> np.ndarray:
        cols = [ad.wrap(self.positions).data, ad.wrap(self.scales).data,
                ad.wrap(self.quats).data,
                ad.wrap(self.opacity).data.reshape(-1, 1),
                ad.wrap(self.rgb).data]
        return np.concatenate(cols, axis=1)

    @classmethod
    def from_array(cls, arr: np.ndarray, tau: float) -> "GaussianSet":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 14:
            raise ValueError("expected N x 14 values")
        return cls(positions=arr[:, 0:3], scales=arr[:, 3:6],
                   quats=arr[:, 6:10], opacity=arr[:, 10], rgb=arr[:, 11:14],
                   tau=tau)

    def validate(self, scale_min: float = 0.0, scale_max: float = np.inf,
                 eps: float = 1e-9) -> None:
        q = ad.wrap(self.quats).data
        if np.abs(np.linalg.norm(q, axis=1) - 1.0).max() > eps:
            raise ValueError("quaternions not unit length")
        s = ad.wrap(self.scales).data
        if s.min() < scale_min - eps or s.max() > scale_max + eps:
            raise ValueError("scales out of range")
        for field in (self.opacity, self.rgb):
            v = ad.wrap(field).data
            if v.min() < -eps or v.max() > 1 + eps:
                raise ValueError("opacity/rgb out of [0, 1]")


# ---------------------------------------------------------------------------
# activation

def activate_parameters(raw, centers: np.ndarray, width: float,
                        scale_min: float = 0.001, scale_max: float = 0.01,
                        tau: float = 0.0) -> GaussianSet:
    """Raw N x 14 head values -> physical Gaussian parameters.

    position = center + (width/2) * tanh(raw), scale = sigmoid into
    [scale_min, scale_max], quaternion normalized (all-zero raw rows fall
    back to the identity rotation, with a warning), opacity/rgb sigmoid.
    """
    raw = ad.wrap(raw)
    if raw.data.ndim != 2 or raw.data.shape[1] != 14:
        raise ad.ShapeError(f"expected N x 14 raw values, got {raw.data.shape}")
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))

    offset = ad.scale(ad.tanh(ad.narrow(raw, 1, 0, 3)), width / 2.0)
    positions = ad.add(offset, Tensor(centers))
    scales = ad.add(ad.scale(ad.sigmoid(ad.narrow(raw, 1, 3, 3)),
                             scale_max - scale_min), float(scale_min))

    q_raw = ad.narrow(raw, 1, 6, 4)
    norms = np.linalg.norm(q_raw.data, axis=1)
    dead = norms == 0.0
    if dead.any():
        warnings.warn(f"{int(dead.sum())} zero quaternions replaced by identity",
                      stacklevel=2)
        keep = (~dead).astype(np.float64)[:, None]
        identity = np.zeros((len(dead), 4))
        identity[dead, 0] = 1.0
        q_raw = ad.add(ad.mul(q_raw, Tensor(keep)), Tensor(identity))
    qnorm = ad.sqrt(ad.sum(ad.square(q_raw), axis=1, keepdims=True))
    quats = ad.div(q_raw, qnorm)

    opacity = ad.reshape(ad.sigmoid(ad.narrow(raw, 1, 10, 1)), (raw.data.shape[0],))
    rgb = ad.sigmoid(ad.narrow(raw, 1, 11, 3))
    return GaussianSet(positions=positions, scales=scales, quats=quats,
                       opacity=opacity, rgb=rgb, tau=tau)


# ---------------------------------------------------------------------------
# decoder network

def init_gaussian_decoder(cfg: GaussianDecoderConfig,
                          rng: np.random.Generator) -> dict:
    params: dict = {}
    nn.add_linear(params, rng, "gs.in_lift", cfg.query_feature_dim, cfg.hidden)
    nn.add_linear(params, rng, "gs.tok_lift", cfg.token_dim, cfg.hidden)
    for i in range(cfg.layers):
        nn.add_rmsnorm(params, f"gs.l{i}.cross.norm_q", cfg.hidden)
        nn.add_rmsnorm(params, f"gs.l{i}.cross.norm_kv", cfg.hidden)
        nn.add_attention(params, rng, f"gs.l{i}.cross", cfg.hidden)
        nn.add_rmsnorm(params, f"gs.l{i}.cff.norm", cfg.hidden)
        nn.add_swiglu(params, rng, f"gs.l{i}.cff", cfg.hidden, 2 * cfg.hidden)
        nn.add_rmsnorm(params, f"gs.l{i}.self.norm", cfg.hidden)
        nn.add_attention(params, rng, f"gs.l{i}.self", cfg.hidden)
        nn.add_rmsnorm(params, f"gs.l{i}.sff.norm", cfg.hidden)
        nn.add_swiglu(params, rng, f"gs.l{i}.sff", cfg.hidden, 2 * cfg.hidden)
    nn.add_rmsnorm(params, "gs.out_norm", cfg.hidden)
    nn.add_linear(params, rng, "gs.out", cfg.hidden, 14 * cfg.per_voxel)
    # occupancy read-out
    nn.add_linear(params, rng, "gs.occ_lift", cfg.query_feature_dim, cfg.hidden)
    for i in range(cfg.occ_layers):
        nn.add_rmsnorm(params, f"gs.occ{i}.cross.norm_q", cfg.hidden)
        nn.add_rmsnorm(params, f"gs.occ{i}.cross.norm_kv", cfg.hidden)
        nn.add_attention(params, rng, f"gs.occ{i}.cross", cfg.hidden)
        nn.add_rmsnorm(params, f"gs.occ{i}.ff.norm", cfg.hidden)
        nn.add_swiglu(params, rng, f"gs.occ{i}.ff", cfg.hidden, 2 * cfg.hidden)
    nn.add_rmsnorm(params, "gs.occ_norm", cfg.hidden)
    nn.add_linear(params, rng, "gs.occ_out", cfg.hidden, 1)
    return params


def _query_features(centers: np.ndarray, tau: float, cfg: GaussianDecoderConfig):
    m = centers.shape[0]
    return ad.concat([
        nn.fourier_encode(Tensor(centers), cfg.fourier_space),
        nn.fourier_encode(Tensor(np.full((m, 1), float(tau))), cfg.fourier_time),
    ], axis=-1)


def _cross_layer(params, prefix, h, kv, heads, admit):
    hn = nn.apply_rmsnorm(params, f"{prefix}.norm_q", h)
    kvn = nn.apply_rmsnorm(params, f"{prefix}.norm_kv", kv)
    att = nn.masked_attention(nn.linear(params, f"{prefix}.q", hn),
                              nn.linear(params, f"{prefix}.k", kvn),
                              nn.linear(params, f"{prefix}.v", kvn),
                              admit, heads)
    return ad.add(h, nn.linear(params, f"{prefix}.o", att))


def _ff(params, prefix, h):
    hn = nn.apply_rmsnorm(params, f"{prefix}.norm", h)
    return ad.add(h, nn.apply_swiglu(params, prefix, hn))


def decode_gaussians(vox: VoxelQuery, tokens: DynamicTokens, params: dict,
                     cfg: GaussianDecoderConfig) -> GaussianSet:
    """Tokens + occupied voxel centers -> per_voxel Gaussians per voxel."""
    vox.validate()
    m = vox.centers.shape[0]
    h = nn.linear(params, "gs.in_lift", _query_features(vox.centers, vox.tau, cfg))
    kv = nn.linear(params, "gs.tok_lift", tokens.values)
    admit_all = np.ones((m, kv.data.shape[0]), dtype=bool)
    # spatial windows: voxel tokens all share the query frame time
    cells4 = np.concatenate([vox.centers, np.zeros((m, 1))], axis=1)
    window = build_window_mask(cells4, cfg.window_width, 1)
    for i in range(cfg.layers):
        h = _cross_layer(params, f"gs.l{i}.cross", h, kv, cfg.heads, admit_all)
        h = _ff(params, f"gs.l{i}.cff", h)
        hn = nn.apply_rmsnorm(params, f"gs.l{i}.self.norm", h)
        att = nn.masked_attention(nn.linear(params, f"gs.l{i}.self.q", hn),
                                  nn.linear(params, f"gs.l{i}.self.k", hn),
                                  nn.linear(params, f"gs.l{i}.self.v", hn),
                                  window, cfg.heads)
        h = ad.add(h, nn.linear(params, f"gs.l{i}.self.o", att))
        h = _ff(params, f"gs.l{i}.sff", h)
    raw = nn.linear(params, "gs.out", nn.apply_rmsnorm(params, "gs.out_norm", h))
    raw = ad.reshape(raw, (m * cfg.per_voxel, 14))
    centers_rep = np.repeat(vox.centers, cfg.per_voxel, axis=0)
    return activate_parameters(raw, centers_rep, vox.width,
                               cfg.scale_min, cfg.scale_max, vox.tau)


# ---------------------------------------------------------------------------
# occupancy head

def occupancy_logits(params: dict, cfg: GaussianDecoderConfig,
                     tokens: DynamicTokens, centers: np.ndarray, tau: float):
    """Unnormalized occupancy scores for arbitrary query centers."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    h = nn.linear(params, "gs.occ_lift", _query_features(centers, tau, cfg))
    kv = nn.linear(params, "gs.tok_lift", tokens.values)
    admit = np.ones((centers.shape[0], kv.data.shape[0]), dtype=bool)
    for i in range(cfg.occ_layers):
        h = _cross_layer(params, f"gs.occ{i}.cross", h, kv, cfg.heads, admit)
        h = _ff(params, f"gs.occ{i}.ff", h)
    out = nn.linear(params, "gs.occ_out", nn.apply_rmsnorm(params, "gs.occ_norm", h))
    return ad.reshape(out, (centers.shape[0],))


def occupancy_head(params: dict, cfg: GaussianDecoderConfig,
                   tokens: DynamicTokens, tau: float, resolution: int,
                   chunk: int = 2048) -> np.ndarray:
    """Dense resolution^3 occupancy probabilities (inference, no graph)."""
    centers = voxel_centers(resolution).reshape(-1, 3)
    probs = np.empty(centers.shape[0])
    for lo in range(0, centers.shape[0], chunk):
        part = centers[lo:lo + chunk]
        logits = occupancy_logits(params, cfg, tokens, part, tau)
        probs[lo:lo + chunk] = 1.0 / (1.0 + np.exp(-logits.data))
    return probs.reshape(resolution, resolution, resolution)


def predict_voxels(params: dict, cfg: GaussianDecoderConfig,
                   tokens: DynamicTokens, tau: float, resolution: int,
                   threshold: float = 0.5) -> VoxelQuery:
    probs = occupancy_head(params, cfg, tokens, tau, resolution)
    centers = voxel_centers(resolution).reshape(-1, 3)
    hit = probs.reshape(-1) > threshold
    if not hit.any():
        # degenerate early-training model: fall back to the single most
        # confident voxel so downstream decoding still runs
        hit = probs.reshape(-1) == probs.max()
    return VoxelQuery(centers=centers[hit], tau=tau, width=2.0 / resolution)


def occupancy_bce(logits, targets):
    """Mean binary cross-entropy on logits; targets in {0, 1}."""
    logits = ad.wrap(logits)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    p = ad.sigmoid(logits)
    eps = 1e-12
    pos = ad.mul(Tensor(t), ad.log(ad.add(p, eps)))
    neg = ad.mul(Tensor(1.0 - t), ad.log(ad.add(ad.scale(p, -1.0), 1.0 + eps)))
    return ad.scale(ad.mean(ad.add(pos, neg)), -1.0)


# ---------------------------------------------------------------------------
# photometric loss

def appearance_loss(gaussians: GaussianSet, camera: CameraModel, gt_image,
                    background=(0.0, 0.0, 0.0)):
    """L_GS: mean squared pixel error between the splatted render and gt."""
    from .splat import render_image

    gt = np.asarray(gt_image, dtype=np.float64)
    if gt.shape != (camera.height, camera.width, 3):
        raise ValueError(f"ground truth shape {gt.shape} does not match "
                         f"camera {camera.height}x{camera.width}")
    img = render_image(gaussians, camera, background)
    return ad.mean(ad.square(ad.sub(img, Tensor(gt))))
