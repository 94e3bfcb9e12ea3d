"""Set-latent encoder: 4D FPS query anchors, local cross-attention over the
input cloud, voxel-windowed self-attention among tokens.

Cross-attention uses the gathered O(k*m) form (each anchor attends to its m
nearest 4D neighbors); self-attention uses a dense mask admitting exactly
the anchors that share a 4D voxel cell.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .geom import SpatioTemporalPointCloud, fps4d, knn4d, voxel_window


@dataclass
class EncoderConfig:
    k: int = 256
    d: int = 16
    hidden: int = 128
    heads: int = 4
    blocks: int = 2
    self_per_block: int = 2
    m: int = 32
    spatial_width: float = 0.5
    temporal_width_frames: int = 6
    fourier_space: int = 6
    fourier_time: int = 4
    preselect_factor: int = 4
    # add the anchors' Fourier features once at query initialization
    anchor_pos_encoding: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.m < 1:
            raise ValueError("m must be >= 1")

    @property
    def input_feature_dim(self) -> int:
        return 3 * (2 * self.fourier_space + 1) + 3 + (2 * self.fourier_time + 1)

    @property
    def anchor_feature_dim(self) -> int:
        return 3 * (2 * self.fourier_space + 1) + (2 * self.fourier_time + 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        names = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class DynamicTokens:
    """The latent s: k tokens of width d, with their 4D query anchors."""

    values: Tensor       # k x d
    anchors: np.ndarray  # k x 4


# ---------------------------------------------------------------------------
# featurization and masks

def point_features(points4: np.ndarray, colors: np.ndarray | None,
                   fourier_space: int, fourier_time: int):
    """[fourier(xyz), rgb?, fourier(tau)] rows as a constant tensor."""
    xyz = nn.fourier_encode(Tensor(points4[:, :3]), fourier_space)
    tau = nn.fourier_encode(Tensor(points4[:, 3:4]), fourier_time)
    parts = [xyz, Tensor(colors), tau] if colors is not None else [xyz, tau]
    return ad.concat(parts, axis=-1)


def featurize_inputs(cloud: SpatioTemporalPointCloud, cfg: EncoderConfig,
                     params: dict):
    """Per-point features lifted to the hidden width; one row per point."""
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    raw = point_features(cloud.points4, cloud.colors, cfg.fourier_space,
                         cfg.fourier_time)
    return nn.linear(params, "enc.in_lift", raw)


def build_cross_mask(anchors: np.ndarray, points4: np.ndarray,
                     m: int) -> np.ndarray:
    """Dense boolean mask admitting exactly each anchor's m nearest points."""
    idx = knn4d(anchors, points4, m)
    mask = np.zeros((anchors.shape[0], points4.shape[0]), dtype=bool)
    rows = np.repeat(np.arange(anchors.shape[0]), m)
    mask[rows, idx.ravel()] = True
    return mask


def build_window_mask(anchors: np.ndarray, spatial_width: float,
                      temporal_width_frames: int) -> np.ndarray:
    """Admit (i, j) iff anchors i and j share all four voxel indices."""
    keys = voxel_window(anchors, spatial_width, temporal_width_frames).cell_keys()
    return keys[:, None] == keys[None, :]


# ---------------------------------------------------------------------------
# layers

def cross_attention_layer(params: dict, prefix: str, x, feats, neighbor_idx,
                          heads: int):
    xn = nn.apply_rmsnorm(params, f"{prefix}.norm_q", x)
    fn = nn.apply_rmsnorm(params, f"{prefix}.norm_kv", feats)
    att = nn.gathered_attention(nn.linear(params, f"{prefix}.q", xn),
                                nn.linear(params, f"{prefix}.k", fn),
                                nn.linear(params, f"{prefix}.v", fn),
                                neighbor_idx, heads)
    return ad.add(x, nn.linear(params, f"{prefix}.o", att))


def self_attention_layer(params: dict, prefix: str, x, mask, heads: int):
    xn = nn.apply_rmsnorm(params, f"{prefix}.norm", x)
    att = nn.masked_attention(nn.linear(params, f"{prefix}.q", xn),
                              nn.linear(params, f"{prefix}.k", xn),
                              nn.linear(params, f"{prefix}.v", xn),
                              mask, heads)
    return ad.add(x, nn.linear(params, f"{prefix}.o", att))


def ff_layer(params: dict, prefix: str, x):
    xn = nn.apply_rmsnorm(params, f"{prefix}.norm", x)
    return ad.add(x, nn.apply_swiglu(params, f"{prefix}", xn))


def _add_attention_layer(params, rng, prefix, dim, kv_dim=None):
    nn.add_rmsnorm(params, f"{prefix}.norm" if kv_dim is None else f"{prefix}.norm_q", dim)
    if kv_dim is not None:
        nn.add_rmsnorm(params, f"{prefix}.norm_kv", kv_dim)
    nn.add_attention(params, rng, prefix, dim, kv_dim)


def _add_ff_layer(params, rng, prefix, dim, hidden):
    nn.add_rmsnorm(params, f"{prefix}.norm", dim)
    nn.add_swiglu(params, rng, prefix, dim, hidden)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> dict:
    params: dict = {}
    nn.add_linear(params, rng, "enc.in_lift", cfg.input_feature_dim, cfg.hidden)
    nn.add_linear(params, rng, "enc.q_lift", cfg.anchor_feature_dim, cfg.hidden)
    ffh = 2 * cfg.hidden
    for b in range(cfg.blocks):
        _add_attention_layer(params, rng, f"enc.b{b}.cross", cfg.hidden, cfg.hidden)
        _add_ff_layer(params, rng, f"enc.b{b}.cross_ff", cfg.hidden, ffh)
        for l in range(cfg.self_per_block):
            _add_attention_layer(params, rng, f"enc.b{b}.s{l}", cfg.hidden)
            _add_ff_layer(params, rng, f"enc.b{b}.s{l}_ff", cfg.hidden, ffh)
    nn.add_rmsnorm(params, "enc.out_norm", cfg.hidden)
    nn.add_linear(params, rng, "enc.out", cfg.hidden, cfg.d)
    return params


# ---------------------------------------------------------------------------
# full encoder

def select_anchors(cloud: SpatioTemporalPointCloud, cfg: EncoderConfig,
                   seed: int = 0) -> np.ndarray:
    idx = fps4d(cloud.points4, cfg.k, cfg.preselect_factor, seed)
    return cloud.points4[idx]


def encode(cloud: SpatioTemporalPointCloud, cfg: EncoderConfig, params: dict,
           anchors: np.ndarray | None = None, anchor_seed: int = 0,
           trace: dict | None = None) -> DynamicTokens:
    """Cloud -> k x d dynamic tokens.

    Anchors default to a fresh FPS draw (seeded); pass fixed anchors for
    reproducible evaluation tokens.
    """
    if len(cloud) < cfg.k:
        raise ValueError(f"need at least k={cfg.k} points, got {len(cloud)}")
    if anchors is None:
        anchors = select_anchors(cloud, cfg, anchor_seed)
    points4 = cloud.points4
    neighbor_idx = knn4d(anchors, points4, cfg.m)
    feats = featurize_inputs(cloud, cfg, params)

    if cfg.anchor_pos_encoding:
        anchor_raw = point_features(anchors, None, cfg.fourier_space,
                                    cfg.fourier_time)
        x = nn.linear(params, "enc.q_lift", anchor_raw)
    else:
        x = Tensor(np.zeros((anchors.shape[0], cfg.hidden)))
    window = build_window_mask(anchors, cfg.spatial_width,
                               cfg.temporal_width_frames)
    for b in range(cfg.blocks):
        x = cross_attention_layer(params, f"enc.b{b}.cross", x, feats,
                                  neighbor_idx, cfg.heads)
        if trace is not None:
            trace[f"b{b}.cross"] = x
        x = ff_layer(params, f"enc.b{b}.cross_ff", x)
        for l in range(cfg.self_per_block):
            x = self_attention_layer(params, f"enc.b{b}.s{l}", x, window,
                                     cfg.heads)
            x = ff_layer(params, f"enc.b{b}.s{l}_ff", x)
            if trace is not None:
                trace[f"b{b}.s{l}"] = x
    tokens = nn.linear(params, "enc.out",
                       nn.apply_rmsnorm(params, "enc.out_norm", x))
    return DynamicTokens(values=tokens, anchors=anchors)


def token_regularizer(tokens: DynamicTokens):
    """L_C: mean of squared token entries (mean so gamma transfers across k*d)."""
    return ad.mean(ad.square(tokens.values))
