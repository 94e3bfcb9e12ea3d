"""Conditional token generation: flow matching over the latent token space.

A small DiT-style transformer predicts token velocities from noisy tokens, a
flow time, and patch features of one or more rendered frames, so a single
image (or short clip) can be integrated from Gaussian noise into a full
dynamic-token set. The image encoder is a jointly trained toy patch network,
not a pretrained backbone. Center-of-mass kinematics and a camera azimuth
canonicalization round out the evaluation side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoder import DynamicTokens
from .geom import CameraModel
from .surface import LINEAR_SCHEDULE, NoiseSchedule, integrate_euler, \
    integrate_heun

SAMPLERS = ("euler", "heun")


@dataclass
class GeneratorConfig:
    token_count: int = 256
    token_dim: int = 16
    depth: int = 4
    width: int = 128
    heads: int = 4
    cond_width: int = 64
    cond_heads: int = 4
    cond_layers: int = 1
    patch: int = 8
    fourier_flow: int = 4   # flow-time features driving the adaptive norms
    fourier_time: int = 4   # frame-time features appended to patch tokens
    fourier_patch: int = 3  # patch-center position features
    sampler: str = "heun"
    steps: int = 20

    def __post_init__(self):
        if self.width % self.heads or self.cond_width % self.cond_heads:
            raise ValueError("attention width must divide evenly into heads")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.patch < 1:
            raise ValueError("patch must be >= 1")

    @property
    def flow_feature_dim(self) -> int:
        return 2 * self.fourier_flow + 1

    @property
    def frame_time_dim(self) -> int:
        return 2 * self.fourier_time + 1

    @property
    def patch_input_dim(self) -> int:
        # raw pixels plus the (row, col) patch-center encoding
        return 3 * self.patch ** 2 + 2 * (2 * self.fourier_patch + 1)

    @property
    def cond_token_dim(self) -> int:
        return self.cond_width + self.frame_time_dim


@dataclass
class ConditioningFeatures:
    """Per-frame patch features with the matching frame-time embedding."""

    features: object             # T x P x c, Tensor or ndarray
    time_embedding: np.ndarray   # T x e Fourier features of the frame times

    @property
    def frames(self) -> int:
        return int(np.asarray(self.time_embedding).shape[0])

    def validate(self) -> None:
        feats = self.features.data if isinstance(self.features, Tensor) \
            else np.asarray(self.features)
        if feats.ndim != 3:
            raise ad.ShapeError(f"features must be T x P x c, got {feats.shape}")
        if self.time_embedding.shape[0] != feats.shape[0]:
            raise ad.ShapeError("one time embedding row per frame required")
        if not np.isfinite(feats).all() or \
                not np.isfinite(self.time_embedding).all():
            raise ValueError("conditioning features must be finite")


def _fourier_rows(values: np.ndarray, num_frequencies: int) -> np.ndarray:
    """Constant-domain twin of nn.fourier_encode for (N, D) arrays."""
    v = np.asarray(values, dtype=np.float64)
    freqs = np.pi * (2.0 ** np.arange(num_frequencies))
    ang = v[..., None] * freqs
    feats = np.concatenate([np.sin(ang), np.cos(ang), v[..., None]], axis=-1)
    return feats.reshape(v.shape[0], -1)


def image_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping patches of an (H, W, 3) image, row-major, flattened."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ad.ShapeError(f"image must be H x W x 3, got {img.shape}")
    h, w, c = img.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    tiles = img.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(gh * gw, patch * patch * c)


def _patch_centers(h: int, w: int, patch: int) -> np.ndarray:
    """(P, 2) patch-center (row, col) coordinates scaled to [-1, 1]."""
    rows = (np.arange(h // patch) + 0.5) / (h // patch) * 2.0 - 1.0
    cols = (np.arange(w // patch) + 0.5) / (w // patch) * 2.0 - 1.0
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


# ---------------------------------------------------------------------------
# parameters

def init_generator(cfg: GeneratorConfig, rng: np.random.Generator) -> dict:
    params: dict = {}
    nn.add_linear(params, rng, "gen.patch", cfg.patch_input_dim, cfg.cond_width)
    for i in range(cfg.cond_layers):
        nn.add_rmsnorm(params, f"gen.c{i}.self.norm", cfg.cond_width)
        nn.add_attention(params, rng, f"gen.c{i}.self", cfg.cond_width)
        nn.add_rmsnorm(params, f"gen.c{i}.ff.norm", cfg.cond_width)
        nn.add_swiglu(params, rng, f"gen.c{i}.ff", cfg.cond_width,
                      2 * cfg.cond_width)
    nn.add_linear(params, rng, "gen.tok_in", cfg.token_dim, cfg.width)
    # learnable token positions start contributing exactly nothing
    params["gen.pos"] = ad.parameter(
        np.zeros((cfg.token_count, cfg.width)), name="gen.pos")
    tdim = cfg.flow_feature_dim
    for b in range(cfg.depth):
        nn.add_rmsnorm(params, f"gen.b{b}.self.norm", cfg.width)
        nn.add_attention(params, rng, f"gen.b{b}.self", cfg.width)
        nn.add_linear(params, rng, f"gen.b{b}.self.mod", tdim, 2 * cfg.width,
                      zero=True)
        nn.add_rmsnorm(params, f"gen.b{b}.cross.norm_q", cfg.width)
        nn.add_rmsnorm(params, f"gen.b{b}.cross.norm_kv", cfg.cond_token_dim)
        nn.add_attention(params, rng, f"gen.b{b}.cross", cfg.width,
                         kv_dim=cfg.cond_token_dim)
        nn.add_linear(params, rng, f"gen.b{b}.cross.mod", tdim, 2 * cfg.width,
                      zero=True)
        nn.add_rmsnorm(params, f"gen.b{b}.ff.norm", cfg.width)
        nn.add_swiglu(params, rng, f"gen.b{b}.ff", cfg.width, 2 * cfg.width)
        nn.add_linear(params, rng, f"gen.b{b}.ff.mod", tdim, 2 * cfg.width,
                      zero=True)
    nn.add_rmsnorm(params, "gen.out_norm", cfg.width)
    nn.add_linear(params, rng, "gen.out", cfg.width, cfg.token_dim)
    return params


# ---------------------------------------------------------------------------
# conditioning encoder

def encode_condition(params: dict, cfg: GeneratorConfig, frames,
                     times) -> ConditioningFeatures:
    """Patch-embed and self-attend each frame of an image stack.

    frames is (T, H, W, 3) or a single (H, W, 3) image (the image-to-4D
    path); times holds one frame time per frame. The per-frame features are
    a pure function of the frame pixels; frame times only enter through the
    returned time embedding.
    """
    stack = np.asarray(frames, dtype=np.float64)
    if stack.ndim == 3:
        stack = stack[None]
    if stack.ndim != 4 or stack.shape[-1] != 3:
        raise ad.ShapeError(f"frames must be (T, H, W, 3), got {stack.shape}")
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if times.shape != (stack.shape[0],):
        raise ad.ShapeError(
            f"{stack.shape[0]} frames need {stack.shape[0]} times, "
            f"got {times.shape}")
    t, h, w, _ = stack.shape
    pos = _fourier_rows(_patch_centers(h, w, cfg.patch), cfg.fourier_patch)
    n_patches = pos.shape[0]
    admit = np.ones((n_patches, n_patches), dtype=bool)
    parts = []
    for f in range(t):
        raw = np.concatenate([image_patches(stack[f], cfg.patch), pos], axis=1)
        x = nn.linear(params, "gen.patch", Tensor(raw))
        for i in range(cfg.cond_layers):
            xn = nn.apply_rmsnorm(params, f"gen.c{i}.self.norm", x)
            att = nn.masked_attention(
                nn.linear(params, f"gen.c{i}.self.q", xn),
                nn.linear(params, f"gen.c{i}.self.k", xn),
                nn.linear(params, f"gen.c{i}.self.v", xn),
                admit, cfg.cond_heads)
            x = ad.add(x, nn.linear(params, f"gen.c{i}.self.o", att))
            xn = nn.apply_rmsnorm(params, f"gen.c{i}.ff.norm", x)
            x = ad.add(x, nn.apply_swiglu(params, f"gen.c{i}.ff", xn))
        parts.append(ad.reshape(x, (1, n_patches, cfg.cond_width)))
    features = parts[0] if t == 1 else ad.concat(parts, axis=0)
    time_emb = _fourier_rows(times[:, None], cfg.fourier_time)
    return ConditioningFeatures(features, time_emb)


# ---------------------------------------------------------------------------
# denoiser

def _modulate(params: dict, name: str, x, tvec):
    """Adaptive normalization: x * (1 + scale(t)) + shift(t), zero-init neutral."""
    m = nn.linear(params, name, tvec)
    width = x.data.shape[-1]
    scale = ad.narrow(m, 1, 0, width)
    shift = ad.narrow(m, 1, width, width)
    return ad.add(ad.add(x, ad.mul(x, scale)), shift)


def _conditioning_kv(cfg: GeneratorConfig, cond: ConditioningFeatures):
    """Flatten frames x patches and append each frame's time embedding."""
    feats = cond.features if isinstance(cond.features, Tensor) \
        else Tensor(np.asarray(cond.features, dtype=np.float64))
    t, p, c = feats.data.shape
    if c != cfg.cond_width:
        raise ad.ShapeError(f"conditioning width {c} != {cfg.cond_width}")
    flat = ad.reshape(feats, (t * p, c))
    rep = np.repeat(np.asarray(cond.time_embedding, dtype=np.float64),
                    p, axis=0)
    return ad.concat([flat, Tensor(rep)], axis=-1)


def denoise_tokens(params: dict, cfg: GeneratorConfig, noisy, t: float,
                   cond: ConditioningFeatures):
    """Token-space velocity at flow time t given the conditioning features."""
    x = ad.wrap(noisy)
    if x.data.shape != (cfg.token_count, cfg.token_dim):
        raise ad.ShapeError(
            f"tokens must be {cfg.token_count} x {cfg.token_dim}, "
            f"got {x.data.shape}")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time {t} outside [0, 1]")
    tvec = Tensor(_fourier_rows(np.array([[t]]), cfg.fourier_flow))
    kv = _conditioning_kv(cfg, cond)
    kk = cfg.token_count
    admit_self = np.ones((kk, kk), dtype=bool)
    admit_cross = np.ones((kk, kv.data.shape[0]), dtype=bool)
    h = ad.add(nn.linear(params, "gen.tok_in", x), params["gen.pos"])
    for b in range(cfg.depth):
        hn = _modulate(params, f"gen.b{b}.self.mod",
                       nn.apply_rmsnorm(params, f"gen.b{b}.self.norm", h), tvec)
        att = nn.masked_attention(
            nn.linear(params, f"gen.b{b}.self.q", hn),
            nn.linear(params, f"gen.b{b}.self.k", hn),
            nn.linear(params, f"gen.b{b}.self.v", hn),
            admit_self, cfg.heads)
        h = ad.add(h, nn.linear(params, f"gen.b{b}.self.o", att))
        hn = _modulate(params, f"gen.b{b}.cross.mod",
                       nn.apply_rmsnorm(params, f"gen.b{b}.cross.norm_q", h),
                       tvec)
        kvn = nn.apply_rmsnorm(params, f"gen.b{b}.cross.norm_kv", kv)
        att = nn.masked_attention(
            nn.linear(params, f"gen.b{b}.cross.q", hn),
            nn.linear(params, f"gen.b{b}.cross.k", kvn),
            nn.linear(params, f"gen.b{b}.cross.v", kvn),
            admit_cross, cfg.heads)
        h = ad.add(h, nn.linear(params, f"gen.b{b}.cross.o", att))
        hn = _modulate(params, f"gen.b{b}.ff.mod",
                       nn.apply_rmsnorm(params, f"gen.b{b}.ff.norm", h), tvec)
        h = ad.add(h, nn.apply_swiglu(params, f"gen.b{b}.ff", hn))
    return nn.linear(params, "gen.out",
                     nn.apply_rmsnorm(params, "gen.out_norm", h))


# ---------------------------------------------------------------------------
# training loss

def token_flow_loss(velocity_fn, tokens: np.ndarray, eps: np.ndarray,
                    t: float, schedule: NoiseSchedule = LINEAR_SCHEDULE):
    """Interpolant regression with tokens as the data endpoint.

    Mirrors the surface loss: x_t = alpha(t) tokens + sigma(t) eps, target
    dalpha(t) tokens + dsigma(t) eps; velocity_fn(x_t, t) is scored by MSE.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    x_t = float(schedule.alpha(t)) * tokens + float(schedule.sigma(t)) * eps
    target = float(schedule.dalpha(t)) * tokens + float(schedule.dsigma(t)) * eps
    pred = ad.wrap(velocity_fn(x_t, t))
    return ad.mean(ad.square(ad.sub(pred, Tensor(target))))


def generator_loss(params: dict, cfg: GeneratorConfig,
                   cond: ConditioningFeatures, tokens: np.ndarray,
                   rng: np.random.Generator,
                   schedule: NoiseSchedule = LINEAR_SCHEDULE):
    """One (t, eps) draw of the token flow objective for a target token set."""
    t = float(rng.uniform(0.0, 1.0))
    eps = rng.standard_normal((cfg.token_count, cfg.token_dim))

    def field(x_t, tt):
        return denoise_tokens(params, cfg, Tensor(x_t), tt, cond)

    return token_flow_loss(field, tokens, eps, t, schedule)


# ---------------------------------------------------------------------------
# sampling

def generate(params: dict, cfg: GeneratorConfig, cond: ConditioningFeatures,
             sampler: str | None = None, steps: int | None = None,
             seed: int = 0) -> DynamicTokens:
    """Integrate token velocities from Gaussian noise to a full token set.

    Deterministic per (seed, cond, parameters). Generated tokens carry no
    anchor points (the decoders never read them), so the anchor slot is
    zero-filled.
    """
    sampler = cfg.sampler if sampler is None else sampler
    steps = cfg.steps if steps is None else int(steps)
    if sampler not in SAMPLERS:
        raise ValueError(f"unknown sampler {sampler!r}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((cfg.token_count, cfg.token_dim))

    def field(x, t):
        return denoise_tokens(params, cfg, Tensor(x), t, cond).data

    integrate = integrate_euler if sampler == "euler" else integrate_heun
    values = integrate(field, eps, steps)
    return DynamicTokens(Tensor(values), np.zeros((cfg.token_count, 4)))


# ---------------------------------------------------------------------------
# center-of-mass kinematics

@dataclass
class COMKinematics:
    times: np.ndarray         # F
    position: np.ndarray      # F x 3
    velocity: np.ndarray      # F x 3
    acceleration: np.ndarray  # F x 3


def center_of_mass(points) -> np.ndarray:
    """Unweighted mean of an N x 3 point set."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise ad.ShapeError(f"points must be nonempty N x 3, got {pts.shape}")
    return pts.mean(axis=0)


def center_of_mass_trajectory(clouds, times) -> COMKinematics:
    """Per-frame COM with second-order finite-difference velocity/acceleration.

    clouds is a sequence of per-frame N x 3 samples (sizes may differ);
    times are the strictly increasing frame times. At least 3 frames are
    required so the acceleration stencil exists.
    """
    times = np.asarray(times, dtype=np.float64)
    if len(clouds) != times.shape[0]:
        raise ValueError(f"{len(clouds)} clouds but {times.shape[0]} times")
    if times.shape[0] < 3:
        raise ValueError("need at least 3 frames for acceleration")
    if not (np.diff(times) > 0).all():
        raise ValueError("frame times must be strictly increasing")
    com = np.stack([center_of_mass(c) for c in clouds])
    velocity = np.gradient(com, times, axis=0, edge_order=2)
    acceleration = np.gradient(velocity, times, axis=0, edge_order=2)
    return COMKinematics(times, com, velocity, acceleration)


# ---------------------------------------------------------------------------
# conditioning-camera canonicalization

def y_rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotate_camera(camera: CameraModel, rot: np.ndarray) -> CameraModel:
    """The same view after the world is rotated by x -> rot @ x."""
    return CameraModel(rotation=camera.rotation @ np.asarray(rot).T,
                       translation=camera.translation.copy(),
                       fx=camera.fx, fy=camera.fy, cx=camera.cx, cy=camera.cy,
                       width=camera.width, height=camera.height,
                       fov=camera.fov)


def canonicalize_to_x(camera: CameraModel, points):
    """Rotate the world about +y so the camera sits at zero azimuth (+x side).

    Returns (camera', points', rot). Jointly y-rotated copies of a scene and
    its camera collapse to the same canonical pose, so conditioning built
    from the canonical view carries no azimuth information.
    """
    p = camera.position
    if np.hypot(p[0], p[2]) < 1e-12:
        raise ValueError("camera on the y axis has no azimuth to cancel")
    rot = y_rotation(float(np.arctan2(p[2], p[0])))
    pts = np.asarray(points, dtype=np.float64) @ rot.T
    return rotate_camera(camera, rot), pts, rot
