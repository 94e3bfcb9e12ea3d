"""Joint training of the encoder and both decoders, plus downstream heads.

The base objective is L = L_V + L_GS + gamma * L_C: flow-matching velocity
regression over the cloud, splatted appearance against one random
supervision view and frame per scene, and a small token-energy term. The
occupancy, tracking, and generation heads train afterwards against frozen
tokens cached once per scene.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import fileio, optim
from .autodiff import Tape, Tensor
from . import autodiff as ad
from .encoder import DynamicTokens, EncoderConfig, encode, init_encoder, \
    token_regularizer
from .gaussians import GaussianDecoderConfig, VoxelQuery, appearance_loss, \
    decode_gaussians, init_gaussian_decoder, occupancy_bce, occupancy_head, \
    occupancy_logits
from .geom import SpatioTemporalPointCloud, frame_time, occupancy_grid, \
    voxel_centers
from .generate import GeneratorConfig, encode_condition, generator_loss, \
    init_generator
from .surface import SurfaceConfig, flow_loss, init_surface_decoder
from .tracking import TrackerConfig, init_tracker, track_loss


class TrainingError(RuntimeError):
    pass


@dataclass
class LossReport:
    step: int
    lr: float
    l_v: float
    l_gs: float
    l_c: float
    gamma: float

    @property
    def total(self) -> float:
        # the decomposition identity holds by construction
        return self.l_v + self.l_gs + self.gamma * self.l_c

    def to_fields(self) -> dict:
        return {"step": self.step, "lr": self.lr, "l_v": self.l_v,
                "l_gs": self.l_gs, "l_c": self.l_c, "gamma": self.gamma,
                "total": self.total}


@dataclass
class TrainConfig:
    steps: int = 2000
    scenes_per_step: int = 1
    flow_batch: int = 512        # flow points per scene per step
    views_per_scene: int = 1     # supervision renders per scene per step
    points_per_scene: int = 4096  # encoder input subsample (0 = full cloud)
    seed: int = 0
    gamma: float = 1e-4
    peak_lr: float = 1e-3
    warmup: int = 100
    coupling: str = "ot"         # noise-surface pairing for the flow loss

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.coupling not in ("independent", "ot"):
            raise ValueError(f"unknown coupling {self.coupling!r}")
        for name in ("steps", "scenes_per_step", "flow_batch",
                     "views_per_scene"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class PipelineModels:
    encoder: EncoderConfig
    surface: SurfaceConfig
    gaussians: GaussianDecoderConfig
    params: dict = field(default_factory=dict)


def init_models(encoder: EncoderConfig | None = None,
                surface: SurfaceConfig | None = None,
                gaussians: GaussianDecoderConfig | None = None,
                seed: int = 0) -> PipelineModels:
    encoder = encoder or EncoderConfig()
    surface = surface or SurfaceConfig(token_dim=encoder.d)
    gaussians = gaussians or GaussianDecoderConfig(token_dim=encoder.d)
    if surface.token_dim != encoder.d or gaussians.token_dim != encoder.d:
        raise ValueError("decoder token_dim must match encoder d")
    rng = np.random.default_rng(seed)
    params: dict = {}
    params.update(init_encoder(encoder, rng))
    params.update(init_surface_decoder(surface, rng))
    params.update(init_gaussian_decoder(gaussians, rng))
    return PipelineModels(encoder, surface, gaussians, params)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: dict) -> None:
    fileio.save_tensors(path, {k: v.data for k, v in params.items()})


def load_checkpoint(path) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint missing: {path}")
    return {k: ad.parameter(v, name=k)
            for k, v in fileio.load_tensors(path).items()}


def _with_checkpoint(models: PipelineModels,
                     checkpoint) -> PipelineModels:
    if checkpoint is None:
        return models
    return replace(models, params=load_checkpoint(checkpoint))


# ---------------------------------------------------------------------------
# base train step

def _subsample(cloud: SpatioTemporalPointCloud, count: int,
               rng: np.random.Generator) -> SpatioTemporalPointCloud:
    if count <= 0 or len(cloud) <= count:
        return cloud
    idx = rng.choice(len(cloud), size=count, replace=False)
    idx.sort()
    return SpatioTemporalPointCloud(cloud.positions[idx], cloud.colors[idx],
                                    cloud.times[idx])


def _mean_terms(terms: list):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def _check_finite(name: str, value: float, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {name} ({value}) at step {step}")


def train_step(bundles, models: PipelineModels, state: optim.AdamState,
               cfg: TrainConfig, rng: np.random.Generator) -> LossReport:
    """One joint update of encoder + surface decoder + Gaussian decoder."""
    with Tape() as tape:
        l_v_terms, l_gs_terms, l_c_terms = [], [], []
        for bundle in bundles:
            sub = _subsample(bundle.cloud, cfg.points_per_scene, rng)
            tokens = encode(sub, models.encoder, models.params,
                            anchor_seed=int(rng.integers(2 ** 31)))
            l_v_terms.append(flow_loss(models.params, models.surface, tokens,
                                       bundle.cloud, cfg.flow_batch, rng,
                                       coupling=cfg.coupling))
            l_c_terms.append(token_regularizer(tokens))
            sources = bundle.frame_indices
            for _ in range(cfg.views_per_scene):
                ci = int(rng.integers(len(bundle.cameras)))
                fpos = int(rng.integers(bundle.frames))
                tau = frame_time(sources[fpos])
                frame_pts = bundle.frame_cloud(sources[fpos]).positions
                vox = VoxelQuery.from_points(
                    frame_pts, models.gaussians.resolution, tau)
                gset = decode_gaussians(vox, tokens, models.params,
                                        models.gaussians)
                l_gs_terms.append(appearance_loss(
                    gset, bundle.cameras[ci], bundle.colors[ci, fpos]))
        l_v = _mean_terms(l_v_terms)
        l_gs = _mean_terms(l_gs_terms)
        l_c = _mean_terms(l_c_terms)
        step = state.step + 1
        _check_finite("L_V", float(l_v.data), step)
        _check_finite("L_GS", float(l_gs.data), step)
        _check_finite("L_C", float(l_c.data), step)
        total = ad.add(ad.add(l_v, l_gs), ad.scale(l_c, cfg.gamma))
        tape.backward(total)
    lr = optim.adam_step(state, models.params)
    return LossReport(step=state.step, lr=lr, l_v=float(l_v.data),
                      l_gs=float(l_gs.data), l_c=float(l_c.data),
                      gamma=cfg.gamma)


def train(bundles, models: PipelineModels, cfg: TrainConfig,
          log_path=None, state: optim.AdamState | None = None
          ) -> list[LossReport]:
    """Run cfg.steps joint updates; optionally append key=value log lines."""
    rng = np.random.default_rng(cfg.seed)
    if state is None:
        state = optim.AdamState(peak_lr=cfg.peak_lr, warmup=cfg.warmup)
    reports = []
    for _ in range(cfg.steps):
        pick = rng.integers(0, len(bundles), size=cfg.scenes_per_step)
        batch = [bundles[i] for i in pick]
        report = train_step(batch, models, state, cfg, rng)
        reports.append(report)
        if log_path is not None:
            fileio.append_log_line(log_path, report.to_fields())
    return reports


# ---------------------------------------------------------------------------
# frozen-token cache for the heads

def cache_tokens(bundles, models: PipelineModels, seed: int = 0,
                 points_per_scene: int = 4096) -> list[DynamicTokens]:
    """Encode each scene once with seed-fixed anchors; values are detached
    constants so head training cannot backprop into the base model."""
    out = []
    for i, bundle in enumerate(bundles):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        sub = _subsample(bundle.cloud, points_per_scene, rng)
        tokens = encode(sub, models.encoder, models.params,
                        anchor_seed=int(rng.integers(2 ** 31)))
        out.append(DynamicTokens(Tensor(tokens.values.data.copy()),
                                 tokens.anchors.copy()))
    return out


@dataclass
class HeadTrainConfig:
    steps: int = 400
    seed: int = 0
    peak_lr: float = 1e-3
    warmup: int = 50
    batch: int = 512         # occupancy voxel samples per step
    cond_frames: int = 1     # generator conditioning frames (1 = image)
    points_per_scene: int = 4096

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1 or self.cond_frames < 1:
            raise ValueError("head budgets must be >= 1")


def _clear_grads(params: dict) -> None:
    for t in params.values():
        t.grad = None


# ---------------------------------------------------------------------------
# occupancy head

def occupancy_targets(bundle, frame_index: int, resolution: int) -> np.ndarray:
    """Dense 0/1 grid of voxels containing frame-cloud points."""
    pts = bundle.frame_cloud(frame_index).positions
    idx, _ = occupancy_grid(pts, resolution)
    grid = np.zeros((resolution, resolution, resolution))
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return grid


def occupancy_accuracy(models: PipelineModels, tokens: DynamicTokens,
                       bundle, frame_index: int) -> float:
    """Fraction of the dense grid classified correctly at threshold 0.5."""
    res = models.gaussians.resolution
    probs = occupancy_head(models.params, models.gaussians, tokens,
                           frame_time(frame_index), res)
    target = occupancy_targets(bundle, frame_index, res)
    return float(np.mean((probs > 0.5) == (target > 0.5)))


def train_occupancy_head(bundles, models: PipelineModels,
                         cfg: HeadTrainConfig, checkpoint=None,
                         tokens: list | None = None) -> list[float]:
    """Fit the occupancy logits on frozen tokens; only gs.occ* weights move.

    Batches mix every occupied voxel of the drawn frame with uniformly
    sampled cells so the (sparse) positive class is never swamped.
    """
    models = _with_checkpoint(models, checkpoint)
    if tokens is None:
        tokens = cache_tokens(bundles, models, cfg.seed, cfg.points_per_scene)
    res = models.gaussians.resolution
    centers_all = voxel_centers(res).reshape(-1, 3)
    grids = [[occupancy_targets(b, j, res).reshape(-1)
              for j in b.frame_indices] for b in bundles]
    head = {k: v for k, v in models.params.items() if k.startswith("gs.occ")}
    state = optim.AdamState(peak_lr=cfg.peak_lr, warmup=cfg.warmup)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for _ in range(cfg.steps):
        i = int(rng.integers(len(bundles)))
        fpos = int(rng.integers(bundles[i].frames))
        grid = grids[i][fpos]
        occupied = np.flatnonzero(grid > 0.5)
        filler = rng.integers(0, grid.size, max(cfg.batch, occupied.size))
        pick = np.concatenate([occupied, filler])
        with Tape() as tape:
            logits = occupancy_logits(
                models.params, models.gaussians, tokens[i],
                centers_all[pick], frame_time(bundles[i].frame_indices[fpos]))
            loss = occupancy_bce(logits, grid[pick])
            tape.backward(loss)
        losses.append(float(loss.data))
        optim.adam_step(state, head)
        _clear_grads(models.params)
    return losses


# ---------------------------------------------------------------------------
# tracking head

def train_tracker(bundles, models: PipelineModels, tracker: TrackerConfig,
                  cfg: HeadTrainConfig, checkpoint=None,
                  tokens: list | None = None):
    """Fit the trajectory head on frozen tokens; returns (params, losses)."""
    models = _with_checkpoint(models, checkpoint)
    if tracker.token_dim != models.encoder.d:
        raise ValueError("tracker token_dim must match encoder d")
    if tokens is None:
        tokens = cache_tokens(bundles, models, cfg.seed, cfg.points_per_scene)
    rng = np.random.default_rng(cfg.seed)
    trk = init_tracker(tracker, rng)
    state = optim.AdamState(peak_lr=cfg.peak_lr, warmup=cfg.warmup)
    losses = []
    for _ in range(cfg.steps):
        i = int(rng.integers(len(bundles)))
        with Tape() as tape:
            loss = track_loss(trk, tracker, tokens[i], bundles[i].tracks)
            tape.backward(loss)
        losses.append(float(loss.data))
        optim.adam_step(state, trk)
    return trk, losses


# ---------------------------------------------------------------------------
# generation head

def conditioning_frames(bundle, count: int, camera_index: int = 0):
    """First `count` rendered frames of one camera plus their times."""
    if count > bundle.frames:
        raise ValueError(f"scene has {bundle.frames} frames, need {count}")
    stack = bundle.colors[camera_index, :count]
    times = np.array([frame_time(j) for j in bundle.frame_indices[:count]])
    return stack, times


def train_generator(bundles, models: PipelineModels, gen: GeneratorConfig,
                    cfg: HeadTrainConfig, checkpoint=None,
                    tokens: list | None = None):
    """Fit the token generator on frozen tokens; returns (params, losses).

    Conditioning is the first cfg.cond_frames renders of camera 0 (one frame
    for the image-to-4D path); the patch encoder trains jointly.
    """
    models = _with_checkpoint(models, checkpoint)
    if gen.token_count != models.encoder.k or \
            gen.token_dim != models.encoder.d:
        raise ValueError("generator token shape must match encoder k x d")
    if tokens is None:
        tokens = cache_tokens(bundles, models, cfg.seed, cfg.points_per_scene)
    targets = [t.values.data for t in tokens]
    conds = [conditioning_frames(b, cfg.cond_frames) for b in bundles]
    rng = np.random.default_rng(cfg.seed)
    gparams = init_generator(gen, rng)
    state = optim.AdamState(peak_lr=cfg.peak_lr, warmup=cfg.warmup)
    losses = []
    for _ in range(cfg.steps):
        i = int(rng.integers(len(bundles)))
        stack, times = conds[i]
        with Tape() as tape:
            cond = encode_condition(gparams, gen, stack, times)
            loss = generator_loss(gparams, gen, cond, targets[i], rng)
            tape.backward(loss)
        losses.append(float(loss.data))
        optim.adam_step(state, gparams)
    return gparams, losses
