"""3D track read-out: frame-0 query points cross-attend to the tokens and a
single feed-forward pass emits per-frame offsets from the query position.

The output projection is zero-initialized, so an untrained head predicts the
static trajectory x0 for every frame. Occlusion flags are never predicted;
they are derived from rendered depth via the shared visibility rule.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoder import DynamicTokens
from .geom import CameraModel
from .scenes import OCCLUSION_MARGIN, TrackSet, mark_visibility

DEFAULT_THRESHOLDS = (0.01, 0.02, 0.04, 0.08, 0.16)


@dataclass
class TrackerConfig:
    token_dim: int = 16
    hidden: int = 128
    heads: int = 4
    layers: int = 2
    frames: int = 8
    fourier_space: int = 6

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")

    @property
    def query_feature_dim(self) -> int:
        return 3 * (2 * self.fourier_space + 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        names = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrackPrediction:
    trajectories: np.ndarray       # Q x T x 3
    visible: np.ndarray | None = None  # Q x T bool, True = visible


def init_tracker(cfg: TrackerConfig, rng: np.random.Generator) -> dict:
    params: dict = {}
    nn.add_linear(params, rng, "trk.in_lift", cfg.query_feature_dim, cfg.hidden)
    nn.add_linear(params, rng, "trk.tok_lift", cfg.token_dim, cfg.hidden)
    for i in range(cfg.layers):
        nn.add_rmsnorm(params, f"trk.l{i}.cross.norm_q", cfg.hidden)
        nn.add_rmsnorm(params, f"trk.l{i}.cross.norm_kv", cfg.hidden)
        nn.add_attention(params, rng, f"trk.l{i}.cross", cfg.hidden)
        nn.add_rmsnorm(params, f"trk.l{i}.ff.norm", cfg.hidden)
        nn.add_swiglu(params, rng, f"trk.l{i}.ff", cfg.hidden, 2 * cfg.hidden)
    nn.add_rmsnorm(params, "trk.out_norm", cfg.hidden)
    # zero-init head: the untrained tracker is exactly the static baseline
    nn.add_linear(params, rng, "trk.out", cfg.hidden, 3 * cfg.frames, zero=True)
    return params


def track(params: dict, cfg: TrackerConfig, tokens: DynamicTokens, queries):
    """Frame-0 positions -> per-frame positions, one pass, no refinement.

    Queries never attend to each other, so predictions are per-query
    independent. Returns a (Q, frames, 3) tensor of absolute positions.
    """
    queries = ad.wrap(queries)
    q_np = queries.data
    if q_np.ndim != 2 or q_np.shape[1] != 3:
        raise ad.ShapeError(f"queries must be Q x 3, got {q_np.shape}")
    nq = q_np.shape[0]
    h = nn.linear(params, "trk.in_lift",
                  nn.fourier_encode(queries, cfg.fourier_space))
    kv = nn.linear(params, "trk.tok_lift", tokens.values)
    admit = np.ones((nq, kv.data.shape[0]), dtype=bool)
    for i in range(cfg.layers):
        hn = nn.apply_rmsnorm(params, f"trk.l{i}.cross.norm_q", h)
        kvn = nn.apply_rmsnorm(params, f"trk.l{i}.cross.norm_kv", kv)
        att = nn.masked_attention(nn.linear(params, f"trk.l{i}.cross.q", hn),
                                  nn.linear(params, f"trk.l{i}.cross.k", kvn),
                                  nn.linear(params, f"trk.l{i}.cross.v", kvn),
                                  admit, cfg.heads)
        h = ad.add(h, nn.linear(params, f"trk.l{i}.cross.o", att))
        hn = nn.apply_rmsnorm(params, f"trk.l{i}.ff.norm", h)
        h = ad.add(h, nn.apply_swiglu(params, f"trk.l{i}.ff", hn))
    offsets = nn.linear(params, "trk.out",
                        nn.apply_rmsnorm(params, "trk.out_norm", h))
    offsets = ad.reshape(offsets, (nq, cfg.frames, 3))
    base = ad.reshape(queries, (nq, 1, 3))
    return ad.add(base, offsets)


def track_loss(params: dict, cfg: TrackerConfig, tokens: DynamicTokens,
               gt: TrackSet):
    """Mean squared position error against ground-truth trajectories."""
    if gt.trajectories.shape[1] != cfg.frames:
        raise ValueError(f"ground truth has {gt.trajectories.shape[1]} frames, "
                         f"tracker emits {cfg.frames}")
    pred = track(params, cfg, tokens, Tensor(gt.queries))
    return ad.mean(ad.square(ad.sub(pred, Tensor(gt.trajectories))))


def visibility_from_depth(trajectories: np.ndarray, camera: CameraModel,
                          depth_frames: np.ndarray,
                          margin: float = OCCLUSION_MARGIN) -> np.ndarray:
    """Visible flags (True = visible) for predicted positions, by the same
    depth-margin rule the dataset uses for ground-truth tracks."""
    return mark_visibility(trajectories, camera, depth_frames, margin)


def predict_tracks(params: dict, cfg: TrackerConfig, tokens: DynamicTokens,
                   queries: np.ndarray, camera: CameraModel | None = None,
                   depth_frames: np.ndarray | None = None,
                   margin: float = OCCLUSION_MARGIN) -> TrackPrediction:
    traj = track(params, cfg, tokens, Tensor(np.asarray(queries))).data
    visible = None
    if camera is not None:
        if depth_frames is None:
            raise ValueError("depth frames required to derive visibility")
        visible = visibility_from_depth(traj, camera, depth_frames, margin)
    return TrackPrediction(trajectories=traj, visible=visible)


# ---------------------------------------------------------------------------
# metrics

@dataclass
class TrackMetricsReport:
    l2_all: float
    l2_vis: float
    apd_all: float
    apd_vis: float
    aj: float
    oa: float
    thresholds: tuple = DEFAULT_THRESHOLDS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d


def _jaccard(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def track_metrics(pred: TrackPrediction, gt: TrackSet,
                  thresholds=DEFAULT_THRESHOLDS) -> TrackMetricsReport:
    """Position and occlusion quality of predicted tracks.

    Distances are Euclidean in scene units. "Within threshold" means
    strictly closer than the threshold. AJ is the mean over thresholds of
    the Jaccard overlap between {within and predicted-visible} and {within
    and ground-truth-visible}; an empty union counts as perfect agreement.
    """
    traj = np.asarray(pred.trajectories, dtype=np.float64)
    if traj.shape != gt.trajectories.shape:
        raise ValueError(f"trajectory shapes differ: {traj.shape} "
                         f"vs {gt.trajectories.shape}")
    err = np.linalg.norm(traj - gt.trajectories, axis=-1)  # Q x T
    gt_vis = gt.visibility.astype(bool)
    l2_all = float(err.mean())
    l2_vis = float(err[gt_vis].mean()) if gt_vis.any() else 0.0

    apd_all = float(np.mean([(err < th).mean() for th in thresholds]))
    if gt_vis.any():
        apd_vis = float(np.mean([(err[gt_vis] < th).mean()
                                 for th in thresholds]))
    else:
        apd_vis = 0.0

    if pred.visible is None:
        raise ValueError("predicted visibility flags required for AJ and OA")
    pred_vis = np.asarray(pred.visible, dtype=bool)
    oa = float((pred_vis == gt_vis).mean())
    aj = float(np.mean([_jaccard((err < th) & pred_vis, (err < th) & gt_vis)
                        for th in thresholds]))
    return TrackMetricsReport(l2_all=l2_all, l2_vis=l2_vis, apd_all=apd_all,
                              apd_vis=apd_vis, aj=aj, oa=oa,
                              thresholds=tuple(thresholds))


def static_baseline(queries: np.ndarray, frames: int) -> np.ndarray:
    """Predict x0 for every frame; the reference a trained head must beat."""
    q = np.asarray(queries, dtype=np.float64)
    return np.repeat(q[:, None, :], frames, axis=1)
