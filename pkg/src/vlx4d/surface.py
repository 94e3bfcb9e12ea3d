"""Conditional surface decoder: a per-point velocity network trained by flow
matching against the cloud, plus Euler and Heun ODE integrators.

Convention: noise lives at flow time t=0, data at t=1. With the linear
schedule alpha(t)=t, sigma(t)=1-t the regression target x - eps is constant
in t. Each query point is decoded independently (cross-attention to the
tokens only, never between points), so batches are exchangeable.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoder import DynamicTokens
from .geom import SpatioTemporalPointCloud


@dataclass
class NoiseSchedule:
    alpha: Callable
    dalpha: Callable
    sigma: Callable
    dsigma: Callable


def _ones_like(t):
    return np.ones_like(np.asarray(t, dtype=np.float64))


LINEAR_SCHEDULE = NoiseSchedule(
    alpha=lambda t: np.asarray(t, dtype=np.float64),
    dalpha=_ones_like,
    sigma=lambda t: 1.0 - np.asarray(t, dtype=np.float64),
    dsigma=lambda t: -_ones_like(t),
)


@dataclass
class FlowSample:
    """One interpolant batch: x_t = alpha(t) * x + sigma(t) * eps."""

    x: np.ndarray     # N x 3 clean surface points
    eps: np.ndarray   # N x 3 standard normal
    t: np.ndarray     # N flow times in [0, 1]
    tau: np.ndarray   # N frame times
    x_t: np.ndarray   # N x 3

    @classmethod
    def make(cls, x, eps, t, tau, schedule: NoiseSchedule = LINEAR_SCHEDULE):
        x = np.asarray(x, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        tau = np.asarray(tau, dtype=np.float64)
        x_t = schedule.alpha(t)[:, None] * x + schedule.sigma(t)[:, None] * eps
        return cls(x=x, eps=eps, t=t, tau=tau, x_t=x_t)


def velocity_target(sample: FlowSample,
                    schedule: NoiseSchedule = LINEAR_SCHEDULE) -> np.ndarray:
    """Regression target dalpha(t) * x + dsigma(t) * eps (x - eps when linear)."""
    return (schedule.dalpha(sample.t)[:, None] * sample.x
            + schedule.dsigma(sample.t)[:, None] * sample.eps)


# ---------------------------------------------------------------------------
# network

@dataclass
class SurfaceConfig:
    token_dim: int = 16
    hidden: int = 128
    heads: int = 4
    layers: int = 2
    fourier_space: int = 6
    fourier_flow: int = 4
    fourier_time: int = 4

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")

    @property
    def input_feature_dim(self) -> int:
        return (3 * (2 * self.fourier_space + 1)
                + (2 * self.fourier_flow + 1) + (2 * self.fourier_time + 1))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SurfaceConfig":
        names = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in names})


def init_surface_decoder(cfg: SurfaceConfig, rng: np.random.Generator) -> dict:
    params: dict = {}
    nn.add_linear(params, rng, "surf.in_lift", cfg.input_feature_dim, cfg.hidden)
    nn.add_linear(params, rng, "surf.tok_lift", cfg.token_dim, cfg.hidden)
    for i in range(cfg.layers):
        nn.add_rmsnorm(params, f"surf.l{i}.cross.norm_q", cfg.hidden)
        nn.add_rmsnorm(params, f"surf.l{i}.cross.norm_kv", cfg.hidden)
        nn.add_attention(params, rng, f"surf.l{i}.cross", cfg.hidden)
        nn.add_rmsnorm(params, f"surf.l{i}.ff.norm", cfg.hidden)
        nn.add_swiglu(params, rng, f"surf.l{i}.ff", cfg.hidden, 2 * cfg.hidden)
    nn.add_rmsnorm(params, "surf.out_norm", cfg.hidden)
    nn.add_linear(params, rng, "surf.out", cfg.hidden, 3)
    return params


def _column(values, n: int) -> np.ndarray:
    col = np.asarray(values, dtype=np.float64).reshape(-1)
    if col.size == 1:
        col = np.full(n, col[0])
    if col.shape != (n,):
        raise ad.ShapeError(f"conditioning length {col.shape} != ({n},)")
    return col[:, None]


def decode_velocity(params: dict, cfg: SurfaceConfig, tokens: DynamicTokens,
                    x_t, t, tau):
    """Velocity of every query point given the tokens; rows are independent.

    t and tau broadcast from scalars or length-N vectors.
    """
    x_t = ad.wrap(x_t)
    n = x_t.data.shape[0]
    feats = ad.concat([
        nn.fourier_encode(x_t, cfg.fourier_space),
        nn.fourier_encode(Tensor(_column(t, n)), cfg.fourier_flow),
        nn.fourier_encode(Tensor(_column(tau, n)), cfg.fourier_time),
    ], axis=-1)
    h = nn.linear(params, "surf.in_lift", feats)
    kv = nn.linear(params, "surf.tok_lift", tokens.values)
    admit = np.ones((n, kv.data.shape[0]), dtype=bool)
    for i in range(cfg.layers):
        hn = nn.apply_rmsnorm(params, f"surf.l{i}.cross.norm_q", h)
        kvn = nn.apply_rmsnorm(params, f"surf.l{i}.cross.norm_kv", kv)
        att = nn.masked_attention(
            nn.linear(params, f"surf.l{i}.cross.q", hn),
            nn.linear(params, f"surf.l{i}.cross.k", kvn),
            nn.linear(params, f"surf.l{i}.cross.v", kvn),
            admit, cfg.heads)
        h = ad.add(h, nn.linear(params, f"surf.l{i}.cross.o", att))
        hn = nn.apply_rmsnorm(params, f"surf.l{i}.ff.norm", h)
        h = ad.add(h, nn.apply_swiglu(params, f"surf.l{i}.ff", hn))
    return nn.linear(params, "surf.out",
                     nn.apply_rmsnorm(params, "surf.out_norm", h))


# ---------------------------------------------------------------------------
# training loss

def pair_noise(x: np.ndarray, eps: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Permute eps rows within each frame-time group to minimise the total
    squared pairing cost against x. Each row keeps its standard-normal
    marginal; only the batch-level pairing changes."""
    out = np.empty_like(eps)
    for tval in np.unique(tau):
        rows = np.flatnonzero(tau == tval)
        cost = ((x[rows][:, None, :] - eps[rows][None, :, :]) ** 2).sum(axis=2)
        ri, ci = linear_sum_assignment(cost)
        out[rows[ri]] = eps[rows[ci]]
    return out


def draw_flow_batch(cloud: SpatioTemporalPointCloud, batch: int,
                    rng: np.random.Generator,
                    schedule: NoiseSchedule = LINEAR_SCHEDULE,
                    coupling: str = "independent") -> FlowSample:
    """Sample (x, tau) pairs from the cloud, t uniform, eps standard normal.

    coupling="ot" re-pairs the noise batch against the surface batch by a
    minimum-cost assignment inside each frame-time group, which removes most
    of the crossing-path variance from the regression target."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if coupling not in ("independent", "ot"):
        raise ValueError(f"unknown coupling {coupling!r}")
    idx = rng.integers(0, len(cloud), batch)
    x = cloud.positions[idx]
    eps = rng.standard_normal((batch, 3))
    tau = cloud.times[idx]
    if coupling == "ot":
        eps = pair_noise(x, eps, tau)
    return FlowSample.make(x, eps, rng.uniform(0.0, 1.0, batch), tau, schedule)


def velocity_mse(pred, sample: FlowSample,
                 schedule: NoiseSchedule = LINEAR_SCHEDULE):
    diff = ad.sub(ad.wrap(pred), Tensor(velocity_target(sample, schedule)))
    return ad.mean(ad.square(diff))


def flow_loss(params: dict, cfg: SurfaceConfig, tokens: DynamicTokens,
              cloud: SpatioTemporalPointCloud, batch: int,
              rng: np.random.Generator, coupling: str = "independent"):
    """L_V: mean squared velocity error over a fresh interpolant batch."""
    sample = draw_flow_batch(cloud, batch, rng, coupling=coupling)
    pred = decode_velocity(params, cfg, tokens, Tensor(sample.x_t),
                           sample.t, sample.tau)
    return velocity_mse(pred, sample)


# ---------------------------------------------------------------------------
# ODE integration (inference only, plain numpy states)

def integrate_euler(velocity_fn, x0: np.ndarray, n_steps: int) -> np.ndarray:
    """x <- x + dt * v(x, t) over n_steps left-endpoint steps from t=0 to 1."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = np.asarray(x0, dtype=np.float64).copy()
    dt = 1.0 / n_steps
    for i in range(n_steps):
        x = x + dt * np.asarray(velocity_fn(x, i * dt))
    return x


def integrate_heun(velocity_fn, x0: np.ndarray, n_steps: int) -> np.ndarray:
    """Explicit trapezoidal rule: Euler predictor, averaged-endpoint corrector."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = np.asarray(x0, dtype=np.float64).copy()
    dt = 1.0 / n_steps
    for i in range(n_steps):
        t0, t1 = i * dt, (i + 1) * dt
        v0 = np.asarray(velocity_fn(x, t0))
        v1 = np.asarray(velocity_fn(x + dt * v0, t1))
        x = x + 0.5 * dt * (v0 + v1)
    return x


def _decoder_field(params, cfg, tokens, tau):
    def v(x, t):
        return decode_velocity(params, cfg, tokens, Tensor(x), t, tau).data
    return v


def sample_euler(params: dict, cfg: SurfaceConfig, tokens: DynamicTokens,
                 tau: float, n_points: int, n_steps: int,
                 rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal((n_points, 3))
    return integrate_euler(_decoder_field(params, cfg, tokens, tau), eps, n_steps)


def sample_heun(params: dict, cfg: SurfaceConfig, tokens: DynamicTokens,
                tau: float, n_points: int, n_steps: int,
                rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal((n_points, 3))
    return integrate_heun(_decoder_field(params, cfg, tokens, tau), eps, n_steps)
