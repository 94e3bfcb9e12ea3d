"""Command-line surface: data generation, training, inference, evaluation.

Seven subcommands (gen-data, train, encode, sample, track, render, eval)
cover the full loop. Every command is file-driven and deterministic under
--seed; the only environment knob is VELOX_THREADS, which caps BLAS
parallelism. Exit codes: 0 success, 1 runtime failure (stderr names the
module that failed), 2 usage.
"""
from __future__ import annotations

import os


def _seed_thread_env() -> None:
    raw = os.environ.get("VELOX_THREADS", "").strip()
    if raw.isdigit() and int(raw) >= 1:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, raw)


# must run before numpy initializes its BLAS thread pool
_seed_thread_env()

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import sys  # noqa: E402
import traceback  # noqa: E402
from dataclasses import dataclass  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import fileio  # noqa: E402
from . import training as tr  # noqa: E402
from .autodiff import Tensor  # noqa: E402
from .encoder import DynamicTokens, EncoderConfig, encode  # noqa: E402
from .gaussians import (GaussianDecoderConfig, VoxelQuery,  # noqa: E402
                        decode_gaussians)
from .geom import SpatioTemporalPointCloud, chamfer, frame_time  # noqa: E402
from .generate import GeneratorConfig  # noqa: E402
from .scenes import (FAMILIES, TEXTURE_KINDS, build_scene,  # noqa: E402
                     load_scene, save_scene)
from .splat import psnr, render_image  # noqa: E402
from .surface import SurfaceConfig, sample_euler, sample_heun  # noqa: E402
from .tracking import (TrackerConfig, TrackPrediction,  # noqa: E402
                       predict_tracks, track_metrics)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

KNOWN_SECTIONS = ("scene", "encoder", "surface", "gaussian", "tracker",
                  "generator", "train", "heads", "encode", "sample", "render")
SAMPLERS = {"euler": sample_euler, "heun": sample_heun}


class UsageError(ValueError):
    """Bad arguments or unusable inputs; reported with exit code 2."""


def apply_thread_cap() -> int | None:
    raw = os.environ.get("VELOX_THREADS")
    if raw is None:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError(f"VELOX_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise UsageError("VELOX_THREADS must be >= 1")
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(cap)
    except ImportError:
        pass  # env vars set at import time still cap fresh processes
    return cap


def _maybe_path(value) -> Path | None:
    return None if value is None else Path(value)


@dataclass
class RunConfig:
    """Resolved command inputs; referenced paths exist before work starts."""

    command: str
    scenes: Path | None = None
    config: Path | None = None
    checkpoint: Path | None = None
    out: Path | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scenes is not None and not self.scenes.exists():
            raise UsageError(f"scenes path not found: {self.scenes}")
        if self.config is not None and not self.config.is_file():
            raise UsageError(f"config file not found: {self.config}")
        if self.checkpoint is not None and not self.checkpoint.is_file():
            raise UsageError(f"checkpoint not found: {self.checkpoint}")

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        return cls(command=args.command,
                   scenes=_maybe_path(getattr(args, "scenes", None)),
                   config=_maybe_path(getattr(args, "config", None)),
                   checkpoint=_maybe_path(getattr(args, "checkpoint", None)),
                   out=_maybe_path(getattr(args, "out", None)),
                   seed=int(getattr(args, "seed", 0)))


# ---------------------------------------------------------------------------
# config plumbing

def load_run_config(path: Path | None) -> dict:
    if path is None:
        return {}
    cfg = fileio.load_config(path)
    for key in cfg:
        head, _, tail = key.partition(".")
        if not tail or head not in KNOWN_SECTIONS:
            raise UsageError(f"unknown config key {key!r}")
    return cfg


def section(cfg: dict, name: str) -> dict:
    out = {}
    for key, val in cfg.items():
        head, _, tail = key.partition(".")
        if head == name:
            out[tail] = val
    return out


def build_dataclass(cls, overrides: dict, label: str):
    names = {f.name for f in dataclasses.fields(cls)}
    bad = sorted(set(overrides) - names)
    if bad:
        raise UsageError(f"unknown {label} option(s): {', '.join(bad)}")
    try:
        return cls(**overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {label} config: {exc}")


def model_configs(cfg: dict):
    """The encoder/surface/gaussian triple, token dims tied to the encoder."""
    enc = build_dataclass(EncoderConfig, section(cfg, "encoder"), "encoder")
    s = section(cfg, "surface")
    s.setdefault("token_dim", enc.d)
    g = section(cfg, "gaussian")
    g.setdefault("token_dim", enc.d)
    return (enc, build_dataclass(SurfaceConfig, s, "surface"),
            build_dataclass(GaussianDecoderConfig, g, "gaussian"))


def tracker_config(cfg: dict, enc: EncoderConfig, frames: int):
    t = section(cfg, "tracker")
    t.setdefault("token_dim", enc.d)
    t.setdefault("frames", frames)
    return build_dataclass(TrackerConfig, t, "tracker")


def generator_config(cfg: dict, enc: EncoderConfig):
    g = section(cfg, "generator")
    g.setdefault("token_count", enc.k)
    g.setdefault("token_dim", enc.d)
    return build_dataclass(GeneratorConfig, g, "generator")


def parse_index_list(value) -> list[int]:
    if isinstance(value, int):
        return [value]
    try:
        return [int(tok) for tok in str(value).split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"bad frame index list {value!r}")


# ---------------------------------------------------------------------------
# shared loaders

def load_scene_dir(root: Path) -> list[tuple[str, object]]:
    if not root.is_dir():
        raise UsageError(f"scenes path is not a directory: {root}")
    dirs = sorted(d for d in root.iterdir()
                  if d.is_dir() and (d / "scene.json").is_file())
    if not dirs:
        raise UsageError(f"no scenes found under {root}")
    return [(d.name, load_scene(d)) for d in dirs]


def load_params(path: Path, prefix: str) -> dict:
    params = tr.load_checkpoint(path)
    if not any(k.startswith(prefix) for k in params):
        raise UsageError(f"checkpoint {path} has no {prefix}* parameters")
    return params


def _subsample(cloud: SpatioTemporalPointCloud, count: int,
               rng: np.random.Generator) -> SpatioTemporalPointCloud:
    n = cloud.positions.shape[0]
    if count and count < n:
        keep = np.sort(rng.choice(n, size=count, replace=False))
        return cloud.subset(keep)
    return cloud


def encode_scene(bundle, params: dict, enc: EncoderConfig, points: int,
                 seed: int, index: int) -> DynamicTokens:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    cloud = _subsample(bundle.cloud, points, rng)
    return encode(cloud, enc, params, anchor_seed=int(rng.integers(2 ** 31)))


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    rc = RunConfig.from_args(args)
    if args.family not in FAMILIES:
        raise UsageError(f"unknown scene family {args.family!r}; "
                         f"choose from {', '.join(FAMILIES)}")
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    scene = section(load_run_config(rc.config), "scene")
    resolution = int(scene.pop("resolution", 64))
    cameras = int(scene.pop("cameras", 4))
    n_tracks = int(scene.pop("tracks", 64))
    texture = scene.pop("texture", None)
    indices = scene.pop("frame_indices", None)
    if scene:
        raise UsageError(f"unknown scene option(s): {', '.join(sorted(scene))}")
    if texture is not None and texture not in TEXTURE_KINDS:
        raise UsageError(f"unknown texture {texture!r}")
    if indices is not None:
        indices = parse_index_list(indices)
    if args.count == 0:
        return EXIT_OK  # nothing to write, and no directories either
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        bundle = build_scene(args.family, seed=rc.seed + i, frames=args.frames,
                             cameras=cameras, resolution=resolution,
                             n_tracks=n_tracks, texture_kind=texture,
                             frame_indices=indices)
        path = out / f"scene_{i:03d}"
        save_scene(bundle, path)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = RunConfig.from_args(args)
    if rc.scenes is None:
        raise UsageError("train needs --scenes")
    named = load_scene_dir(rc.scenes)
    bundles = [b for _, b in named]
    cfg = load_run_config(rc.config)
    enc, surf, gau = model_configs(cfg)

    t = section(cfg, "train")
    if args.steps is not None:
        t["steps"] = args.steps
    t["seed"] = rc.seed
    tcfg = build_dataclass(tr.TrainConfig, t, "train")

    models = tr.init_models(enc, surf, gau, seed=rc.seed)
    if rc.checkpoint is not None:  # warm start
        models = dataclasses.replace(models,
                                     params=tr.load_checkpoint(rc.checkpoint))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train.log"
    log_path.unlink(missing_ok=True)
    reports = tr.train(bundles, models, tcfg, log_path=log_path)
    print(f"train: {len(reports)} steps, final total {reports[-1].total:.6f}")

    heads = section(cfg, "heads")
    occ_steps = int(heads.pop("occupancy_steps", 0))
    trk_steps = int(heads.pop("tracker_steps", 0))
    gen_steps = int(heads.pop("generator_steps", 0))
    if occ_steps or trk_steps or gen_steps:
        heads["seed"] = rc.seed
        base = build_dataclass(tr.HeadTrainConfig, heads, "heads")
        tokens = tr.cache_tokens(bundles, models, seed=rc.seed,
                                 points_per_scene=base.points_per_scene)
        if occ_steps:
            losses = tr.train_occupancy_head(
                bundles, models, dataclasses.replace(base, steps=occ_steps),
                tokens=tokens)
            print(f"occupancy head: {occ_steps} steps, "
                  f"final loss {losses[-1]:.6f}")
        if trk_steps:
            tcfg_trk = tracker_config(cfg, enc, bundles[0].frames)
            trk, losses = tr.train_tracker(
                bundles, models, tcfg_trk,
                dataclasses.replace(base, steps=trk_steps), tokens=tokens)
            models.params.update(trk)
            print(f"tracker head: {trk_steps} steps, "
                  f"final loss {losses[-1]:.6f}")
        if gen_steps:
            gcfg = generator_config(cfg, enc)
            gparams, losses = tr.train_generator(
                bundles, models, gcfg,
                dataclasses.replace(base, steps=gen_steps), tokens=tokens)
            models.params.update(gparams)
            print(f"generator head: {gen_steps} steps, "
                  f"final loss {losses[-1]:.6f}")

    ckpt = out / "model.vlxt"
    tr.save_checkpoint(ckpt, models.params)
    print(f"wrote {ckpt}")
    return EXIT_OK


def cmd_encode(args) -> int:
    rc = RunConfig.from_args(args)
    if rc.scenes is None or rc.checkpoint is None:
        raise UsageError("encode needs --scenes and --checkpoint")
    cfg = load_run_config(rc.config)
    enc, _, _ = model_configs(cfg)
    points = int(section(cfg, "encode").get("points", 4096))
    params = load_params(rc.checkpoint, "enc.")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (name, bundle) in enumerate(load_scene_dir(rc.scenes)):
        tokens = encode_scene(bundle, params, enc, points, rc.seed, i)
        taus = np.array([frame_time(j) for j in bundle.frame_indices])
        path = out / f"{name}.tokens.vlxt"
        fileio.save_tensors(path, {"values": tokens.values.data,
                                   "anchors": tokens.anchors, "taus": taus})
        print(f"wrote {path}")
    return EXIT_OK


def cmd_sample(args) -> int:
    rc = RunConfig.from_args(args)
    if rc.scenes is None or rc.checkpoint is None:
        raise UsageError("sample needs --scenes (encoded tokens) "
                         "and --checkpoint")
    token_files = sorted(Path(rc.scenes).glob("*.tokens.vlxt"))
    if not token_files:
        raise UsageError(f"no .tokens.vlxt files under {rc.scenes}")
    cfg = load_run_config(rc.config)
    _, surf, _ = model_configs(cfg)
    count = int(section(cfg, "sample").get("points", 2048))
    params = load_params(rc.checkpoint, "surf.")
    sampler = SAMPLERS[args.sampler]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, tf in enumerate(token_files):
        arrays = fileio.load_tensors(tf)
        tokens = DynamicTokens(Tensor(arrays["values"]), arrays["anchors"])
        taus = arrays["taus"]
        if args.frames is not None:
            taus = taus[:args.frames]
        parts, times = [], []
        for j, tau in enumerate(taus):
            rng = np.random.default_rng(np.random.SeedSequence(
                [rc.seed, i, j]))
            pts = sampler(params, surf, tokens, float(tau), count,
                          args.steps, rng)
            parts.append(pts)
            times.append(np.full(count, float(tau)))
        cloud = SpatioTemporalPointCloud(
            positions=np.concatenate(parts),
            colors=np.zeros((count * len(taus), 3)),
            times=np.concatenate(times))
        name = tf.name.replace(".tokens.vlxt", "")
        path = out / f"{name}.samples.vlxp"
        fileio.save_cloud(path, cloud)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_track(args) -> int:
    rc = RunConfig.from_args(args)
    if rc.scenes is None or rc.checkpoint is None:
        raise UsageError("track needs --scenes and --checkpoint")
    cfg = load_run_config(rc.config)
    enc, _, _ = model_configs(cfg)
    points = int(section(cfg, "encode").get("points", 4096))
    params = load_params(rc.checkpoint, "trk.")
    load_params(rc.checkpoint, "enc.")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (name, bundle) in enumerate(load_scene_dir(rc.scenes)):
        if not 0 <= args.camera_index < len(bundle.cameras):
            raise UsageError(f"camera index {args.camera_index} out of range "
                             f"for {name} ({len(bundle.cameras)} cameras)")
        tcfg = tracker_config(cfg, enc, bundle.frames)
        tokens = encode_scene(bundle, params, enc, points, rc.seed, i)
        pred = predict_tracks(params, tcfg, tokens, bundle.tracks.queries,
                              camera=bundle.cameras[args.camera_index],
                              depth_frames=bundle.depths[args.camera_index])
        path = out / f"{name}.tracks.bin"
        fileio.save_tracks(path, pred.trajectories, pred.visible)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_render(args) -> int:
    rc = RunConfig.from_args(args)
    if rc.scenes is None or rc.checkpoint is None:
        raise UsageError("render needs --scenes and --checkpoint")
    cfg = load_run_config(rc.config)
    enc, _, gau = model_configs(cfg)
    points = int(section(cfg, "encode").get("points", 4096))
    params = load_params(rc.checkpoint, "gs.")
    load_params(rc.checkpoint, "enc.")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (name, bundle) in enumerate(load_scene_dir(rc.scenes)):
        ci = args.camera_index
        if not 0 <= ci < len(bundle.cameras):
            raise UsageError(f"camera index {ci} out of range for {name} "
                             f"({len(bundle.cameras)} cameras)")
        tokens = encode_scene(bundle, params, enc, points, rc.seed, i)
        n_frames = bundle.frames if args.frames is None else min(
            args.frames, bundle.frames)
        cam_dir = out / name / f"cam{ci:02d}"
        cam_dir.mkdir(parents=True, exist_ok=True)
        for j in range(n_frames):
            src = bundle.frame_indices[j]
            frame = bundle.frame_cloud(src)
            # ground-truth voxel queries: reconstruction-style rendering
            vox = VoxelQuery.from_points(frame.positions, gau.resolution,
                                         frame_time(src))
            gset = decode_gaussians(vox, tokens, params, gau)
            img = render_image(gset, bundle.cameras[ci])
            fileio.save_ppm(cam_dir / f"color_{j:04d}.ppm",
                            np.clip(img.data, 0.0, 1.0))
        print(f"wrote {cam_dir} ({n_frames} frames)")
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = RunConfig.from_args(args)
    if rc.scenes is None:
        raise UsageError("eval needs --scenes for ground truth")
    pred = Path(args.pred)
    if not pred.is_dir():
        raise UsageError(f"prediction path is not a directory: {pred}")
    rows = []
    for name, bundle in load_scene_dir(rc.scenes):
        taus = np.array([frame_time(j) for j in bundle.frame_indices])

        tfile = pred / f"{name}.tracks.bin"
        if tfile.is_file():
            traj, vis = fileio.load_tracks(tfile)
            m = track_metrics(TrackPrediction(traj, vis), bundle.tracks)
            rows.append({"scene": name, "kind": "tracks",
                         "l2_all": m.l2_all, "l2_vis": m.l2_vis,
                         "apd_all": m.apd_all, "apd_vis": m.apd_vis,
                         "aj": m.aj, "oa": m.oa})

        sfile = pred / f"{name}.samples.vlxp"
        if sfile.is_file():
            cloud = fileio.load_cloud(sfile)
            dists = []
            for t in np.unique(cloud.times):
                close = np.nonzero(np.abs(taus - t) < 1e-6)[0]
                if close.size == 0:
                    raise UsageError(f"sampled time {t} matches no frame "
                                     f"of {name}")
                src = bundle.frame_indices[int(close[0])]
                gt = bundle.frame_cloud(src)
                dists.append(chamfer(cloud.positions[cloud.times == t],
                                     gt.positions))
            rows.append({"scene": name, "kind": "samples",
                         "chamfer_mean": float(np.mean(dists)),
                         "chamfer_max": float(np.max(dists)),
                         "frames": len(dists)})

        rdir = pred / name
        if rdir.is_dir():
            vals = []
            for ppm in sorted(rdir.glob("cam*/color_*.ppm")):
                ci = int(ppm.parent.name[3:])
                j = int(ppm.stem.split("_")[1])
                vals.append(psnr(fileio.load_ppm(ppm), bundle.colors[ci, j]))
            if vals:
                rows.append({"scene": name, "kind": "render",
                             "psnr_mean": float(np.mean(vals)),
                             "psnr_min": float(np.min(vals)),
                             "images": len(vals)})

    if not rows:
        raise UsageError(f"nothing to evaluate under {pred}")
    for row in rows:
        print(" ".join(f"{k}={v}" for k, v in row.items()))
        if args.out is not None:
            fileio.append_log_line(args.out, row)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train,
            "encode": cmd_encode, "sample": cmd_sample, "track": cmd_track,
            "render": cmd_render, "eval": cmd_eval}


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p, *, scenes=False, checkpoint=False, out=False):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=0, help="run seed")
    if scenes:
        p.add_argument("--scenes", required=True, help="scene directory")
    if checkpoint:
        p.add_argument("--checkpoint", help="parameter checkpoint (.vlxt)")
    if out:
        p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vlx4d",
        description="4D object tokens: synthetic data, training, decoding")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic scene bundles")
    g.add_argument("--family", required=True,
                   help=f"one of: {', '.join(FAMILIES)}")
    g.add_argument("--count", type=int, required=True,
                   help="number of scenes")
    g.add_argument("--frames", type=int, default=8, help="frames per scene")
    _add_common(g, out=True)

    t = sub.add_parser("train", help="train encoder and decoders on scenes")
    t.add_argument("--steps", type=int, help="override train.steps")
    _add_common(t, scenes=True, checkpoint=True, out=True)

    e = sub.add_parser("encode", help="encode scenes into dynamic tokens")
    _add_common(e, scenes=True, checkpoint=True, out=True)

    s = sub.add_parser("sample", help="sample surface points from tokens")
    s.add_argument("--sampler", choices=sorted(SAMPLERS), default="heun")
    s.add_argument("--steps", type=int, default=20, help="ODE steps")
    s.add_argument("--frames", type=int, help="limit sampled frames")
    _add_common(s, scenes=True, checkpoint=True, out=True)

    k = sub.add_parser("track", help="predict 3D tracks for scene queries")
    k.add_argument("--camera-index", type=int, default=0,
                   help="camera used for visibility flags")
    _add_common(k, scenes=True, checkpoint=True, out=True)

    r = sub.add_parser("render", help="render decoded gaussians to images")
    r.add_argument("--camera-index", type=int, default=0)
    r.add_argument("--frames", type=int, help="limit rendered frames")
    _add_common(r, scenes=True, checkpoint=True, out=True)

    v = sub.add_parser("eval", help="score predictions against ground truth")
    v.add_argument("pred", help="directory of predictions")
    v.add_argument("--scenes", required=True, help="ground-truth scenes")
    v.add_argument("--config", help="key=value config file")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="append report lines to this file")

    return p


def _failing_module(exc: BaseException) -> str:
    module = "cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        path = Path(frame.filename)
        if path.parent.name == "vlx4d":
            module = path.stem
    return module


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage
        return int(exc.code or 0)
    try:
        apply_thread_cap()
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error in {_failing_module(exc)}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
