"""Binary artifact formats and flat text configs.

Formats (all little-endian):
  VLXT  checkpoint: magic, version u32, records of (name-len u32, UTF-8
        name, rank u32, extents u64[], f64 payload)
  VLXP  point cloud: magic, version u32, count u64, f32 columns
        x, y, z, r, g, b, tau
  VLXK  tracks: magic, Q u32, T u32, f32 trajectories (Q*T*3), u8 visibility
  VLXG  gaussians: magic, count u64, tau f32, 14 f32 columns in the
        activated parameterization
  PPM   P6 binary, 8-bit
  PFM   grayscale float depth, bottom-up rows
"""

from __future__ import annotations

import io
import os

import numpy as np

from .geom import SpatioTemporalPointCloud

CHECKPOINT_VERSION = 1
CLOUD_VERSION = 1


class FormatError(ValueError):
    pass


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_u32(f) -> int:
    return int(np.frombuffer(_read_exact(f, 4), dtype="<u4")[0])


def _read_u64(f) -> int:
    return int(np.frombuffer(_read_exact(f, 8), dtype="<u8")[0])


def _u32(x: int) -> bytes:
    return np.uint32(x).tobytes()


def _u64(x: int) -> bytes:
    return np.uint64(x).tobytes()


# ---------------------------------------------------------------------------
# VLXT checkpoints

def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named f64 arrays; iteration order is sorted for reproducibility."""
    with open(path, "wb") as f:
        f.write(b"VLXT")
        f.write(_u32(CHECKPOINT_VERSION))
        for name in sorted(tensors):
            # asarray keeps 0-d shapes (ascontiguousarray would promote to 1-d)
            arr = np.asarray(tensors[name], dtype="<f8", order="C")
            enc = name.encode("utf-8")
            f.write(_u32(len(enc)))
            f.write(enc)
            f.write(_u32(arr.ndim))
            f.write(np.asarray(arr.shape, dtype="<u8").tobytes())
            f.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != b"VLXT":
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version = _read_u32(f)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"checkpoint version {version} unsupported "
                              f"(expected {CHECKPOINT_VERSION})")
        out: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                return out
            if len(head) != 4:
                raise FormatError("truncated record header")
            name_len = int(np.frombuffer(head, dtype="<u4")[0])
            name = _read_exact(f, name_len).decode("utf-8")
            rank = _read_u32(f)
            shape = tuple(np.frombuffer(_read_exact(f, 8 * rank), dtype="<u8")
                          .astype(np.intp))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8")
            out[name] = data.reshape(shape).astype(np.float64)


# ---------------------------------------------------------------------------
# VLXP point clouds

def save_cloud(path, cloud: SpatioTemporalPointCloud) -> None:
    n = len(cloud)
    cols = np.concatenate([cloud.positions.T, cloud.colors.T,
                           cloud.times[None, :]], axis=0)
    with open(path, "wb") as f:
        f.write(b"VLXP")
        f.write(_u32(CLOUD_VERSION))
        f.write(_u64(n))
        f.write(np.ascontiguousarray(cols, dtype="<f4").tobytes())


def load_cloud(path) -> SpatioTemporalPointCloud:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != b"VLXP":
            raise FormatError("bad point-cloud magic")
        version = _read_u32(f)
        if version != CLOUD_VERSION:
            raise FormatError(f"point-cloud version {version} unsupported")
        n = _read_u64(f)
        cols = np.frombuffer(_read_exact(f, 4 * 7 * n), dtype="<f4")
        cols = cols.reshape(7, n).astype(np.float64)
        return SpatioTemporalPointCloud(cols[0:3].T.copy(), cols[3:6].T.copy(),
                                        cols[6].copy())


# ---------------------------------------------------------------------------
# VLXK tracks

def save_tracks(path, trajectories: np.ndarray, visibility: np.ndarray) -> None:
    q, t, _ = trajectories.shape
    if visibility.shape != (q, t):
        raise FormatError("visibility shape mismatch")
    with open(path, "wb") as f:
        f.write(b"VLXK")
        f.write(_u32(q))
        f.write(_u32(t))
        f.write(np.ascontiguousarray(trajectories, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(visibility, dtype=np.uint8).tobytes())


def load_tracks(path):
    with open(path, "rb") as f:
        if _read_exact(f, 4) != b"VLXK":
            raise FormatError("bad track magic")
        q = _read_u32(f)
        t = _read_u32(f)
        traj = np.frombuffer(_read_exact(f, 4 * q * t * 3), dtype="<f4")
        vis = np.frombuffer(_read_exact(f, q * t), dtype=np.uint8)
        return (traj.reshape(q, t, 3).astype(np.float64),
                vis.reshape(q, t).astype(bool))


# ---------------------------------------------------------------------------
# VLXG gaussian sets

def save_gaussians(path, params14: np.ndarray, tau: float) -> None:
    """params14: N x 14 activated columns (pos3, scale3, quat4, opacity, rgb3)."""
    n = params14.shape[0]
    if params14.shape != (n, 14):
        raise FormatError("expected N x 14 gaussian parameters")
    with open(path, "wb") as f:
        f.write(b"VLXG")
        f.write(_u64(n))
        f.write(np.float32(tau).tobytes())
        f.write(np.ascontiguousarray(params14.T, dtype="<f4").tobytes())


def load_gaussians(path):
    with open(path, "rb") as f:
        if _read_exact(f, 4) != b"VLXG":
            raise FormatError("bad gaussian magic")
        n = _read_u64(f)
        tau = float(np.frombuffer(_read_exact(f, 4), dtype="<f4")[0])
        cols = np.frombuffer(_read_exact(f, 4 * 14 * n), dtype="<f4")
        return cols.reshape(14, n).T.astype(np.float64), tau


# ---------------------------------------------------------------------------
# images

def save_ppm(path, image: np.ndarray) -> None:
    """image: H x W x 3 floats in [0, 1], quantized to 8 bits."""
    h, w, _ = image.shape
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise FormatError("not a binary PPM")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        w, h = (int(x) for x in line.split())
        maxval = int(f.readline())
        if maxval != 255:
            raise FormatError("only 8-bit PPM supported")
        data = np.frombuffer(_read_exact(f, w * h * 3), dtype=np.uint8)
        return data.reshape(h, w, 3).astype(np.float64) / 255.0


def save_pfm(path, depth: np.ndarray) -> None:
    """Grayscale PFM, negative scale = little-endian, rows bottom-up."""
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(depth[::-1], dtype="<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise FormatError("not a grayscale PFM")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(_read_exact(f, w * h * 4), dtype=dtype)
        return data.reshape(h, w)[::-1].astype(np.float64)


# ---------------------------------------------------------------------------
# flat text config and logs

def save_config(path, values: dict) -> None:
    with open(path, "w") as f:
        for key in sorted(values):
            f.write(f"{key} = {values[key]}\n")


def parse_value(text: str):
    text = text.strip()
    for caster in (int, float):
        try:
            return caster(text)
        except ValueError:
            pass
    if text in ("true", "True"):
        return True
    if text in ("false", "False"):
        return False
    return text


def load_config(path) -> dict:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            out[key.strip()] = parse_value(val)
    return out


def append_log_line(path, fields: dict) -> None:
    """One machine-parseable `key=value` record per line, append-only."""
    items = " ".join(f"{k}={fields[k]}" for k in fields)
    with open(path, "a") as f:
        f.write(items + "\n")


def read_log(path) -> list[dict]:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = {}
            for item in line.split():
                key, _, val = item.partition("=")
                row[key] = parse_value(val)
            rows.append(row)
    return rows


def file_hash(path) -> str:
    import hashlib
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def tree_hash(root) -> str:
    """Order-independent hash of a directory: sorted (relpath, sha256) pairs."""
    import hashlib
    entries = []
    for dirpath, _, filenames in sorted(os.walk(root)):
        for fn in sorted(filenames):
            full = os.path.join(dirpath, fn)
            entries.append(f"{os.path.relpath(full, root)}:{file_hash(full)}")
    return hashlib.sha256("\n".join(entries).encode()).hexdigest()
