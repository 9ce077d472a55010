"""Synthetic multi-task scenes and the binary dataset container.

Each scene layers a few planar shapes (rectangles, disks, triangles) over a
flat background.  Per-pixel depth comes from a z-buffer over the shapes'
depth planes, so the nearest shape always wins both the depth and the class
label; normals are the analytic plane normals, and the boundary map marks
every pixel whose class differs from a 4-neighbour.  Scenes are a pure
function of (seed, index).
"""

from __future__ import annotations

import colorsys
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"FGMD"
VERSION = 1


@dataclass
class SceneConfig:
    seed: int = 0
    height: int = 64
    width: int = 64
    num_classes: int = 6
    shapes_min: int = 1
    shapes_max: int = 3
    depth_min: float = 2.0
    depth_max: float = 18.0

    def __post_init__(self):
        if self.height % 32 or self.width % 32:
            raise ConfigError(
                f"scene size {self.height}x{self.width} must be divisible by 32")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0 <= self.shapes_min <= self.shapes_max:
            raise ConfigError(
                f"invalid shapes range [{self.shapes_min}, {self.shapes_max}]")
        if not 0.0 < self.depth_min < self.depth_max:
            raise ConfigError(
                f"need 0 < depth_min < depth_max, got [{self.depth_min}, {self.depth_max}]")


@dataclass
class TaskSample:
    image: np.ndarray      # H x W x 3 float64 in [0, 1]
    seg: np.ndarray        # H x W uint16 class labels
    depth: np.ndarray      # H x W float64, strictly positive
    normal: np.ndarray     # H x W x 3 float64 unit vectors
    boundary: np.ndarray   # H x W uint8, 4-neighbour class transitions


def _palette(num_classes: int) -> np.ndarray:
    cols = []
    for c in range(num_classes):
        h = (c * 0.618034) % 1.0
        s = 0.55 if c else 0.15
        v = 0.85 if c else 0.45
        cols.append(colorsys.hsv_to_rgb(h, s, v))
    return np.asarray(cols)


def _shape_mask(kind: int, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    span = min(h, w)
    lo, hi = span * 0.2, span * 0.45
    if kind == 0:                                   # rectangle
        sh = rng.uniform(lo, hi)
        sw = rng.uniform(lo, hi)
        y0 = rng.uniform(0, h - sh)
        x0 = rng.uniform(0, w - sw)
        return (yy >= y0) & (yy < y0 + sh) & (xx >= x0) & (xx < x0 + sw)
    if kind == 1:                                   # disk
        r = rng.uniform(lo / 2, hi / 2)
        cy = rng.uniform(r, h - r)
        cx = rng.uniform(r, w - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # triangle via three half-plane tests
    cy, cx = rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w)
    ang = rng.uniform(0, 2 * np.pi, size=3) + np.array([0.0, 2.1, 4.2])
    rad = rng.uniform(lo / 1.5, hi / 1.5, size=3)
    vy = cy + rad * np.sin(ang)
    vx = cx + rad * np.cos(ang)
    mask = np.ones((h, w), dtype=bool)
    for i in range(3):
        y1, x1 = vy[i], vx[i]
        y2, x2 = vy[(i + 1) % 3], vx[(i + 1) % 3]
        y3, x3 = vy[(i + 2) % 3], vx[(i + 2) % 3]
        side = (xx - x1) * (y2 - y1) - (yy - y1) * (x2 - x1)
        ref = (x3 - x1) * (y2 - y1) - (y3 - y1) * (x2 - x1)
        mask &= (side * ref) >= 0
    return mask


def boundary_map(seg: np.ndarray) -> np.ndarray:
    """Pixels whose class differs from any 4-neighbour."""
    b = np.zeros(seg.shape, dtype=bool)
    diff_v = seg[:-1, :] != seg[1:, :]
    b[:-1, :] |= diff_v
    b[1:, :] |= diff_v
    diff_h = seg[:, :-1] != seg[:, 1:]
    b[:, :-1] |= diff_h
    b[:, 1:] |= diff_h
    return b.astype(np.uint8)


def generate_scene(cfg: SceneConfig, index: int) -> TaskSample:
    """Deterministic scene for (cfg.seed, index)."""
    rng = np.random.default_rng((cfg.seed, 5, index))
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    seg = np.zeros((h, w), dtype=np.uint16)
    depth = np.full((h, w), cfg.depth_max, dtype=np.float64)
    normal = np.zeros((h, w, 3), dtype=np.float64)
    normal[..., 2] = 1.0

    n_shapes = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
    margin = 0.25 * (cfg.depth_max - cfg.depth_min)
    tints = []
    tint_id = np.full((h, w), -1, dtype=np.int64)
    for si in range(n_shapes):
        kind = int(rng.integers(0, 3))
        klass = int(rng.integers(1, cfg.num_classes))
        mask = _shape_mask(kind, rng, h, w)
        if not mask.any():
            continue
        d0 = rng.uniform(cfg.depth_min + margin, cfg.depth_max - margin)
        gmax = margin / (h + w)                     # keeps every plane depth positive
        gy, gx = rng.uniform(-gmax, gmax, size=2)
        plane = d0 + gy * (yy - h / 2) + gx * (xx - w / 2)
        win = mask & (plane < depth)                # z-buffer: nearest shape wins
        if not win.any():
            continue
        depth[win] = plane[win]
        seg[win] = klass
        nvec = np.array([-gy, -gx, 1.0])
        normal[win] = nvec / np.linalg.norm(nvec)
        tints.append(rng.uniform(-0.08, 0.08, size=3))
        tint_id[win] = len(tints) - 1

    pal = _palette(cfg.num_classes)
    shade = 0.55 + 0.45 * (cfg.depth_max - depth) / (cfg.depth_max - cfg.depth_min)
    image = pal[seg.astype(np.int64)] * shade[..., None]
    for ti, tint in enumerate(tints):
        sel = tint_id == ti
        image[sel] += tint
    image += rng.normal(0.0, 0.015, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)

    return TaskSample(image=image, seg=seg, depth=depth, normal=normal,
                      boundary=boundary_map(seg))


def generate_dataset(cfg: SceneConfig, count: int, start_index: int = 0):
    return [generate_scene(cfg, start_index + i) for i in range(count)]


# ---- binary container ----------------------------------------------------


def _sample_bytes(s: TaskSample) -> bytes:
    h, w = s.seg.shape
    parts = [struct.pack("<II", h, w),
             np.ascontiguousarray(s.image, dtype="<f8").tobytes(),
             np.ascontiguousarray(s.seg, dtype="<u2").tobytes(),
             np.ascontiguousarray(s.depth, dtype="<f8").tobytes(),
             np.ascontiguousarray(s.normal, dtype="<f8").tobytes(),
             np.ascontiguousarray(s.boundary, dtype="u1").tobytes()]
    return b"".join(parts)


def write_dataset(samples, path) -> None:
    payload = struct.pack("<II", VERSION, len(samples))
    payload += b"".join(_sample_bytes(s) for s in samples)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated dataset file while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_dataset(path):
    """Read and validate a dataset file; returns a list of TaskSample."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"bad magic: expected {MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError("truncated dataset file while reading header")
    payload, crc_bytes = raw[4:-4], raw[-4:]
    stored_crc = struct.unpack("<I", crc_bytes)[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise FormatError("checksum mismatch: payload CRC-32 does not match trailer")
    rd = _Reader(payload)
    version = rd.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}")
    count = rd.u32("count")
    samples = []
    for k in range(count):
        h = rd.u32(f"sample {k} height")
        w = rd.u32(f"sample {k} width")
        if h == 0 or w == 0:
            raise FormatError(f"sample {k}: degenerate size {h}x{w}")
        image = np.frombuffer(rd.take(8 * h * w * 3, f"sample {k} image"),
                              dtype="<f8").reshape(h, w, 3).copy()
        seg = np.frombuffer(rd.take(2 * h * w, f"sample {k} seg"),
                            dtype="<u2").reshape(h, w).copy()
        depth = np.frombuffer(rd.take(8 * h * w, f"sample {k} depth"),
                              dtype="<f8").reshape(h, w).copy()
        normal = np.frombuffer(rd.take(8 * h * w * 3, f"sample {k} normal"),
                               dtype="<f8").reshape(h, w, 3).copy()
        boundary = np.frombuffer(rd.take(h * w, f"sample {k} boundary"),
                                 dtype="u1").reshape(h, w).copy()
        samples.append(TaskSample(image=image, seg=seg, depth=depth,
                                  normal=normal, boundary=boundary))
    if rd.pos != len(payload):
        raise FormatError(f"{len(payload) - rd.pos} unexpected trailing payload bytes")
    return samples


def sample_targets(sample: TaskSample) -> dict:
    """Per-task ground-truth arrays keyed by task name."""
    return {"seg": sample.seg, "depth": sample.depth,
            "normal": sample.normal, "bound": sample.boundary}
