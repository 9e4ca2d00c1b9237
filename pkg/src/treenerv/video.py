"""Frame I/O (binary PPM/PGM), synthetic test videos and sampling analysis."""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .codec import psnr
from .tree import TreeGrid

__all__ = [
    "VideoSequence",
    "FrameFormatError",
    "read_pnm",
    "write_pnm",
    "load_frames",
    "save_frames",
    "synth",
    "adjacent_mse",
    "key_histogram",
    "analyze",
    "AnalysisReport",
]

SYNTH_KINDS = ("static_dynamic", "smooth", "piecewise")
# path revolutions per frame in the moving half of ``static_dynamic``; about
# four frames per revolution, and never a whole revolution per frame
DYNAMIC_SPEED = 0.23
HIST_BINS = 16


class FrameFormatError(ValueError):
    pass


@dataclass
class VideoSequence:
    """Frames as ``C x H x W`` float32 arrays in [0, 1].

    Reads through :meth:`frame` are appended to ``access_log`` so callers can
    prove which frames a computation touched.
    """

    frames: list
    source: str = ""
    access_log: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError(f"a video needs at least 2 frames, got {len(self.frames)}")
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise ValueError(f"frame {i} has shape {f.shape}, expected {shape}")

    @property
    def L(self) -> int:
        return len(self.frames)

    @property
    def C(self) -> int:
        return self.frames[0].shape[0]

    @property
    def H(self) -> int:
        return self.frames[0].shape[1]

    @property
    def W(self) -> int:
        return self.frames[0].shape[2]

    def frame(self, i: int) -> np.ndarray:
        self.access_log.append(i)
        return self.frames[i]

    def subset(self, indices: Sequence[int]) -> dict:
        return {i: self.frame(i) for i in indices}

    def even_mask(self) -> list[bool]:
        return [i % 2 == 0 for i in range(self.L)]


# -- netpbm -------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)")


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file with maxval 255 into ``C x H x W`` floats."""
    path = Path(path)
    raw = path.read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise FrameFormatError(f"{path}: truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FrameFormatError(f"{path}: unsupported magic {magic.decode(errors='replace')!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FrameFormatError(f"{path}: malformed header") from None
    if maxval != 255:
        raise FrameFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    data = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos) if len(raw) - pos >= n else None
    if data is None:
        raise FrameFormatError(f"{path}: raster truncated")
    return (data.reshape(height, width, channels).transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_pnm(path, frame: np.ndarray) -> None:
    frame = np.asarray(frame)
    c, h, w = frame.shape
    if c not in (1, 3):
        raise FrameFormatError(f"{path}: cannot write {c}-channel frame")
    q = np.floor(np.clip(frame.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    magic = b"P6" if c == 3 else b"P5"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(q.transpose(1, 2, 0).tobytes())


_NUMBERED = re.compile(r"^(.*?)(\d+)\.(ppm|pgm)$", re.IGNORECASE)


def load_frames(directory) -> VideoSequence:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory not found: {directory}")
    numbered = []
    for p in directory.iterdir():
        m = _NUMBERED.match(p.name)
        if m:
            numbered.append((int(m.group(2)), p))
    if not numbered:
        raise FrameFormatError(f"{directory}: no numbered .ppm/.pgm frames")
    numbered.sort()
    first = numbered[0][0]
    for expect, (num, p) in enumerate(numbered, start=first):
        if num != expect:
            raise FrameFormatError(f"{p}: frame number {num} breaks contiguous numbering (expected {expect})")
    frames = []
    for _, p in numbered:
        f = read_pnm(p)
        if frames and f.shape != frames[0].shape:
            raise FrameFormatError(f"{p}: resolution {f.shape[1:]} differs from {frames[0].shape[1:]}")
        if frames and f.shape[0] != frames[0].shape[0]:
            raise FrameFormatError(f"{p}: mixes gray and RGB frames")
        frames.append(f)
    if len(frames) < 2:
        raise FrameFormatError(f"{directory}: need at least 2 frames")
    return VideoSequence(frames, source=str(directory))


def save_frames(seq: VideoSequence | Sequence[np.ndarray], directory, prefix: str = "frame") -> list[Path]:
    frames = seq.frames if isinstance(seq, VideoSequence) else list(seq)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digits = max(4, len(str(len(frames) - 1)))
    ext = "ppm" if frames[0].shape[0] == 3 else "pgm"
    paths = []
    for i, f in enumerate(frames):
        p = directory / f"{prefix}_{i:0{digits}d}.{ext}"
        write_pnm(p, f)
        paths.append(p)
    return paths


# -- synthetic videos ---------------------------------------------------------


def adjacent_mse(frames: Sequence[np.ndarray]) -> np.ndarray:
    """MSE between each frame and its predecessor; entry 0 is 0."""
    out = np.zeros(len(frames))
    for i in range(1, len(frames)):
        d = frames[i].astype(np.float64) - frames[i - 1].astype(np.float64)
        out[i] = float(np.mean(d * d))
    return out


def _to8(x: np.ndarray) -> np.ndarray:
    return (np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5) / 255.0).astype(np.float32)


def _background(h: int, w: int, phase: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    chans = [0.5 + 0.25 * np.sin(2 * np.pi * (xx * 1.0 + yy * 0.5 + p)) for p in phase]
    return np.stack(chans)


def _blob(h: int, w: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2)))


def _moving(h: int, w: int, u: float, colors: np.ndarray, rng_phase: float) -> np.ndarray:
    # two blobs on fast closed paths; u in [0, 1) counts path revolutions
    base = _background(h, w, np.array([0.0, 0.33, 0.66]) + 0.5 * u)
    a = _blob(h, w, h * (0.5 + 0.3 * math.sin(2 * math.pi * u + rng_phase)),
              w * (0.5 + 0.35 * math.cos(2 * math.pi * u)), h / 6)
    b = _blob(h, w, h * (0.5 + 0.3 * math.cos(4 * math.pi * u)),
              w * (0.5 - 0.35 * math.sin(2 * math.pi * u + rng_phase)), h / 7)
    out = base * (1 - 0.8 * a[None]) + 0.8 * a[None] * colors[0][:, None, None]
    out = out * (1 - 0.8 * b[None]) + 0.8 * b[None] * colors[1][:, None, None]
    return out


def synth(kind: str, length: int, height: int, width: int, seed: int = 0, channels: int = 3) -> VideoSequence:
    """Deterministic synthetic test videos on the 8-bit grid.

    ``static_dynamic``: a still scene with faint noise, then fast motion.
    ``smooth``: a slowly drifting sinusoidal gradient.
    ``piecewise``: four alternating calm/burst segments.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r} (choose from {', '.join(SYNTH_KINDS)})")
    if length < 4:
        raise ValueError(f"synthetic videos need L >= 4, got {length}")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 1, size=3)
    colors = rng.uniform(0, 1, size=(2, 3))
    blob_phase = float(rng.uniform(0, 2 * math.pi))
    frames = []
    if kind == "smooth":
        for t in range(length):
            frames.append(_background(height, width, phase + 0.01 * t))
    elif kind == "static_dynamic":
        half = length // 2
        still = _moving(height, width, 0.0, colors, blob_phase)
        for t in range(length):
            if t < half:
                f = still + rng.normal(0.0, 0.002, size=still.shape)
            else:
                u = DYNAMIC_SPEED * (t - half)
                f = _moving(height, width, u, colors, blob_phase)
            frames.append(f)
    else:
        seg = max(1, length // 4)
        u = 0.0
        for t in range(length):
            if (t // seg) % 2 == 1:
                u += 1.0 / (2 * seg)
            frames.append(_moving(height, width, u, colors, blob_phase))
    frames = [_to8(f) for f in frames]
    if channels == 1:
        frames = [f.mean(axis=0, keepdims=True).astype(np.float32) for f in frames]
        frames = [_to8(f) for f in frames]
    seq = VideoSequence(frames, source=f"synth:{kind}:L={length}:{height}x{width}:seed={seed}")
    _check_synth(kind, seq)
    return seq


def _check_synth(kind: str, seq: VideoSequence) -> None:
    res = adjacent_mse(seq.frames)
    half = seq.L // 2
    if kind == "smooth" and res[1:].max() >= 1e-3:
        raise RuntimeError(f"smooth video drifts too fast (max adjacent MSE {res[1:].max():.2e})")
    if kind == "static_dynamic":
        first = res[1:half].mean() if half > 1 else 0.0
        second = res[half + 1:].mean() if seq.L - half > 1 else 0.0
        if second < 10 * first or second == 0.0:
            raise RuntimeError(f"dynamic half is not 10x busier ({second:.2e} vs {first:.2e})")


# -- analysis -----------------------------------------------------------------


def key_histogram(keys: Sequence[float], length: int, bins: int = HIST_BINS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Key counts and densities over equal bins of [0, L-1]; returns (edges, counts, density)."""
    edges = np.linspace(0.0, float(length - 1), bins + 1)
    counts, _ = np.histogram(np.asarray(keys, dtype=np.float64), bins=edges)
    total = counts.sum()
    width = edges[1] - edges[0]
    density = counts / (total * width) if total else np.zeros(bins)
    return edges, counts, density


def binned_mass(values: np.ndarray, length: int, bins: int = HIST_BINS) -> np.ndarray:
    edges = np.linspace(0.0, float(length - 1), bins + 1)
    idx = np.clip(np.searchsorted(edges, np.arange(length), side="right") - 1, 0, bins - 1)
    out = np.zeros(bins)
    np.add.at(out, idx, values)
    return out


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


@dataclass
class AnalysisReport:
    frame_rows: list
    bin_rows: list
    correlation: float

    def frames_csv(self) -> str:
        return _csv(["frame", "adjacent_mse", "psnr"], self.frame_rows)

    def bins_csv(self) -> str:
        return _csv(["bin", "t_lo", "t_hi", "key_count", "key_density", "residual_mass"], self.bin_rows)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def analyze(model, video: VideoSequence, bins: int = HIST_BINS) -> AnalysisReport:
    """Temporal residuals vs. sampling density of the model's keys."""
    frames = video.frames
    res = adjacent_mse(frames)
    rows = []
    for t, target in enumerate(frames):
        p = psnr(model.render(float(t)), target) if model is not None else float("nan")
        rows.append((t, float(res[t]), float(p)))
    grid: TreeGrid = model.grid
    edges, counts, density = key_histogram(grid.in_order_keys(), video.L, bins)
    mass = binned_mass(res, video.L, bins)
    bin_rows = [
        (i, float(edges[i]), float(edges[i + 1]), int(counts[i]), float(density[i]), float(mass[i]))
        for i in range(bins)
    ]
    return AnalysisReport(rows, bin_rows, pearson(mass, density))
