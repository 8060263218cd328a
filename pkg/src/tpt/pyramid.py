"""Temporal pyramid construction and per-level appearance-motion token assembly."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .config import TptConfig
from .nn import LinearLayer, linear_forward, new_linear
from .tensor import ShapeError, Tensor

MotionFn = Callable[[int, int], np.ndarray]
FEATURE_MAGIC = b"TPTF"
FEATURE_VERSION = 1


class FeatureError(ValueError):
    pass


@dataclass
class RawVideoFeatures:
    """Per-frame appearance features plus a motion provider over frame windows.

    ``motion_fn(start, end)`` returns one motion vector for the half-open
    source-frame window ``[start, end)``.
    """

    frame_features: np.ndarray  # [F, D_a]
    motion_fn: MotionFn
    motion_dim: int

    def __post_init__(self):
        ff = np.asarray(self.frame_features)
        if ff.ndim != 2 or ff.shape[0] < 1:
            raise FeatureError(f"frame_features must be [F>=1, D_a], got {ff.shape}")
        if not np.all(np.isfinite(ff)):
            raise FeatureError("frame_features contain non-finite values")
        self.frame_features = ff

    @property
    def frame_count(self) -> int:
        return self.frame_features.shape[0]

    @property
    def appearance_dim(self) -> int:
        return self.frame_features.shape[1]


def window_provider(frames: np.ndarray, reducer: str = "mean") -> MotionFn:
    """Motion provider that pools the frame features of each window."""
    frames = np.asarray(frames)
    pool = {"mean": np.mean, "max": np.max}.get(reducer)
    if pool is None:
        raise FeatureError(f"unknown reducer {reducer!r}")

    def motion(start: int, end: int) -> np.ndarray:
        return pool(frames[start:max(end, start + 1)], axis=0)

    return motion


def from_frames(frames: np.ndarray, reducer: str = "mean") -> RawVideoFeatures:
    frames = np.asarray(frames)
    return RawVideoFeatures(frames, window_provider(frames, reducer), frames.shape[1])


# -- segmentation -------------------------------------------------------------

def segment_spans(frame_count: int, n: int) -> list[tuple[int, int]]:
    """The ``2**(n-1)`` contiguous half-open source windows at level ``n``."""
    if n < 1:
        raise FeatureError(f"level must be >= 1, got {n}")
    if frame_count < 1:
        raise FeatureError(f"frame count must be >= 1, got {frame_count}")
    count = 2 ** (n - 1)
    spans = []
    for i in range(count):
        start = min(i * frame_count // count, frame_count - 1)
        end = max((i + 1) * frame_count // count, start + 1)
        spans.append((start, min(end, frame_count)))
    return spans


def segment_video(frame_count: int, n: int, frames_per_segment: int) -> list[list[int]]:
    """Frame indices per segment: uniform stride inside each span, repeating frames of short spans."""
    if frames_per_segment < 1:
        raise FeatureError(f"frames per segment must be >= 1, got {frames_per_segment}")
    T = frames_per_segment
    out = []
    for start, end in segment_spans(frame_count, n):
        length = end - start
        out.append([start + (t * length) // T for t in range(T)])
    return out


def extract_level(raw: RawVideoFeatures, n: int, frames_per_segment: int):
    """Appearance groups ``[S, T, D_a]`` and motion vectors ``[S, D_m]`` for level ``n``."""
    spans = segment_spans(raw.frame_count, n)
    idx = np.asarray(segment_video(raw.frame_count, n, frames_per_segment))
    appearance = raw.frame_features[idx]
    motion = []
    for start, end in spans:
        m = np.asarray(raw.motion_fn(start, end))
        if m.shape != (raw.motion_dim,):
            raise FeatureError(
                f"motion provider returned shape {m.shape} for window [{start}, {end}), "
                f"expected ({raw.motion_dim},)"
            )
        motion.append(m)
    return appearance, np.stack(motion), spans


# -- assembly -----------------------------------------------------------------

@dataclass
class PyramidParams:
    appearance: LinearLayer   # D_a -> d
    motion: LinearLayer       # D_m -> d
    positions: list[Tensor]   # one [L_X^n, d] table per fed level


@dataclass
class LevelFeatures:
    level: int
    x: Tensor                 # [..., L_X^n, d]
    mask: np.ndarray          # [L_X^n] bool
    segment_spans: list[tuple[int, int]] | None = None

    @property
    def length(self) -> int:
        return self.x.shape[-2]


def init_pyramid(rng: np.random.Generator, config: TptConfig) -> PyramidParams:
    dtype = config.dtype
    d = config.d_model
    positions = [
        tt.parameter(rng.normal(0.0, 0.02, size=(config.level_length(n), d)), dtype=dtype)
        for n in config.pyramid_levels()
    ]
    return PyramidParams(
        new_linear(rng, config.appearance_dim, d, dtype),
        new_linear(rng, config.motion_dim, d, dtype),
        positions,
    )


def assemble_level(appearance, motion, params: PyramidParams, position: Tensor, level: int,
                   spans=None) -> LevelFeatures:
    """Project, interleave ``[T appearance, 1 motion]`` per segment and add positions.

    ``appearance`` is ``[..., S, T, D_a]`` and ``motion`` is ``[..., S, D_m]``;
    leading axes are batch axes.
    """
    app = appearance if isinstance(appearance, Tensor) else tt.Tensor(np.asarray(appearance, dtype=position.dtype))
    mot = motion if isinstance(motion, Tensor) else tt.Tensor(np.asarray(motion, dtype=position.dtype))
    S, T = app.shape[-3], app.shape[-2]
    if mot.shape[:-1] != app.shape[:-2]:
        raise ShapeError("assemble_level", app.shape, mot.shape, detail="segment axes disagree")
    if S != 2 ** (level - 1):
        raise ShapeError("assemble_level", app.shape, detail=f"level {level} needs {2 ** (level - 1)} segments")
    L = S * (T + 1)
    if position.shape[0] != L:
        raise ShapeError("assemble_level", position.shape, (L, position.shape[-1]),
                         detail="positional table length != 2^(n-1)(T+1)")
    pa = linear_forward(params.appearance, app)                     # [..., S, T, d]
    pm = linear_forward(params.motion, mot)                         # [..., S, d]
    d = pa.shape[-1]
    if position.shape[-1] != d:
        raise ShapeError("assemble_level", pa.shape, position.shape, detail="width mismatch")
    pm = tt.reshape(pm, pm.shape[:-1] + (1, d))
    tokens = tt.concat([pa, pm], axis=-2)                           # [..., S, T+1, d]
    x = tt.reshape(tokens, tokens.shape[:-3] + (L, d)) + position
    return LevelFeatures(level, x, np.ones(L, dtype=bool), spans)


def gather_levels(raw: RawVideoFeatures, config: TptConfig):
    """Raw (unprojected) level inputs for every fed level: list of (n, V, M, spans)."""
    if raw.appearance_dim != config.appearance_dim or raw.motion_dim != config.motion_dim:
        raise FeatureError(
            f"feature dims (D_a={raw.appearance_dim}, D_m={raw.motion_dim}) do not match "
            f"config (D_a={config.appearance_dim}, D_m={config.motion_dim})"
        )
    out = []
    for n in config.pyramid_levels():
        V, M, spans = extract_level(raw, n, config.frames_per_segment)
        out.append((n, V, M, spans))
    return out


def build_pyramid(raw: RawVideoFeatures | Sequence[RawVideoFeatures], config: TptConfig,
                  params: PyramidParams) -> list[LevelFeatures]:
    """LevelFeatures for every fed level; a sequence of videos yields a leading batch axis."""
    single = isinstance(raw, RawVideoFeatures)
    videos = [raw] if single else list(raw)
    per_video = [gather_levels(v, config) for v in videos]
    levels = []
    for i, n in enumerate(config.pyramid_levels()):
        V = np.stack([pv[i][1] for pv in per_video])
        M = np.stack([pv[i][2] for pv in per_video])
        if single:
            V, M = V[0], M[0]
        spans = per_video[0][i][3] if single else None
        levels.append(assemble_level(V, M, params, params.positions[i], n, spans))
    return levels


# -- feature files ------------------------------------------------------------

def write_feature_file(path: str | Path, frames: np.ndarray, windows: dict[tuple[int, int], np.ndarray]) -> None:
    """Little-endian: magic, version, F, D_a, F*D_a f32, D_m, count, (start, end, D_m f32)*count."""
    frames = np.asarray(frames, dtype="<f4")
    F, Da = frames.shape
    vecs = list(windows.items())
    Dm = len(vecs[0][1]) if vecs else 0
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, F, Da))
        fh.write(frames.tobytes())
        fh.write(struct.pack("<II", Dm, len(vecs)))
        for (start, end), vec in sorted(vecs):
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (Dm,):
                raise FeatureError(f"window [{start}, {end}) has dim {vec.shape}, expected ({Dm},)")
            fh.write(struct.pack("<II", start, end))
            fh.write(vec.tobytes())


def read_feature_file(path: str | Path) -> RawVideoFeatures:
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise FeatureError(f"{path}: bad magic {blob[:4]!r}")
    version, F, Da = struct.unpack_from("<III", blob, 4)
    if version != FEATURE_VERSION:
        raise FeatureError(f"{path}: unsupported version {version}")
    off = 16
    frames = np.frombuffer(blob, dtype="<f4", count=F * Da, offset=off).reshape(F, Da).astype(np.float32)
    off += 4 * F * Da
    Dm, count = struct.unpack_from("<II", blob, off)
    off += 8
    table: dict[tuple[int, int], np.ndarray] = {}
    for _ in range(count):
        start, end = struct.unpack_from("<II", blob, off)
        off += 8
        table[(start, end)] = np.frombuffer(blob, dtype="<f4", count=Dm, offset=off).astype(np.float32)
        off += 4 * Dm
    if off != len(blob):
        raise FeatureError(f"{path}: {len(blob) - off} trailing bytes")

    def motion(start: int, end: int) -> np.ndarray:
        try:
            return table[(start, end)]
        except KeyError:
            raise FeatureError(f"{path}: no motion vector for window [{start}, {end}); "
                               "regenerate the features for this pyramid depth") from None

    return RawVideoFeatures(frames, motion, Dm)


def window_table(raw: RawVideoFeatures, max_level: int) -> dict[tuple[int, int], np.ndarray]:
    """Motion vectors for every pyramid window up to ``max_level``."""
    table = {}
    for n in range(1, max_level + 1):
        for span in segment_spans(raw.frame_count, n):
            table[span] = np.asarray(raw.motion_fn(*span))
    return table
