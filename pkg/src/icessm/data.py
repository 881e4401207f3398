"""Gridded concentration series: container format, preprocessing, windowing.

A series is a [T, H, W] stack of daily frames with values in [0, 1], NaN as
the missing-value sentinel, a per-pixel land mask, and strictly increasing
day stamps. Preprocessing fills whole missing dates from their nearest valid
neighbors, classifies chronically-missing pixels as land, zeroes land, and
can interpolate remaining holes with a Gaussian-kernel inverse-distance
weighting over space and time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAGIC = b"SICG1\x00"


class FormatError(ValueError):
    """Container bytes do not parse."""


@dataclass
class Grid3:
    frames: np.ndarray     # [T, H, W] float32, NaN = missing
    dates: np.ndarray      # [T] int64 days since epoch, strictly increasing
    land_mask: np.ndarray  # [H, W] bool

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.dates = np.asarray(self.dates, dtype=np.int64)
        self.land_mask = np.asarray(self.land_mask, dtype=bool)
        t, h, w = self.frames.shape
        if self.dates.shape != (t,):
            raise ValueError(f"dates shape {self.dates.shape} != ({t},)")
        if self.land_mask.shape != (h, w):
            raise ValueError(f"land mask shape {self.land_mask.shape} != ({h}, {w})")
        if t > 1 and not (np.diff(self.dates) > 0).all():
            raise ValueError("dates must be strictly increasing")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape


def fill_missing_dates(g: Grid3) -> Grid3:
    """Expand to a contiguous daily range, filling each absent date with the
    elementwise mean of the nearest preceding and succeeding present frames.

    Every absent day in a multi-day gap receives the same flat fill.
    """
    first, last = int(g.dates[0]), int(g.dates[-1])
    full = np.arange(first, last + 1, dtype=np.int64)
    if full.shape == g.dates.shape:
        return Grid3(g.frames.copy(), g.dates.copy(), g.land_mask.copy())

    present = {int(d): i for i, d in enumerate(g.dates)}
    t, h, w = g.shape
    frames = np.empty((full.size, h, w), dtype=np.float32)
    prev_idx = -1
    for k, day in enumerate(full):
        if int(day) in present:
            prev_idx = present[int(day)]
            frames[k] = g.frames[prev_idx]
        else:
            if prev_idx < 0:
                raise ValueError(f"day {day} has no preceding valid frame")
            nxt = next((present[d] for d in range(int(day) + 1, last + 1) if d in present), None)
            if nxt is None:
                raise ValueError(f"day {day} has no succeeding valid frame")
            frames[k] = 0.5 * (g.frames[prev_idx] + g.frames[nxt])
    return Grid3(frames, full, g.land_mask.copy())


def detect_land(g: Grid3, threshold: float = 0.95) -> np.ndarray:
    """Pixels missing in strictly more than ``threshold`` of all frames."""
    missing_frac = np.isnan(g.frames).mean(axis=0)
    return missing_frac > threshold


def zero_land(g: Grid3, mask: np.ndarray) -> Grid3:
    """Set land pixels to 0 in every frame and record the mask."""
    frames = g.frames.copy()
    frames[:, mask] = 0.0
    return Grid3(frames, g.dates.copy(), g.land_mask | mask)


def st_idw_fill(g: Grid3, spatial_radius: int = 3, temporal_radius: int = 2,
                bandwidth: float = 2.0, time_scale: float = 1.0) -> Grid3:
    """Fill remaining missing pixels by Gaussian-kernel inverse-distance
    weighting over a spatiotemporal neighborhood.

    The weight of a valid neighbor at offset (dt, dh, dw) is
    exp(-d^2 / (2 * bandwidth^2)) with d^2 = dh^2 + dw^2 + (time_scale*dt)^2;
    one day equals ``time_scale`` pixels. Valid pixels are left untouched.
    """
    t, h, w = g.shape
    src = g.frames
    out = src.copy()
    missing = np.argwhere(np.isnan(src))
    for ti, hi, wi in missing:
        t0, t1 = max(0, ti - temporal_radius), min(t, ti + temporal_radius + 1)
        h0, h1 = max(0, hi - spatial_radius), min(h, hi + spatial_radius + 1)
        w0, w1 = max(0, wi - spatial_radius), min(w, wi + spatial_radius + 1)
        window = src[t0:t1, h0:h1, w0:w1]
        dt, dh, dw = np.ogrid[t0 - ti:t1 - ti, h0 - hi:h1 - hi, w0 - wi:w1 - wi]
        d2 = (dh ** 2 + dw ** 2 + (time_scale * dt) ** 2).astype(np.float64)
        valid = ~np.isnan(window)
        if not valid.any():
            raise ValueError(f"missing pixel (t={ti}, h={hi}, w={wi}) has no "
                             f"valid neighbor within the radius")
        wgt = np.exp(-d2 / (2.0 * bandwidth ** 2)) * valid
        out[ti, hi, wi] = float((wgt * np.nan_to_num(window)).sum() / wgt.sum())
    return Grid3(out, g.dates.copy(), g.land_mask.copy())


def preprocess(g: Grid3, land_threshold: float = 0.95,
               idw: bool = False, **idw_kwargs) -> Grid3:
    """fill_missing_dates -> detect_land -> zero land -> optional ST-IDW.

    The result has no missing values; raises if holes remain and ``idw`` is
    off.
    """
    g = fill_missing_dates(g)
    g = zero_land(g, detect_land(g, land_threshold))
    if idw:
        g = st_idw_fill(g, **idw_kwargs)
    if np.isnan(g.frames).any():
        raise ValueError("missing pixels remain after preprocessing; "
                         "enable idw interpolation")
    return Grid3(np.clip(g.frames, 0.0, 1.0), g.dates, g.land_mask)


@dataclass
class SampleWindow:
    """Adjacent, non-overlapping input/target windows cut from a series."""

    input: np.ndarray   # [L_i, 1, H, W]
    target: np.ndarray  # [L_o, 1, H, W]
    anchor_date: int


def windows(g: Grid3, in_len: int, out_len: int, stride: int = 1) -> list[SampleWindow]:
    """All stride-spaced windows; count = (T - in_len - out_len)//stride + 1."""
    t = g.shape[0]
    span = in_len + out_len
    if t < span:
        raise ValueError(f"series length {t} shorter than window span {span}")
    out = []
    for a in range(0, t - span + 1, stride):
        out.append(SampleWindow(
            input=g.frames[a:a + in_len, None, :, :].copy(),
            target=g.frames[a + in_len:a + span, None, :, :].copy(),
            anchor_date=int(g.dates[a]),
        ))
    return out


def synth_generate(seed: int, t: int, h: int, w: int, n_blobs: int = 3,
                   drift: float = 0.5, season_period: float = 90.0) -> Grid3:
    """Synthetic ice-like series: drifting Gaussian blobs with a seasonal
    amplitude cycle on a toroidal grid, plus a fixed land block.

    Deterministic for a given seed.
    """
    if min(t, h, w) < 8:
        raise ValueError("dims must be >= 8")
    rng = np.random.default_rng(seed)
    frames = np.zeros((t, h, w), dtype=np.float32)

    centers = rng.uniform((0, 0), (h, w), size=(n_blobs, 2)) if n_blobs else np.zeros((0, 2))
    velocity = rng.uniform(-drift, drift, size=(n_blobs, 2)) if n_blobs else centers
    radius = rng.uniform(min(h, w) / 8.0, min(h, w) / 3.0, size=n_blobs)
    amp = rng.uniform(0.5, 1.0, size=n_blobs)
    phase = rng.uniform(0.0, 1.0)

    hh, ww = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for ti in range(t):
        season = 0.6 + 0.4 * math.sin(2 * math.pi * (ti / season_period + phase))
        acc = np.zeros((h, w), dtype=np.float64)
        for b in range(n_blobs):
            ch = (centers[b, 0] + velocity[b, 0] * ti) % h
            cw = (centers[b, 1] + velocity[b, 1] * ti) % w
            dh = np.minimum(np.abs(hh - ch), h - np.abs(hh - ch))
            dw = np.minimum(np.abs(ww - cw), w - np.abs(ww - cw))
            acc += amp[b] * np.exp(-(dh ** 2 + dw ** 2) / (2.0 * radius[b] ** 2))
        frames[ti] = np.clip(season * acc, 0.0, 1.0)

    land = np.zeros((h, w), dtype=bool)
    land[:h // 8 + 1, :w // 4 + 1] = True
    frames[:, land] = 0.0
    return Grid3(frames, np.arange(t, dtype=np.int64), land)


# ---------------------------------------------------------------------------
# binary container
# little-endian: magic, u32 T/H/W, i64 dates, land bitmap, per-frame missing
# bitmaps, then T*H*W float32 (missing positions stored as 0, bitmap wins)
# ---------------------------------------------------------------------------


def write_grid(g: Grid3, path) -> None:
    t, h, w = g.shape
    if max(t, h, w) >= 2 ** 32:
        raise FormatError("dims exceed u32")
    missing = np.isnan(g.frames)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array([t, h, w], dtype="<u4").tobytes())
        f.write(g.dates.astype("<i8").tobytes())
        f.write(np.packbits(g.land_mask.reshape(-1)).tobytes())
        for ti in range(t):
            f.write(np.packbits(missing[ti].reshape(-1)).tobytes())
        f.write(np.nan_to_num(g.frames, nan=0.0).astype("<f4").tobytes())


def read_grid(path) -> Grid3:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {blob[:len(MAGIC)]!r}")
    off = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError("truncated container")
        chunk = blob[off:off + n]
        off += n
        return chunk

    t, h, w = np.frombuffer(take(12), dtype="<u4").astype(np.int64)
    if t * h * w > 2 ** 40:
        raise FormatError("dims overflow")
    dates = np.frombuffer(take(8 * int(t)), dtype="<i8").astype(np.int64)
    mask_bytes = (h * w + 7) // 8
    land = np.unpackbits(np.frombuffer(take(int(mask_bytes)), dtype=np.uint8),
                         count=int(h * w)).astype(bool).reshape(int(h), int(w))
    missing = np.empty((int(t), int(h), int(w)), dtype=bool)
    for ti in range(int(t)):
        bits = np.unpackbits(np.frombuffer(take(int(mask_bytes)), dtype=np.uint8),
                             count=int(h * w))
        missing[ti] = bits.astype(bool).reshape(int(h), int(w))
    frames = np.frombuffer(take(4 * int(t * h * w)), dtype="<f4").astype(np.float32)
    if off != len(blob):
        raise FormatError("trailing bytes in container")
    frames = frames.reshape(int(t), int(h), int(w)).copy()
    frames[missing] = np.nan
    return Grid3(frames, dates, land)
