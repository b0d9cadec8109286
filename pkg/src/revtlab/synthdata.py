"""Synthetic multi-domain street-scene-like segmentation data.

Scene geometry (which pixel belongs to which class) is drawn from a geometry
stream that depends only on the seed, the sample index and the shape grammar;
colour and texture come from a separate render stream and the domain's
palette/photometric settings.  Two domains that share the shape grammar
therefore produce pixel-identical label maps for the same seed.

Classes (S=5 by default): 0 sky, 1 ground, 2 building, 3 round object,
4 striped band.
"""

from __future__ import annotations

import colorsys
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

IGNORE = 255

DEFAULT_PALETTE = (
    (110, 160, 225),   # sky
    (95, 90, 85),      # ground
    (170, 120, 90),    # building
    (215, 195, 60),    # round object
    (60, 140, 70),     # striped band
)


@dataclass(frozen=True)
class DomainSpec:
    name: str
    num_classes: int = 5
    palette: tuple[tuple[int, int, int], ...] = DEFAULT_PALETTE
    color_jitter: float = 18.0
    noise_amplitude: float = 8.0
    stripe_frequency: float = 0.25
    stripe_amplitude: float = 30.0
    gamma: float = 1.0
    hue_rotation: float = 0.0        # degrees
    brightness_offset: float = 0.0
    # shape grammar: (min, max) counts per sample
    n_buildings: tuple[int, int] = (1, 3)
    n_objects: tuple[int, int] = (1, 3)
    n_bands: tuple[int, int] = (0, 2)
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("a domain needs at least two classes")
        if len(self.palette) < self.num_classes:
            raise ValueError("palette needs one colour per class")
        nums = (self.color_jitter, self.noise_amplitude, self.stripe_frequency, self.stripe_amplitude,
                self.gamma, self.hue_rotation, self.brightness_offset)
        if not all(math.isfinite(v) for v in nums) or self.gamma <= 0:
            raise ValueError("domain shift parameters must be finite (gamma > 0)")

    def grammar(self) -> tuple:
        return (self.num_classes, self.n_buildings, self.n_objects, self.n_bands, self.height, self.width)


@dataclass
class SegSample:
    image: np.ndarray      # H x W x 3 uint8
    labels: np.ndarray     # H x W uint8
    domain: str
    index: int = 0

    def __post_init__(self):
        if self.image.shape[:2] != self.labels.shape or self.image.shape[2:] != (3,):
            raise ValueError(f"image {self.image.shape} does not match labels {self.labels.shape}")


def source_domain(**kw) -> DomainSpec:
    return DomainSpec(name="source", **kw)


def photometric_target(**kw) -> DomainSpec:
    params = dict(name="target_photo", gamma=0.6, hue_rotation=35.0, brightness_offset=-25.0)
    params.update(kw)
    return DomainSpec(**params)


def texture_target(**kw) -> DomainSpec:
    params = dict(name="target_texture", noise_amplitude=28.0, stripe_frequency=0.45, stripe_amplitude=55.0,
                  color_jitter=30.0)
    params.update(kw)
    return DomainSpec(**params)


def default_domains(size: int = 64, num_classes: int = 5) -> list[DomainSpec]:
    kw = dict(height=size, width=size, num_classes=num_classes)
    return [source_domain(**kw), photometric_target(**kw), texture_target(**kw)]


# ------------------------------------------------------------------ geometry


def _layout(rng: np.random.Generator, spec: DomainSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    s = spec.num_classes
    yy, xx = np.mgrid[0:h, 0:w]
    horizon = rng.uniform(0.35, 0.6) * h
    tilt = rng.uniform(-0.15, 0.15)
    labels = np.where(yy < horizon + tilt * (xx - w / 2), 0, 1).astype(np.uint8)
    if s == 2:
        return labels
    for _ in range(rng.integers(spec.n_buildings[0], spec.n_buildings[1] + 1)):
        bw = rng.uniform(0.12, 0.35) * w
        x0 = rng.uniform(-0.1, 0.9) * w
        top = rng.uniform(0.05, 0.4) * h
        bottom = horizon + rng.uniform(0.0, 0.15) * h
        labels[(xx >= x0) & (xx < x0 + bw) & (yy >= top) & (yy < bottom)] = 2
    if s > 4:
        for _ in range(rng.integers(spec.n_bands[0], spec.n_bands[1] + 1)):
            angle = rng.uniform(0, math.pi)
            offset = rng.uniform(-0.3, 0.3) * w
            half = rng.uniform(0.04, 0.1) * w
            d = (xx - w / 2) * math.cos(angle) + (yy - h / 2) * math.sin(angle) - offset
            extent = (xx - w / 2) * -math.sin(angle) + (yy - h / 2) * math.cos(angle)
            lim = rng.uniform(0.2, 0.5) * w
            labels[(np.abs(d) < half) & (np.abs(extent) < lim)] = 4
    if s > 3:
        for _ in range(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1)):
            r = rng.uniform(0.05, 0.14) * min(h, w)
            cy, cx = rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w
            labels[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = 3
    for extra in range(5, s):
        # additional classes: small squares
        size = rng.uniform(0.06, 0.12) * w
        cy, cx = rng.uniform(0, h - size), rng.uniform(0, w - size)
        labels[(yy >= cy) & (yy < cy + size) & (xx >= cx) & (xx < cx + size)] = extra
    return labels


# ----------------------------------------------------------------- rendering


def _palette_color(spec: DomainSpec, cls: int) -> np.ndarray:
    if cls < len(spec.palette):
        return np.asarray(spec.palette[cls], dtype=np.float64)
    r, g, b = colorsys.hsv_to_rgb((cls * 0.137) % 1.0, 0.6, 0.8)
    return np.array([r, g, b]) * 255


def _rotate_hue(img: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0:
        return img
    # rotation about the grey axis in RGB space
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    k = 1.0 / 3.0
    sq = math.sqrt(k)
    m = np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + (1 - c) * k, k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + (1 - c) * k],
    ])
    return img @ m.T


def _render(rng: np.random.Generator, spec: DomainSpec, labels: np.ndarray) -> np.ndarray:
    h, w = labels.shape
    img = np.zeros((h, w, 3), dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    for cls in range(spec.num_classes):
        mask = labels == cls
        color = _palette_color(spec, cls) + rng.normal(0.0, spec.color_jitter, 3)
        img[mask] = color
    # per-class texture: stripes on buildings and bands, blotchy noise elsewhere
    phase = rng.uniform(0, 2 * math.pi)
    stripes = spec.stripe_amplitude * np.sin(2 * math.pi * spec.stripe_frequency * yy + phase)
    diag = spec.stripe_amplitude * np.sin(2 * math.pi * spec.stripe_frequency * (xx + yy) / 1.4 + phase)
    img[labels == 2] += stripes[labels == 2, None] * 0.6
    img[labels == 4] += diag[labels == 4, None]
    shade = rng.uniform(-20, 20) * (yy / h - 0.5)
    img += shade[..., None]
    img += rng.normal(0.0, spec.noise_amplitude, img.shape)
    img = np.clip(img, 0, 255)
    img = _rotate_hue(img, spec.hue_rotation)
    img = np.clip(img + spec.brightness_offset, 0, 255)
    img = 255.0 * (img / 255.0) ** spec.gamma
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _streams(seed: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    ss = np.random.SeedSequence([seed, index])
    geo, render = ss.spawn(2)
    return np.random.default_rng(geo), np.random.default_rng(render)


def gen_domain(spec: DomainSpec, n: int, seed: int) -> list[SegSample]:
    """Generate ``n`` samples; output bytes are a pure function of (spec, n, seed)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for i in range(n):
        geo, render = _streams(seed, i)
        labels = _layout(geo, spec)
        out.append(SegSample(_render(render, spec, labels), labels, spec.name, i))
    return out


def split(samples: Sequence, fractions: Sequence[float]) -> tuple[list, list, list]:
    """Deterministic train/dev/test* split: floor the first two, remainder to test*."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n = len(samples)
    n_train = math.floor(n * fractions[0] + 1e-9)
    n_dev = math.floor(n * fractions[1] + 1e-9)
    samples = list(samples)
    return samples[:n_train], samples[n_train:n_train + n_dev], samples[n_train + n_dev:]


@dataclass
class DomainData:
    spec: DomainSpec
    train: list[SegSample] = field(default_factory=list)
    dev: list[SegSample] = field(default_factory=list)
    test: list[SegSample] = field(default_factory=list)


def make_benchmark(seed: int, n_train: int = 200, n_dev: int = 50, n_test: int = 50, size: int = 64,
                   num_classes: int = 5, domains: Sequence[DomainSpec] | None = None) -> dict[str, DomainData]:
    """One source and shifted target domains, each split into train/dev/test*."""
    domains = list(domains) if domains is not None else default_domains(size, num_classes)
    n = n_train + n_dev + n_test
    out = {}
    for k, spec in enumerate(domains):
        # each domain gets its own scenes; only paired generation shares geometry
        samples = gen_domain(spec, n, seed * 1000 + k)
        train, dev, test = split(samples, (n_train / n, n_dev / n, n_test / n))
        out[spec.name] = DomainData(spec, train, dev, test)
    return out


def stack(samples: Sequence[SegSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])


# ---------------------------------------------------------------------- dump


def dump_split(path: str | Path, samples: Sequence[SegSample]) -> None:
    """``[u32 n][per sample: u16 H, u16 W, raw u8 RGB, raw u8 labels]``, little-endian."""
    parts = [struct.pack("<I", len(samples))]
    for s in samples:
        h, w = s.labels.shape
        parts.append(struct.pack("<HH", h, w))
        parts.append(np.ascontiguousarray(s.image, dtype=np.uint8).tobytes())
        parts.append(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_split(path: str | Path, domain: str = "") -> list[SegSample]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ValueError("truncated dataset file")
    (n,) = struct.unpack_from("<I", data, 0)
    pos = 4
    out = []
    for i in range(n):
        if pos + 4 > len(data):
            raise ValueError("truncated dataset file")
        h, w = struct.unpack_from("<HH", data, pos)
        pos += 4
        end = pos + h * w * 3 + h * w
        if end > len(data):
            raise ValueError("truncated dataset file")
        img = np.frombuffer(data, np.uint8, h * w * 3, pos).reshape(h, w, 3).copy()
        lab = np.frombuffer(data, np.uint8, h * w, pos + h * w * 3).reshape(h, w).copy()
        out.append(SegSample(img, lab, domain, i))
        pos = end
    if pos != len(data):
        raise ValueError("trailing bytes in dataset file")
    return out


def with_shift(spec: DomainSpec, **changes) -> DomainSpec:
    return replace(spec, **changes)
