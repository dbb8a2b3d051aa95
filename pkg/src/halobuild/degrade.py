"""Synthetic building scenes, haze / low-light degradation and intensity KDE."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .errors import ContractViolation, IngestionError
from .tensor import Tensor, bilinear_matrix

ROOF_PALETTE = np.array([
    [0.82, 0.80, 0.76],   # concrete
    [0.74, 0.36, 0.26],   # terracotta
    [0.45, 0.58, 0.76],   # painted steel
    [0.88, 0.86, 0.70],   # light membrane
], dtype=np.float32)


@dataclass
class Scene:
    image: Tensor          # (1, 3, H, W) in [0, 1]
    mask: np.ndarray       # (H, W) uint8 in {0, 1}
    seed: int

    @property
    def size(self) -> tuple:
        return self.mask.shape


@dataclass
class DegradationSpec:
    kind: str = "none"                       # none | haze | lowlight
    t: Union[float, np.ndarray] = 1.0        # haze transmission, scalar or (H, W) field
    airlight: float = 0.9
    gamma: float = 1.0
    gain: float = 1.0
    sigma: float = 0.0
    floor: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "haze", "lowlight"):
            raise ContractViolation(f"unknown degradation kind {self.kind!r}")


@dataclass
class DensityCurve:
    centers: np.ndarray
    density: np.ndarray
    bandwidth: float

    @property
    def bin_width(self) -> float:
        return float(self.centers[1] - self.centers[0])

    @property
    def mode(self) -> float:
        return float(self.centers[int(np.argmax(self.density))])

    @property
    def peak(self) -> float:
        return float(self.density.max())


# ---------------------------------------------------------------------------
# scene synthesis
# ---------------------------------------------------------------------------

def _smooth_field(rng: np.random.Generator, h: int, w: int, grid: int = 4) -> np.ndarray:
    """Low-frequency field in [-1, 1]: bilinear upsampling of grid x grid noise."""
    coarse = rng.uniform(-1.0, 1.0, size=(grid, grid))
    mh = bilinear_matrix(grid, h, "<f8")
    mw = bilinear_matrix(grid, w, "<f8")
    return mh @ coarse @ mw.T


def _rect_polygon(cy, cx, hh, hw, angle):
    c, s = np.cos(angle), np.sin(angle)
    corners = np.array([[-hh, -hw], [-hh, hw], [hh, hw], [hh, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return corners @ rot.T + np.array([cy, cx])


def rasterize_convex(poly: np.ndarray, h: int, w: int) -> np.ndarray:
    """Pixels whose centers lie inside (or on) a convex polygon given in (y, x) order."""
    yy, xx = np.mgrid[0:h, 0:w]
    py, px = yy + 0.5, xx + 0.5
    inside = np.ones((h, w), dtype=bool)
    n = len(poly)
    # orientation-independent half-plane test
    area = sum(poly[i, 1] * poly[(i + 1) % n, 0] - poly[(i + 1) % n, 1] * poly[i, 0] for i in range(n))
    sign = 1.0 if area >= 0 else -1.0
    for i in range(n):
        y0, x0 = poly[i]
        y1, x1 = poly[(i + 1) % n]
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        inside &= sign * cross >= 0
    return inside


def synth_scene(seed: int, h: int = 64, w: int = 64, density: float = 0.25) -> Scene:
    """Procedural clear scene: textured ground, vegetation, roads and 3-20 rectangular roofs."""
    if h % 32 or w % 32:
        raise ContractViolation(f"scene size {h}x{w} must be divisible by 32")
    if not 0 < density <= 0.6:
        raise ContractViolation(f"density {density} outside (0, 0.6]")
    rng = np.random.default_rng(seed)
    scale = min(h, w)

    ground = rng.uniform(0.30, 0.42) * np.array([1.0, 0.95, 0.82]) + rng.uniform(-0.03, 0.03, size=3)
    img = np.empty((h, w, 3))
    img[:] = ground
    img += 0.05 * _smooth_field(rng, h, w, 8)[..., None]

    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    veg_color = np.array([0.18, 0.32, 0.14]) * rng.uniform(0.8, 1.2)
    for _ in range(rng.integers(1, 4)):
        ang = rng.uniform(0, np.pi)
        off = rng.uniform(-0.4, 0.4) * scale
        width = rng.uniform(0.08, 0.2) * scale
        d = (yy - h / 2) * np.cos(ang) + (xx - w / 2) * np.sin(ang) - off
        band = np.abs(d) < width / 2
        band &= _smooth_field(rng, h, w, 4) > -0.4
        img[band] = veg_color + 0.04 * rng.standard_normal((band.sum(), 3))
    road_color = np.full(3, rng.uniform(0.48, 0.58))
    for _ in range(rng.integers(1, 3)):
        if rng.random() < 0.5:
            r0 = rng.integers(0, h - 4)
            img[r0:r0 + rng.integers(3, 6)] = road_color
        else:
            c0 = rng.integers(0, w - 4)
            img[:, c0:c0 + rng.integers(3, 6)] = road_color

    mask = np.zeros((h, w), dtype=bool)
    target = density * h * w
    placed, attempts = 0, 0
    while placed < 20 and attempts < 400:
        if placed >= 3 and mask.sum() >= target:
            break
        attempts += 1
        hh = rng.uniform(0.08, 0.17) * scale
        hw = rng.uniform(0.08, 0.17) * scale
        angle = 0.0 if rng.random() < 0.5 else rng.uniform(0, np.pi / 2)
        cy = rng.uniform(hh, h - hh)
        cx = rng.uniform(hw, w - hw)
        poly = _rect_polygon(cy, cx, hh, hw, angle)
        footprint = rasterize_convex(poly, h, w)
        halo = rasterize_convex(_rect_polygon(cy, cx, hh + 2, hw + 2, angle), h, w)
        if not footprint.any() or (halo & mask).any():
            continue
        # cast shadow: the footprint shifted down-right, darkening ground only
        sh = np.roll(footprint, (2, 2), axis=(0, 1)) & ~footprint & ~mask
        img[sh] *= 0.55
        roof = ROOF_PALETTE[rng.integers(len(ROOF_PALETTE))] * rng.uniform(0.9, 1.08)
        img[footprint] = roof + 0.025 * rng.standard_normal((footprint.sum(), 3))
        mask |= footprint
        placed += 1

    img += 0.015 * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Scene(Tensor(img.transpose(2, 0, 1)[None].copy()), mask.astype(np.uint8), int(seed))


# ---------------------------------------------------------------------------
# degradations
# ---------------------------------------------------------------------------

def transmission_field(seed: int, h: int, w: int, t_mean: float, spread: float = 0.8) -> np.ndarray:
    """Smooth non-uniform transmission around ``t_mean`` (relative spread), clipped to (0, 1]."""
    u = _smooth_field(np.random.default_rng(seed), h, w, 4)
    return np.clip(t_mean * (1.0 + spread * u), 0.02, 1.0)


def apply_haze(s: Scene, t, airlight: float) -> Scene:
    """Koschmieder scattering I = J t + A (1 - t); ``t`` scalar or (H, W) field."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ContractViolation("transmission must lie in [0, 1]")
    if not 0.6 <= airlight <= 1.0:
        raise ContractViolation(f"airlight {airlight} outside [0.6, 1]")
    j = s.image.data.astype(np.float64)
    out = j * t_arr + airlight * (1.0 - t_arr)
    return replace(s, image=Tensor(np.clip(out, 0, 1).astype(np.float32)))


def apply_lowlight(s: Scene, gamma: float, gain: float, sigma: float, seed: int = 0,
                   floor: float = 0.0) -> Scene:
    """I = clamp(gain * J**gamma + floor + N(0, sigma^2), 0, 1)."""
    if gamma < 1 or not 0 < gain <= 1 or sigma < 0 or floor < 0:
        raise ContractViolation(f"invalid low-light parameters gamma={gamma} gain={gain} sigma={sigma}")
    j = s.image.data.astype(np.float64)
    out = gain * j ** gamma + floor
    if sigma > 0:
        out = out + np.random.default_rng(seed).normal(0.0, sigma, size=out.shape)
    return replace(s, image=Tensor(np.clip(out, 0, 1).astype(np.float32)))


def degrade(s: Scene, spec: DegradationSpec, seed: int = 0) -> Scene:
    if spec.kind == "none":
        return s
    if spec.kind == "haze":
        return apply_haze(s, spec.t, spec.airlight)
    return apply_lowlight(s, spec.gamma, spec.gain, spec.sigma, seed, spec.floor)


def sample_degradation(kind: str, seed: int, h: int, w: int, haze_t=(0.3, 0.7), haze_a=(0.8, 1.0),
                       gamma=(1.5, 2.5), gain=(0.2, 0.5), sigma: float = 0.02) -> DegradationSpec:
    """Draw per-scene parameters uniformly from the given ranges."""
    rng = np.random.default_rng([seed, 7])
    if kind == "haze":
        t_mean = rng.uniform(*haze_t)
        return DegradationSpec("haze", t=transmission_field(seed, h, w, t_mean), airlight=rng.uniform(*haze_a))
    if kind == "lowlight":
        return DegradationSpec("lowlight", gamma=rng.uniform(*gamma), gain=rng.uniform(*gain), sigma=sigma)
    return DegradationSpec(kind)


# ---------------------------------------------------------------------------
# intensity statistics
# ---------------------------------------------------------------------------

def grayscale(images: Sequence) -> np.ndarray:
    vals = []
    for im in images:
        d = im.data if isinstance(im, Tensor) else np.asarray(im)
        if d.ndim == 4:
            vals.append(d.mean(axis=1).ravel())
        elif d.ndim == 3:
            vals.append(d.mean(axis=0).ravel())
        else:
            vals.append(d.ravel())
    return np.concatenate(vals).astype(np.float64)


def kde(images: Sequence, bandwidth: float = 0.02, bins: int = 256) -> DensityCurve:
    """Gaussian KDE of grayscale (channel-mean) intensity, renormalized on [0, 1]."""
    if bandwidth <= 0:
        raise ContractViolation(f"bandwidth must be positive, got {bandwidth}")
    if len(images) == 0:
        raise ContractViolation("kde needs at least one image")
    x = grayscale(images)
    centers = (np.arange(bins) + 0.5) / bins
    # exact kernel sum over unique intensities (8-bit data has at most 256 distinct values per channel mix)
    vals, counts = np.unique(x, return_counts=True)
    dens = np.zeros(bins)
    for start in range(0, len(vals), 4096):
        v = vals[start:start + 4096]
        c = counts[start:start + 4096]
        z = (centers[:, None] - v[None, :]) / bandwidth
        dens += (np.exp(-0.5 * z * z) * c[None, :]).sum(axis=1)
    dens /= dens.sum() / bins
    return DensityCurve(centers, dens, float(bandwidth))


def write_curve(curve: DensityCurve, path: str):
    np.savetxt(path, np.column_stack([curve.centers, curve.density]), fmt="%.6f", delimiter="\t")


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    """(1,3,H,W) or (3,H,W) floats in [0,1] -> (H,W,3) uint8."""
    d = np.asarray(image)
    if d.ndim == 4:
        d = d[0]
    return np.round(np.clip(d, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def quantize(s: Scene) -> Scene:
    """Round-trip through 8-bit storage precision."""
    q = to_uint8(s.image.data).transpose(2, 0, 1)[None].astype(np.float32) / 255.0
    return replace(s, image=Tensor(q))


def write_scene(s: Scene, directory: str):
    os.makedirs(directory, exist_ok=True)
    Image.fromarray(to_uint8(s.image.data), mode="RGB").save(os.path.join(directory, f"{s.seed}_img.png"))
    Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(os.path.join(directory, f"{s.seed}_mask.png"))


def read_mask(path: str) -> np.ndarray:
    m = np.asarray(Image.open(path))
    if m.ndim == 3:
        m = m[..., 0]
    if not np.isin(m, (0, 255)).all():
        raise IngestionError(f"{path}: mask values must be 0 or 255")
    return (m == 255).astype(np.uint8)


def read_split(directory: str) -> list:
    """Load every ``<seed>_img.png`` / ``<seed>_mask.png`` pair, sorted by seed."""
    if not os.path.isdir(directory):
        raise IngestionError(f"dataset split directory not found: {directory}")
    names = sorted(os.listdir(directory))
    imgs = {n[:-8] for n in names if n.endswith("_img.png")}
    masks = {n[:-9] for n in names if n.endswith("_mask.png")}
    for stem in sorted(imgs ^ masks):
        missing = f"{stem}_mask.png" if stem in imgs else f"{stem}_img.png"
        raise IngestionError(f"unpaired file in {directory}: missing {missing}")
    scenes = []
    for stem in sorted(imgs, key=lambda s: (len(s), s)):
        ipath = os.path.join(directory, f"{stem}_img.png")
        im = np.asarray(Image.open(ipath).convert("RGB"))
        mask = read_mask(os.path.join(directory, f"{stem}_mask.png"))
        if mask.shape != im.shape[:2]:
            raise IngestionError(f"{ipath}: image {im.shape[:2]} and mask {mask.shape} are misaligned")
        data = im.transpose(2, 0, 1)[None].astype(np.float32) / 255.0
        scenes.append(Scene(Tensor(data), mask, int(stem) if stem.isdigit() else 0))
    return scenes


def split_counts(n: int) -> tuple:
    """7:1:2 train/val/test partition sizes."""
    n_train = int(round(0.7 * n))
    n_val = int(round(0.1 * n))
    return n_train, n_val, n - n_train - n_val
