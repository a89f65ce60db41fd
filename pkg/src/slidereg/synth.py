"""Deterministic synthetic image pairs with known ground-truth transforms.

Pairs are built by pushing a procedural texture through a rigid move (shift
plus optional 180-degree flip), an optional scale change, and a smooth
displacement field, then degrading with blur and noise. The ground truth is
returned alongside, so recovery tests need no external data.

Randomness comes from a self-contained splitmix64 mixer so identical specs
reproduce identical pairs bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .deform import DisplacementField
from .errors import InvalidSpecError
from .landmarks import LandmarkPair
from .raster import GrayImage, blur_array, sample_bilinear
from .rigid import RigidEstimate

__all__ = ["SynthSpec", "SynthPair", "make_texture", "make_smooth_field", "make_pair"]

# splitmix64 constants (Steele, Lea & Flood 2014).
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(seed: int, count: int, stream: int = 0) -> np.ndarray:
    """`count` mixed 64-bit words from (seed, stream); pure counter mode."""
    mask = 0xFFFFFFFFFFFFFFFF
    base = ((seed & mask) + stream * int(_MIX2)) & mask
    # counter-mode states base + i*gamma, i = 1..count (uint64 wraps modularly)
    z = np.uint64(base) + np.arange(1, count + 1, dtype=np.uint64) * _GAMMA
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _uniforms(seed: int, count: int, stream: int = 0) -> np.ndarray:
    """Deterministic doubles in [0, 1)."""
    return (_splitmix64(seed, count, stream) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _normals(seed: int, count: int, stream: int = 0) -> np.ndarray:
    """Standard normals via Box-Muller on the uniform stream."""
    n = (count + 1) // 2
    u1 = 1.0 - _uniforms(seed, n, stream)  # (0, 1], keeps log finite
    u2 = _uniforms(seed, n, stream + 1)
    r = np.sqrt(-2.0 * np.log(u1))
    return np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:count]


@dataclass
class SynthSpec:
    """Generator parameters; all transforms default to the identity."""

    seed: int
    width: int = 128
    height: int = 128
    shift: tuple[int, int] = (0, 0)
    rotate_180: bool = False
    scale: float = 1.0
    blur_sigma: float = 0.0
    field_amplitude: float = 0.0
    field_wavelength: float = 32.0
    noise_sigma: float = 0.0

    def validate(self) -> None:
        if self.width < 16 or self.height < 16:
            raise InvalidSpecError(f"dimensions must be >= 16, got {self.width}x{self.height}")
        if not (self.scale > 0.0):
            raise InvalidSpecError(f"scale must be positive, got {self.scale}")
        if not (self.field_wavelength > 0.0):
            raise InvalidSpecError(f"field_wavelength must be positive, got {self.field_wavelength}")
        if self.field_amplitude < 0.0:
            raise InvalidSpecError(f"field_amplitude must be >= 0, got {self.field_amplitude}")
        if self.blur_sigma < 0.0:
            raise InvalidSpecError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if self.noise_sigma < 0.0:
            raise InvalidSpecError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "width": self.width,
            "height": self.height,
            "shift": list(self.shift),
            "rotate_180": self.rotate_180,
            "scale": self.scale,
            "blur_sigma": self.blur_sigma,
            "field_amplitude": self.field_amplitude,
            "field_wavelength": self.field_wavelength,
            "noise_sigma": self.noise_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        try:
            shift = d.get("shift", (0, 0))
            spec = cls(
                seed=int(d["seed"]),
                width=int(d.get("width", 128)),
                height=int(d.get("height", 128)),
                shift=(int(shift[0]), int(shift[1])),
                rotate_180=bool(d.get("rotate_180", False)),
                scale=float(d.get("scale", 1.0)),
                blur_sigma=float(d.get("blur_sigma", 0.0)),
                field_amplitude=float(d.get("field_amplitude", 0.0)),
                field_wavelength=float(d.get("field_wavelength", 32.0)),
                noise_sigma=float(d.get("noise_sigma", 0.0)),
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise InvalidSpecError(f"malformed spec: {exc}") from None
        spec.validate()
        return spec


@dataclass
class SynthPair:
    fixed: GrayImage
    moving: GrayImage
    true_rigid: RigidEstimate
    true_field: DisplacementField
    landmarks: list[LandmarkPair] = field(default_factory=list)


def make_texture(width: int, height: int, seed: int) -> GrayImage:
    """Band-limited pseudo-random texture, non-constant in every 8x8 block."""
    if width < 16 or height < 16:
        raise ValueError(f"dimensions must be >= 16, got {width}x{height}")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    n_waves = 6
    params = _uniforms(seed, 4 * n_waves, stream=11).reshape(n_waves, 4)
    img = np.zeros((height, width))
    for amp_u, wl_u, theta_u, phase_u in params:
        amp = 0.5 + 0.5 * amp_u
        wavelength = 8.0 + 24.0 * wl_u
        theta = np.pi * theta_u
        phase = 2.0 * np.pi * phase_u
        img += amp * np.sin(2.0 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta)) / wavelength + phase)
    noise = _uniforms(seed, width * height, stream=13).reshape(height, width) - 0.5
    img += 0.8 * blur_array(noise, 1.5)
    lo, hi = img.min(), img.max()
    out = 0.05 + 0.9 * (img - lo) / (hi - lo)
    return GrayImage(out)


def make_smooth_field(
    width: int, height: int, amplitude: float, wavelength: float, seed: int
) -> DisplacementField:
    """Low-frequency displacement field, zero at the border, peak |(u,v)| == amplitude."""
    if amplitude < 0.0 or not (wavelength > 0.0):
        raise ValueError("amplitude must be >= 0 and wavelength positive")
    if amplitude == 0.0:
        return DisplacementField.zeros(width, height)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    window = np.sin(np.pi * xs / (width - 1)) * np.sin(np.pi * ys / (height - 1))

    def component(stream: int) -> np.ndarray:
        params = _uniforms(seed, 9, stream=stream).reshape(3, 3)
        comp = np.zeros((height, width))
        for wl_u, theta_u, phase_u in params:
            wl = wavelength * (1.0 + wl_u)
            theta = np.pi * theta_u
            phase = 2.0 * np.pi * phase_u
            comp += np.sin(2.0 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta)) / wl + phase) / 3.0
        return comp * window

    u = component(21)
    v = component(22)
    peak = float(np.sqrt(u * u + v * v).max())
    if peak > 0.0:
        u *= amplitude / peak
        v *= amplitude / peak
    return DisplacementField(u, v)


def _rot180_points(xs: np.ndarray, ys: np.ndarray, width: int, height: int):
    return (width - 1) - xs, (height - 1) - ys


def make_pair(spec: SynthSpec) -> SynthPair:
    """Build a fixed/moving pair whose ground-truth transform is returned exactly.

    The fixed image is a procedural texture. The full correspondence map sends
    fixed point p to moving point G(p) = c + scale * (R(p + f(p) - t) - c),
    with f the raw smooth field, t the shift, R the optional 180-degree index
    map and c the image center. The moving image is fixed resampled through
    the numerical inverse of G, then blurred and noised. The stored true field
    absorbs the scale term so that composing it with the stored rigid estimate
    reproduces G exactly; landmarks sit on integer grid points where the field
    interpolates trivially.
    """
    spec.validate()
    w, h = spec.width, spec.height
    fixed = make_texture(w, h, spec.seed)
    raw = make_smooth_field(w, h, spec.field_amplitude, spec.field_wavelength, spec.seed + 1)
    dx, dy = spec.shift
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    def g_map(px: np.ndarray, py: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        zx = px + sample_bilinear(raw.u, px, py) - dx
        zy = py + sample_bilinear(raw.v, px, py) - dy
        if spec.rotate_180:
            zx, zy = _rot180_points(zx, zy, w, h)
        return cx + spec.scale * (zx - cx), cy + spec.scale * (zy - cy)

    # Invert G on the moving grid: undo scale and rotation exactly, then peel
    # off the displacement by fixed-point iteration (the field is contractive).
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    zx = cx + (xs - cx) / spec.scale
    zy = cy + (ys - cy) / spec.scale
    if spec.rotate_180:
        zx, zy = _rot180_points(zx, zy, w, h)
    zx += dx
    zy += dy
    px, py = zx.copy(), zy.copy()
    if spec.field_amplitude > 0.0:
        for _ in range(12):
            px = zx - sample_bilinear(raw.u, px, py)
            py = zy - sample_bilinear(raw.v, px, py)
    moving_data = sample_bilinear(fixed.data, px, py)
    if spec.blur_sigma > 0.0:
        moving_data = blur_array(moving_data, spec.blur_sigma)
    if spec.noise_sigma > 0.0:
        noise = _normals(spec.seed, w * h, stream=31).reshape(h, w)
        moving_data = moving_data + spec.noise_sigma * noise
    moving = GrayImage(np.clip(moving_data, 0.0, 1.0))

    true_rigid = RigidEstimate(spec.rotate_180, dx, dy, 1.0)
    gx, gy = g_map(xs, ys)
    # Effective field: the (u, v) that make "add field, undo rigid" equal G.
    if spec.rotate_180:
        rx, ry = _rot180_points(gx, gy, w, h)
    else:
        rx, ry = gx, gy
    true_field = DisplacementField(rx + dx - xs, ry + dy - ys)

    margin = max(8, min(w, h) // 8)
    grid_x = np.unique(np.linspace(margin, w - 1 - margin, 5).round().astype(int))
    grid_y = np.unique(np.linspace(margin, h - 1 - margin, 5).round().astype(int))
    landmarks = []
    for j, ly in enumerate(grid_y):
        for i, lx in enumerate(grid_x):
            mx, my = g_map(np.asarray(float(lx)), np.asarray(float(ly)))
            landmarks.append(
                LandmarkPair(f"lm_{j}_{i}", (float(lx), float(ly)), (float(mx), float(my)))
            )
    return SynthPair(fixed, moving, true_rigid, true_field, landmarks)
