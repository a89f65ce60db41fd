"""Dense displacement-field refinement on the fixed-image grid.

The field is optimized per image pair by first-order descent on
``mse(fixed, warp(moving, field)) + lambda * smoothness(field)`` with Adam
updates and a cosine-annealed learning rate, coarse-to-fine over an image
pyramid. Pull semantics throughout: output pixel (x, y) samples the moving
image at (x + u, y + v).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonFiniteLossError, ObjectiveRegressionError, ShapeMismatchError
from .raster import GrayImage, downsample, sample_bilinear

__all__ = [
    "DisplacementField",
    "DeformConfig",
    "AdamState",
    "TraceRow",
    "LossTrace",
    "warp",
    "mse_loss",
    "smoothness_loss",
    "loss_gradient",
    "adam_step",
    "cosine_lr",
    "level_budgets",
    "optimize_deformation",
    "save_field",
    "load_field",
]

DFLD_MAGIC = b"DFLD"


@dataclass
class DisplacementField:
    """Per-pixel (u, v) displacements in pixels on the fixed-image grid."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.ascontiguousarray(self.u, dtype=np.float64)
        self.v = np.ascontiguousarray(self.v, dtype=np.float64)
        if self.u.ndim != 2 or self.u.shape != self.v.shape:
            raise ValueError(f"u and v must be 2-d and equal-shaped, got {self.u.shape} vs {self.v.shape}")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise ValueError("displacement components must be finite")

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @classmethod
    def zeros(cls, width: int, height: int) -> "DisplacementField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))


@dataclass
class DeformConfig:
    """Optimizer settings for the displacement-field refinement."""

    lr0: float = 0.001
    iterations: int = 500
    lambda_smooth: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    eta_min: float = 0.0
    levels: int = 3

    def __post_init__(self):
        if not (self.lr0 > 0.0):
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.lambda_smooth < 0.0:
            raise ValueError(f"lambda_smooth must be >= 0, got {self.lambda_smooth}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")

    def to_dict(self) -> dict:
        return {
            "lr0": self.lr0,
            "iterations": self.iterations,
            "lambda_smooth": self.lambda_smooth,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "eta_min": self.eta_min,
            "levels": self.levels,
        }


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


@dataclass
class TraceRow:
    iteration: int
    mse: float
    smooth: float
    total: float
    lr: float


@dataclass
class LossTrace:
    """Objective values per optimizer step, plus one trailing row with the
    post-update objective (its lr is the schedule endpoint eta_min)."""

    rows: list[TraceRow] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["iter,mse,smooth,total,lr"]
        for r in self.rows:
            lines.append(f"{r.iteration},{r.mse!r},{r.smooth!r},{r.total!r},{r.lr!r}")
        return "\n".join(lines) + "\n"


def _require_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: {a.shape[::-1]} vs {b.shape[::-1]}")


def warp(moving: GrayImage, disp: DisplacementField) -> GrayImage:
    """Warp the moving image through the field: out(x, y) = moving(x+u, y+v)."""
    _require_same_shape(moving.data, disp.u, "field grid does not match the image grid")
    h, w = moving.data.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = sample_bilinear(moving.data, xs + disp.u, ys + disp.v)
    return GrayImage(np.clip(out, 0.0, 1.0), moving.spacing_um)


def mse_loss(fixed: GrayImage, warped: GrayImage) -> float:
    """Mean squared intensity difference (one direction only)."""
    _require_same_shape(fixed.data, warped.data, "image grids differ")
    d = fixed.data - warped.data
    return float(np.mean(d * d))


def _pair_count(h: int, w: int) -> int:
    return h * (w - 1) + (h - 1) * w


def smoothness_loss(disp: DisplacementField) -> float:
    """Mean squared forward difference of both field components in x and y."""
    h, w = disp.u.shape
    if h < 2 or w < 2:
        raise ValueError("smoothness needs a grid of at least 2x2")
    total = 0.0
    for c in (disp.u, disp.v):
        dx = np.diff(c, axis=1)
        dy = np.diff(c, axis=0)
        total += float(np.sum(dx * dx) + np.sum(dy * dy))
    return total / _pair_count(h, w)


def _objective_and_gradient(
    fixed: np.ndarray, moving: np.ndarray, u: np.ndarray, v: np.ndarray, lam: float
) -> tuple[float, float, np.ndarray, np.ndarray]:
    """MSE + smoothness and their analytic gradient w.r.t. (u, v).

    The data term differentiates the bilinear interpolant directly, so the
    image derivative is piecewise constant within each interpolation cell and
    zero wherever the sample point is clamped outside the moving image.
    """
    h, w = fixed.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    px = xs + u
    py = ys + v

    xc = np.clip(px, 0.0, w - 1.0)
    yc = np.clip(py, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0

    m00 = moving[y0, x0]
    m01 = moving[y0, x1]
    m10 = moving[y1, x0]
    m11 = moving[y1, x1]
    top = m00 * (1.0 - fx) + m01 * fx
    bot = m10 * (1.0 - fx) + m11 * fx
    warped = top * (1.0 - fy) + bot * fy

    resid = warped - fixed
    n = fixed.size
    mse = float(np.mean(resid * resid))

    dwdx = (m01 - m00) * (1.0 - fy) + (m11 - m10) * fy
    dwdy = bot - top
    inside_x = (px >= 0.0) & (px <= w - 1.0)
    inside_y = (py >= 0.0) & (py <= h - 1.0)
    scale = 2.0 / n
    gu = scale * resid * dwdx * inside_x
    gv = scale * resid * dwdy * inside_y

    smooth = 0.0
    pairs = _pair_count(h, w)
    if pairs == 0:
        return mse, smooth, gu, gv
    for comp, grad in ((u, gu), (v, gv)):
        ddx = np.diff(comp, axis=1)
        ddy = np.diff(comp, axis=0)
        smooth += float(np.sum(ddx * ddx) + np.sum(ddy * ddy))
        if lam != 0.0:
            coef = 2.0 * lam / pairs
            grad[:, :-1] -= coef * ddx
            grad[:, 1:] += coef * ddx
            grad[:-1, :] -= coef * ddy
            grad[1:, :] += coef * ddy
    smooth /= pairs
    return mse, smooth, gu, gv


def loss_gradient(
    fixed: GrayImage, moving: GrayImage, disp: DisplacementField, lambda_smooth: float
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of mse + lambda * smoothness w.r.t. the u and v components."""
    _require_same_shape(fixed.data, moving.data, "image grids differ")
    _require_same_shape(fixed.data, disp.u, "field grid does not match the image grid")
    _, _, gu, gv = _objective_and_gradient(fixed.data, moving.data, disp.u, disp.v, lambda_smooth)
    return gu, gv


def adam_step(
    state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float, cfg: DeformConfig
) -> tuple[AdamState, np.ndarray]:
    """One Adam update with bias correction; returns the new state and params."""
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: {params.shape} vs {grads.shape}")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads * grads
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return AdamState(m, v, t), new_params


def cosine_lr(lr0: float, step: int, total: int, eta_min: float = 0.0) -> float:
    """Cosine annealing from lr0 at step 0 to eta_min at step == total."""
    if total < 1:
        raise ValueError(f"total must be >= 1, got {total}")
    if not (0 <= step <= total):
        raise ValueError(f"step must lie in [0, {total}], got {step}")
    return eta_min + (lr0 - eta_min) * (1.0 + math.cos(math.pi * step / total)) / 2.0


def level_budgets(iterations: int, levels: int) -> list[int]:
    """Split the step budget across pyramid levels, extras to the coarsest."""
    base, rem = divmod(iterations, levels)
    return [base + (1 if i < rem else 0) for i in range(levels)]


def _upsample_field(u: np.ndarray, v: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """2x bilinear field upsampling; vector magnitudes double with the grid."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = (xs - 0.5) / 2.0
    cy = (ys - 0.5) / 2.0
    return 2.0 * sample_bilinear(u, cx, cy), 2.0 * sample_bilinear(v, cx, cy)


def optimize_deformation(
    fixed: GrayImage, moving_rigid: GrayImage, cfg: DeformConfig | None = None
) -> tuple[DisplacementField, LossTrace]:
    """Optimize a displacement field aligning moving_rigid to fixed.

    Runs coarse to fine over `levels` box-downsampled resolutions: the field
    starts at zero on the coarsest grid and each finer level starts from the
    2x-upsampled previous solution. Each level takes its share of `iterations`
    Adam steps with a cosine-annealed learning rate over that share.
    """
    cfg = cfg or DeformConfig()
    _require_same_shape(fixed.data, moving_rigid.data, "image grids differ")
    budgets = level_budgets(cfg.iterations, cfg.levels)
    pyramid = [
        (downsample(fixed, 2**k), downsample(moving_rigid, 2**k))
        for k in range(cfg.levels - 1, -1, -1)
    ]
    # what skipping the refinement would leave behind; the returned field must
    # never be worse than this (for levels=1 it equals the iteration-0 total)
    baseline_total = mse_loss(fixed, moving_rigid)

    params = None
    trace = LossTrace()
    step_index = 0
    for (f_lvl, m_lvl), budget in zip(pyramid, budgets):
        shape = f_lvl.data.shape
        if params is None:
            params = np.zeros((2, *shape))
        elif params.shape[1:] != shape:
            u2, v2 = _upsample_field(params[0], params[1], shape)
            params = np.stack([u2, v2])
        state = AdamState.zeros_like(params)
        for t in range(budget):
            # overflow legitimately yields inf here; the finiteness check below
            # turns it into a reported divergence
            with np.errstate(over="ignore", invalid="ignore"):
                mse, smooth, gu, gv = _objective_and_gradient(
                    f_lvl.data, m_lvl.data, params[0], params[1], cfg.lambda_smooth
                )
            total = mse + cfg.lambda_smooth * smooth
            grads = np.stack([gu, gv])
            if not (math.isfinite(total) and np.isfinite(grads).all()):
                raise NonFiniteLossError(f"objective diverged at iteration {step_index}")
            lr = cosine_lr(cfg.lr0, t, budget, cfg.eta_min)
            trace.rows.append(TraceRow(step_index, mse, smooth, total, lr))
            state, params = adam_step(state, params, grads, lr, cfg)
            step_index += 1

    final_field = DisplacementField(params[0], params[1])
    f_fin, m_fin = pyramid[-1]
    mse = mse_loss(f_fin, warp(m_fin, final_field))
    smooth = smoothness_loss(final_field) if min(final_field.u.shape) >= 2 else 0.0
    total = mse + cfg.lambda_smooth * smooth
    if not math.isfinite(total):
        raise NonFiniteLossError("final objective is not finite")
    trace.rows.append(TraceRow(step_index, mse, smooth, total, cfg.eta_min))
    if total > baseline_total:
        raise ObjectiveRegressionError(
            f"refinement left the objective at {total!r}, worse than the "
            f"zero-field baseline {baseline_total!r}"
        )
    return final_field, trace


def save_field(disp: DisplacementField, path: str | Path) -> None:
    """Write the little-endian DFLD binary: magic, u32 dims, f32 (u, v) pairs."""
    h, w = disp.u.shape
    interleaved = np.empty((h, w, 2), dtype="<f4")
    interleaved[:, :, 0] = disp.u
    interleaved[:, :, 1] = disp.v
    with open(path, "wb") as fh:
        fh.write(DFLD_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(interleaved.tobytes())


def load_field(path: str | Path) -> DisplacementField:
    """Read a DFLD file written by save_field."""
    raw = Path(path).read_bytes()
    if raw[:4] != DFLD_MAGIC:
        raise ValueError(f"not a DFLD file: {path}")
    w, h = struct.unpack("<II", raw[4:12])
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise ValueError(f"truncated DFLD file: {len(raw)} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return DisplacementField(arr[:, :, 0].astype(np.float64), arr[:, :, 1].astype(np.float64))
