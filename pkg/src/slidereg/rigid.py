"""Exhaustive NCC template matching over translation and the 0/180 degree flip.

The moving image slides over the fixed image; partial placements are scored
over the overlap region only, so the two images may differ in extent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientOverlapError, NoValidPlacementError, ZeroVarianceError
from .raster import GrayImage, blur_array, rotate180

__all__ = ["RigidEstimate", "MatchConfig", "ncc", "ncc_at", "template_match", "apply_rigid"]

# Overlap variance below this (relative to pixel count) is treated as constant.
_VAR_EPS = 1e-12


@dataclass
class RigidEstimate:
    """Step-1 result: orientation flag, integer moving-to-fixed offset, NCC score."""

    rotated_180: bool
    dx: int
    dy: int
    score: float

    def __post_init__(self):
        if not (-1.0 <= self.score <= 1.0):
            raise ValueError(f"NCC score must lie in [-1, 1], got {self.score}")

    def to_dict(self) -> dict:
        return {
            "rotated_180": self.rotated_180,
            "dx": self.dx,
            "dy": self.dy,
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidEstimate":
        return cls(bool(d["rotated_180"]), int(d["dx"]), int(d["dy"]), float(d["score"]))


@dataclass
class MatchConfig:
    """Search parameters for template matching."""

    stride: int = 4
    refine_radius: int = 8
    refine_candidates: int = 8
    min_overlap_frac: float = 0.25

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.refine_radius < 0:
            raise ValueError(f"refine_radius must be >= 0, got {self.refine_radius}")
        if self.refine_candidates < 1:
            raise ValueError(f"refine_candidates must be >= 1, got {self.refine_candidates}")
        if not (0.0 < self.min_overlap_frac <= 1.0):
            raise ValueError(f"min_overlap_frac must be in (0, 1], got {self.min_overlap_frac}")

    def to_dict(self) -> dict:
        return {
            "stride": self.stride,
            "refine_radius": self.refine_radius,
            "refine_candidates": self.refine_candidates,
            "min_overlap_frac": self.min_overlap_frac,
        }


def ncc(a, b) -> float:
    """Zero-normalized cross-correlation of two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least 2 samples")
    da = a - a.mean()
    db = b - b.mean()
    va = float(np.dot(da, da))
    vb = float(np.dot(db, db))
    if va <= 0.0 or vb <= 0.0:
        raise ZeroVarianceError("correlation of a constant signal is undefined")
    return float(np.dot(da, db) / math.sqrt(va * vb))


def _overlap(dx: int, dy: int, wf: int, hf: int, wt: int, ht: int):
    """Overlap rectangle of a template placed at (dx, dy), in fixed coordinates."""
    fx0, fx1 = max(0, dx), min(wf, dx + wt)
    fy0, fy1 = max(0, dy), min(hf, dy + ht)
    return fx0, fy0, fx1, fy1


def ncc_at(
    fixed: GrayImage,
    template: GrayImage,
    dx: int,
    dy: int,
    min_overlap_frac: float = 0.25,
) -> float:
    """NCC of the template placed at (dx, dy), scored over the overlap only."""
    wf, hf = fixed.width, fixed.height
    wt, ht = template.width, template.height
    fx0, fy0, fx1, fy1 = _overlap(dx, dy, wf, hf, wt, ht)
    area = max(0, fx1 - fx0) * max(0, fy1 - fy0)
    if area < min_overlap_frac * wt * ht or area < 2:
        raise InsufficientOverlapError(
            f"placement ({dx}, {dy}) overlaps {area} px, "
            f"need {min_overlap_frac:g} of {wt * ht}"
        )
    fwin = fixed.data[fy0:fy1, fx0:fx1]
    twin = template.data[fy0 - dy : fy1 - dy, fx0 - dx : fx1 - dx]
    return ncc(fwin, twin)


class _Scanner:
    """Scores every placement of one template using prefix sums plus dot products."""

    def __init__(self, fixed: np.ndarray, template: np.ndarray, min_overlap_frac: float):
        self.f = fixed
        self.t = template
        self.hf, self.wf = fixed.shape
        self.ht, self.wt = template.shape
        self.min_px = min_overlap_frac * self.wt * self.ht
        self.sf = self._prefix(fixed)
        self.sf2 = self._prefix(fixed * fixed)
        self.st = self._prefix(template)
        self.st2 = self._prefix(template * template)
        self.dx_range = range(-self.wt + 1, self.wf)
        self.dy_range = range(-self.ht + 1, self.hf)

    @staticmethod
    def _prefix(a: np.ndarray) -> np.ndarray:
        p = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=np.float64)
        np.cumsum(np.cumsum(a, axis=0), axis=1, out=p[1:, 1:])
        return p

    @staticmethod
    def _rect(p: np.ndarray, y0: int, x0: int, y1: int, x1: int) -> float:
        return p[y1, x1] - p[y0, x1] - p[y1, x0] + p[y0, x0]

    def score(self, dx: int, dy: int) -> float | None:
        """NCC at one placement, or None if the overlap or variance is too small."""
        fx0, fy0, fx1, fy1 = _overlap(dx, dy, self.wf, self.hf, self.wt, self.ht)
        if fx1 <= fx0 or fy1 <= fy0:
            return None
        n = (fx1 - fx0) * (fy1 - fy0)
        if n < self.min_px or n < 2:
            return None
        tx0, ty0 = fx0 - dx, fy0 - dy
        tx1, ty1 = fx1 - dx, fy1 - dy
        sum_f = self._rect(self.sf, fy0, fx0, fy1, fx1)
        sum_f2 = self._rect(self.sf2, fy0, fx0, fy1, fx1)
        sum_t = self._rect(self.st, ty0, tx0, ty1, tx1)
        sum_t2 = self._rect(self.st2, ty0, tx0, ty1, tx1)
        var_f = sum_f2 - sum_f * sum_f / n
        var_t = sum_t2 - sum_t * sum_t / n
        if var_f <= _VAR_EPS * n or var_t <= _VAR_EPS * n:
            return None
        cross = float(
            np.dot(
                self.f[fy0:fy1, fx0:fx1].ravel(),
                self.t[ty0:ty1, tx0:tx1].ravel(),
            )
        )
        num = cross - sum_f * sum_t / n
        return num / math.sqrt(var_f * var_t)


def _better(cand: tuple, best: tuple | None) -> bool:
    """Total order on (score, rotated, dx, dy): higher score wins, then the
    un-rotated orientation, then smaller |dx|+|dy|, then lexicographic (dx, dy)."""
    if best is None:
        return True
    score, rot, dx, dy = cand
    bscore, brot, bdx, bdy = best
    if score != bscore:
        return score > bscore
    if rot != brot:
        return not rot
    if abs(dx) + abs(dy) != abs(bdx) + abs(bdy):
        return abs(dx) + abs(dy) < abs(bdx) + abs(bdy)
    return (dx, dy) < (bdx, bdy)


def _sort_key(cand: tuple):
    score, rot, dx, dy = cand
    return (-score, rot, abs(dx) + abs(dy), dx, dy)


def template_match(fixed: GrayImage, moving: GrayImage, cfg: MatchConfig | None = None) -> RigidEstimate:
    """Estimate translation and 0/180 orientation by exhaustive NCC search.

    The coarse pass scores a stride-spaced grid of placements for the moving
    image and its 180-degree rotation. When stride > 1 the coarse scoring runs
    on copies blurred with sigma = stride/2, so the correlation surface has no
    basins narrower than the grid, and the best refine_candidates hits of each
    orientation (kept mutually farther apart than refine_radius) are refined
    at stride 1 on the sharp images. With stride 1 the scan is already
    exhaustive and no blurring or refinement happens. Ties are broken
    deterministically: score, un-rotated first, smaller L1 offset,
    lexicographic offset.
    """
    cfg = cfg or MatchConfig()
    sharp = {
        False: _Scanner(fixed.data, moving.data, cfg.min_overlap_frac),
        True: _Scanner(fixed.data, rotate180(moving).data, cfg.min_overlap_frac),
    }
    refining = cfg.stride > 1 and cfg.refine_radius > 0
    if refining:
        fb = blur_array(fixed.data, cfg.stride / 2.0)
        mb = blur_array(moving.data, cfg.stride / 2.0)
        coarse = {
            False: _Scanner(fb, mb, cfg.min_overlap_frac),
            True: _Scanner(fb, mb[::-1, ::-1], cfg.min_overlap_frac),
        }
    else:
        coarse = sharp

    best = None
    for rot in (False, True):
        sc = coarse[rot]
        cands = []
        for dy in sc.dy_range[:: cfg.stride]:
            for dx in sc.dx_range[:: cfg.stride]:
                s = sc.score(dx, dy)
                if s is None:
                    continue
                cand = (s, rot, dx, dy)
                if not refining and _better(cand, best):
                    best = cand
                cands.append(cand)
        if not refining:
            continue
        # non-maximum suppression: seeds cover distinct basins, and anything
        # a seed suppresses lies inside that seed's refinement window
        cands.sort(key=_sort_key)
        seeds: list[tuple] = []
        for c in cands:
            if len(seeds) >= cfg.refine_candidates:
                break
            if all(max(abs(c[2] - s[2]), abs(c[3] - s[3])) > cfg.refine_radius for s in seeds):
                seeds.append(c)
        ssc = sharp[rot]
        for _, _, cx, cy in seeds:
            for dy in range(cy - cfg.refine_radius, cy + cfg.refine_radius + 1):
                for dx in range(cx - cfg.refine_radius, cx + cfg.refine_radius + 1):
                    s = ssc.score(dx, dy)
                    if s is None:
                        continue
                    cand = (s, rot, dx, dy)
                    if _better(cand, best):
                        best = cand
    if best is None:
        raise NoValidPlacementError(
            f"no placement reaches {cfg.min_overlap_frac:g} overlap with usable variance"
        )
    score, rot, dx, dy = best
    return RigidEstimate(rot, dx, dy, float(min(1.0, max(-1.0, score))))


def apply_rigid(moving: GrayImage, est: RigidEstimate, out_width: int, out_height: int) -> GrayImage:
    """Resample the moving image onto the fixed grid: orientation, then translation.

    Pixels with no source coverage take the clamped border value.
    """
    src = moving.data[::-1, ::-1] if est.rotated_180 else moving.data
    xs = np.clip(np.arange(out_width) - est.dx, 0, moving.width - 1)
    ys = np.clip(np.arange(out_height) - est.dy, 0, moving.height - 1)
    return GrayImage(src[np.ix_(ys, xs)], moving.spacing_um)
