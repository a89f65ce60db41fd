"""Landmark ingestion, transform composition, and the cohort-level metric.

Landmarks are mapped fixed-to-moving, mirroring the pull direction the image
resampling uses; distances are reported in micrometers at working scale. The
headline statistic is the median across images of each image's 90th-percentile
landmark distance.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .deform import DisplacementField
from .errors import EmptyInputError, EmptyLandmarksError, LandmarkParseError
from .raster import sample_bilinear
from .rigid import RigidEstimate

__all__ = [
    "LandmarkPair",
    "ImageEval",
    "CohortEval",
    "parse_landmarks",
    "landmarks_to_csv",
    "map_fixed_to_moving",
    "landmark_distances",
    "percentile_90",
    "median_p90",
]

CSV_HEADER = ["id", "fixed_x", "fixed_y", "moving_x", "moving_y"]


@dataclass
class LandmarkPair:
    """One annotated correspondence, in working-scale pixel coordinates."""

    id: str
    fixed_xy: tuple[float, float]
    moving_xy: tuple[float, float]


@dataclass
class ImageEval:
    pair_id: str
    distances_um: list[float]
    p90_um: float

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "p90_um": self.p90_um,
            "distances_um": self.distances_um,
        }


@dataclass
class CohortEval:
    per_image: list[ImageEval]
    median_p90_um: float

    def to_dict(self) -> dict:
        return {
            "median_p90_um": self.median_p90_um,
            "images": [e.to_dict() for e in self.per_image],
        }


def parse_landmarks(csv_text: str) -> list[LandmarkPair]:
    """Parse landmark CSV with header id,fixed_x,fixed_y,moving_x,moving_y."""
    reader = csv.reader(io.StringIO(csv_text))
    rows = [(i + 1, row) for i, row in enumerate(reader) if row and any(f.strip() for f in row)]
    if not rows:
        return []
    header_no, header = rows[0]
    if [h.strip() for h in header] != CSV_HEADER:
        raise LandmarkParseError(header_no, f"expected header {','.join(CSV_HEADER)}")
    pairs = []
    for lineno, row in rows[1:]:
        if len(row) != 5:
            raise LandmarkParseError(lineno, f"expected 5 fields, got {len(row)}")
        try:
            fx, fy, mx, my = (float(f) for f in row[1:])
        except ValueError as exc:
            raise LandmarkParseError(lineno, f"non-numeric coordinate: {exc}") from None
        pairs.append(LandmarkPair(row[0].strip(), (fx, fy), (mx, my)))
    return pairs


def landmarks_to_csv(pairs: list[LandmarkPair]) -> str:
    out = [",".join(CSV_HEADER)]
    for p in pairs:
        out.append(f"{p.id},{p.fixed_xy[0]!r},{p.fixed_xy[1]!r},{p.moving_xy[0]!r},{p.moving_xy[1]!r}")
    return "\n".join(out) + "\n"


def map_fixed_to_moving(
    p: tuple[float, float],
    est: RigidEstimate,
    disp: DisplacementField,
    moving_dims: tuple[int, int],
) -> tuple[float, float]:
    """Predict where a fixed-image point lands in original moving coordinates.

    Follows the image resampling order: add the interpolated displacement,
    undo the translation, then undo the 180-degree flip if one was applied.
    `moving_dims` is (width, height) of the moving image.
    """
    px, py = p
    qx = px + float(sample_bilinear(disp.u, np.asarray(px, float), np.asarray(py, float)))
    qy = py + float(sample_bilinear(disp.v, np.asarray(px, float), np.asarray(py, float)))
    qx -= est.dx
    qy -= est.dy
    if est.rotated_180:
        w, h = moving_dims
        qx = (w - 1) - qx
        qy = (h - 1) - qy
    return qx, qy


def landmark_distances(
    pairs: list[LandmarkPair],
    est: RigidEstimate,
    disp: DisplacementField,
    spacing_um: float,
    moving_dims: tuple[int, int] | None = None,
    pair_id: str = "",
) -> ImageEval:
    """Euclidean distance in µm between predicted and annotated moving points."""
    if not pairs:
        raise EmptyLandmarksError("no landmark pairs to evaluate")
    if moving_dims is None:
        moving_dims = (disp.width, disp.height)
    distances = []
    for lm in pairs:
        qx, qy = map_fixed_to_moving(lm.fixed_xy, est, disp, moving_dims)
        distances.append(spacing_um * math.hypot(qx - lm.moving_xy[0], qy - lm.moving_xy[1]))
    return ImageEval(pair_id, distances, percentile_90(distances))


def percentile_90(values) -> float:
    """Linear-interpolation 90th percentile: rank r = 0.9 * (n - 1)."""
    vals = sorted(float(v) for v in values)
    if not vals:
        raise EmptyInputError("percentile of an empty list")
    r = 0.9 * (len(vals) - 1)
    lo = int(math.floor(r))
    if lo + 1 >= len(vals):
        return vals[lo]
    return vals[lo] + (r - lo) * (vals[lo + 1] - vals[lo])


def median_p90(per_image: list[ImageEval]) -> CohortEval:
    """Median of the per-image p90 values; even counts average the middle two."""
    if not per_image:
        raise EmptyInputError("median over an empty cohort")
    p90s = sorted(e.p90_um for e in per_image)
    n = len(p90s)
    if n % 2 == 1:
        med = p90s[n // 2]
    else:
        med = (p90s[n // 2 - 1] + p90s[n // 2]) / 2.0
    return CohortEval(list(per_image), med)
