"""End-to-end pipeline commands: register a pair, evaluate a cohort, generate data.

The register flow is: load, grayscale, downsample to working scale, trim black
borders, NCC template matching, rigid resampling, displacement-field
refinement. Every stage failure is wrapped with the stage name so callers can
report where a run died.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import deform, landmarks, raster, rigid, synth
from .errors import EmptyCohortError, SlideRegError, StageError

__all__ = [
    "PipelineConfig",
    "PairRegistration",
    "RegistrationReport",
    "register_pair",
    "cmd_register",
    "cmd_evaluate",
    "cmd_synth",
]

LOW_SCORE_WARNING = 0.2


@dataclass
class PipelineConfig:
    """Run configuration; JSON config files mirror these field names exactly."""

    downsample_factor: int = 32
    trim_threshold: float = 0.02
    match: rigid.MatchConfig = field(default_factory=rigid.MatchConfig)
    deform: deform.DeformConfig = field(default_factory=deform.DeformConfig)
    spacing_um_at_full_res: float = 0.23

    def __post_init__(self):
        if self.downsample_factor < 1:
            raise ValueError(f"downsample_factor must be >= 1, got {self.downsample_factor}")
        if not (0.0 <= self.trim_threshold < 1.0):
            raise ValueError(f"trim_threshold must be in [0, 1), got {self.trim_threshold}")
        if not (self.spacing_um_at_full_res > 0.0):
            raise ValueError("spacing_um_at_full_res must be positive")

    @property
    def working_spacing_um(self) -> float:
        return self.spacing_um_at_full_res * self.downsample_factor

    def to_dict(self) -> dict:
        return {
            "downsample_factor": self.downsample_factor,
            "trim_threshold": self.trim_threshold,
            "match": self.match.to_dict(),
            "deform": self.deform.to_dict(),
            "spacing_um_at_full_res": self.spacing_um_at_full_res,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        kwargs = dict(d)
        if "match" in kwargs:
            kwargs["match"] = rigid.MatchConfig(**kwargs["match"])
        if "deform" in kwargs:
            kwargs["deform"] = deform.DeformConfig(**kwargs["deform"])
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class PairRegistration:
    """In-memory result of registering one image pair at working scale."""

    fixed: raster.GrayImage
    moving: raster.GrayImage
    fixed_crop: raster.CropRect
    moving_crop: raster.CropRect
    estimate: rigid.RigidEstimate
    field: deform.DisplacementField
    trace: deform.LossTrace
    warped: raster.GrayImage
    timings_s: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


@dataclass
class RegistrationReport:
    inputs: dict
    config: dict
    crops: dict
    rigid: dict
    deform_summary: dict
    outputs: dict
    timings_s: dict
    warnings: list

    def to_dict(self) -> dict:
        return {
            "inputs": self.inputs,
            "config": self.config,
            "crops": self.crops,
            "rigid": self.rigid,
            "deform": self.deform_summary,
            "outputs": self.outputs,
            "timings_s": self.timings_s,
            "warnings": self.warnings,
        }


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SlideRegError as exc:
        raise StageError(name, exc) from exc
    except OSError as exc:
        raise StageError(name, exc) from exc


def _prepare(path: str | Path, cfg: PipelineConfig) -> tuple[raster.GrayImage, raster.CropRect]:
    gray = raster.read_gray(path, cfg.spacing_um_at_full_res)
    working = raster.downsample(gray, cfg.downsample_factor)
    return raster.trim_black_border(working, cfg.trim_threshold)


def register_pair(
    fixed_path: str | Path, moving_path: str | Path, cfg: PipelineConfig
) -> PairRegistration:
    """Run the full two-step registration for one pair, in memory."""
    timings: dict = {}
    warnings: list = []
    t0 = time.perf_counter()
    fixed_img, fixed_crop = _stage("load-fixed", _prepare, fixed_path, cfg)
    moving_img, moving_crop = _stage("load-moving", _prepare, moving_path, cfg)
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    est = _stage("template-match", rigid.template_match, fixed_img, moving_img, cfg.match)
    if est.score < LOW_SCORE_WARNING:
        warnings.append(f"low rigid match score {est.score:.3f}")
    aligned = _stage(
        "apply-rigid", rigid.apply_rigid, moving_img, est, fixed_img.width, fixed_img.height
    )
    timings["rigid"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    disp, trace = _stage("deform", deform.optimize_deformation, fixed_img, aligned, cfg.deform)
    warped = deform.warp(aligned, disp)
    timings["deform"] = time.perf_counter() - t0

    return PairRegistration(
        fixed_img, moving_img, fixed_crop, moving_crop, est, disp, trace, warped, timings, warnings
    )


def _checkerboard(a: raster.GrayImage, b: raster.GrayImage, tiles: int = 8) -> raster.GrayImage:
    """Alternate tiles of two equal-size images on a tiles x tiles grid."""
    h, w = a.data.shape
    ys, xs = np.mgrid[0:h, 0:w]
    take_a = ((ys * tiles // h) + (xs * tiles // w)) % 2 == 0
    return raster.GrayImage(np.where(take_a, a.data, b.data), a.spacing_um)


def cmd_register(
    fixed_path: str | Path,
    moving_path: str | Path,
    cfg: PipelineConfig,
    out_dir: str | Path,
) -> RegistrationReport:
    """Register a pair and write all artifacts plus report.json into out_dir."""
    t_start = time.perf_counter()
    result = register_pair(fixed_path, moving_path, cfg)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "rigid": out / "rigid.json",
        "field": out / "field.dfld",
        "trace": out / "trace.csv",
        "warped": out / "warped.png",
        "checkerboard": out / "checkerboard.png",
        "report": out / "report.json",
    }

    def _write_outputs():
        paths["rigid"].write_text(json.dumps(result.estimate.to_dict(), indent=2) + "\n")
        deform.save_field(result.field, paths["field"])
        paths["trace"].write_text(result.trace.to_csv())
        raster.write_png(result.warped, paths["warped"])
        raster.write_png(_checkerboard(result.fixed, result.warped), paths["checkerboard"])

    _stage("write-outputs", _write_outputs)

    last = result.trace.rows[-1]
    result.timings_s["total"] = time.perf_counter() - t_start
    report = RegistrationReport(
        inputs={"fixed": str(fixed_path), "moving": str(moving_path)},
        config=cfg.to_dict(),
        crops={"fixed": result.fixed_crop.to_dict(), "moving": result.moving_crop.to_dict()},
        rigid=result.estimate.to_dict(),
        deform_summary={
            "final_mse": last.mse,
            "final_total": last.total,
            "iterations": len(result.trace.rows) - 1,
        },
        outputs={k: str(v) for k, v in paths.items()},
        timings_s=result.timings_s,
        warnings=result.warnings,
    )
    _stage(
        "write-outputs",
        paths["report"].write_text,
        json.dumps(report.to_dict(), indent=2) + "\n",
    )
    return report


def _load_manifest(manifest_path: str | Path) -> tuple[PipelineConfig, list[dict]]:
    mpath = Path(manifest_path)
    doc = json.loads(mpath.read_text())
    cfg = PipelineConfig.from_dict(doc.get("config", {}))
    pairs = []
    for entry in doc.get("pairs", []):
        pairs.append(
            {
                "id": str(entry["id"]),
                "fixed": mpath.parent / entry["fixed"],
                "moving": mpath.parent / entry["moving"],
                "landmarks": mpath.parent / entry["landmarks"],
            }
        )
    return cfg, pairs


def _evaluate_one(entry: dict, cfg: PipelineConfig) -> landmarks.ImageEval:
    result = register_pair(entry["fixed"], entry["moving"], cfg)
    pairs = landmarks.parse_landmarks(Path(entry["landmarks"]).read_text())
    # Landmark files are in pre-trim working-scale coordinates; shift both
    # sides into the trimmed frames (distances are translation-invariant).
    fc, mc = result.fixed_crop, result.moving_crop
    adjusted = [
        landmarks.LandmarkPair(
            p.id,
            (p.fixed_xy[0] - fc.x0, p.fixed_xy[1] - fc.y0),
            (p.moving_xy[0] - mc.x0, p.moving_xy[1] - mc.y0),
        )
        for p in pairs
    ]
    return landmarks.landmark_distances(
        adjusted,
        result.estimate,
        result.field,
        cfg.working_spacing_um,
        moving_dims=(result.moving.width, result.moving.height),
        pair_id=entry["id"],
    )


def cmd_evaluate(
    manifest_path: str | Path, out_path: str | Path, workers: int = 1
) -> landmarks.CohortEval:
    """Register every manifest pair and write the cohort landmark metric.

    Per-pair failures are recorded and excluded from the median rather than
    aborting the cohort run.
    """
    cfg, entries = _load_manifest(manifest_path)
    if not entries:
        raise EmptyCohortError(f"manifest {manifest_path} lists no pairs")

    failures: list[dict] = []
    evals: dict[str, landmarks.ImageEval] = {}

    def run(entry: dict):
        try:
            return entry["id"], _evaluate_one(entry, cfg), None
        except (SlideRegError, OSError) as exc:
            return entry["id"], None, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, entries))
    else:
        outcomes = [run(e) for e in entries]
    for pair_id, image_eval, error in outcomes:
        if error is None:
            evals[pair_id] = image_eval
        else:
            failures.append({"pair_id": pair_id, "error": error})

    if not evals:
        raise EmptyCohortError(f"all {len(entries)} pairs failed: {failures}")
    ordered = [evals[k] for k in sorted(evals)]
    cohort = landmarks.median_p90(ordered)

    doc = cohort.to_dict()
    doc["failures"] = sorted(failures, key=lambda f: f["pair_id"])
    doc["failure_count"] = len(failures)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2) + "\n")
    return cohort


def cmd_synth(spec_path: str | Path, out_dir: str | Path) -> dict:
    """Generate a synthetic pair from a spec JSON and write its artifacts."""
    spec = synth.SynthSpec.from_dict(json.loads(Path(spec_path).read_text()))
    pair = _stage("synth", synth.make_pair, spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "fixed": out / "fixed.png",
        "moving": out / "moving.png",
        "landmarks": out / "landmarks.csv",
        "true_field": out / "true_field.dfld",
        "spec": out / "spec.json",
        "true_rigid": out / "true_rigid.json",
    }

    def _write_outputs():
        raster.write_png(pair.fixed, paths["fixed"])
        raster.write_png(pair.moving, paths["moving"])
        paths["landmarks"].write_text(landmarks.landmarks_to_csv(pair.landmarks))
        deform.save_field(pair.true_field, paths["true_field"])
        paths["spec"].write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
        paths["true_rigid"].write_text(json.dumps(pair.true_rigid.to_dict(), indent=2) + "\n")

    _stage("write-outputs", _write_outputs)
    return {"files": {k: str(v) for k, v in paths.items()}}
