"""Evaluation metrics: lip vertex error, upper-face dynamics deviation,
adjacent-frame motion statistics, and lip-distance curves.

All functions are pure numpy and operate on motion offsets (mm). Standard
deviations are population (no Bessel correction) throughout.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FaceRig, MotionSequence, animate_template


def _frames(seq) -> np.ndarray:
    if isinstance(seq, MotionSequence):
        return np.asarray(seq.frames, dtype=np.float64)
    arr = np.asarray(seq, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (T, V, 3) motions, got {arr.shape}")
    return arr


def lip_vertex_error(pred, gt, lip_mask) -> float:
    """Per frame, max L2 deviation over lip vertices; mean over frames."""
    p, g = _frames(pred), _frames(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    mask = np.asarray(lip_mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("empty lip mask")
    dist = np.linalg.norm(p[:, mask] - g[:, mask], axis=2)
    return float(dist.max(axis=1).mean())


def dyn(vertex_track) -> float:
    """Population std over time of the L2 norm of a (3, T) vertex track."""
    track = np.asarray(vertex_track, dtype=np.float64)
    if track.ndim != 2 or track.shape[0] != 3:
        raise ValueError(f"expected (3, T) track, got {track.shape}")
    norms = np.linalg.norm(track, axis=0)
    return float(norms.std())


def fdd(gt, pred, upper_face_mask) -> float:
    """Mean over upper-face vertices of dyn(gt) - dyn(pred); signed."""
    g, p = _frames(gt), _frames(pred)
    if g.shape != p.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {p.shape}")
    mask = np.asarray(upper_face_mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("empty upper-face mask")
    g_dyn = np.linalg.norm(g[:, mask], axis=2).std(axis=0)
    p_dyn = np.linalg.norm(p[:, mask], axis=2).std(axis=0)
    return float((g_dyn - p_dyn).mean())


def motion_dynamics_stats(seq):
    """Per-vertex (mean, population std) of adjacent-frame motion distance."""
    frames = _frames(seq)
    if frames.shape[0] < 2:
        raise ValueError("need at least two frames for dynamics statistics")
    dist = np.linalg.norm(np.diff(frames, axis=0), axis=2)  # (T-1, V)
    return dist.mean(axis=0), dist.std(axis=0)


def lip_distance_curve(seq, rig: FaceRig) -> np.ndarray:
    """Per-frame L2 distance between animated upper- and lower-lip centroids."""
    for name in ("upper_lip", "lower_lip"):
        if name not in rig.region_masks:
            raise ValueError(f"rig is missing region {name!r}")
    frames = _frames(seq)
    meshes = rig.template[None].astype(np.float64) + frames
    up = meshes[:, rig.region_masks["upper_lip"]].mean(axis=1)
    lo = meshes[:, rig.region_masks["lower_lip"]].mean(axis=1)
    return np.linalg.norm(up - lo, axis=1)


@dataclass
class EvalReport:
    lip_vertex_error: float
    fdd: float
    dyn_mean: np.ndarray        # per-vertex mean adjacent-frame distance (pred)
    dyn_std: np.ndarray
    lip_distance: np.ndarray    # predicted curve, length T
    lip_distance_gt: np.ndarray
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "lip_vertex_error_mm": self.lip_vertex_error,
            "fdd_mm": self.fdd,
            "dyn_mean_mm": np.asarray(self.dyn_mean).tolist(),
            "dyn_std_mm": np.asarray(self.dyn_std).tolist(),
            "lip_distance_mm": np.asarray(self.lip_distance).tolist(),
            "lip_distance_gt_mm": np.asarray(self.lip_distance_gt).tolist(),
            "metadata": self.metadata,
        }

    def save(self, path) -> None:
        """Write JSON report plus a CSV of the lip-distance series."""
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        csv_path = path.with_suffix(".csv")
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame_index", "value_mm"])
            for i, v in enumerate(self.lip_distance):
                writer.writerow([i, f"{v:.6f}"])

    @staticmethod
    def load(path) -> "EvalReport":
        raw = json.loads(Path(path).read_text())
        return EvalReport(
            lip_vertex_error=raw["lip_vertex_error_mm"],
            fdd=raw["fdd_mm"],
            dyn_mean=np.asarray(raw["dyn_mean_mm"]),
            dyn_std=np.asarray(raw["dyn_std_mm"]),
            lip_distance=np.asarray(raw["lip_distance_mm"]),
            lip_distance_gt=np.asarray(raw["lip_distance_gt_mm"]),
            metadata=raw.get("metadata", {}),
        )


def evaluate_pair(pred: MotionSequence, gt: MotionSequence, rig: FaceRig,
                  metadata: dict | None = None) -> EvalReport:
    if pred.frames.shape != gt.frames.shape:
        raise ValueError(
            f"shape mismatch {pred.frames.shape} vs {gt.frames.shape}")
    mean, std = motion_dynamics_stats(pred) if pred.num_frames >= 2 else (
        np.zeros(pred.vertex_count), np.zeros(pred.vertex_count))
    meta = dict(metadata or {})
    meta.setdefault("regions", ["lip_region", "upper_face"])
    return EvalReport(
        lip_vertex_error=lip_vertex_error(pred, gt, rig.region_masks["lip_region"]),
        fdd=fdd(gt, pred, rig.region_masks["upper_face"]),
        dyn_mean=mean,
        dyn_std=std,
        lip_distance=lip_distance_curve(pred, rig),
        lip_distance_gt=lip_distance_curve(gt, rig),
        metadata=meta,
    )
