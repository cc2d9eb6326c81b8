"""Evaluation measures for depth, pose, symmetry correspondences and normals."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo
from .imaging import CorrespondenceSet, Flow1D


class MetricsError(ValueError):
    """Inputs with nothing to compare (empty mask, no overlapping pairs)."""


@dataclass(frozen=True)
class DepthReport:
    rel: float
    rms: float
    sigma_125: float
    sigma_15625: float
    n_pixels: int
    scale_invariant: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PoseReport:
    rot_err_deg: float
    tx_rel_err: float
    s_abs_err: float
    fov_err_deg: float
    pose_loss: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SymReport:
    mean_pixel_err: float
    n_pairs: int
    flow_mse: float | None = None
    n_flow_pixels: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NormalReport:
    mean_l2: float
    mean_angle_deg: float
    n_pixels: int

    def to_dict(self) -> dict:
        return asdict(self)


def depth_metrics(pred, gt, mask) -> DepthReport:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or gt.shape != mask.shape:
        raise MetricsError("pred, gt and mask must have the same shape")
    if not mask.any():
        raise MetricsError("empty mask")
    z, zs = pred[mask], gt[mask]
    if np.any(~(zs > 0)):
        raise MetricsError("ground-truth depth must be positive on the mask")
    if np.any(~(z > 0)):
        raise MetricsError("predicted depth must be positive on the mask")
    n = z.size
    ratio = np.maximum(z / zs, zs / z)
    e = np.log(z) - np.log(zs)
    return DepthReport(
        rel=float(np.mean(np.abs(z - zs) / zs)),
        rms=float(np.sqrt(np.mean((z - zs) ** 2))),
        sigma_125=float(np.mean(ratio < 1.25)),
        sigma_15625=float(np.mean(ratio < 1.25**2)),
        n_pixels=int(n),
        scale_invariant=float(np.mean(e**2) - 0.5 * np.mean(e) ** 2),
    )


def fov_deg(s: float) -> float:
    """Full field of view implied by ``s`` for a normalized half-extent of 1."""
    return float(np.degrees(2.0 * np.arctan(s)))


def pose_metrics(pred: geo.CameraPose, gt: geo.CameraPose, object_size: float) -> PoseReport:
    if not object_size > 0:
        raise MetricsError("object_size must be positive")
    q = pred.quaternion.as_array()
    q = q / np.linalg.norm(q)
    qs = gt.quaternion.as_array()
    # q and -q are the same rotation
    dq = min(np.sum((q - qs) ** 2), np.sum((q + qs) ** 2))
    dt = pred.t_x - gt.t_x
    ds = pred.s - gt.s
    return PoseReport(
        rot_err_deg=geo.rotation_angle_deg(pred.rotation, gt.rotation),
        tx_rel_err=float(abs(dt) / object_size),
        s_abs_err=float(abs(ds)),
        fov_err_deg=abs(fov_deg(pred.s) - fov_deg(gt.s)),
        pose_loss=float(dq + dt**2 + ds**2),
    )


def _pixel_keys(pts: np.ndarray, width: int) -> np.ndarray:
    ij = np.round(np.asarray(pts, dtype=float)).astype(np.int64)
    return ij[:, 1] * width + ij[:, 0]


def symmetry_metrics(pred: CorrespondenceSet, gt: CorrespondenceSet, image_size, pred_flow: Flow1D | None = None, gt_flow: Flow1D | None = None) -> SymReport:
    """Mean pixel distance between predicted and true targets of the same source pixel.

    A predicted pair is scored when its rounded source pixel has a ground-truth
    pair. With both flows given, also the mean squared 1D flow error over
    pixels valid in both.
    """
    w, h = image_size
    gk = _pixel_keys(gt.p, w)
    lookup = dict(zip(gk.tolist(), range(len(gk))))
    pk = _pixel_keys(pred.p, w)
    hits = [(i, lookup[k]) for i, k in enumerate(pk.tolist()) if k in lookup]
    if not hits:
        raise MetricsError("no predicted pair has a ground-truth counterpart")
    ip, ig = np.array(hits).T
    err = np.linalg.norm(pred.q[ip] - gt.q[ig], axis=1)
    mse, n_flow = None, 0
    if pred_flow is not None and gt_flow is not None:
        mse, n_flow = flow_mse(pred_flow, gt_flow)
    return SymReport(float(err.mean()), int(len(err)), mse, n_flow)


def flow_mse(pred: Flow1D, gt: Flow1D):
    both = pred.valid & gt.valid
    if not both.any():
        raise MetricsError("flows share no valid pixel")
    d = pred.flow[both] - gt.flow[both]
    return float(np.mean(d**2)), int(both.sum())


def normal_metrics(pred, gt, mask) -> NormalReport:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape[:2] != mask.shape:
        raise MetricsError("pred, gt and mask must be aligned")
    if not mask.any():
        raise MetricsError("empty mask")
    a, b = pred[mask], gt[mask]
    l2 = np.linalg.norm(a - b, axis=1)
    # atan2 keeps small angles accurate where arccos of the dot product loses digits
    ang = np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), (a * b).sum(axis=1))
    return NormalReport(float(l2.mean()), float(np.degrees(ang).mean()), int(mask.sum()))


def write_report(path, report) -> None:
    d = report if isinstance(report, dict) else report.to_dict()
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
