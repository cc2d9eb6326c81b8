"""Projective rectification that puts mirror-symmetric pixel pairs on common rows.

Mirror pairs differ by a world-x displacement, so in the image they lie on
lines through the vanishing point of world x. Sending the vanishing line of the
world xy-directions to infinity makes those lines parallel; a rotation then
turns them horizontal and a scale/translation fits the object to the canvas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraPose, pixel_normalization_matrix
from .imaging import CorrespondenceSet, Flow1D

AT_INFINITY_TOL = 1e-9
FIT_MARGIN = 4.0


def vanishing_points(R: np.ndarray, s: float):
    """Vanishing points of world x and y in normalized image coordinates.

    Returns ``(v1, v2, (inf1, inf2))``. A finite point is ``(x, y, 1)``; a point
    at infinity is the unit direction ``(dx, dy, 0)``.
    """
    R = np.asarray(R, dtype=float)
    out = []
    flags = []
    # r2 x r3 = r1 and r1 x r3 = -r2 for a rotation; the world axes themselves
    # give the sign convention (direction (1,0,0), (0,1,0) for R = I).
    for d in (np.cross(R[1], R[2]), -np.cross(R[0], R[2])):
        if abs(d[2]) < AT_INFINITY_TOL:
            v = np.array([d[0], d[1], 0.0])
            out.append(v / np.linalg.norm(v))
            flags.append(True)
        else:
            out.append(np.array([d[0] / (s * d[2]), d[1] / (s * d[2]), 1.0]))
            flags.append(False)
    return out[0], out[1], tuple(flags)


def _homogeneous_unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def apply_homography(T: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    h = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1) @ np.asarray(T).T
    return h[..., :2] / h[..., 2:3]


@dataclass(frozen=True)
class RectifyTransform:
    H: np.ndarray  # projective part, pixel frame
    A: np.ndarray  # similarity (rotation, uniform scale, translation)
    v1: np.ndarray
    v2: np.ndarray
    degenerate: bool
    src_size: tuple
    out_size: tuple

    @property
    def T(self) -> np.ndarray:
        return self.A @ self.H

    @property
    def T_inv(self) -> np.ndarray:
        return np.linalg.inv(self.T)

    def forward(self, pts) -> np.ndarray:
        return apply_homography(self.T, pts)

    def inverse(self, pts) -> np.ndarray:
        return apply_homography(self.T_inv, pts)

    def to_dict(self) -> dict:
        return {
            "H": self.H.tolist(),
            "A": self.A.tolist(),
            "v1": self.v1.tolist(),
            "v2": self.v2.tolist(),
            "degenerate": bool(self.degenerate),
            "src_size": list(self.src_size),
            "out_size": list(self.out_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RectifyTransform":
        return cls(
            np.array(d["H"], dtype=float),
            np.array(d["A"], dtype=float),
            np.array(d["v1"], dtype=float),
            np.array(d["v2"], dtype=float),
            bool(d["degenerate"]),
            tuple(d["src_size"]),
            tuple(d["out_size"]),
        )

    @classmethod
    def from_matrix(cls, T, size) -> "RectifyTransform":
        """Wrap an arbitrary invertible map (used for tests and manual warps)."""
        nan = np.full(3, np.nan)
        return cls(np.asarray(T, dtype=float), np.eye(3), nan, nan, False, tuple(size), tuple(size))


def build_transform(cam: CameraPose, width: int, height: int, mask: np.ndarray, out_size=None) -> RectifyTransform:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot rectify an empty mask")
    out_w, out_h = out_size if out_size is not None else (width, height)
    R, s = cam.rotation, cam.s
    v1, v2, (inf1, inf2) = vanishing_points(R, s)
    degenerate = inf1 and inf2

    N = pixel_normalization_matrix(width, height)
    N_inv = np.linalg.inv(N)
    rows, cols = np.nonzero(mask)
    centers = np.stack([cols, rows], axis=1).astype(float)
    centroid = centers.mean(axis=0)

    if degenerate:
        H_norm = np.eye(3)
    else:
        h1 = np.array([v1[0], v1[1], v1[2]]) if inf1 else _homogeneous_unit(v1)
        h2 = np.array([v2[0], v2[1], v2[2]]) if inf2 else _homogeneous_unit(v2)
        line = np.cross(h1, h2)
        line /= np.linalg.norm(line)
        c_norm = N @ np.array([centroid[0], centroid[1], 1.0])
        if line @ c_norm < 0:
            line = -line
        H_norm = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], line])
    H = N_inv @ H_norm @ N

    # direction of increasing world x at the centroid, pushed through H
    u, v = (N @ np.array([centroid[0], centroid[1], 1.0]))[:2]
    r1 = R[0]
    d_norm = np.array([r1[0] - s * r1[2] * u, r1[1] - s * r1[2] * v])
    d_pix = np.array([d_norm[0], -d_norm[1]])
    d_pix /= np.linalg.norm(d_pix)
    eps = 1e-3
    a = apply_homography(H, centroid)
    b = apply_homography(H, centroid + eps * d_pix)
    step = b - a
    if not degenerate and not inf1:
        hv = H @ (N_inv @ v1)
        axis = hv[:2] / np.linalg.norm(hv[:2])
        if axis @ step < 0:
            axis = -axis
    else:
        axis = step / np.linalg.norm(step)
    c, sn = axis
    rot = np.array([[c, sn, 0.0], [-sn, c, 0.0], [0.0, 0.0, 1.0]])

    warped = apply_homography(rot @ H, centers)
    lo, hi = warped.min(axis=0), warped.max(axis=0)
    extent = np.maximum(hi - lo, 1e-9)
    avail = np.array([out_w - 1 - 2 * FIT_MARGIN, out_h - 1 - 2 * FIT_MARGIN], dtype=float)
    k = float(np.min(avail / extent))
    mid = (lo + hi) / 2.0
    target = np.array([(out_w - 1) / 2.0, (out_h - 1) / 2.0])
    fit = np.array([[k, 0.0, target[0] - k * mid[0]], [0.0, k, target[1] - k * mid[1]], [0.0, 0.0, 1.0]])
    A = fit @ rot
    T = A @ H
    if abs(np.linalg.det(T)) < 1e-12:
        raise ValueError("rectifying transform is singular")
    return RectifyTransform(H, A, v1, v2, degenerate, (width, height), (out_w, out_h))


def vanishing_line_pixels(t: RectifyTransform) -> np.ndarray:
    """The vanishing line ``v1 x v2`` expressed in source pixel coordinates."""
    w, h = t.src_size
    N = pixel_normalization_matrix(w, h)
    h1 = t.v1 if t.v1[2] == 0 else _homogeneous_unit(t.v1)
    h2 = t.v2 if t.v2[2] == 0 else _homogeneous_unit(t.v2)
    return N.T @ np.cross(h1, h2)


def _snap(a: np.ndarray) -> np.ndarray:
    r = np.round(a)
    return np.where(np.abs(a - r) < 1e-9, r, a)


def warp(image: np.ndarray, T, out_size, interpolation: str = "bilinear"):
    """Inverse-mapping warp of ``image`` by homography ``T`` (source -> output).

    Returns ``(warped, valid)``. ``interpolation`` is ``"bilinear"`` or
    ``"nearest"``; output pixels whose preimage falls outside the source are
    invalid and set to 0.
    """
    if isinstance(T, RectifyTransform):
        T = T.T
    image = np.asarray(image)
    src_h, src_w = image.shape[:2]
    out_w, out_h = out_size
    T_inv = np.linalg.inv(T)
    rows, cols = np.mgrid[0:out_h, 0:out_w]
    src = apply_homography(T_inv, np.stack([cols, rows], axis=-1).astype(float))
    x = _snap(src[..., 0])
    y = _snap(src[..., 1])
    tail = image.shape[2:]
    if interpolation == "nearest":
        xi = np.round(x).astype(int)
        yi = np.round(y).astype(int)
        valid = (xi >= 0) & (xi < src_w) & (yi >= 0) & (yi < src_h)
        out = np.zeros((out_h, out_w) + tail, dtype=image.dtype)
        out[valid] = image[yi[valid], xi[valid]]
        return out, valid
    if interpolation != "bilinear":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    valid = (x >= 0) & (x <= src_w - 1) & (y >= 0) & (y <= src_h - 1)
    xs, ys = x[valid], y[valid]
    x0 = np.minimum(np.floor(xs).astype(int), src_w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    fx = xs - x0
    fy = ys - y0
    img = image.astype(float)
    if tail:
        fx = fx[:, None]
        fy = fy[:, None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = np.zeros((out_h, out_w) + tail)
    out[valid] = top * (1 - fy) + bot * fy
    return out, valid


def rectify_image(intensity: np.ndarray, mask: np.ndarray, t: RectifyTransform):
    """Warp intensity (bilinear) and mask (nearest) into the rectified frame."""
    rect_i, valid_i = warp(intensity, t, t.out_size, "bilinear")
    rect_m, valid_m = warp(mask.astype(np.uint8), t, t.out_size, "nearest")
    rect_mask = (rect_m > 0) & valid_m & valid_i
    return np.where(valid_i, rect_i, 0.0), rect_mask


def lift_flow_to_correspondences(flow: Flow1D, t: RectifyTransform, rectified_mask: np.ndarray):
    """Map rectified displacements back to pixel pairs on the original image.

    Returns ``(pairs, n_degenerate)`` where ``n_degenerate`` counts pairs dropped
    because both endpoints coincide or fall outside the source image.
    """
    ok = flow.valid & np.asarray(rectified_mask, dtype=bool)
    rows, cols = np.nonzero(ok)
    f = flow.flow[rows, cols]
    r = np.stack([cols, rows], axis=1).astype(float)
    r2 = r + np.stack([f, np.zeros_like(f)], axis=1)
    p = t.inverse(r)
    q = t.inverse(r2)
    score = None if flow.score is None else flow.score[rows, cols]
    pairs, dropped = CorrespondenceSet(p, q, score).validated(*t.src_size)
    return pairs, dropped
