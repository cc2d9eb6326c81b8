"""Synthetic mirror-symmetric scenes and noise models.

Objects are unions of primitives in an object frame whose yz-plane is the
symmetry plane; every primitive ``f`` contributes ``min(f(x), f(Px))`` so the
signed distance is exactly invariant under reflection. Scenes are ray cast
along the camera rays, giving exact depth, normals and masks.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .geometry import CameraPose
from .imaging import CorrespondenceSet, Flow1D, Scene, interpolate_depth
from .symmetry import cycle_errors

FAMILIES = ("box-union", "mirrored-extrusion", "mirrored-superellipsoid-union")
VISIBILITY_TOL = 0.005


class GenerationError(RuntimeError):
    """The sampled camera does not see the object; resample."""


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator keyed by a seed and a path of names or integers."""
    key = [int(seed)]
    for n in names:
        key.append(zlib.crc32(n.encode()) if isinstance(n, str) else int(n))
    return np.random.default_rng(np.random.SeedSequence(key))


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


class Box:
    def __init__(self, center, half, yaw=0.0):
        self.center = np.asarray(center, dtype=float)
        self.half = np.asarray(half, dtype=float)
        self.R = _yaw_matrix(yaw)

    def sdf(self, x):
        q = np.abs((x - self.center) @ self.R) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def normal(self, x):
        local = (x - self.center) @ self.R
        q = np.abs(local) - self.half
        sign = np.where(local < 0, -1.0, 1.0)
        out = np.maximum(q, 0.0)
        n_out = out * sign
        # inside (or exactly on a face): the axis of the nearest face
        k = np.argmax(q, axis=-1)
        n_in = np.zeros_like(local)
        np.put_along_axis(n_in, k[..., None], np.take_along_axis(sign, k[..., None], axis=-1), axis=-1)
        n = np.where((out > 0).any(axis=-1, keepdims=True), n_out, n_in)
        n = n / np.linalg.norm(n, axis=-1, keepdims=True)
        return n @ self.R.T


class Superellipsoid:
    """``(|x/a|^e + |y/b|^e + |z/c|^e)^(1/e) = 1`` with ``e >= 2``; the distance bound is scaled by ``min(a, b, c)``."""

    def __init__(self, center, radii, exponent=2.0):
        self.center = np.asarray(center, dtype=float)
        self.radii = np.asarray(radii, dtype=float)
        self.e = float(exponent)

    def _g(self, x):
        u = np.abs(x - self.center) / self.radii
        return (u**self.e).sum(axis=-1) ** (1.0 / self.e)

    def sdf(self, x):
        return (self._g(x) - 1.0) * self.radii.min()

    def normal(self, x):
        d = x - self.center
        u = np.abs(d) / self.radii
        grad = np.sign(d) * u ** (self.e - 1.0) / self.radii
        return grad / np.linalg.norm(grad, axis=-1, keepdims=True)


class Extrusion:
    """Polygon in the xz-plane (mirrored half-profile) extruded along y."""

    def __init__(self, half_profile, y_center, y_half):
        half = np.asarray(half_profile, dtype=float)
        # half-profile vertices have x >= 0, ordered by z; the mirror closes the loop
        mirrored = half[-2:0:-1] * np.array([-1.0, 1.0])
        self.poly = np.concatenate([half, mirrored])
        self.yc = float(y_center)
        self.yh = float(y_half)

    def _sdf2(self, px, pz):
        v = self.poly
        d = (px - v[0, 0]) ** 2 + (pz - v[0, 1]) ** 2
        sign = np.ones_like(px)
        j = len(v) - 1
        for i in range(len(v)):
            e = v[j] - v[i]
            wx, wz = px - v[i, 0], pz - v[i, 1]
            t = np.clip((wx * e[0] + wz * e[1]) / (e @ e), 0.0, 1.0)
            bx, bz = wx - e[0] * t, wz - e[1] * t
            d = np.minimum(d, bx * bx + bz * bz)
            c1 = pz >= v[i, 1]
            c2 = pz < v[j, 1]
            c3 = e[0] * wz > e[1] * wx
            flip = (c1 & c2 & c3) | (~c1 & ~c2 & ~c3)
            sign = np.where(flip, -sign, sign)
            j = i
        return sign * np.sqrt(d)

    def sdf(self, x):
        d2 = self._sdf2(x[..., 0], x[..., 2])
        dy = np.abs(x[..., 1] - self.yc) - self.yh
        w = np.stack([d2, dy], axis=-1)
        return np.minimum(w.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(w, 0.0), axis=-1)

    def normal(self, x, h=1e-7):
        g = np.stack(
            [(self.sdf(x + h * e) - self.sdf(x - h * e)) / (2 * h) for e in np.eye(3)], axis=-1
        )
        return g / np.linalg.norm(g, axis=-1, keepdims=True)


def make_primitive(rec: dict):
    kind = rec["type"]
    if kind == "box":
        return Box(rec["center"], rec["half"], rec.get("yaw", 0.0))
    if kind == "superellipsoid":
        return Superellipsoid(rec["center"], rec["radii"], rec.get("exponent", 2.0))
    if kind == "extrusion":
        return Extrusion(rec["half_profile"], rec["y_center"], rec["y_half"])
    raise ValueError(f"unknown primitive type {kind!r}")


class SymmetricShape:
    """Union of primitives and their mirror twins, placed at ``(0, y0, z0)`` in the world."""

    def __init__(self, parts, center=(0.0, 0.0)):
        self.prims = [make_primitive(p) for p in parts]
        self.offset = np.array([0.0, center[0], center[1]])

    def _all(self, x):
        local = x - self.offset
        mirrored = geo.reflect(local)
        return np.stack([f for p in self.prims for f in (p.sdf(local), p.sdf(mirrored))], axis=0)

    def sdf(self, x):
        return self._all(np.asarray(x, dtype=float)).min(axis=0)

    def normal(self, x):
        x = np.asarray(x, dtype=float)
        d = self._all(x)
        k = np.argmin(d, axis=0)
        local = x - self.offset
        mirrored = geo.reflect(local)
        n = np.zeros_like(x)
        for i, p in enumerate(self.prims):
            for twin, pts in ((0, local), (1, mirrored)):
                sel = k == 2 * i + twin
                if sel.any():
                    ni = p.normal(pts[sel])
                    n[sel] = geo.reflect(ni) if twin else ni
        return n


# ---------------------------------------------------------------------------
# Scene specification
# ---------------------------------------------------------------------------


@dataclass
class CameraRanges:
    yaw_deg: tuple = (-35.0, 35.0)
    pitch_deg: tuple = (-25.0, 25.0)
    roll_deg: tuple = (-8.0, 8.0)
    s: tuple = (0.4, 0.6)
    # distance in units of (object radius / s)
    distance: tuple = (1.25, 1.5)
    tx_jitter: tuple = (-0.05, 0.05)
    min_abs_yaw_deg: float = 0.0
    min_abs_pitch_deg: float = 0.0


@dataclass
class SceneSpec:
    family: str = "box-union"
    parts: list = field(default_factory=list)
    center: tuple = (0.0, 3.0)
    image_size: tuple = (128, 128)
    camera_ranges: CameraRanges = field(default_factory=CameraRanges)
    seed: int = 0
    light: tuple = (0.0, 0.6, -0.8)
    albedo_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "camera_ranges" in d and isinstance(d["camera_ranges"], dict):
            d["camera_ranges"] = CameraRanges(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["camera_ranges"].items()})
        for k in ("center", "image_size", "light"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def sample_parts(family: str, rng: np.random.Generator) -> list:
    if family == "box-union":
        parts = [
            {
                "type": "box",
                "center": [0.0, 0.0, 0.0],
                "half": [float(rng.uniform(0.35, 0.6)), float(rng.uniform(0.25, 0.5)), float(rng.uniform(0.25, 0.5))],
                "yaw": 0.0,
            }
        ]
        for _ in range(int(rng.integers(1, 4))):
            parts.append(
                {
                    "type": "box",
                    "center": [float(rng.uniform(0.15, 0.55)), float(rng.uniform(-0.4, 0.4)), float(rng.uniform(-0.3, 0.3))],
                    "half": [float(rng.uniform(0.08, 0.25)), float(rng.uniform(0.08, 0.3)), float(rng.uniform(0.1, 0.3))],
                    "yaw": float(rng.uniform(-0.4, 0.4)),
                }
            )
        return parts
    if family == "mirrored-superellipsoid-union":
        parts = [
            {
                "type": "superellipsoid",
                "center": [0.0, 0.0, 0.0],
                "radii": [float(rng.uniform(0.4, 0.65)), float(rng.uniform(0.3, 0.5)), float(rng.uniform(0.3, 0.5))],
                "exponent": float(rng.uniform(2.0, 4.0)),
            }
        ]
        for _ in range(int(rng.integers(1, 3))):
            parts.append(
                {
                    "type": "superellipsoid",
                    "center": [float(rng.uniform(0.25, 0.55)), float(rng.uniform(-0.35, 0.35)), float(rng.uniform(-0.2, 0.2))],
                    "radii": [float(rng.uniform(0.1, 0.25)), float(rng.uniform(0.1, 0.25)), float(rng.uniform(0.1, 0.25))],
                    "exponent": float(rng.uniform(2.0, 3.0)),
                }
            )
        return parts
    if family == "mirrored-extrusion":
        n = int(rng.integers(3, 6))
        zs = np.sort(rng.uniform(-0.45, 0.45, size=n))
        zs[0], zs[-1] = -0.45, 0.45
        xs = rng.uniform(0.2, 0.65, size=n)
        # half-profile runs from the back (x=0) around the +x side to the front (x=0)
        half = [[0.0, 0.5]] + [[float(x), float(z)] for x, z in zip(xs, zs[::-1])] + [[0.0, -0.5]]
        return [{"type": "extrusion", "half_profile": half, "y_center": 0.0, "y_half": float(rng.uniform(0.25, 0.5))}]
    raise ValueError(f"unknown shape family {family!r}")


def object_radius(shape: SymmetricShape, n: int = 24) -> float:
    """Radius of the object's bounding sphere around its frame origin (grid estimate)."""
    g = np.linspace(-1.2, 1.2, n)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3) + shape.offset
    inside = shape.sdf(pts) <= 0
    if not inside.any():
        return 1.0
    return float(np.linalg.norm(pts[inside] - shape.offset, axis=1).max() + 2.4 / n)


def sample_camera(ranges: CameraRanges, radius: float, rng: np.random.Generator):
    """Sample a pose and place the object on the optical axis.

    Returns ``(camera, center)`` with ``center = (y0, z0)`` the object position in
    the world yz-plane. ``t_x`` is fixed by requiring the optical axis to cross
    the symmetry plane at the sampled distance, plus a small jitter.
    """
    def angle(lo_hi, min_abs):
        lo, hi = lo_hi
        for _ in range(1000):
            a = rng.uniform(lo, hi)
            if abs(a) >= min_abs:
                return np.radians(a)
        raise GenerationError("cannot satisfy minimum angle")

    yaw = angle(ranges.yaw_deg, ranges.min_abs_yaw_deg)
    pitch = angle(ranges.pitch_deg, ranges.min_abs_pitch_deg)
    roll = np.radians(rng.uniform(*ranges.roll_deg))
    s = rng.uniform(*ranges.s)
    dist = rng.uniform(*ranges.distance) * radius / s
    R = geo.euler_rotation(yaw, pitch, roll)
    axis = R[:, 2]
    t_x = -dist * axis[0] + rng.uniform(*ranges.tx_jitter)
    center = (float(dist * axis[1]), float(dist * axis[2]))
    return CameraPose(R, t_x, s), center


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def pixel_grid(width: int, height: int):
    rows, cols = np.mgrid[0:height, 0:width]
    x, y = geo.normalize_pixels(cols, rows, width, height)
    return x, y


def ray_cast(shape: SymmetricShape, cam: CameraPose, width: int, height: int, max_steps: int = 400):
    """Hit distance along each unit ray (NaN for misses), plus the unit directions."""
    x, y = pixel_grid(width, height)
    ray = geo.ray_direction(x, y, cam.s)
    dirs = ray @ cam.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    dirs = dirs.reshape(-1, 3)
    origin = cam.translation
    t = np.zeros(len(dirs))
    active = np.ones(len(dirs), dtype=bool)
    converged = np.zeros(len(dirs), dtype=bool)
    t_max = 4.0 * (np.linalg.norm(shape.offset - origin) + 2.0)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        d = shape.sdf(origin + t[idx, None] * dirs[idx])
        hit = d < 1e-5
        converged[idx[hit]] = True
        active[idx[hit]] = False
        t[idx[~hit]] += d[~hit]
        gone = t[idx] > t_max
        active[idx[gone]] = False
    # bracket the crossing and bisect; rays that only graze the surface are misses
    t_hit = np.full(len(dirs), np.nan)
    idx = np.nonzero(converged)[0]
    lo = t[idx]
    hi = lo.copy()
    found = np.zeros(len(idx), dtype=bool)
    step = 1e-5
    for _ in range(12):
        todo = ~found
        hi[todo] = lo[todo] + step
        f = shape.sdf(origin + hi[todo, None] * dirs[idx[todo]])
        found[np.nonzero(todo)[0][f < 0]] = True
        step *= 2.0
    lo, hi, idx = lo[found], hi[found], idx[found]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        f = shape.sdf(origin + mid[:, None] * dirs[idx])
        inside = f < 0
        hi = np.where(inside, mid, hi)
        lo = np.where(inside, lo, mid)
    t_hit[idx] = 0.5 * (lo + hi)
    return t_hit.reshape(height, width), dirs.reshape(height, width, 3)


ALBEDO_CELL = 0.08
ALBEDO_LATTICE = 64


def albedo(points: np.ndarray, seed: int) -> np.ndarray:
    """Mirror-symmetric value-noise texture (depends on |x|, y, z).

    Random lattice values are interpolated by cubic splines at two octaves;
    unlike a sum of a few sinusoids this has no local mirror axes, so mirrored
    patches only match at the true counterpart.
    """
    rng = substream(seed, "albedo")
    lattice = rng.normal(size=(ALBEDO_LATTICE,) * 3)
    u = np.stack([np.abs(points[..., 0]), points[..., 1], points[..., 2]], axis=-1)
    c = (u.reshape(-1, 3) / ALBEDO_CELL).T
    v = ndimage.map_coordinates(lattice, c, order=3, mode="grid-wrap")
    v = v + 0.5 * ndimage.map_coordinates(lattice[::-1], 2.0 * c, order=3, mode="grid-wrap")
    return (0.5 + 0.12 * v).reshape(u.shape[:-1])


def render(spec: SceneSpec, cam: CameraPose) -> Scene:
    """Ray cast a scene. Raises GenerationError when the mask is empty."""
    width, height = spec.image_size
    shape = SymmetricShape(spec.parts, spec.center)
    t_hit, dirs = ray_cast(shape, cam, width, height)
    mask = np.isfinite(t_hit)
    if not mask.any():
        raise GenerationError("camera does not see the object")
    x, y = pixel_grid(width, height)
    norm = np.sqrt(1.0 + (cam.s * x) ** 2 + (cam.s * y) ** 2)
    depth = np.where(mask, np.nan_to_num(t_hit) / norm, 0.0)
    points = cam.translation + np.nan_to_num(t_hit)[..., None] * dirs
    n_world = np.zeros((height, width, 3))
    n_world[mask] = shape.normal(points[mask])
    # orient toward the camera
    flip = (n_world * dirs).sum(axis=-1) > 0
    n_world[flip] *= -1
    n_cam = n_world @ cam.rotation
    light = np.asarray(spec.light, dtype=float)
    light = light / np.linalg.norm(light)
    shade = 0.3 + 0.7 * np.clip(n_world @ light, 0.0, None)
    intensity = np.where(mask, albedo(points, spec.albedo_seed) * shade, 0.0)
    intensity = np.clip(intensity, 0.0, 1.0)

    world = points[mask]
    lo, hi = world.min(axis=0), world.max(axis=0)
    object_size = float(np.linalg.norm(hi - lo))
    corr = symmetric_pairs(depth, mask, cam, object_size)
    extra = {
        "object_size": object_size,
        "scene_spec": spec.to_dict(),
    }
    return Scene(depth, n_cam, mask, intensity, corr, cam, spec.seed, None, extra)


def symmetric_pairs(depth: np.ndarray, mask: np.ndarray, cam: CameraPose, object_size: float) -> CorrespondenceSet:
    """Ground-truth mirror correspondences for every visible masked pixel."""
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    x, y = geo.normalize_pixels(cols, rows, w, h)
    pts = geo.back_project(x, y, depth[rows, cols], cam)
    qx, qy, qz = geo.project(geo.reflect(pts), cam)
    qc, qr = geo.denormalize_pixels(qx, qy, w, h)
    q = np.stack([qc, qr], axis=1)
    ok = (qz > 0) & np.isfinite(q).all(axis=1)
    z_buf, found = interpolate_depth(depth, mask, np.where(ok[:, None], q, 0.0), partial=True)
    ok &= found
    dz = np.abs(np.where(ok, z_buf, 0.0) - qz)
    ray_len = np.sqrt(1.0 + (cam.s * qx) ** 2 + (cam.s * qy) ** 2)
    ok &= (dz <= VISIBILITY_TOL * qz) & (dz * ray_len <= VISIBILITY_TOL * object_size)
    p = np.stack([cols, rows], axis=1).astype(float)
    ok &= np.any(p != q, axis=1)
    return mutually_visible(CorrespondenceSet(p[ok], q[ok]))


def mutually_visible(pairs: CorrespondenceSet) -> CorrespondenceSet:
    """Drop pairs whose target has no pair starting within the chain radius, until none remain.

    Near self-occlusions a point can see its mirror while the pixels around
    the mirror cannot see back; such one-way pairs have no cycle.
    """
    while len(pairs):
        keep = np.isfinite(cycle_errors(pairs))
        if keep.all():
            break
        pairs = pairs.subset(keep)
    return pairs


def generate_scene(family: str, index: int, seed: int, size=(128, 128), ranges: Optional[CameraRanges] = None, max_tries: int = 20) -> Scene:
    """Sample and render scene ``index`` of a seeded dataset.

    The camera is resampled until the object is visible and does not touch the
    image border.
    """
    ranges = ranges or CameraRanges()
    rng = substream(seed, "scene", index)
    parts = sample_parts(family, rng)
    radius = object_radius(SymmetricShape(parts))
    for _ in range(max_tries):
        cam, center = sample_camera(ranges, radius, rng)
        spec = SceneSpec(family, parts, center, tuple(size), ranges, seed=int(rng.integers(2**31)), albedo_seed=int(rng.integers(2**31)))
        try:
            scene = render(spec, cam)
        except GenerationError:
            continue
        m = scene.mask
        if m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any():
            continue
        return scene
    raise GenerationError(f"no valid camera after {max_tries} tries")


def fronto_box_scene(size=(64, 48), half=(0.5, 0.3, 0.3), depth: float = 3.0, s: float = 0.5) -> Scene:
    """A single box on the symmetry plane seen head-on; only its front face is visible."""
    spec = SceneSpec("box-union", [{"type": "box", "center": [0.0, 0.0, 0.0], "half": list(half), "yaw": 0.0}], (0.0, depth + half[2]), tuple(size))
    return render(spec, CameraPose.identity(s))


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------


@dataclass
class NoiseSpec:
    depth_log_sigma: float = 0.2
    depth_lowfreq_amp: float = 0.1
    normal_angle_sigma: float = 10.0
    corr_jitter_sigma: float = 2.0
    corr_outlier_frac: float = 0.1
    pose_rot_sigma: float = 2.0
    pose_tx_sigma: float = 0.02
    pose_s_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "seed" and v < 0:
                raise ValueError(f"{k} must be non-negative")
        if self.corr_outlier_frac > 1:
            raise ValueError("corr_outlier_frac must be in [0, 1]")

    @classmethod
    def zero(cls, seed: int = 0) -> "NoiseSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(**d)


def _random_perpendicular(v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    a = rng.normal(size=v.shape)
    a -= (a * v).sum(axis=-1, keepdims=True) * v
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.where(n > 0, n, 1.0)


def rotate_about(v: np.ndarray, axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation of vectors ``v`` about unit ``axis`` by ``angle`` (radians)."""
    c = np.cos(angle)[..., None]
    s = np.sin(angle)[..., None]
    return v * c + np.cross(axis, v) * s + axis * (axis * v).sum(axis=-1, keepdims=True) * (1 - c)


def smooth_field(shape, rng: np.random.Generator, n_waves: int = 4, mask=None) -> np.ndarray:
    """Random low-frequency field over the pixel grid with unit RMS over ``mask`` (whole grid if None)."""
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w]
    u, v = cols / max(h, w), rows / max(h, w)
    f = np.zeros(shape)
    for _ in range(n_waves):
        ang = rng.uniform(0, 2 * np.pi)
        k = rng.uniform(0.5, 1.5) * 2 * np.pi
        f += rng.uniform(0.5, 1.0) * np.sin(k * (np.cos(ang) * u + np.sin(ang) * v) + rng.uniform(0, 2 * np.pi))
    region = f if mask is None else f[np.asarray(mask, dtype=bool)]
    rms = np.sqrt(np.mean(region**2)) if region.size else 0.0
    return f / rms if rms > 0 else f


def corrupt(scene: Scene, noise: NoiseSpec, return_info: bool = False):
    """Simulate predicted inputs: noisy depth, normals, correspondences and camera.

    All draws come from ``(noise.seed, scene.seed)``. With ``return_info`` the
    indices of outlier correspondences are returned alongside the scene.
    """
    rng = substream(noise.seed, "noise", scene.seed)
    mask = scene.mask
    depth = scene.depth.copy()
    if noise.depth_log_sigma > 0 or noise.depth_lowfreq_amp > 0:
        eps = rng.normal(0.0, noise.depth_log_sigma, size=depth.shape) if noise.depth_log_sigma > 0 else 0.0
        bias = noise.depth_lowfreq_amp * smooth_field(depth.shape, rng, mask=mask) if noise.depth_lowfreq_amp > 0 else 0.0
        depth = np.where(mask, depth * np.exp(eps + bias), 0.0)

    normals = scene.normals.copy()
    if noise.normal_angle_sigma > 0:
        n = normals[mask]
        axis = _random_perpendicular(n, rng)
        ang = rng.normal(0.0, np.radians(noise.normal_angle_sigma), size=len(n))
        n = rotate_about(n, axis, ang)
        normals[mask] = n / np.linalg.norm(n, axis=1, keepdims=True)

    corr = scene.correspondences
    p, q = corr.p.copy(), corr.q.copy()
    outliers = np.zeros(0, dtype=int)
    if len(p):
        if noise.corr_jitter_sigma > 0:
            q = q + rng.normal(0.0, noise.corr_jitter_sigma, size=q.shape)
        if noise.corr_outlier_frac > 0:
            n_out = int(round(noise.corr_outlier_frac * len(p)))
            outliers = np.sort(rng.choice(len(p), size=n_out, replace=False))
            rows, cols = np.nonzero(mask)
            pick = rng.integers(0, len(rows), size=n_out)
            q[outliers] = np.stack([cols[pick], rows[pick]], axis=1) + rng.uniform(-0.5, 0.5, size=(n_out, 2))
        q[:, 0] = np.clip(q[:, 0], 0, scene.width - 1)
        q[:, 1] = np.clip(q[:, 1], 0, scene.height - 1)
    new_corr = CorrespondenceSet(p, q, corr.score)

    cam = scene.camera
    if noise.pose_rot_sigma > 0 or noise.pose_tx_sigma > 0 or noise.pose_s_sigma > 0:
        R = cam.rotation
        if noise.pose_rot_sigma > 0:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            R = geo.exp_map(axis * np.radians(rng.normal(0.0, noise.pose_rot_sigma))) @ R
        t_x = cam.t_x + (rng.normal(0.0, noise.pose_tx_sigma) if noise.pose_tx_sigma > 0 else 0.0)
        s = cam.s + (rng.normal(0.0, noise.pose_s_sigma) if noise.pose_s_sigma > 0 else 0.0)
        cam = CameraPose(R, t_x, max(s, 0.05))

    out = Scene(depth, normals, mask.copy(), scene.intensity.copy(), new_corr, cam, scene.seed, noise.to_dict(), dict(scene.extra))
    if return_info:
        return out, {"outliers": outliers}
    return out


# ---------------------------------------------------------------------------
# Ground truth on the rectified image
# ---------------------------------------------------------------------------


def ground_truth_flow(scene: Scene, transform) -> Flow1D:
    """Exact mirror displacement for every rectified pixel whose preimage is visible.

    Also stores the row offset of the mirror point in ``score`` (for diagnostics).
    """
    out_w, out_h = transform.out_size
    rows, cols = np.mgrid[0:out_h, 0:out_w]
    r = np.stack([cols.ravel(), rows.ravel()], axis=1).astype(float)
    src = transform.inverse(r)
    z, ok = interpolate_depth(scene.depth, scene.mask, src, partial=True)
    w, h = scene.width, scene.height
    x, y = geo.normalize_pixels(src[:, 0], src[:, 1], w, h)
    ok &= np.isfinite(z)
    pts = geo.back_project(x[ok], y[ok], z[ok], scene.camera)
    qx, qy, qz = geo.project(geo.reflect(pts), scene.camera)
    qc, qr = geo.denormalize_pixels(qx, qy, w, h)
    q = np.stack([qc, qr], axis=1)
    zq, found = interpolate_depth(scene.depth, scene.mask, q, partial=True)
    vis = found & (np.abs(np.nan_to_num(zq) - qz) <= VISIBILITY_TOL * qz)
    rq = transform.forward(q)
    flow = np.zeros(out_h * out_w)
    drow = np.zeros(out_h * out_w)
    valid = np.zeros(out_h * out_w, dtype=bool)
    ids = np.nonzero(ok)[0]
    flow[ids] = rq[:, 0] - r[ids, 0]
    drow[ids] = rq[:, 1] - r[ids, 1]
    valid[ids] = vis
    return Flow1D(flow.reshape(out_h, out_w), valid.reshape(out_h, out_w), drow.reshape(out_h, out_w))
