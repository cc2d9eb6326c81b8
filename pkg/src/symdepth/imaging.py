"""Grid containers and file I/O: PFM, binary PGM masks, correspondence lists, scene manifests."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import CameraPose


class FormatError(ValueError):
    """Malformed file contents. ``offset`` is the byte offset (or line number) of the problem."""

    def __init__(self, message: str, offset: Optional[int] = None, path=None):
        self.offset = offset
        self.path = str(path) if path is not None else None
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class SchemaError(FormatError):
    """Manifest missing a required field; ``field`` holds its dotted name."""

    def __init__(self, field_name: str, path=None):
        self.field = field_name
        super().__init__(f"missing required field {field_name!r}", path=path)


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    """Write a (H, W) or (H, W, 3) array as little-endian float32 PFM."""
    data = np.asarray(data)
    if data.ndim == 2:
        tag = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {data.shape}")
    h, w = data.shape[:2]
    payload = np.ascontiguousarray(np.flipud(data).astype("<f4"))
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(payload.tobytes())


def _read_header_line(buf: bytes, pos: int, path) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise FormatError("truncated header", pos, path)
    try:
        return buf[pos:end].decode("ascii").strip(), end + 1
    except UnicodeDecodeError:
        raise FormatError("non-ascii header", pos, path) from None


def read_pfm(path, channels: Optional[int] = None, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Read a PFM file into a float32 array with row 0 at the top.

    ``channels`` (1 or 3) rejects files of the other kind. If ``mask`` is given,
    NaN or infinite values on masked pixels are a format error.
    """
    buf = Path(path).read_bytes()
    tag, pos = _read_header_line(buf, 0, path)
    if tag == "Pf":
        nch = 1
    elif tag == "PF":
        nch = 3
    else:
        raise FormatError(f"bad PFM tag {tag!r}", 0, path)
    if channels is not None and channels != nch:
        raise FormatError(f"expected {channels}-channel PFM, file has {nch}", 0, path)
    dims_at = pos
    dims, pos = _read_header_line(buf, pos, path)
    m = re.fullmatch(r"(\d+)\s+(\d+)", dims)
    if not m:
        raise FormatError(f"bad PFM dimensions {dims!r}", dims_at, path)
    w, h = int(m.group(1)), int(m.group(2))
    if w == 0 or h == 0:
        raise FormatError("empty PFM", dims_at, path)
    scale_at = pos
    scale_s, pos = _read_header_line(buf, pos, path)
    try:
        scale = float(scale_s)
    except ValueError:
        raise FormatError(f"bad PFM scale {scale_s!r}", scale_at, path) from None
    if scale == 0.0 or not np.isfinite(scale):
        raise FormatError("PFM scale must be finite and nonzero", scale_at, path)
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * nch
    if len(buf) - pos != 4 * n:
        raise FormatError(
            f"payload is {len(buf) - pos} bytes, header declares {4 * n}", pos, path
        )
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=pos).astype(np.float32)
    data = data.reshape((h, w, nch) if nch == 3 else (h, w))
    data = np.flipud(data).copy()
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (h, w):
            raise FormatError(f"mask shape {mask.shape} does not match {(h, w)}", None, path)
        vals = data if nch == 1 else data.reshape(h, w, 3)
        bad = ~np.isfinite(vals)
        if nch == 3:
            bad = bad.any(axis=2)
        bad &= mask
        if bad.any():
            r, c = np.argwhere(bad)[0]
            # rows are stored bottom-to-top
            offset = pos + 4 * nch * ((h - 1 - r) * w + c)
            raise FormatError(f"non-finite value at masked pixel (col={c}, row={r})", int(offset), path)
    return data


# ---------------------------------------------------------------------------
# PGM masks
# ---------------------------------------------------------------------------


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write((mask.astype(np.uint8) * 255).tobytes())


def read_mask(path) -> np.ndarray:
    """Read a binary P5 PGM; any nonzero value is object."""
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", start, path)
        tokens.append((buf[start:pos], start))
    pos += 1  # single whitespace byte after maxval
    if tokens[0][0] != b"P5":
        raise FormatError(f"bad PGM tag {tokens[0][0]!r}", 0, path)
    try:
        w, h, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError:
        raise FormatError("bad PGM header values", tokens[1][1], path) from None
    if maxval != 255:
        raise FormatError(f"mask PGM must have maxval 255, got {maxval}", tokens[3][1], path)
    if len(buf) - pos != w * h:
        raise FormatError(f"payload is {len(buf) - pos} bytes, header declares {w * h}", pos, path)
    return np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(h, w) > 0


# ---------------------------------------------------------------------------
# Correspondences
# ---------------------------------------------------------------------------


@dataclass
class CorrespondenceSet:
    """Pixel pairs ``(p, q)`` as (N, 2) arrays of (col, row); optional per-pair score."""

    p: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    q: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    score: Optional[np.ndarray] = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 2)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 2)
        if self.p.shape != self.q.shape:
            raise ValueError("p and q must have the same length")
        if self.score is not None:
            self.score = np.asarray(self.score, dtype=float).reshape(-1)
            if len(self.score) != len(self.p):
                raise ValueError("score length mismatch")

    def __len__(self) -> int:
        return len(self.p)

    def subset(self, keep) -> "CorrespondenceSet":
        keep = np.asarray(keep)
        return CorrespondenceSet(
            self.p[keep], self.q[keep], None if self.score is None else self.score[keep]
        )

    def validated(self, width: int, height: int) -> tuple["CorrespondenceSet", int]:
        """Drop pairs outside the image or with p == q; returns (set, n_dropped)."""
        inside = lambda a: (a[:, 0] >= 0) & (a[:, 0] <= width - 1) & (a[:, 1] >= 0) & (a[:, 1] <= height - 1)
        keep = inside(self.p) & inside(self.q) & np.any(self.p != self.q, axis=1)
        return self.subset(keep), int((~keep).sum())


def write_correspondences(path, corr: CorrespondenceSet) -> None:
    lines = ["# p_col p_row q_col q_row" + (" score" if corr.score is not None else "")]
    for i in range(len(corr)):
        vals = [*corr.p[i], *corr.q[i]]
        if corr.score is not None:
            vals.append(corr.score[i])
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_correspondences(path) -> CorrespondenceSet:
    """Parse ``p_col p_row q_col q_row [score]`` lines; ``#`` starts a comment."""
    rows = []
    ncols = None
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as e:
        raise FormatError("correspondence file is not text", e.start, path) from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if len(toks) not in (4, 5):
            raise FormatError(f"expected 4 or 5 values, got {len(toks)}", lineno, path)
        try:
            vals = [float(t) for t in toks]
        except ValueError:
            raise FormatError(f"non-numeric token on line {lineno}", lineno, path) from None
        if not all(np.isfinite(vals)):
            raise FormatError(f"non-finite value on line {lineno}", lineno, path)
        if ncols is None:
            ncols = len(vals)
        elif ncols != len(vals):
            raise FormatError(f"inconsistent column count on line {lineno}", lineno, path)
        rows.append(vals)
    if not rows:
        return CorrespondenceSet()
    a = np.array(rows)
    return CorrespondenceSet(a[:, 0:2], a[:, 2:4], a[:, 4] if ncols == 5 else None)


# ---------------------------------------------------------------------------
# Flow on the rectified image
# ---------------------------------------------------------------------------


@dataclass
class Flow1D:
    """Horizontal displacement per rectified pixel, with validity and match score."""

    flow: np.ndarray
    valid: np.ndarray
    score: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.flow.shape


# ---------------------------------------------------------------------------
# Manifests and scenes
# ---------------------------------------------------------------------------

FILE_KEYS = ("depth", "normal", "mask", "intensity", "correspondences")
_KNOWN = ("size", "camera", "files", "noise", "seed")


@dataclass
class SceneRecord:
    width: int
    height: int
    camera: CameraPose
    files: dict
    seed: int
    noise: Optional[dict] = None
    extra: dict = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), compare=False)

    def path(self, key: str) -> Path:
        return self.base_dir / self.files[key]

    def to_dict(self) -> dict:
        cam = self.camera
        doc = dict(self.extra)
        doc.update(
            size=[self.width, self.height],
            camera={
                **self.extra_camera,
                "quaternion": [float(v) for v in self.quaternion],
                "t_x": cam.t_x,
                "s": cam.s,
            },
            files=dict(self.files),
            noise=self.noise,
            seed=self.seed,
        )
        return doc

    # the quaternion as read is kept so a read/write cycle does not re-derive it
    quaternion: tuple = field(default=(), compare=False)
    extra_camera: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.quaternion:
            self.quaternion = tuple(float(v) for v in self.camera.quaternion.as_array())


def _require(doc: dict, dotted: str, path):
    cur = doc
    for part in dotted.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise SchemaError(dotted, path)
        cur = cur[part]
    return cur


def manifest_from_dict(doc: dict, base_dir=Path("."), path=None) -> SceneRecord:
    size = _require(doc, "size", path)
    q = _require(doc, "camera.quaternion", path)
    t_x = _require(doc, "camera.t_x", path)
    s = _require(doc, "camera.s", path)
    files = _require(doc, "files", path)
    for k in FILE_KEYS:
        _require(doc, f"files.{k}", path)
    seed = _require(doc, "seed", path)
    try:
        w, h = int(size[0]), int(size[1])
        cam = CameraPose.from_quaternion([float(v) for v in q], float(t_x), float(s))
    except (TypeError, ValueError, IndexError) as e:
        raise FormatError(f"invalid manifest value: {e}", None, path) from None
    extra = {k: v for k, v in doc.items() if k not in _KNOWN}
    extra_cam = {k: v for k, v in doc["camera"].items() if k not in ("quaternion", "t_x", "s")}
    return SceneRecord(
        w, h, cam, dict(files), int(seed), doc.get("noise"), extra, Path(base_dir),
        quaternion=tuple(float(v) for v in q), extra_camera=extra_cam,
    )


def read_manifest(path) -> SceneRecord:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg}", e.pos, path) from None
    if not isinstance(doc, dict):
        raise FormatError("manifest must be a JSON object", 0, path)
    return manifest_from_dict(doc, path.parent, path)


def canonical_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_manifest(path, record: SceneRecord) -> None:
    Path(path).write_text(canonical_json(record.to_dict()))


@dataclass
class Scene:
    """All per-scene signals in memory. ``depth`` is 0 off the mask."""

    depth: np.ndarray
    normals: np.ndarray
    mask: np.ndarray
    intensity: np.ndarray
    correspondences: CorrespondenceSet
    camera: CameraPose
    seed: int = 0
    noise: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]


DEFAULT_FILES = {
    "depth": "depth.pfm",
    "normal": "normals.pfm",
    "mask": "mask.pgm",
    "intensity": "intensity.pfm",
    "correspondences": "corr.txt",
}


def save_scene(scene: Scene, directory, name: str = "manifest.json") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    depth = np.where(scene.mask, scene.depth, 0.0)
    write_pfm(directory / DEFAULT_FILES["depth"], depth)
    write_pfm(directory / DEFAULT_FILES["normal"], np.where(scene.mask[..., None], scene.normals, 0.0))
    write_mask(directory / DEFAULT_FILES["mask"], scene.mask)
    write_pfm(directory / DEFAULT_FILES["intensity"], np.clip(scene.intensity, 0.0, 1.0))
    write_correspondences(directory / DEFAULT_FILES["correspondences"], scene.correspondences)
    rec = SceneRecord(
        scene.width, scene.height, scene.camera, dict(DEFAULT_FILES), scene.seed,
        scene.noise, dict(scene.extra), directory,
    )
    write_manifest(directory / name, rec)
    return directory / name


def load_scene(manifest_path) -> Scene:
    rec = read_manifest(manifest_path)
    mask = read_mask(rec.path("mask"))
    if mask.shape != (rec.height, rec.width):
        raise FormatError(f"mask is {mask.shape[::-1]}, manifest says {(rec.width, rec.height)}", None, rec.path("mask"))
    depth = read_pfm(rec.path("depth"), channels=1, mask=mask)
    normals = read_pfm(rec.path("normal"), channels=3, mask=mask)
    intensity = read_pfm(rec.path("intensity"), channels=1)
    for name, arr in (("depth", depth), ("normal", normals), ("intensity", intensity)):
        if arr.shape[:2] != mask.shape:
            raise FormatError(f"{name} grid size disagrees with mask", None, rec.path(name))
    if np.any(depth[mask] <= 0):
        raise FormatError("non-positive depth on masked pixel", None, rec.path("depth"))
    corr = read_correspondences(rec.path("correspondences"))
    return Scene(depth, normals, mask, intensity, corr, rec.camera, rec.seed, rec.noise, dict(rec.extra))


# ---------------------------------------------------------------------------
# Sub-pixel lookups
# ---------------------------------------------------------------------------


def bilinear_support(pts, mask: np.ndarray):
    """Bilinear stencil of fractional (col, row) points on a masked grid.

    Returns ``(rows, cols, weights, ok)`` with shapes (N, 4), (N, 4), (N, 4), (N,).
    Coordinates within 1e-9 of an integer are snapped so pixel centers get a
    single unit weight. ``ok`` is False when a neighbor with nonzero weight is
    off the mask or outside the grid.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    h, w = mask.shape
    x, y = pts[:, 0], pts[:, 1]
    rx, ry = np.round(x), np.round(y)
    x = np.where(np.abs(x - rx) < 1e-9, rx, x)
    y = np.where(np.abs(y - ry) < 1e-9, ry, y)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx, fy = x - x0, y - y0
    cols = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1)
    rows = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    used = weights > 0
    inside = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    cc = np.clip(cols, 0, w - 1)
    rr = np.clip(rows, 0, h - 1)
    on_mask = inside & mask[rr, cc]
    ok = np.all(~used | on_mask, axis=1) & np.isfinite(pts).all(axis=1)
    # unused neighbors point at a valid cell so callers can index safely
    rows = np.where(used & on_mask, rows, rr)
    cols = np.where(used & on_mask, cols, cc)
    weights = np.where(used, weights, 0.0)
    return rows, cols, weights, ok


def interpolate_depth(depth: np.ndarray, mask: np.ndarray, pts, partial: bool = False):
    """Depth at fractional points by bilinear interpolation of inverse depth.

    Inverse depth is affine in image coordinates over a plane, so this is exact
    on planar patches. Returns ``(z, ok)``; ``z`` is NaN where ``ok`` is False.
    With ``partial`` a stencil that leaves the mask is renormalized over its
    masked neighbors (approximate, used along silhouettes).
    """
    rows, cols, wts, ok = bilinear_support(pts, mask)
    d = depth[rows, cols].astype(float)
    use = (wts > 0) & (d > 0) & mask[rows, cols]
    inv = np.where(use, 1.0 / np.where(use, d, 1.0), 0.0)
    s = (wts * inv).sum(axis=1)
    if partial:
        total = np.where(use, wts, 0.0).sum(axis=1)
        ok = (total > 0) & np.isfinite(np.asarray(pts, dtype=float).reshape(-1, 2)).all(axis=1)
        s = s / np.where(ok, total, 1.0)
    z = np.full(len(ok), np.nan)
    z[ok] = 1.0 / s[ok]
    return z, ok
