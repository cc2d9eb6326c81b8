"""Robust joint refinement of per-pixel depth and camera parameters.

The objective combines three L1-type terms over the masked pixels:

* depth prior   ``sum_p |d_p - dbar_p|`` on ray depths,
* normal term   ``lam * sum_(p,q) |(p - q) . n_p|`` over 8-neighbour edges,
* symmetry term ``mu * sum_(p,q) |P(p) - q|`` over mirror correspondences,

and is minimised by iteratively reweighted least squares: weights are fixed
from the current residuals, then a damped Gauss-Newton step on the weighted
quadratic surrogate is taken with a backtracking line search.

Unknowns are ordered ``[dz_0 .. dz_{N-1}, c_y, c_z, dt_x, ds]`` where ``c`` is
the world-frame rotation increment applied as ``R <- exp([c]x) R``. Rotating
the world about the symmetry-plane normal (world x) leaves every term
unchanged, so ``c_x`` is held at zero to remove that gauge freedom.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import geometry as geo
from .geometry import CameraPose
from .imaging import CorrespondenceSet, bilinear_support

N_CAM = 4  # c_y, c_z, t_x, s
# residual scales below this fraction of the median prior ray depth count as zero
# (float32 storage alone leaves residuals near 1e-7 of the depth)
SIGMA_FLOOR = 1e-6


class SolverError(RuntimeError):
    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class Tradeoffs:
    lam: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0:
            raise ValueError("tradeoffs must be non-negative")


@dataclass
class SolverConfig:
    tradeoffs: Tradeoffs = field(default_factory=Tradeoffs)
    max_outer_iters: int = 30
    gn_steps_per_reweight: int = 1
    converge_tol: float = 1e-6
    damping: float = 1e-8
    line_search_max_halvings: int = 10
    optimize_camera: bool = True
    linear_solver_tol: float = 1e-10
    dense_below: int = 500
    subsample_pairs: bool = True

    def __post_init__(self):
        if isinstance(self.tradeoffs, dict):
            self.tradeoffs = Tradeoffs(**self.tradeoffs)
        if self.max_outer_iters < 1 or self.gn_steps_per_reweight < 1:
            raise ValueError("iteration counts must be positive")
        if self.converge_tol <= 0 or self.damping < 0 or self.linear_solver_tol <= 0:
            raise ValueError("tolerances must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Problem setup
# ---------------------------------------------------------------------------


def pixel_graph(mask: np.ndarray) -> np.ndarray:
    """Directed 8-neighbour edges ``(p, q)`` between masked pixels, as indices
    into the row-major list of masked pixels."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    index = -np.ones(mask.shape, dtype=np.int64)
    index[mask] = np.arange(mask.sum())
    edges = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            src = index[max(0, -dr) : h - max(0, dr), max(0, -dc) : w - max(0, dc)]
            dst = index[max(0, dr) : h + min(0, dr), max(0, dc) : w + min(0, dc)]
            ok = (src >= 0) & (dst >= 0)
            edges.append(np.stack([src[ok], dst[ok]], axis=1))
    e = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    order = np.lexsort((e[:, 1], e[:, 0]))
    return e[order]


def subsample_pairs(corr: CorrespondenceSet) -> np.ndarray:
    """Indices keeping at most one pair per 2x2 block of source pixels (highest score, then first)."""
    if len(corr) == 0:
        return np.zeros(0, dtype=np.int64)
    block = np.floor((corr.p + 0.5) / 2.0).astype(np.int64)
    key = block[:, 0] * 1_000_003 + block[:, 1]
    score = corr.score if corr.score is not None else np.zeros(len(corr))
    order = np.lexsort((np.arange(len(corr)), -score, key))
    first = np.ones(len(order), dtype=bool)
    first[1:] = key[order][1:] != key[order][:-1]
    return np.sort(order[first])


@dataclass
class Endpoints:
    """Bilinear stencils of correspondence endpoints into the masked-pixel list."""

    idx: np.ndarray  # (M, 4)
    wts: np.ndarray  # (M, 4)
    x: np.ndarray  # (M,) normalized coords
    y: np.ndarray


@dataclass
class Problem:
    width: int
    height: int
    mask: np.ndarray
    x: np.ndarray
    y: np.ndarray
    d_bar: np.ndarray
    n_cam: np.ndarray
    edges: np.ndarray
    a: Endpoints
    b: Endpoints
    lam: float
    mu: float
    n_pairs_dropped: int = 0

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def m(self) -> int:
        return len(self.a.x)

    @property
    def depth_scale(self) -> float:
        return float(np.median(self.d_bar))


def _endpoints(pts, mask, index, width, height):
    rows, cols, wts, ok = bilinear_support(pts, mask)
    idx = index[rows, cols]
    # zero-weight slots point at the heaviest neighbour so every index is valid
    heavy = np.take_along_axis(idx, np.argmax(wts, axis=1)[:, None], axis=1)
    idx = np.where(wts > 0, idx, heavy)
    x, y = geo.normalize_pixels(pts[:, 0], pts[:, 1], width, height)
    return idx, wts, x, y, ok


def build_problem(depth_prior, normals_cam, mask, corr: CorrespondenceSet, cam: CameraPose, lam: float, mu: float, subsample: bool = True) -> Problem:
    """Collect the fixed inputs of one refinement.

    The prior ray depths use the initial camera scale. Pairs whose bilinear
    stencil leaves the mask are dropped.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    x, y = geo.normalize_pixels(cols, rows, w, h)
    z_bar = np.asarray(depth_prior, dtype=float)[rows, cols]
    if np.any(~(z_bar > 0)):
        raise ValueError("prior depth must be positive on the mask")
    d_bar = geo.ray_depth(x, y, z_bar, cam.s)
    n_cam = np.asarray(normals_cam, dtype=float)[rows, cols]
    index = -np.ones(mask.shape, dtype=np.int64)
    index[mask] = np.arange(len(rows))
    edges = pixel_graph(mask)

    if corr is None:
        corr = CorrespondenceSet()
    n_in = len(corr)
    if subsample and len(corr):
        corr = corr.subset(subsample_pairs(corr))
    ia, wa, xa, ya, oka = _endpoints(corr.p, mask, index, w, h)
    ib, wb, xb, yb, okb = _endpoints(corr.q, mask, index, w, h)
    keep = oka & okb
    a = Endpoints(ia[keep], wa[keep], xa[keep], ya[keep])
    b = Endpoints(ib[keep], wb[keep], xb[keep], yb[keep])
    return Problem(w, h, mask, x, y, d_bar, n_cam, edges, a, b, float(lam), float(mu), n_in - int(keep.sum()))


# ---------------------------------------------------------------------------
# Residuals and objective
# ---------------------------------------------------------------------------


class Residuals(NamedTuple):
    depth: np.ndarray  # (N,)
    edge: np.ndarray  # (E,)
    sym: np.ndarray  # (M, 3)


def _endpoint_points(ep: Endpoints, z, cam: CameraPose):
    inv = (ep.wts / z[ep.idx]).sum(axis=1)
    ze = 1.0 / inv
    ray = geo.ray_direction(ep.x, ep.y, cam.s)
    X = ze[:, None] * (ray @ cam.rotation.T) + cam.translation
    return X, ze, ray


def residuals(prob: Problem, z, cam: CameraPose) -> Residuals:
    s = cam.s
    norm = np.sqrt(1.0 + (s * prob.x) ** 2 + (s * prob.y) ** 2)
    r_depth = z * norm - prob.d_bar
    ray = geo.ray_direction(prob.x, prob.y, s)
    p_cam = z[:, None] * ray
    i, j = prob.edges[:, 0], prob.edges[:, 1]
    r_edge = ((p_cam[i] - p_cam[j]) * prob.n_cam[i]).sum(axis=1)
    if prob.m:
        Xa, _, _ = _endpoint_points(prob.a, z, cam)
        Xb, _, _ = _endpoint_points(prob.b, z, cam)
        r_sym = geo.reflect(Xa) - Xb
    else:
        r_sym = np.zeros((0, 3))
    return Residuals(r_depth, r_edge, r_sym)


def objective_terms(prob: Problem, res: Residuals):
    f_depth = float(np.abs(res.depth).sum())
    f_normal = float(np.abs(res.edge).sum())
    f_sym = float(np.linalg.norm(res.sym, axis=1).sum())
    total = f_depth + prob.lam * f_normal + prob.mu * f_sym
    return total, f_depth, f_normal, f_sym


def objective(prob: Problem, z, cam: CameraPose):
    """``(total, f_depth, f_normal, f_symmetry)`` of the unweighted robust objective."""
    return objective_terms(prob, residuals(prob, z, cam))


@dataclass
class Weights:
    w_p: np.ndarray
    w_e: np.ndarray
    w_c: np.ndarray
    sigma: float
    converged: bool = False


def update_weights(prob: Problem, res: Residuals) -> Weights:
    """Reweight from the current residuals; sigma is the median of the pooled scaled residuals."""
    rp = np.abs(res.depth)
    re = np.abs(res.edge)
    rc = np.linalg.norm(res.sym, axis=1)
    # terms switched off by a zero tradeoff would only add zeros to the median
    parts = [rp]
    if prob.lam > 0:
        parts.append(np.sqrt(prob.lam) * re)
    if prob.mu > 0:
        parts.append(np.sqrt(prob.mu) * rc)
    pooled = np.concatenate(parts)
    sigma = float(np.median(pooled)) if len(pooled) else 0.0
    if sigma < SIGMA_FLOOR * prob.depth_scale:
        return Weights(np.ones_like(rp), np.ones_like(re), np.ones_like(rc), sigma, True)
    w_p = sigma / np.sqrt(sigma**2 + rp**2)
    w_e = sigma / np.sqrt(sigma**2 + prob.lam * re**2)
    w_c = sigma / np.sqrt(sigma**2 + prob.mu * rc**2)
    return Weights(w_p, w_e, w_c, sigma, False)


def surrogate(prob: Problem, res: Residuals, wts: Weights) -> float:
    """Weighted quadratic the Gauss-Newton step minimises (weights held fixed)."""
    return float(
        (wts.w_p * res.depth**2).sum()
        + prob.lam * (wts.w_e * res.edge**2).sum()
        + prob.mu * (wts.w_c * (res.sym**2).sum(axis=1)).sum()
    )


# ---------------------------------------------------------------------------
# Linearisation
# ---------------------------------------------------------------------------


def jacobian(prob: Problem, z, cam: CameraPose, optimize_camera: bool = True):
    """Sparse Jacobian of the stacked residual vector ``[depth; edge; sym (x,y,z per pair)]``."""
    n, E, M = prob.n, len(prob.edges), prob.m
    s = cam.s
    R = cam.rotation
    ncols = n + (N_CAM if optimize_camera else 0)
    cz, cc = n, n + 2  # column offsets of (c_y, c_z) and (t_x, s)
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(np.asarray(r).ravel())
        cols.append(np.asarray(c).ravel())
        vals.append(np.asarray(v, dtype=float).ravel())

    # depth prior
    rad2 = prob.x**2 + prob.y**2
    norm = np.sqrt(1.0 + s * s * rad2)
    pix = np.arange(n)
    add(pix, pix, norm)
    if optimize_camera:
        add(pix, np.full(n, cc + 1), z * s * rad2 / norm)

    # normal edges (camera-frame form; the rotation cancels)
    i, j = prob.edges[:, 0], prob.edges[:, 1]
    ray = geo.ray_direction(prob.x, prob.y, s)
    nrm = prob.n_cam[i]
    er = n + np.arange(E)
    add(er, i, (ray[i] * nrm).sum(axis=1))
    add(er, j, -(ray[j] * nrm).sum(axis=1))
    if optimize_camera:
        dsv = (z[i, None] * np.stack([prob.x[i], prob.y[i], np.zeros(E)], axis=1)
               - z[j, None] * np.stack([prob.x[j], prob.y[j], np.zeros(E)], axis=1))
        add(er, np.full(E, cc + 1), (dsv * nrm).sum(axis=1))

    # symmetry pairs: r = P X_a - X_b
    if M:
        base = n + E + 3 * np.arange(M)
        P = geo.REFLECTION
        for ep, sign, L in ((prob.a, 1.0, P), (prob.b, -1.0, np.eye(3))):
            X, ze, ray_e = _endpoint_points(ep, z, cam)
            dir_w = ray_e @ R.T  # dX/dz_e
            coeff = ep.wts * (ze[:, None] ** 2) / (z[ep.idx] ** 2)  # dz_e/dz_k
            Ldir = sign * (dir_w @ L.T)  # (M, 3)
            for k in range(4):
                for comp in range(3):
                    add(base + comp, ep.idx[:, k], Ldir[:, comp] * coeff[:, k])
            if optimize_camera:
                # dX/dc = -[X - t]x
                Xt = X - cam.translation
                dXdc = -geo.skew(Xt)  # (M, 3, 3)
                LdXdc = sign * np.einsum("ab,mbc->mac", L, dXdc)
                for comp in range(3):
                    for k, cidx in enumerate((1, 2)):
                        add(base + comp, np.full(M, cz + k), LdXdc[:, comp, cidx])
                dXds = ze[:, None] * (np.stack([ep.x, ep.y, np.zeros(M)], axis=1) @ R.T)
                LdXds = sign * (dXds @ L.T)
                for comp in range(3):
                    add(base + comp, np.full(M, cc + 1), LdXds[:, comp])
                LdXdt = sign * L[:, 0]
                for comp in range(3):
                    if LdXdt[comp] != 0:
                        add(base + comp, np.full(M, cc), np.full(M, LdXdt[comp]))

    nrows = n + E + 3 * M
    J = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nrows, ncols))
    return J.tocsr()


def residual_vector(res: Residuals) -> np.ndarray:
    return np.concatenate([res.depth, res.edge, res.sym.ravel()])


def weight_vector(prob: Problem, wts: Weights) -> np.ndarray:
    return np.concatenate([wts.w_p, prob.lam * wts.w_e, np.repeat(prob.mu * wts.w_c, 3)])


def normal_equations(prob: Problem, z, cam: CameraPose, wts: Weights, damping: float, optimize_camera: bool = True):
    """Damped normal equations ``(J^T W J + damping I) delta = -J^T W r``."""
    J = jacobian(prob, z, cam, optimize_camera)
    r = residual_vector(residuals(prob, z, cam))
    W = sp.diags(weight_vector(prob, wts))
    JtW = J.T @ W
    A = (JtW @ J).tocsr() + damping * sp.identity(J.shape[1], format="csr")
    g = JtW @ r
    return A, -g


class Increment(NamedTuple):
    dz: np.ndarray
    c: np.ndarray
    dt_x: float
    ds: float


def solve_linear(A, b, tol: float, dense_below: int):
    n = A.shape[0]
    if n < dense_below:
        return scipy.linalg.solve(A.toarray(), b, assume_a="pos"), {"method": "dense"}
    d = A.diagonal()
    M = sp.diags(1.0 / np.where(d > 0, d, 1.0))
    iters = [0]

    def cb(_):
        iters[0] += 1

    x, info = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=20 * n, M=M, callback=cb)
    if info != 0:
        res = float(np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300))
        raise SolverError("conjugate gradient did not converge", {"info": int(info), "iterations": iters[0], "relative_residual": res})
    return x, {"method": "pcg", "iterations": iters[0]}


def gauss_newton_step(prob: Problem, z, cam: CameraPose, wts: Weights, cfg: SolverConfig):
    """Solve the weighted linearised problem; returns ``(Increment, info)``."""
    A, b = normal_equations(prob, z, cam, wts, cfg.damping, cfg.optimize_camera)
    if not np.any(b):
        delta = np.zeros(A.shape[0])
        info = {"method": "none"}
    else:
        delta, info = solve_linear(A, b, cfg.linear_solver_tol, cfg.dense_below)
    n = prob.n
    if cfg.optimize_camera:
        c = np.array([0.0, delta[n], delta[n + 1]])
        inc = Increment(delta[:n], c, float(delta[n + 2]), float(delta[n + 3]))
    else:
        inc = Increment(delta[:n], np.zeros(3), 0.0, 0.0)
    return inc, info


def apply_increment(z, cam: CameraPose, inc: Increment, alpha: float = 1.0):
    z_new = z + alpha * inc.dz
    R = geo.exp_map(alpha * inc.c) @ cam.rotation
    s = cam.s + alpha * inc.ds
    return z_new, (R, cam.t_x + alpha * inc.dt_x, s)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass
class SolverReport:
    objective_trace: list
    terms: dict
    initial_terms: dict
    iterations: int
    gn_steps: int
    stop_reason: str
    sigma_trace: list
    weight_histograms: dict
    camera_initial: dict
    camera_final: dict
    n_pixels: int
    n_edges: int
    n_pairs: int
    n_pairs_dropped: int
    linear_solves: list
    seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


def _hist(w):
    counts, _ = np.histogram(w, bins=10, range=(0.0, 1.0))
    return counts.tolist()


def _terms_dict(t):
    return {"total": t[0], "depth": t[1], "normal": t[2], "symmetry": t[3]}


def solve(prob: Problem, z0, cam0: CameraPose, cfg: SolverConfig, callback=None):
    """Run IRLS from ``(z0, cam0)``; returns ``(z, cam, SolverReport)``.

    ``callback(step, z, cam)`` is called after every accepted step.
    """
    t_start = time.perf_counter()
    z = np.asarray(z0, dtype=float).copy()
    cam = cam0
    res = residuals(prob, z, cam)
    terms = objective_terms(prob, res)
    initial_terms = terms
    if not np.isfinite(terms[0]):
        raise SolverError("non-finite objective at start", {"terms": terms})
    trace = [terms[0]]
    sigmas = []
    solves = []
    stop = "max_outer_iters"
    steps = 0
    wts = None
    it = 0
    for it in range(1, cfg.max_outer_iters + 1):
        wts = update_weights(prob, res)
        sigmas.append(wts.sigma)
        if wts.converged:
            stop = "zero_residual_scale"
            it -= 1
            break
        total_before = terms[0]
        stalled = False
        for _ in range(cfg.gn_steps_per_reweight):
            inc, info = gauss_newton_step(prob, z, cam, wts, cfg)
            solves.append(info)
            s_old = surrogate(prob, res, wts)
            alpha = 1.0
            accepted = False
            for _h in range(cfg.line_search_max_halvings + 1):
                z_try, (R_try, tx_try, s_try) = apply_increment(z, cam, inc, alpha)
                if np.all(z_try > 0) and s_try > 0:
                    cam_try = CameraPose(R_try, tx_try, s_try)
                    res_try = residuals(prob, z_try, cam_try)
                    terms_try = objective_terms(prob, res_try)
                    if not np.isfinite(terms_try[0]):
                        raise SolverError("non-finite objective", {"iteration": it, "alpha": alpha})
                    if surrogate(prob, res_try, wts) <= s_old and terms_try[0] <= terms[0]:
                        accepted = True
                        break
                alpha *= 0.5
            if not accepted:
                stalled = True
                break
            z, cam, res, terms = z_try, cam_try, res_try, terms_try
            steps += 1
            trace.append(terms[0])
            if callback is not None:
                callback(steps, z, cam)
        if stalled:
            stop = "line_search_stalled"
            break
        change = abs(total_before - terms[0]) / max(abs(total_before), 1e-300)
        if change < cfg.converge_tol:
            stop = "converged"
            break
    if wts is None:
        wts = update_weights(prob, res)
    report = SolverReport(
        objective_trace=[float(t) for t in trace],
        terms=_terms_dict(terms),
        initial_terms=_terms_dict(initial_terms),
        iterations=it,
        gn_steps=steps,
        stop_reason=stop,
        sigma_trace=sigmas,
        weight_histograms={"w_p": _hist(wts.w_p), "w_e": _hist(wts.w_e), "w_c": _hist(wts.w_c)},
        camera_initial=cam0.to_dict(),
        camera_final=cam.to_dict(),
        n_pixels=prob.n,
        n_edges=len(prob.edges),
        n_pairs=prob.m,
        n_pairs_dropped=prob.n_pairs_dropped,
        linear_solves=solves,
        seconds=time.perf_counter() - t_start,
    )
    return z, cam, report


def refine(depth_prior, normals_cam, mask, corr: CorrespondenceSet, cam: CameraPose, cfg: Optional[SolverConfig] = None, callback=None):
    """Refine a predicted depth map; returns ``(depth (H, W), camera, report)``.

    ``corr`` should already be consistency filtered. Off-mask depth is 0.
    """
    cfg = cfg or SolverConfig()
    prob = build_problem(depth_prior, normals_cam, mask, corr, cam, cfg.tradeoffs.lam, cfg.tradeoffs.mu, cfg.subsample_pairs)
    mask = prob.mask
    z0 = np.asarray(depth_prior, dtype=float)[mask]
    z, cam_out, report = solve(prob, z0, cam, cfg, callback)
    out = np.zeros(mask.shape)
    out[mask] = z
    return out, cam_out, report
