"""Independent reference implementations used only by the tests."""

import numpy as np

from symdepth.geometry import REFLECTION


def _skew(c):
    return np.array([[0, -c[2], c[1]], [c[2], 0, -c[0]], [-c[1], c[0], 0]])


def _exp_series(c, terms: int = 20):
    # power series of exp(c x); valid for complex c
    C = _skew(c)
    out = np.eye(3, dtype=C.dtype)
    term = np.eye(3, dtype=C.dtype)
    for k in range(1, terms):
        term = term @ C / k
        out = out + term
    return out


def stacked_residuals(prob, R0, params):
    """Residual vector [depth; edge; sym] from the raw objective definitions,
    with camera parameters ``(c_y, c_z, t_x, s)`` after the pixel depths.
    World-frame form throughout; accepts complex input."""
    n = prob.n
    z = params[:n]
    cy, cz, tx, s = params[n:]
    R = _exp_series(np.array([0.0, cy, cz], dtype=complex)) @ R0
    t = np.array([tx, 0.0, 0.0], dtype=complex)

    def world(zz, x, y):
        ray = np.stack([s * x, s * y, np.ones_like(x)], axis=1)
        return zz[:, None] * (ray @ R.T) + t

    d = z * np.sqrt(1.0 + s * s * (prob.x**2 + prob.y**2))
    r_depth = d - prob.d_bar
    X = world(z, prob.x, prob.y)
    i, j = prob.edges[:, 0], prob.edges[:, 1]
    n_world = prob.n_cam[i] @ R.T
    r_edge = ((X[i] - X[j]) * n_world).sum(axis=1)
    out = [r_depth, r_edge]
    if prob.m:
        za = 1.0 / (prob.a.wts / z[prob.a.idx]).sum(axis=1)
        zb = 1.0 / (prob.b.wts / z[prob.b.idx]).sum(axis=1)
        Xa = world(za, prob.a.x, prob.a.y)
        Xb = world(zb, prob.b.x, prob.b.y)
        out.append((Xa @ REFLECTION - Xb).ravel())
    return np.concatenate(out)


def complex_step_jacobian(prob, z, cam, h: float = 1e-30):
    p0 = np.concatenate([z, [0.0, 0.0, cam.t_x, cam.s]]).astype(complex)
    cols = []
    for k in range(len(p0)):
        p = p0.copy()
        p[k] += 1j * h
        cols.append(stacked_residuals(prob, cam.rotation, p).imag / h)
    r = stacked_residuals(prob, cam.rotation, p0).real
    return np.stack(cols, axis=1), r


def dense_gn_step(prob, z, cam, w_p, w_e, w_c, damping: float):
    """Solve (J^T W J + damping I) delta = -J^T W r with a complex-step Jacobian."""
    J, r = complex_step_jacobian(prob, z, cam)
    W = np.concatenate([w_p, prob.lam * w_e, np.repeat(prob.mu * w_c, 3)])
    A = J.T @ (W[:, None] * J) + damping * np.eye(J.shape[1])
    return np.linalg.solve(A, -J.T @ (W * r))


def brute_force_row(image, mask, row, r, search, min_contrast, accept, lr_tol):
    """Explicit per-pixel mirrored-ZNCC search along one row."""
    h, w = image.shape
    k = 2 * r + 1

    def patch(c):
        if row - r < 0 or row + r >= h or c - r < 0 or c + r >= w:
            return None
        return image[row - r : row + r + 1, c - r : c + r + 1].astype(float)

    usable = []
    for c in range(w):
        p = patch(c)
        if mask[row, c] and p is not None and p.std() >= min_contrast:
            usable.append(c)
    usable_set = set(usable)

    def zncc(ref_c, cand_c):
        a = patch(ref_c)[:, ::-1]
        b = patch(cand_c)
        a = a - a.mean()
        b = b - b.mean()
        na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
        return float((a * b).sum() / ((na if na > 0 else 1.0) * (nb if nb > 0 else 1.0)))

    def best_of(c):
        best_c, best_s = None, -np.inf
        for c2 in usable:
            if abs(c2 - c) <= search:
                sc = zncc(c, c2)
                if sc > best_s:
                    best_c, best_s = c2, sc
        return best_c, best_s

    def refined(c, c2):
        def score_at(cc):
            if cc in usable_set and abs(cc - c) <= search:
                return zncc(c, cc)
            return None

        left, centre, right = score_at(c2 - 1), zncc(c, c2), score_at(c2 + 1)
        off = 0.0
        if left is not None and right is not None:
            den = left - 2 * centre + right
            if den < 0:
                off = float(np.clip(0.5 * (left - right) / den, -0.5, 0.5))
        return c2 + off - c

    flow = np.zeros(w)
    valid = np.zeros(w, dtype=bool)
    if len(usable) < 2:
        return flow, valid
    for c in usable:
        c2, sc = best_of(c)
        if not sc >= accept:
            continue
        f = refined(c, c2)
        c3, _ = best_of(c2)
        if abs(f + refined(c2, c3)) > lr_tol:
            continue
        flow[c] = f
        valid[c] = True
    return flow, valid
