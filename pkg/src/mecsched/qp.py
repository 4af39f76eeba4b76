"""Interior-point solver for block-angular convex QPs.

The problem has independent variable blocks w_k ≥ 0, each with a quadratic
cost and one budget row 1ᵀw_k ≤ cap_k, coupled only through a few global rows
that each own a nonnegative auxiliary variable:

    min  Σ_k ½ w_kᵀ P_k w_k + c_kᵀ w_k  +  Σ_r ½ q_r a_r² + l_r a_r
    s.t. 1ᵀ w_k ≤ cap_k,   B_r · w − a_r ≤ h_r,   w ≥ 0,  a ≥ 0.

Each Newton step factors the blocks separately and solves a dense system whose
size is the number of global rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

# reassociation only; infinities still have to compare correctly
_FAST = {"reassoc", "contract", "arcp", "nsz"}


@dataclass
class BlockQP:
    P_blocks: list  # k-th entry: n_k x n_k PSD matrix
    c_blocks: list
    caps: np.ndarray  # per-block budget
    B: np.ndarray  # global rows over the concatenated blocks
    h: np.ndarray
    aux_quad: np.ndarray
    aux_lin: np.ndarray


@dataclass
class BlockQPResult:
    w: np.ndarray
    aux: np.ndarray
    iterations: int
    converged: bool


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def _ldl(M, n):
    """In-place LDLᵀ of a symmetric quasidefinite matrix (no pivoting)."""
    d = np.empty(n)
    for j in range(n):
        v = M[j, j]
        for k in range(j):
            v -= M[j, k] * M[j, k] * d[k]
        d[j] = v
        for i in range(j + 1, n):
            v = M[i, j]
            for k in range(j):
                v -= M[i, k] * M[j, k] * d[k]
            M[i, j] = v / d[j]
    return d


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def _ldl_solve(L, d, b, n):
    x = b.copy()
    _ldl_solve_inplace(L, d, x, n)
    return x


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def _ldl_solve_inplace(L, d, x, n):
    for i in range(n):
        for k in range(i):
            x[i] -= L[i, k] * x[k]
    for i in range(n):
        x[i] /= d[i]
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, n):
            x[i] -= L[k, i] * x[k]


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def _max_step(v, dv):
    a = 1.0
    for i in range(v.shape[0]):
        if dv[i] < 0.0:
            r = -v[i] / dv[i]
            if r < a:
                a = r
    return a


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def _factor(Pb, sizes, offs, B, rows, nrows, w, yw, sl, zl, a, ya, q, sg, zg):
    """Factor the block matrices [[P_k + Y/W, 1], [1ᵀ, -s/z]] and the global Schur complement."""
    nb = sizes.shape[0]
    m = B.shape[0]
    nmax = Pb.shape[1]
    Lb = np.zeros((nb, nmax + 1, nmax + 1))
    db = np.zeros((nb, nmax + 1))
    S = np.zeros((m, m))
    for r in range(m):
        S[r, r] = sg[r] / zg[r] + 1.0 / (q[r] + ya[r] / a[r])
    col = np.zeros(nmax + 1)
    for b in range(nb):
        n = sizes[b]
        o = offs[b]
        M = Lb[b]
        for i in range(n):
            for j in range(n):
                M[i, j] = Pb[b, i, j]
            M[i, i] += yw[o + i] / w[o + i]
            M[n, i] = 1.0
            M[i, n] = 1.0
        M[n, n] = -sl[b] / zl[b]
        db[b, :n + 1] = _ldl(M, n + 1)
        # S += B_k (block inverse) B_kᵀ restricted to the w rows, over rows touching the block
        for ir in range(nrows[b]):
            r = rows[b, ir]
            for i in range(n):
                col[i] = B[r, o + i]
            col[n] = 0.0
            _ldl_solve_inplace(M, db[b], col, n + 1)
            for ir2 in range(ir, nrows[b]):
                r2 = rows[b, ir2]
                v = 0.0
                for i in range(n):
                    v += B[r2, o + i] * col[i]
                S[r, r2] += v
                if r2 != r:
                    S[r2, r] += v
    dS = _ldl(S, m) if m else np.zeros(0)
    return Lb, db, S, dS


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def _solve(Lb, db, S, dS, sizes, offs, B, rows, nrows, q, a, ya, rho_w, rho_a, pi_l, pi_g, sg, zg):
    """Solve the reduced Newton system for (dw, da, dzl, dzg)."""
    nb = sizes.shape[0]
    m = B.shape[0]
    n_w = rho_w.shape[0]
    nmax = Lb.shape[1]
    ha = q + ya / a
    rhs_g = -(pi_g + rho_a / ha)
    vec = np.empty(nmax)
    for b in range(nb):
        n = sizes[b]
        o = offs[b]
        for i in range(n):
            vec[i] = rho_w[o + i]
        vec[n] = pi_l[b]
        _ldl_solve_inplace(Lb[b], db[b], vec, n + 1)
        for ir in range(nrows[b]):
            r = rows[b, ir]
            v = 0.0
            for i in range(n):
                v += B[r, o + i] * vec[i]
            rhs_g[r] += v
    dzg = _ldl_solve(S, dS, rhs_g, m) if m else np.zeros(0)
    dw = np.empty(n_w)
    dzl = np.empty(nb)
    for b in range(nb):
        n = sizes[b]
        o = offs[b]
        for i in range(n):
            v = rho_w[o + i]
            for ir in range(nrows[b]):
                r = rows[b, ir]
                v -= B[r, o + i] * dzg[r]
            vec[i] = v
        vec[n] = pi_l[b]
        _ldl_solve_inplace(Lb[b], db[b], vec, n + 1)
        for i in range(n):
            dw[o + i] = vec[i]
        dzl[b] = vec[n]
    da = (rho_a + dzg) / ha
    return dw, da, dzl, dzg


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def _residual(Pb, sizes, offs, B, w, yw, sl, zl, a, ya, q, sg, zg, dw, da, dzl, dzg,
              rho_w, rho_a, pi_l, pi_g):
    """Residual of the reduced Newton equations at a candidate step."""
    e_w = -rho_w.copy()
    for b in range(sizes.shape[0]):
        n = sizes[b]
        o = offs[b]
        for i in range(n):
            v = 0.0
            for j in range(n):
                v += Pb[b, i, j] * dw[o + j]
            e_w[o + i] += v + yw[o + i] / w[o + i] * dw[o + i] + dzl[b]
    e_w += B.T @ dzg
    e_a = (q + ya / a) * da - dzg - rho_a
    e_l = np.empty(sizes.shape[0])
    for b in range(sizes.shape[0]):
        e_l[b] = dw[offs[b]:offs[b] + sizes[b]].sum() - sl[b] / zl[b] * dzl[b] - pi_l[b]
    e_g = B @ dw - da - sg / zg * dzg - pi_g
    return e_w, e_a, e_l, e_g


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def _ipm(Pb, cw, sizes, offs, caps, B, h, q, l, tol, acceptable, max_iter):
    n_w = cw.shape[0]
    nb = sizes.shape[0]
    m = B.shape[0]
    w = np.ones(n_w)
    yw = np.ones(n_w)
    a = np.ones(m)
    ya = np.ones(m)
    zl = np.ones(nb)
    zg = np.ones(m)
    sl = np.empty(nb)
    for b in range(nb):
        sl[b] = max(caps[b] - sizes[b], 1.0)
    sg = h - B @ w + a
    for r in range(m):
        sg[r] = max(sg[r], 1.0)
    # global rows with a nonzero coefficient on each block
    rows = np.zeros((nb, max(m, 1)), dtype=np.int64)
    nrows = np.zeros(nb, dtype=np.int64)
    for b in range(nb):
        for r in range(m):
            for i in range(sizes[b]):
                if B[r, offs[b] + i] != 0.0:
                    rows[b, nrows[b]] = r
                    nrows[b] += 1
                    break
    scale_h = 1.0 + max(np.max(np.abs(h)) if m else 0.0, np.max(np.abs(caps)) if nb else 0.0)
    n_comp = n_w + m + nb + m
    best = np.inf
    best_w = w.copy()
    best_a = a.copy()
    stall = 0
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        # dual residuals
        Pw = np.zeros(n_w)
        Lz = np.zeros(n_w)
        for b in range(nb):
            n = sizes[b]
            o = offs[b]
            for i in range(n):
                v = 0.0
                for j in range(n):
                    v += Pb[b, i, j] * w[o + j]
                Pw[o + i] = v
                Lz[o + i] = zl[b]
        Bz = B.T @ zg
        rd_w = Pw + cw + Lz + Bz - yw
        rd_a = q * a + l - zg - ya
        rp_l = np.empty(nb)
        for b in range(nb):
            rp_l[b] = w[offs[b]:offs[b] + sizes[b]].sum() + sl[b] - caps[b]
        rp_g = B @ w - a + sg - h
        pobj = 0.5 * (w @ Pw) + cw @ w + 0.5 * (q @ (a * a)) + l @ a
        gap = w @ yw + a @ ya + sl @ zl + sg @ zg
        mu = gap / n_comp
        scale_c = 1.0 + max(np.max(np.abs(cw)) if n_w else 0.0, np.max(np.abs(Pw)) if n_w else 0.0,
                            np.max(np.abs(Bz)) if n_w else 0.0, np.max(np.abs(l)) if m else 0.0,
                            np.max(np.abs(q * a)) if m else 0.0)
        rd_max = max(np.max(np.abs(rd_w)) if n_w else 0.0, np.max(np.abs(rd_a)) if m else 0.0)
        rp_max = max(np.max(np.abs(rp_l)) if nb else 0.0, np.max(np.abs(rp_g)) if m else 0.0)
        merit = max(rd_max / scale_c, rp_max / scale_h, gap / (1.0 + abs(pobj)))
        if merit < best:
            best = merit
            best_w[:] = w
            best_a[:] = a
            stall = 0
        else:
            stall += 1
        if best <= tol:
            converged = True
            break
        # rounding in the Newton system limits attainable accuracy
        if (stall >= 3 and best <= acceptable) or stall >= 10:
            break

        Lb, db, S, dS = _factor(Pb, sizes, offs, B, rows, nrows, w, yw, sl, zl, a, ya, q, sg, zg)
        dw = np.zeros(n_w)
        da = np.zeros(m)
        dzl = np.zeros(nb)
        dzg = np.zeros(m)
        dyw = np.zeros(n_w)
        dya = np.zeros(m)
        dsl = np.zeros(nb)
        dsg = np.zeros(m)
        sigma = 0.0
        for phase in range(2):
            if phase == 0:
                rc_w = -w * yw
                rc_a = -a * ya
                rc_l = -sl * zl
                rc_g = -sg * zg
            else:
                rc_w = -w * yw - dw * dyw + sigma * mu
                rc_a = -a * ya - da * dya + sigma * mu
                rc_l = -sl * zl - dsl * dzl + sigma * mu
                rc_g = -sg * zg - dsg * dzg + sigma * mu
            rho_w = -rd_w + rc_w / w
            rho_a = -rd_a + rc_a / a
            pi_l = -rp_l - rc_l / zl
            pi_g = -rp_g - rc_g / zg
            dw, da, dzl, dzg = _solve(Lb, db, S, dS, sizes, offs, B, rows, nrows, q, a, ya,
                                      rho_w, rho_a, pi_l, pi_g, sg, zg)
            if phase == 1:
                # one round of iterative refinement on the unreduced equations
                e_w, e_a, e_l, e_g = _residual(Pb, sizes, offs, B, w, yw, sl, zl, a, ya, q, sg, zg,
                                               dw, da, dzl, dzg, rho_w, rho_a, pi_l, pi_g)
                cw_, ca_, cl_, cg_ = _solve(Lb, db, S, dS, sizes, offs, B, rows, nrows, q, a, ya,
                                            -e_w, -e_a, -e_l, -e_g, sg, zg)
                dw += cw_
                da += ca_
                dzl += cl_
                dzg += cg_
            dyw = (rc_w - yw * dw) / w
            dya = (rc_a - ya * da) / a
            dsl = (rc_l - sl * dzl) / zl
            dsg = (rc_g - sg * dzg) / zg
            step = min(min(_max_step(w, dw), _max_step(yw, dyw)), min(_max_step(a, da), _max_step(ya, dya)))
            step = min(step, min(min(_max_step(sl, dsl), _max_step(zl, dzl)),
                                 min(_max_step(sg, dsg), _max_step(zg, dzg))))
            if phase == 0:
                mu_aff = ((w + step * dw) @ (yw + step * dyw) + (a + step * da) @ (ya + step * dya)
                          + (sl + step * dsl) @ (zl + step * dzl) + (sg + step * dsg) @ (zg + step * dzg)) / n_comp
                sigma = (mu_aff / mu) ** 3
        step = min(1.0, 0.99 * step)
        w = w + step * dw
        yw = yw + step * dyw
        a = a + step * da
        ya = ya + step * dya
        sl = sl + step * dsl
        zl = zl + step * dzl
        sg = sg + step * dsg
        zg = zg + step * dzg
    if not converged:
        converged = best <= acceptable
    return best_w, best_a, it, converged


def solve_block_qp(prob: BlockQP, *, tol: float = 1e-10, acceptable: float = 1e-6,
                   max_iter: int = 80) -> BlockQPResult:
    sizes = np.array([len(c) for c in prob.c_blocks], dtype=np.int64)
    offs = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64) if len(sizes) else np.zeros(0, np.int64)
    n_w = int(sizes.sum())
    nmax = int(sizes.max()) if len(sizes) else 1
    Pb = np.zeros((len(sizes), nmax, nmax))
    for b, Pk in enumerate(prob.P_blocks):
        Pb[b, :sizes[b], :sizes[b]] = Pk
    cw = np.concatenate(prob.c_blocks) if len(sizes) else np.zeros(0)
    B = np.asarray(prob.B, dtype=float).reshape(-1, n_w)
    h = np.asarray(prob.h, dtype=float)
    q = np.asarray(prob.aux_quad, dtype=float)
    l = np.asarray(prob.aux_lin, dtype=float)
    caps = np.asarray(prob.caps, dtype=float)

    # scale each global row to unit size; its auxiliary variable scales along
    row = np.abs(B).max(axis=1, initial=0.0)
    row[row == 0] = 1.0
    sr = 1.0 / row
    B = B * sr[:, None]
    h = h * sr
    q = q / sr ** 2
    l = l / sr
    obj = max(1.0, np.abs(Pb).max(initial=0.0), np.abs(cw).max(initial=0.0),
              np.abs(q).max(initial=0.0), np.abs(l).max(initial=0.0))
    w, a, it, ok = _ipm(Pb / obj, cw / obj, sizes, offs, caps, np.ascontiguousarray(B), h,
                        q / obj, l / obj, tol, acceptable, max_iter)
    return BlockQPResult(w, a / sr, int(it), bool(ok))
