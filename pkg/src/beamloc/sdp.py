"""Dense primal-dual interior-point solver for small semidefinite programs.

Problem form::

    minimize    c^T x
    subject to  F0_b + sum_i x_i F_ib  >= 0   (PSD, one per LMI block b)
                G x <= h
                A x  = b

Each LMI block lists only the variables it touches, which keeps Newton system
assembly cheap when many blocks share a few common variables.

The solver works on the homogeneous self-dual embedding, so it starts from the
identity without a phase-I problem and reports infeasibility or unboundedness
from the certificate that the embedding produces. Search directions use
Nesterov-Todd scaling with a Mehrotra predictor-corrector step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"
NUMERICAL = "numerical_error"
INACCURATE = "optimal_inaccurate"

# a stalled run returns its best iterate as INACCURATE within these factors of the tolerances
INACCURATE_FACTOR = 1e3

REFINE_STEPS = 2


@dataclass
class LmiBlock:
    """constant + sum_k x[indices[k]] * coefficients[k] must be PSD."""

    constant: np.ndarray
    indices: np.ndarray
    coefficients: np.ndarray

    def __post_init__(self):
        F0 = np.asarray(self.constant, dtype=float)
        idx = np.asarray(self.indices, dtype=int).reshape(-1)
        Fi = np.asarray(self.coefficients, dtype=float).reshape(idx.size, *F0.shape)
        if F0.ndim != 2 or F0.shape[0] != F0.shape[1]:
            raise ValueError("LMI constant must be square")
        if not np.allclose(F0, F0.T) or not np.allclose(Fi, Fi.transpose(0, 2, 1)):
            raise ValueError("LMI matrices must be symmetric")
        if len(set(idx.tolist())) != idx.size:
            raise ValueError("duplicate variable index in LMI block")
        self.constant, self.indices, self.coefficients = F0, idx, Fi

    @property
    def size(self) -> int:
        return self.constant.shape[0]

    def evaluate(self, x) -> np.ndarray:
        return self.constant + np.tensordot(np.asarray(x)[self.indices], self.coefficients, axes=1)


@dataclass
class SdpProblem:
    c: np.ndarray
    blocks: list = field(default_factory=list)
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        self.G = np.zeros((0, n)) if self.G is None else np.asarray(self.G, float).reshape(-1, n)
        self.h = np.zeros(0) if self.h is None else np.asarray(self.h, float).reshape(-1)
        self.A = np.zeros((0, n)) if self.A is None else np.asarray(self.A, float).reshape(-1, n)
        self.b = np.zeros(0) if self.b is None else np.asarray(self.b, float).reshape(-1)
        if self.G.shape[0] != self.h.size or self.A.shape[0] != self.b.size:
            raise ValueError("inconsistent constraint dimensions")
        for blk in self.blocks:
            if blk.indices.size and (blk.indices.min() < 0 or blk.indices.max() >= n):
                raise ValueError("LMI variable index out of range")

    @property
    def n_vars(self) -> int:
        return self.c.size


@dataclass
class SdpSolution:
    x: np.ndarray
    y: np.ndarray           # equality multipliers
    z_lin: np.ndarray       # inequality multipliers
    z_blocks: list          # PSD dual matrices
    status: str
    primal_objective: float
    dual_objective: float
    gap: float
    relative_gap: float
    primal_residual: float
    dual_residual: float
    iterations: int


@dataclass(frozen=True)
class KktReport:
    primal_equality: float
    primal_inequality: float
    primal_psd: float
    dual_stationarity: float
    dual_cone: float
    complementarity: float


class SdpError(RuntimeError):
    def __init__(self, solution: SdpSolution):
        super().__init__(f"SDP solve ended with status {solution.status!r}")
        self.solution = solution


# ---------------------------------------------------------------- cone algebra
# Cone vectors are tuples (lin, [mats]); `lin` is the nonnegative-orthant part.

def _dot(u, v):
    return float(u[0] @ v[0] + sum(np.sum(a * b) for a, b in zip(u[1], v[1])))


def _axpy(a, u, v):
    return (a * u[0] + v[0], [a * p + q for p, q in zip(u[1], v[1])])


def _norm(u):
    return np.sqrt(_dot(u, u))


class _Scaled:
    """Internal copy of the problem with each block and inequality row normalized."""

    def __init__(self, p: SdpProblem):
        self.n = p.n_vars
        self.c = p.c
        self.A, self.b = p.A, p.b
        rn = np.linalg.norm(np.column_stack([p.G, p.h]), axis=1) if p.G.size else np.zeros(0)
        self.lin_scale = np.where(rn > 0, rn, 1.0)
        self.G = p.G / self.lin_scale[:, None]
        self.h = p.h / self.lin_scale
        self.idx, self.F0, self.F, self.block_scale = [], [], [], []
        for blk in p.blocks:
            s = np.linalg.norm(blk.constant)
            if s == 0:
                s = np.max(np.linalg.norm(blk.coefficients, axis=(1, 2)), initial=0.0)
            s = s if s > 0 else 1.0
            self.idx.append(blk.indices)
            self.F0.append(blk.constant / s)
            self.F.append(blk.coefficients / s)
            self.block_scale.append(s)
        self.sizes = [f.shape[0] for f in self.F0]
        self.degree = self.h.size + sum(self.sizes)

    def Gx(self, x):
        return (self.G @ x, [-np.tensordot(x[i], F, axes=1) for i, F in zip(self.idx, self.F)])

    def GTz(self, z):
        out = self.G.T @ z[0]
        for i, F, Z in zip(self.idx, self.F, z[1]):
            out[i] -= np.einsum("kab,ab->k", F, Z)
        return out

    def hvec(self):
        return (self.h, list(self.F0))

    def identity(self):
        return (np.ones(self.h.size), [np.eye(n) for n in self.sizes])


def _update_scaling(d, Rs, Rtis, lam, dss, dzs, alpha):
    """Nesterov-Todd scaling at the next iterate, updated in the scaled space.

    The step is applied to lambda + alpha * (scaled direction), which stays
    well conditioned even when s and z themselves approach the boundary.
    """
    st = lam[0] + alpha * dss[0]
    zt = lam[0] + alpha * dzs[0]
    if np.any(st <= 0) or np.any(zt <= 0):
        raise np.linalg.LinAlgError("left the cone")
    d_new = d * np.sqrt(st / zt)
    lam_lin = np.sqrt(st * zt)
    R_new, Rti_new, lams = [], [], []
    for R, Rti, l, DS, DZ in zip(Rs, Rtis, lam[1], dss[1], dzs[1]):
        S = np.diag(l) + alpha * 0.5 * (DS + DS.T)
        Z = np.diag(l) + alpha * 0.5 * (DZ + DZ.T)
        L1 = np.linalg.cholesky(S)
        L2 = np.linalg.cholesky(Z)
        U, sv, Vt = np.linalg.svd(L2.T @ L1)
        # R and R^-T are updated separately; inverting R would square its condition
        R_new.append(R @ (L1 @ Vt.T / np.sqrt(sv)))
        Rti_new.append(Rti @ (L2 @ U / np.sqrt(sv)))
        lams.append(sv)
    return d_new, R_new, Rti_new, (lam_lin, lams)


def _jordan(u, v):
    return (u[0] * v[0], [0.5 * (a @ b + b @ a) for a, b in zip(u[1], v[1])])


def _lam_sq(lam):
    return (lam[0] ** 2, [np.diag(l ** 2) for l in lam[1]])


def _lam_inv_jordan(lam, r):
    """Solve lambda o u = r for u (lambda diagonal in the scaled basis)."""
    return (r[0] / lam[0], [2 * R / (l[:, None] + l[None, :]) for l, R in zip(lam[1], r[1])])


def _zero_like(u):
    return (np.zeros_like(u[0]), [np.zeros_like(U) for U in u[1]])


def _cone_violation(u):
    """Euclidean norm of the part of u outside the cone."""
    v = np.sum(np.minimum(u[0], 0.0) ** 2)
    for U in u[1]:
        w = np.linalg.eigvalsh(0.5 * (U + U.T))
        v += np.sum(np.minimum(w, 0.0) ** 2)
    return float(np.sqrt(v))


def _max_step(lam, du):
    """Largest alpha with lambda + alpha du in the cone (inf if unbounded)."""
    t = np.inf
    neg = du[0] < 0
    if np.any(neg):
        t = min(t, np.min(-lam[0][neg] / du[0][neg]))
    for l, D in zip(lam[1], du[1]):
        isq = 1 / np.sqrt(l)
        w = np.linalg.eigvalsh(isq[:, None] * D * isq[None, :])
        if w[0] < 0:
            t = min(t, -1 / w[0])
    return t


def solve(problem: SdpProblem, tol: float = 1e-7, max_iter: int = 200,
          feastol: float | None = None) -> SdpSolution:
    """Solve the SDP; see the module docstring for the problem form."""
    feastol = tol if feastol is None else feastol
    P = _Scaled(problem)
    n, me = P.n, P.A.shape[0]
    c, A, bvec = P.c, P.A, P.b
    h = P.hvec()
    x, y = np.zeros(n), np.zeros(me)
    # scaling state: s = W^T lambda, z = W^-1 lambda with W given by (d, R)
    d = np.ones(P.h.size)
    Rs = [np.eye(k) for k in P.sizes]
    Rtis = [np.eye(k) for k in P.sizes]
    lam = (np.ones(P.h.size), [np.ones(k) for k in P.sizes])
    tau = kappa = 1.0
    resx0 = max(1.0, np.linalg.norm(c))
    resz0 = max(1.0, np.sqrt(bvec @ bvec + _dot(h, h)))
    status, it = MAX_ITER, 0
    info = {}
    best = None

    for it in range(max_iter + 1):
        Rinv = [Rti.T for Rti in Rtis]
        s = (d * lam[0], [(R * l) @ R.T for R, l in zip(Rs, lam[1])])
        z = (lam[0] / d, [(Ri.T * l) @ Ri for Ri, l in zip(Rinv, lam[1])])
        Gx = P.Gx(x)
        GTz = P.GTz(z)
        rx = A.T @ y + GTz + c * tau
        ry = bvec * tau - A @ x
        rz = _axpy(-tau, h, _axpy(1.0, Gx, s))
        hz = _dot(h, z)
        cx, by = c @ x, bvec @ y
        rt = kappa + cx + by + hz
        sz = _dot(s, z)
        mu = (sz + tau * kappa) / (P.degree + 1)
        pcost, dcost = cx / tau, -(hz + by) / tau
        gap = max(sz / tau**2, abs(pcost - dcost))
        relgap = gap / max(1.0, abs(pcost))
        # primal feasibility is judged on the slack implied by x itself; the
        # auxiliary s drifts by rounding once the iterates near the boundary
        pres = np.hypot(np.linalg.norm(ry), _cone_violation(_axpy(-1.0, Gx, _axpy(tau, h, _zero_like(h))))) / tau / resz0
        dres = np.linalg.norm(rx) / tau / resx0
        info = dict(pcost=pcost, dcost=dcost, gap=gap, relgap=relgap, pres=pres, dres=dres)
        log.debug("it %d %s tau %.2e kappa %.2e", it, info, tau, kappa)
        if pres <= feastol and dres <= feastol and relgap <= tol:
            status = OPTIMAL
            break
        merit = max(pres / feastol, dres / feastol, relgap / tol)
        if best is None or merit < best[0]:
            best = (merit, x / tau, y / tau, z, tau, dict(info), it)
        elif merit > 100 * best[0] and best[0] <= INACCURATE_FACTOR:
            # rounding has taken over; fall back to the best iterate
            status = NUMERICAL
            break
        if hz + by < 0:
            pinf = np.linalg.norm(A.T @ y + GTz) / resx0 / (-(hz + by))
            if pinf <= feastol:
                status = INFEASIBLE
                break
        if cx < 0:
            dinf = max(np.linalg.norm(A @ x), _norm(_axpy(1.0, Gx, s))) / resz0 / (-cx)
            if dinf <= feastol:
                status = UNBOUNDED
                break
        if it == max_iter:
            break

        # Everything below works in the scaled space: Gbar = W^-T G, and the
        # scaled dual direction W dz is produced directly. Mapping dz through
        # W afterwards would amplify rounding by cond(R)^2 near the optimum.
        Gbar_lin = P.G / d[:, None]
        Gbar_blk = [Ri @ F @ Ri.T for F, Ri in zip(P.F, Rinv)]

        def scale_inv_t(u):
            """W^-T u."""
            return (u[0] / d, [Ri @ U @ Ri.T for Ri, U in zip(Rinv, u[1])])

        def gbar(x_):
            return (Gbar_lin @ x_,
                    [-np.tensordot(x_[i], Gb, axes=1) for i, Gb in zip(P.idx, Gbar_blk)])

        def gbar_t(u):
            out = Gbar_lin.T @ u[0]
            for i, Gb, U in zip(P.idx, Gbar_blk, u[1]):
                out[i] -= np.einsum("kab,ab->k", Gb, U)
            return out

        # reduced Newton matrix  Gbar^T Gbar  (+ equality rows)
        M = Gbar_lin.T @ Gbar_lin
        for i, Gb in zip(P.idx, Gbar_blk):
            Gs = Gb.reshape(len(i), -1)
            M[np.ix_(i, i)] += Gs @ Gs.T
        K = np.zeros((n + me, n + me))
        K[:n, :n] = M
        K[:n, n:] = A.T
        K[n:, :n] = A
        # tiny diagonal shift keeps variables absent from every cone solvable
        K[:n, :n] += 1e-13 * max(1.0, np.max(np.abs(np.diag(M)), initial=0.0)) * np.eye(n)
        # symmetric diagonal equilibration: the diagonal of M spreads over
        # many orders of magnitude near the optimum
        eq = np.ones(n + me)
        dm = np.diag(M)
        eq[:n] = 1.0 / np.sqrt(np.where(dm > 0, dm, 1.0))
        lu = linalg.lu_factor(K * np.outer(eq, eq), check_finite=False)

        def kkt_once(r1, r2, r3s):
            sol = eq * linalg.lu_solve(lu, eq * np.concatenate([r1 + gbar_t(r3s), -r2]))
            dx, dy = sol[:n], sol[n:]
            return dx, dy, _axpy(-1.0, r3s, gbar(dx))

        def kkt(r1, r2, r3s):
            """Solve A'dy + G'dz = r1, -A dx = r2, G dx - H dz = r3 in scaled form.

            r3s = W^-T r3; returns (dx, dy, W dz).
            """
            dx, dy, dzs = kkt_once(r1, r2, r3s)
            for _ in range(REFINE_STEPS):
                e1 = r1 - A.T @ dy - gbar_t(dzs)
                e2 = r2 + A @ dx
                e3 = _axpy(-1.0, _axpy(-1.0, dzs, gbar(dx)), r3s)
                ex, ey, ez = kkt_once(e1, e2, e3)
                dx, dy, dzs = dx + ex, dy + ey, _axpy(1.0, ez, dzs)
            return dx, dy, dzs

        hbar = scale_inv_t(h)
        # W^-T rz = Gbar x + lambda - tau hbar, formed without the unscaled slack
        rzbar = _axpy(-tau, hbar, _axpy(1.0, gbar(x), (lam[0], [np.diag(l) for l in lam[1]])))
        dx2, dy2, dzs2 = kkt(c, bvec, (-hbar[0], [-F for F in hbar[1]]))
        t2 = c @ dx2 + bvec @ dy2 + _dot(hbar, dzs2)

        def direction(sigma, corr, corr_tk):
            eta = 1.0 - sigma
            lsq = _lam_sq(lam)
            rs = (-lsq[0] + sigma * mu - corr[0],
                  [-L2 + sigma * mu * np.eye(L2.shape[0]) - C for L2, C in zip(lsq[1], corr[1])])
            rk = -tau * kappa + sigma * mu - corr_tk
            u = _lam_inv_jordan(lam, rs)
            r3s = _axpy(-1.0, u, (-eta * rzbar[0], [-eta * R for R in rzbar[1]]))
            dx1, dy1, dzs1 = kkt(-eta * rx, -eta * ry, r3s)
            t1 = c @ dx1 + bvec @ dy1 + _dot(hbar, dzs1)
            dtau = (rk / tau + t1 + eta * rt) / (kappa / tau + t2)
            dx = dx1 - dtau * dx2
            dy = dy1 - dtau * dy2
            dzs = _axpy(-dtau, dzs2, dzs1)
            dkappa = (rk - kappa * dtau) / tau
            dss = _axpy(-1.0, dzs, u)
            return dx, dy, dtau, dkappa, dss, dzs

        def step_bound(dss, dzs, dtau, dkappa):
            t = min(_max_step(lam, dss), _max_step(lam, dzs))
            if dtau < 0:
                t = min(t, -tau / dtau)
            if dkappa < 0:
                t = min(t, -kappa / dkappa)
            return t

        zero = (np.zeros_like(lam[0]), [np.zeros((len(l), len(l))) for l in lam[1]])
        aff = direction(0.0, zero, 0.0)
        alpha_a = min(1.0, step_bound(aff[4], aff[5], aff[2], aff[3]))
        sigma = (1.0 - alpha_a) ** 3
        corr = _jordan(aff[4], aff[5])
        dx, dy, dtau, dkappa, dss, dzs = direction(sigma, corr, aff[2] * aff[3])
        alpha = min(1.0, 0.99 * step_bound(dss, dzs, dtau, dkappa))

        try:
            d, Rs, Rtis, lam = _update_scaling(d, Rs, Rtis, lam, dss, dzs, alpha)
        except np.linalg.LinAlgError:
            status = NUMERICAL
            break
        x = x + alpha * dx
        y = y + alpha * dy
        tau += alpha * dtau
        kappa += alpha * dkappa

    if status in (NUMERICAL, MAX_ITER) and best is not None and best[0] <= INACCURATE_FACTOR:
        _, xb, yb, z, tau, info, _ = best
        x, y = xb * tau, yb * tau
        status = INACCURATE
    scale = tau if status in (OPTIMAL, MAX_ITER, NUMERICAL, INACCURATE) else 1.0
    z_lin = z[0] / scale / P.lin_scale
    z_blocks = [Z / scale / bs for Z, bs in zip(z[1], P.block_scale)]
    sol = SdpSolution(
        x=x / scale, y=y / scale, z_lin=z_lin, z_blocks=z_blocks, status=status,
        primal_objective=info.get("pcost", np.nan), dual_objective=info.get("dcost", np.nan),
        gap=info.get("gap", np.nan), relative_gap=info.get("relgap", np.nan),
        primal_residual=info.get("pres", np.nan), dual_residual=info.get("dres", np.nan),
        iterations=it)
    log.debug("sdp: %s after %d iterations, relgap %.2e", status, it, sol.relative_gap)
    return sol


def kkt_residuals(problem: SdpProblem, sol: SdpSolution) -> KktReport:
    """Recompute feasibility and complementarity of a solution in the original scaling."""
    x = sol.x
    eq = float(np.linalg.norm(problem.A @ x - problem.b)) if problem.b.size else 0.0
    slack = problem.h - problem.G @ x
    ineq = float(np.max(-slack, initial=0.0))
    psd, comp, dcone = 0.0, float(slack @ sol.z_lin), float(np.max(-sol.z_lin, initial=0.0))
    grad = problem.c + problem.A.T @ sol.y + problem.G.T @ sol.z_lin
    for blk, Z in zip(problem.blocks, sol.z_blocks):
        S = blk.evaluate(x)
        psd = max(psd, float(-np.linalg.eigvalsh(S)[0]))
        dcone = max(dcone, float(-np.linalg.eigvalsh(Z)[0]))
        comp += float(np.sum(S * Z))
        grad[blk.indices] -= np.einsum("kab,ab->k", blk.coefficients, Z)
    return KktReport(eq, ineq, max(psd, 0.0), float(np.linalg.norm(grad)), max(dcone, 0.0),
                     abs(comp))


# ------------------------------------------------------------ text dump format
# One record per line, whitespace separated, '#' starts a comment:
#   nvars N
#   c  i value
#   block b size
#   F  b var row col value      (var = -1 for the constant; upper triangle only)
#   G  row col value / h row value   (inequalities G x <= h; 'nineq m' first)
#   A  row col value / b row value   (equalities A x = b; 'neq m' first)

def dump(problem: SdpProblem, path) -> None:
    lines = ["# beamloc sparse-triplet SDP v1", f"nvars {problem.n_vars}"]
    lines += [f"c {i} {float(v)!r}" for i, v in enumerate(problem.c) if v != 0]
    for bi, blk in enumerate(problem.blocks):
        lines.append(f"block {bi} {blk.size}")
        mats = [(-1, blk.constant)] + list(zip(blk.indices.tolist(), blk.coefficients))
        for var, F in mats:
            r, cc = np.nonzero(np.triu(F))
            lines += [f"F {bi} {var} {i} {j} {float(F[i, j])!r}" for i, j in zip(r, cc)]
    for tag, mat, vec, cnt in (("G", problem.G, problem.h, "nineq"),
                               ("A", problem.A, problem.b, "neq")):
        lines.append(f"{cnt} {vec.size}")
        r, cc = np.nonzero(mat)
        lines += [f"{tag} {i} {j} {float(mat[i, j])!r}" for i, j in zip(r, cc)]
        rhs = "h" if tag == "G" else "b"
        lines += [f"{rhs} {i} {float(v)!r}" for i, v in enumerate(vec) if v != 0]
    Path(path).write_text("\n".join(lines) + "\n")


def load(path) -> SdpProblem:
    n = None
    c = None
    blocks: dict[int, dict] = {}
    G = A = h = b = None
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].split()
        if not line:
            continue
        tag, args = line[0], line[1:]
        if tag == "nvars":
            n = int(args[0])
            c = np.zeros(n)
        elif tag == "c":
            c[int(args[0])] = float(args[1])
        elif tag == "block":
            blocks[int(args[0])] = {"size": int(args[1]), "mats": {}}
        elif tag == "F":
            bi, var, i, j, v = int(args[0]), int(args[1]), int(args[2]), int(args[3]), float(args[4])
            blk = blocks[bi]
            F = blk["mats"].setdefault(var, np.zeros((blk["size"], blk["size"])))
            F[i, j] = F[j, i] = v
        elif tag == "nineq":
            G, h = np.zeros((int(args[0]), n)), np.zeros(int(args[0]))
        elif tag == "neq":
            A, b = np.zeros((int(args[0]), n)), np.zeros(int(args[0]))
        elif tag in ("G", "A"):
            (G if tag == "G" else A)[int(args[0]), int(args[1])] = float(args[2])
        elif tag in ("h", "b"):
            (h if tag == "h" else b)[int(args[0])] = float(args[1])
        else:
            raise ValueError(f"unknown record {tag!r}")
    out = []
    for bi in sorted(blocks):
        blk = blocks[bi]
        mats = blk["mats"]
        F0 = mats.pop(-1, np.zeros((blk["size"], blk["size"])))
        idx = np.array(sorted(mats), dtype=int)
        coef = np.array([mats[k] for k in idx]).reshape(idx.size, blk["size"], blk["size"])
        out.append(LmiBlock(F0, idx, coef))
    return SdpProblem(c, out, G, h, A, b)
