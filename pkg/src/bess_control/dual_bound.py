"""Martingale duality upper bounds for the storage problem.

A dual process ``mu`` is built from the stochastic integral
``M_j = sum_{d<j} v_d dW_d`` as ``mu0_j = M_N - M_j`` followed by ``k``
backward running integrals ``mu^(k)_j = -sum_{d>=j} mu^(k-1)_d dt``. Every
level is a sum of increments after node ``j`` weighted by adapted factors, so
``E sum_j mu_j . u_j dt = 0`` for any adapted control ``u``. Maximising payoff
plus this penalty path by path over non-adapted controls therefore bounds the
adapted optimum from above.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .market_sim import PathEnsemble
from .model_core import (ModelParams, RegimeCriterion, TimeGrid, _cma_nodes, _write_rows,
                         fmt, regime_penalty)

log = logging.getLogger(__name__)

CHUNK = 512
WEIGHTS = ("none", "spot", "log-spot")


class SpecMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MartingaleSpec:
    """Piecewise-constant integrand ``v`` with shape (pieces, m, n).

    Piece ``q`` covers nodes ``j`` with ``floor(j * pieces / N) == q``. With
    ``weight="spot"`` the integrand is scaled by ``clip(S_j / S_0, 0, cap)``;
    with ``"log-spot"`` by ``clip(log(S_j / S_0), -cap, cap)``. Both factors
    are known at node ``j``.
    """

    theta: np.ndarray
    k: int = 0
    weight: str = "none"
    cap: float = 4.0

    def __post_init__(self):
        th = np.array(self.theta, dtype=float)
        if th.ndim != 3:
            raise SpecMismatch(f"theta must have shape (pieces, m, n), got {th.shape}")
        if not np.all(np.isfinite(th)):
            raise SpecMismatch("theta has non-finite entries")
        if self.k < 0:
            raise SpecMismatch("dualization order k must be >= 0")
        if self.weight not in WEIGHTS:
            raise SpecMismatch(f"weight must be one of {WEIGHTS}")
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)

    @classmethod
    def zeros(cls, m: int, n: int, pieces: int = 8, k: int = 0, **kw) -> "MartingaleSpec":
        return cls(np.zeros((pieces, m, n)), k=k, **kw)

    @classmethod
    def constant(cls, c: float, m: int = 1, n: int = 2, k: int = 0) -> "MartingaleSpec":
        """Every entry of ``v`` equals ``c`` (single piece)."""
        return cls(np.full((1, m, n), float(c)), k=k)

    @property
    def pieces(self) -> int:
        return self.theta.shape[0]

    @property
    def m(self) -> int:
        return self.theta.shape[1]

    @property
    def n(self) -> int:
        return self.theta.shape[2]

    @property
    def flat(self) -> np.ndarray:
        return self.theta.ravel().copy()

    def with_flat(self, vec) -> "MartingaleSpec":
        return replace(self, theta=np.asarray(vec, dtype=float).reshape(self.theta.shape))

    def integrand(self, xbar: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """Sampled ``v`` of shape (P, N, m, n) along factor paths (P, N + 1, n)."""
        P = xbar.shape[0]
        piece = (np.arange(grid.N) * self.pieces) // grid.N
        v = np.broadcast_to(self.theta[piece], (P, grid.N, self.m, self.n))
        if self.weight == "none":
            return v
        logS = xbar[:, :grid.N, 1] - xbar[:, :1, 1]
        if self.weight == "spot":
            w = np.clip(np.exp(logS), 0.0, self.cap)
        else:
            w = np.clip(logS, -self.cap, self.cap)
        return v * w[:, :, None, None]


@dataclass(frozen=True)
class DualProcessPath:
    """Levels ``mu^(0..k)`` on the nodes, array shape (k + 1, P, N + 1, m)."""

    grid: TimeGrid
    levels: np.ndarray

    @property
    def k(self) -> int:
        return self.levels.shape[0] - 1

    @property
    def mu(self) -> np.ndarray:
        """Highest level, the one entering the penalty."""
        return self.levels[-1]


def dual_process(spec: MartingaleSpec, ensemble: PathEnsemble) -> DualProcessPath:
    """Build ``mu^(0..k)`` from the Wiener increments stored in ``ensemble``."""
    grid = ensemble.grid
    P, N, n = ensemble.dW.shape
    if spec.n != n:
        raise SpecMismatch(f"integrand acts on {spec.n} noise components, ensemble has {n}")
    if N != grid.N:
        raise SpecMismatch("increments do not match the time grid")
    v = spec.integrand(ensemble.xbar, grid)
    dM = np.einsum("pjil,pjl->pji", v, ensemble.dW)
    # mu0_j = sum_{d >= j} dM_d, computed as a reversed cumulative sum
    mu = np.zeros((P, N + 1, spec.m))
    mu[:, :N] = np.cumsum(dM[:, ::-1], axis=1)[:, ::-1]
    levels = [mu]
    for _ in range(spec.k):
        nxt = np.zeros_like(mu)
        nxt[:, :N] = -np.cumsum(levels[-1][:, N - 1::-1], axis=1)[:, ::-1] * grid.dt
        levels.append(nxt)
    return DualProcessPath(grid, np.stack(levels))


def penalty(mu: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Per-path ``sum_{j<N} mu_j . u_j dt``; ``u`` is (P, N, m) or (P, N + 1, m)."""
    N = mu.shape[1] - 1
    return np.einsum("pji,pji->p", mu[:, :N], np.asarray(u, dtype=float)[:, :N]) * dt


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float


def _mean_se(x: np.ndarray) -> Estimate:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return Estimate(float(x.mean()) if x.size else 0.0, 0.0)
    return Estimate(float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size)))


def orthogonality_stat(u: np.ndarray, duals: DualProcessPath) -> Estimate:
    """Mean and standard error of the penalty across paths."""
    return _mean_se(penalty(duals.mu, u, duals.grid.dt))


# ---------------------------------------------------------------------------
# pathwise maximisation

@dataclass
class PathwiseResult:
    value: np.ndarray  # (P,)
    flags: np.ndarray  # (P,) True where the optimiser stopped early
    controls: Optional[np.ndarray] = None  # (P, N + 1, m)


def _rate_bounds(p, dt, L):
    return -L * dt, np.minimum(p, L) * dt


def _segment_dp(p, S, mu, y0, dt, params: ModelParams, want_controls: bool):
    """Exact maximiser for one battery and a linear payoff.

    The value-to-go ``V_j`` is concave and piecewise linear on ``[0, C]``. It
    is stored as slopes sorted in decreasing order with segment lengths, plus
    its value at zero. One step is a sup-convolution with a linear function on
    the rate box, i.e. one new segment merged into the sorted list, followed by
    truncation back to ``[0, C]``.
    """
    P, N1 = p.shape
    N, C, L = N1 - 1, params.C, params.L
    K = N + 1
    slopes = np.full((P, K), -np.inf)
    lens = np.zeros((P, K))
    slopes[:, 0] = S[:, N]
    lens[:, 0] = C
    v0 = np.zeros(P)
    q = np.arange(K)[None, :]
    rows = np.arange(P)[:, None]
    store = [] if want_controls else None
    for j in range(N - 1, -1, -1):
        if want_controls:
            store.append((slopes.copy(), lens.copy()))
        A, B = _rate_bounds(p[:, j], dt, L)
        r = mu[:, j, 0] - S[:, j]
        s_new = -r
        pos = np.sum(slopes > s_new[:, None], axis=1)[:, None]
        src = np.where(q > pos, q - 1, q)
        slopes = slopes[rows, src]
        lens = lens[rows, src]
        at = q == pos
        slopes = np.where(at, s_new[:, None], slopes)
        lens = np.where(at, (B - A)[:, None], lens)
        start_val = v0 + r * B
        end = np.cumsum(lens, axis=1)
        beg = end - lens
        Bc = B[:, None]
        cut = np.clip(end, 0.0, Bc) - np.clip(beg, 0.0, Bc)
        with np.errstate(invalid="ignore"):
            v0 = start_val + np.sum(np.where(cut > 0, slopes * cut, 0.0), axis=1)
        lens = np.clip(end, Bc, Bc + C) - np.clip(beg, Bc, Bc + C)
        # segments past the domain keep their slope with zero length
    end = np.cumsum(lens, axis=1)
    beg = end - lens
    y0 = np.broadcast_to(np.asarray(y0, dtype=float).reshape(-1), (P,))
    part = np.clip(end, 0.0, y0[:, None]) - np.clip(beg, 0.0, y0[:, None])
    with np.errstate(invalid="ignore"):
        value = v0 + np.sum(np.where(part > 0, slopes * part, 0.0), axis=1)
    value = value + np.sum(p[:, :N] * S[:, :N], axis=1) * dt
    controls = None
    if want_controls:
        store.reverse()
        controls = np.zeros((P, N + 1, 1))
        y = y0.copy()
        for j in range(N):
            sl, ln = store[j]
            A, B = _rate_bounds(p[:, j], dt, L)
            thr = -(mu[:, j, 0] - S[:, j])[:, None]
            z_lo = np.sum(np.where(sl > thr, ln, 0.0), axis=1)
            z_hi = np.sum(np.where(sl >= thr, ln, 0.0), axis=1)
            z = np.clip(y, z_lo, z_hi)
            z = np.clip(z, np.maximum(0.0, y + A), np.minimum(C, y + B))
            controls[:, j, 0] = (z - y) / dt
            y = z
    return value, controls


def anticipating_objective(Y, p, S, mu, y0, dt, params: ModelParams,
                           crit: RegimeCriterion = RegimeCriterion()):
    """Payoff plus penalty of feasible charge paths ``Y`` (..., P, N, m) holding nodes 1..N."""
    y0 = np.broadcast_to(np.asarray(y0, dtype=float), Y.shape[-3:-2] + Y.shape[-1:])
    y = np.concatenate([np.broadcast_to(y0[:, None, :], Y.shape[:-2] + (1, Y.shape[-1])), Y],
                       axis=-2)
    u = np.diff(y, axis=-2) / dt
    N = u.shape[-2]
    val = np.sum((p[:, :N] - u.sum(axis=-1)) * S[:, :N], axis=-1) * dt
    val = val + np.sum(mu[:, :N] * u, axis=(-2, -1)) * dt
    val = val + S[:, N] * y[..., N, :].sum(axis=-1)
    if not crit.is_zero:
        ybar = _cma_nodes(y)
        phi = regime_penalty(y[..., :N, :], ybar[..., :N, :], u, crit, params=params)
        val = val + phi.sum(axis=-1) * dt
    return val


def _capped_box(z, lo, hi, cap):
    """Euclidean projection of ``z`` (..., m) onto ``{lo <= d <= hi, sum(d) <= cap}``.

    When the clipped point exceeds the cap the answer is ``clip(z - lam)``
    where the total is piecewise linear and decreasing in ``lam``; it is
    evaluated at every breakpoint and interpolated on the bracketing piece.
    """
    lo_, hi_ = lo[..., None], hi[..., None]
    d = np.clip(z, lo_, hi_)
    if z.shape[-1] == 1:
        return np.minimum(d, cap[..., None])
    over = d.sum(axis=-1) > cap
    if not over.any():
        return d
    zs, los, his, caps = z[over], lo_[over], hi_[over], cap[over]
    bps = np.sort(np.concatenate([np.zeros((zs.shape[0], 1)), zs - his, zs - los], axis=-1),
                  axis=-1)
    tot = np.clip(zs[:, None, :] - bps[:, :, None], los[:, None], his[:, None]).sum(axis=-1)
    # first breakpoint where the total drops to the cap; the total at lam = 0 exceeds it
    idx = np.argmax(tot <= caps[:, None], axis=-1)
    r = np.arange(zs.shape[0])
    t0, t1 = tot[r, idx - 1], tot[r, idx]
    l0, l1 = bps[r, idx - 1], bps[r, idx]
    frac = np.where(t0 > t1, (t0 - caps) / np.where(t0 > t1, t0 - t1, 1.0), 1.0)
    lam = l0 + frac * (l1 - l0)
    out = d.copy()
    out[over] = np.clip(zs - lam[:, None], los, his)
    return out


def _project(Y, y0, lo, hi, cap, C, sweeps=200, tol=1e-12):
    """Dykstra projection onto the feasible charge paths.

    ``Y`` (P, N, m) holds nodes 1..N and ``Y_0 = y0`` is fixed. The sets are
    the box ``[0, C]`` and, for even and odd ``j`` separately, the pairs
    ``(Y_j, Y_{j+1})`` whose difference lies in ``[lo_j, hi_j]`` per battery
    with total at most ``cap_j``. Each pair set only constrains the
    difference, so its projection keeps the pair midpoint.
    """
    P, N, m = Y.shape
    y0 = np.broadcast_to(np.asarray(y0, dtype=float), (P, m))

    def box(Z):
        return np.clip(Z, 0.0, C)

    def pairs(Z, parity):
        full = np.concatenate([y0[:, None, :], Z], axis=1)
        js = np.arange(parity, N, 2)
        a, b = full[:, js], full[:, js + 1]
        d = _capped_box(b - a, lo[:, js], hi[:, js], cap[:, js])
        first = (js == 0)[None, :, None]  # y0 is fixed, only Y_1 moves
        mid = 0.5 * (a + b)
        full[:, js] = np.where(first, a, mid - 0.5 * d)
        full[:, js + 1] = np.where(first, a + d, mid + 0.5 * d)
        return full[:, 1:]

    ops = [box, lambda Z: pairs(Z, 0), lambda Z: pairs(Z, 1)]
    incr = [np.zeros_like(Y) for _ in ops]
    X = Y.copy()
    for _ in range(sweeps):
        prev = X
        for i, op in enumerate(ops):
            Z = X + incr[i]
            Xn = op(Z)
            incr[i] = Z - Xn
            X = Xn
        if np.max(np.abs(X - prev)) <= tol * max(C, 1.0):
            break
    return X


def _infeasibility(Y, y0, lo, hi, cap, C):
    """Largest constraint violation per path."""
    full = np.concatenate([np.broadcast_to(y0[:, None, :], (Y.shape[0], 1, Y.shape[2])), Y],
                          axis=1)
    d = np.diff(full, axis=1)
    out = np.maximum(np.max(-Y, axis=(1, 2)), np.max(Y - C, axis=(1, 2)))
    out = np.maximum(out, np.max(lo[:, :, None] - d, axis=(1, 2)))
    out = np.maximum(out, np.max(d - hi[:, :, None], axis=(1, 2)))
    out = np.maximum(out, np.max(d.sum(axis=-1) - cap, axis=1))
    return out


class _PathObjective:
    """Objective, gradient and certificates of the anticipating problem on a batch of paths.

    Charge paths ``Y`` have shape (P, N, m) and hold nodes 1..N.
    """

    def __init__(self, p, S, mu, y0, dt, params: ModelParams, crit):
        P, N1 = p.shape
        self.P, self.N, self.m = P, N1 - 1, mu.shape[-1]
        self.p, self.S, self.mu, self.dt, self.params, self.crit = p, S, mu, dt, params, crit
        N = self.N
        self.y0 = np.broadcast_to(np.asarray(y0, dtype=float), (P, self.m)).copy()
        self.lo = np.full((P, N), -params.L * dt)
        self.hi = np.minimum(p[:, :N], params.L) * dt
        self.cap = p[:, :N] * dt
        self.concave = _is_concave(crit)
        # linear part of the gradient in closed form
        c = (mu[:, :N] - S[:, :N, None]) * dt
        g = c / dt
        g[:, :-1] -= c[:, 1:] / dt
        g[:, -1] += S[:, N, None]
        self.g_lin = g

    def value(self, Z, ix, crit=None):
        crit = self.crit if crit is None else crit
        return anticipating_objective(Z, self.p[ix], self.S[ix], self.mu[ix], self.y0[ix],
                                      self.dt, self.params, crit)

    def grad(self, Z, ix):
        if self.crit.is_zero:
            return self.g_lin[ix]
        # central differences for the regime term only; exact for a quadratic term
        N, m, h = self.N, self.m, 1e-6 * self.params.C
        lin0 = RegimeCriterion()
        E = np.eye(N * m).reshape(N * m, 1, N, m)
        Zp, Zm = Z[None] + h * E, Z[None] - h * E
        fp = self.value(Zp, ix) - self.value(Zp, ix, lin0)
        fm = self.value(Zm, ix) - self.value(Zm, ix, lin0)
        return self.g_lin[ix] + ((fp - fm) / (2 * h)).T.reshape(len(ix), N, m)

    def rates(self, Z, ix):
        return np.diff(np.concatenate([self.y0[ix, None, :], Z], axis=1), axis=1) / self.dt

    def warm_start(self):
        """Better of holding and the optimum of the linear part, per path."""
        ix = np.arange(self.P)
        hold = np.broadcast_to(self.y0[:, None, :], (self.P, self.N, self.m)).copy()
        coef = self.mu[:, :self.N] - self.S[:, :self.N, None] + self.S[:, self.N, None, None]
        u = _linear_oracle(self.p, coef, self.y0, self.dt, self.params)
        lin = self.y0[:, None, :] + np.cumsum(u * self.dt, axis=1)
        f_hold, f_lin = self.value(hold, ix), self.value(lin, ix)
        Y = np.where((f_lin > f_hold)[:, None, None], lin, hold)
        return Y, np.maximum(f_hold, f_lin)

    def fw_gap(self, Z, ix):
        """``max_s grad . (s - Z)`` over feasible ``s``; bounds the suboptimality of a concave objective."""
        # coefficient of u_i is the sum of node gradients after i
        G = np.cumsum(self.grad(Z, ix)[:, ::-1], axis=1)[:, ::-1]
        best = _linear_oracle(self.p[ix], G, self.y0[ix], self.dt, self.params)
        return np.maximum(np.sum(G * (best - self.rates(Z, ix)), axis=(1, 2)) * self.dt, 0.0)

    def finish(self, Y, f, flags, tol):
        """Values, controls and flags; concave objectives get the certified value."""
        controls = np.zeros((self.P, self.N + 1, self.m))
        ix = np.arange(self.P)
        controls[:, :self.N] = self.rates(Y, ix)
        if not self.concave:
            return f, controls, flags
        gap = self.fw_gap(Y, ix)
        return f + gap, controls, gap > tol * (1 + np.abs(f))


def _pga(p, S, mu, y0, dt, params: ModelParams, crit, max_iter=500, tol=1e-8):
    """Projected gradient ascent over charge paths with backtracking.

    The ascent starts from the better of holding and the exact optimum of the
    linear part. For a concave objective the returned value is the iterate's
    objective plus its Frank-Wolfe gap, which bounds the supremum from above
    even when the ascent stalls; the flag is set where that gap exceeds
    ``tol``. For a non-concave objective the value is a local maximum and the
    flag marks an iteration cap or collapsed step.
    """
    ob = _PathObjective(p, S, mu, y0, dt, params, crit)
    P, C = ob.P, params.C
    lo, hi, cap, y0a = ob.lo, ob.hi, ob.cap, ob.y0
    Y, f = ob.warm_start()
    g = ob.grad(Y, np.arange(P))
    step0 = C / (np.max(np.abs(g), axis=(1, 2)) + 1e-300)
    step, max_step = step0.copy(), 64.0 * step0
    done = np.zeros(P, dtype=bool)
    collapsed = np.zeros(P, dtype=bool)
    feas_tol = 1e-9 * max(C, 1.0)
    for it in range(max_iter):
        ix = np.nonzero(~done)[0]
        if ix.size == 0:
            break
        Yi, fi, gi, si = Y[ix], f[ix], g[ix], step[ix]
        cand = _project(Yi + si[:, None, None] * gi, y0a[ix], lo[ix], hi[ix], cap[ix], C)
        fc = ob.value(cand, ix)
        d = cand - Yi
        lin = fi + np.sum(gi * d, axis=(1, 2))
        quad = np.sum(d * d, axis=(1, 2)) / (2 * si)
        # the sufficient-increase test alone can pass for an inexact projection
        # of a long step, so also insist on feasibility and monotone progress
        ok = ((fc >= lin - quad - 1e-12 * (1 + np.abs(fi))) & (fc >= fi)
              & (_infeasibility(cand, y0a[ix], lo[ix], hi[ix], cap[ix], C) <= feas_tol))
        gain = np.where(ok, fc - fi, 0.0)
        Y[ix] = np.where(ok[:, None, None], cand, Yi)
        f[ix] = np.where(ok, fc, fi)
        if ob.concave:
            small = np.zeros(ix.size, dtype=bool)
            if it % 10 == 9:
                small = ob.fw_gap(Y[ix], ix) <= tol * (1 + np.abs(f[ix]))
        else:
            # a small gain only signals convergence while steps are still long
            small = ok & (gain <= tol * (1 + np.abs(f[ix]))) & (si >= step0[ix] / 8)
        stuck = np.max(np.abs(d), axis=(1, 2)) <= 1e-14 * max(C, 1.0)
        step[ix] = np.where(ok, np.minimum(si * 2.0, max_step[ix]), si * 0.5)
        coll = step[ix] < 1e-12 * step0[ix]
        collapsed[ix] |= coll
        done[ix] |= small | stuck | coll
        live = ix[~done[ix]]
        if live.size:
            g[live] = ob.grad(Y[live], live)
    return ob.finish(Y, f, ~done | collapsed, tol)


def _constraint_matrix(N, m):
    """Rows mapping flattened node values (N, m) to per-step increments and their sums."""
    D = np.eye(N) - np.eye(N, k=-1)
    inc = np.kron(D, np.eye(m))
    total = np.kron(D, np.ones((1, m)))
    return inc, total


def _sqp(p, S, mu, y0, dt, params: ModelParams, crit, max_iter=500, tol=1e-8):
    """Per-path SLSQP on the charge path, started from the warm start.

    The increment and selling constraints are linear, so the iterates stay on
    the exact feasible polytope. Values are certified as in ``_pga``.
    """
    from scipy.optimize import minimize
    ob = _PathObjective(p, S, mu, y0, dt, params, crit)
    P, N, m, C = ob.P, ob.N, ob.m, params.C
    Y, f = ob.warm_start()
    inc, total = _constraint_matrix(N, m)
    flags = np.zeros(P, dtype=bool)
    for i in range(P):
        ix = np.array([i])
        first = np.zeros(N * m)
        first[:m] = ob.y0[i]  # increments of node 1 are taken from y0
        first_tot = np.zeros(N)
        first_tot[0] = ob.y0[i].sum()
        lo = np.repeat(ob.lo[i], m)
        hi = np.repeat(ob.hi[i], m)
        cons = [
            {"type": "ineq", "fun": lambda x: inc @ x - first - lo, "jac": lambda x: inc},
            {"type": "ineq", "fun": lambda x: hi - (inc @ x - first), "jac": lambda x: -inc},
        ]
        if m > 1:
            cons.append({"type": "ineq", "fun": lambda x: ob.cap[i] - (total @ x - first_tot),
                         "jac": lambda x: -total})
        fun = lambda x: -float(ob.value(x.reshape(1, N, m), ix)[0])
        jac = lambda x: -ob.grad(x.reshape(1, N, m), ix).ravel()
        res = minimize(fun, Y[i].ravel(), jac=jac, bounds=[(0.0, C)] * (N * m),
                       constraints=cons, method="SLSQP",
                       options={"maxiter": max_iter, "ftol": 1e-14})
        Z = np.clip(res.x.reshape(1, N, m), 0.0, C)
        feasible = _infeasibility(Z, ob.y0[ix], ob.lo[ix], ob.hi[ix], ob.cap[ix], C)[0] <= 1e-9
        fz = ob.value(Z, ix)[0]
        if feasible and fz >= f[i]:
            Y[i], f[i] = Z[0], fz
        flags[i] = not res.success
    return ob.finish(Y, f, flags, tol)


def _is_concave(crit: RegimeCriterion) -> bool:
    return crit.gamma <= 0.0 and not crit.use_phi_hat


def _linear_oracle(p, coef, y0, dt, params: ModelParams):
    """Rates (P, N, m) of a feasible path maximising ``sum_i coef_i . u_i dt``."""
    P, N, m = coef.shape
    mu = np.zeros((P, N + 1, m))
    mu[:, :N] = coef
    zero = np.zeros((P, N + 1))
    if m == 1:
        _, ctrl = _segment_dp(p, zero, mu, y0, dt, params, True)
    else:
        _, ctrl, _ = _lp(p, zero, mu, y0, dt, params)
    return ctrl[:, :N]


def _lp(p, S, mu, y0, dt, params: ModelParams):
    """Per-path linear programme solved with HiGHS; cross-check for the other methods."""
    from scipy.optimize import linprog
    P, N1 = p.shape
    N, m, C, L = N1 - 1, mu.shape[-1], params.C, params.L
    y0a = np.broadcast_to(np.asarray(y0, dtype=float), (P, m))
    tri = np.tril(np.ones((N, N)))
    values = np.empty(P)
    controls = np.zeros((P, N + 1, m))
    flags = np.zeros(P, dtype=bool)
    for i in range(P):
        # variables delta[j, b], flattened battery-major
        cost = -((mu[i, :N] - S[i, :N, None]) + S[i, N]).T.ravel()
        A_cum = np.kron(np.eye(m), tri)
        A = [A_cum, -A_cum]
        b = [np.repeat(C - y0a[i], N), np.repeat(y0a[i], N)]
        if m > 1:
            A.append(np.kron(np.ones((1, m)), np.eye(N)))
            b.append(p[i, :N] * dt)
        hi = np.tile(np.minimum(p[i, :N], L) * dt, m)
        res = linprog(cost, A_ub=np.vstack(A), b_ub=np.concatenate(b),
                      bounds=list(zip(np.full(N * m, -L * dt), hi)), method="highs")
        if res.status != 0:
            flags[i] = True
            values[i] = np.nan
            continue
        delta = res.x.reshape(m, N).T
        values[i] = (-res.fun + np.sum(p[i, :N] * S[i, :N]) * dt + S[i, N] * y0a[i].sum())
        controls[i, :N] = delta / dt
    return values, controls, flags


def pathwise_max(p, S, mu, y0, params: ModelParams, dt: float,
                 crit: RegimeCriterion = RegimeCriterion(), method: str = "auto",
                 want_controls: bool = False, max_iter: int = 500,
                 tol: float = 1e-8) -> PathwiseResult:
    """Supremum over non-adapted feasible controls of payoff plus penalty, per path.

    ``p, S`` are (P, N + 1) and ``mu`` is (P, N + 1, m). Methods: ``"dp"``
    (exact, one battery, no regime term), ``"lp"`` (exact, no regime term),
    ``"sqp"`` (per-path SLSQP, any regime term), ``"pga"`` (batched projected
    gradient ascent, any regime term) and ``"auto"``. The last two are
    certified upper values only for a concave term, i.e. ``gamma <= 0``
    without ``phi_hat``; otherwise they return local maxima.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    mu = np.asarray(mu, dtype=float)
    if mu.ndim == 2:
        mu = mu[None]
    if mu.shape[:2] != p.shape or S.shape != p.shape:
        raise SpecMismatch("price, spot and dual arrays disagree in shape")
    m = mu.shape[-1]
    if m != params.m:
        raise SpecMismatch(f"dual process has {m} components, model has {params.m} batteries")
    linear = crit.is_zero
    if method == "auto":
        method = "dp" if (linear and m == 1) else ("lp" if linear else "sqp")
    if method in ("dp", "lp") and not linear:
        raise ValueError(f"method {method!r} needs a payoff without regime term")
    if method == "dp":
        if m != 1:
            raise ValueError("method 'dp' handles a single battery")
        val, ctrl = _segment_dp(p, S, mu, y0, dt, params, want_controls)
        return PathwiseResult(val, np.zeros(len(val), dtype=bool), ctrl)
    if method == "lp":
        val, ctrl, flags = _lp(p, S, mu, y0, dt, params)
        return PathwiseResult(val, flags, ctrl if want_controls else None)
    if method in ("pga", "sqp"):
        if not _is_concave(crit):
            log.warning("regime term is not concave in the charge path; the pathwise "
                        "maximum is local and the bound may fall below the optimum")
        solver = _pga if method == "pga" else _sqp
        val, ctrl, flags = solver(p, S, mu, y0, dt, params, crit, max_iter, tol)
        return PathwiseResult(val, flags, ctrl if want_controls else None)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# bounds

@dataclass
class BoundResult:
    mean: float
    se: float
    per_path: np.ndarray
    flags: np.ndarray
    k: int
    theta: np.ndarray
    method: str

    @property
    def n_flagged(self) -> int:
        return int(np.sum(self.flags))


def upper_bound(spec: MartingaleSpec, ensemble: PathEnsemble, y0, params: ModelParams,
                crit: RegimeCriterion = RegimeCriterion(), k: Optional[int] = None,
                method: str = "auto", threads: int = 1) -> BoundResult:
    """Monte-Carlo average of the pathwise supremum; ``k`` overrides ``spec.k``."""
    if k is not None and k != spec.k:
        spec = replace(spec, k=k)
    duals = dual_process(spec, ensemble)
    mu = duals.mu
    p, S, dt = ensemble.p, ensemble.S, ensemble.grid.dt
    P = len(ensemble)
    chunks = [(s, min(s + CHUNK, P)) for s in range(0, P, CHUNK)]

    def run(c):
        a, b = c
        return pathwise_max(p[a:b], S[a:b], mu[a:b], y0, params, dt, crit, method)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    vals = np.concatenate([r.value for r in parts])
    flags = np.concatenate([r.flags for r in parts])
    if flags.any():
        log.warning("%d of %d pathwise maximisations stopped early", int(flags.sum()), P)
    est = _mean_se(vals)
    return BoundResult(est.mean, est.se, vals, flags, spec.k, spec.theta.copy(), method)


@dataclass
class SearchResult:
    spec: MartingaleSpec
    bound: BoundResult
    trace: list = field(default_factory=list)  # (evaluation, theta, mean, se)
    exhausted: bool = False


def minimize_over_v(family: MartingaleSpec, ensemble: PathEnsemble, y0, params: ModelParams,
                    crit: RegimeCriterion = RegimeCriterion(), k: Optional[int] = None,
                    budget: int = 40, step: float = 1.0, min_step: float = 1e-3,
                    method: str = "auto", threads: int = 1) -> SearchResult:
    """Coordinate search over the integrand coefficients of ``family``.

    All evaluations share ``ensemble`` (common random numbers). The search
    starts at ``family``'s own coefficients; each coordinate is probed at
    ``+step`` and ``-step`` and the best of the three points is kept. The step
    halves after a sweep without improvement.
    """
    if k is not None:
        family = replace(family, k=k)
    theta = family.flat
    trace = []

    def evaluate(vec):
        res = upper_bound(family.with_flat(vec), ensemble, y0, params, crit, None, method,
                          threads)
        trace.append((len(trace), vec.copy(), res.mean, res.se))
        log.info("eval %d theta=%s bound=%.8g se=%.3g", len(trace), vec, res.mean, res.se)
        return res

    best = evaluate(theta)
    exhausted = False
    while step >= min_step and not exhausted:
        improved = False
        for i in range(theta.size):
            incumbent = theta
            for sign in (1.0, -1.0):
                if len(trace) >= budget:
                    exhausted = True
                    break
                trial = incumbent.copy()
                trial[i] += sign * step
                res = evaluate(trial)
                if res.mean < best.mean:
                    best, theta, improved = res, trial, True
            if exhausted:
                break
        if not improved:
            step *= 0.5
    return SearchResult(family.with_flat(theta), best, trace, exhausted)


@dataclass(frozen=True)
class GapResult:
    gap: float
    se: float
    violation: bool


def duality_gap(lower, upper, n_se: float = 3.0) -> GapResult:
    """``upper.mean - lower.mean`` with root-sum-square standard error.

    ``violation`` is set when the gap is below ``-n_se`` combined standard
    errors, which contradicts weak duality.
    """
    gap = float(upper.mean - lower.mean)
    se = float(np.hypot(upper.se, lower.se))
    return GapResult(gap, se, gap < -n_se * se - 1e-12 * (1 + abs(upper.mean)))


def write_bound_csv(path, results: Sequence[tuple[str, BoundResult]]) -> None:
    """Summary rows: instance, k, theta (semicolon separated), mean, se, n_paths, n_flagged."""
    rows = []
    for name, r in results:
        rows.append([name, str(r.k), ";".join(fmt(t) for t in r.theta.ravel()), fmt(r.mean),
                     fmt(r.se), str(len(r.per_path)), str(r.n_flagged)])
    _write_rows(path, ["instance", "k", "theta", "mean", "se", "n_paths", "n_flagged"], rows)


def write_bound_paths_csv(path, result: BoundResult) -> None:
    rows = [[str(i), fmt(v), str(int(f))] for i, (v, f) in
            enumerate(zip(result.per_path, result.flags))]
    _write_rows(path, ["path_id", "value", "flag"], rows)
