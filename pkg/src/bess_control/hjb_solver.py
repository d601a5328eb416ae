"""Explicit finite-difference solver for the smoothed Bellman equation.

State axes are ordered as: gridded latent factors, charge ``y_1..y_m`` and
(optionally) the moving averages ``ybar_1..ybar_m``. One backward step is

    J_j = Jt + dt * ( market(Jt) + max_u [ sum_i f_i(u) * D_i Jt + h(u) ] )

where ``Jt`` is the next layer after transporting the moving-average axes,
``market`` is the upwind drift plus central diffusion operator on the factor
axes, and ``D_i`` is the upwind difference along charge axis ``i`` oriented
by the sign of the smoothed charge rate ``f_i``. Charge faces are inert for
outward motion, matching the clamped dynamics of :mod:`model_core`.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .market_sim import DiffusionSpec, PathEnsemble, deterministic_path, simulate
from .model_core import (ModelParams, RegimeCriterion, TimeGrid, _write_rows,
                         batch_payoff, fmt, project_rates)
from .smoothing import SmoothedModel

MAX_AXES = 4
TIE_TOL = 1e-10
SELL_TOL = 1e-12
CAND_BLOCK = 4_000_000  # candidate x node elements evaluated at once


class StabilityError(RuntimeError):
    def __init__(self, msg, courant, required_substeps):
        super().__init__(msg)
        self.courant = courant
        self.required_substeps = required_substeps


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class StateGrid:
    factor_idx: tuple  # latent factor indices with a grid axis
    factor_axes: tuple  # node arrays, one per gridded factor
    y_axis: np.ndarray  # shared by all batteries; must include 0 and C
    m: int = 1
    ybar_axis: Optional[np.ndarray] = None

    def __post_init__(self):
        for a in self.axes:
            d = np.diff(a)
            if a.size < 2 or np.any(d <= 0):
                raise ValueError("axis nodes must be strictly increasing")
            if not np.allclose(d, d[0], rtol=1e-9, atol=0):
                raise ValueError("axis nodes must be equally spaced")
        if self.y_axis[0] != 0.0:
            raise ValueError("charge axis must start at 0")
        if self.ndim > MAX_AXES:
            raise DimensionError(
                f"{self.ndim} gridded axes exceed the limit of {MAX_AXES}; "
                "use dual_bound.upper_bound for high-dimensional instances")

    @property
    def has_cma(self) -> bool:
        return self.ybar_axis is not None

    @property
    def axes(self) -> list:
        out = list(self.factor_axes) + [self.y_axis] * self.m
        if self.has_cma:
            out += [self.ybar_axis] * self.m
        return out

    @property
    def names(self) -> list:
        out = [f"x_{k + 1}" for k in self.factor_idx] + [f"y_{i + 1}" for i in range(self.m)]
        if self.has_cma:
            out += [f"ybar_{i + 1}" for i in range(self.m)]
        return out

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes)

    @property
    def ndim(self) -> int:
        return len(self.factor_axes) + self.m * (2 if self.has_cma else 1)

    @property
    def spacing(self) -> list:
        return [a[1] - a[0] for a in self.axes]

    @property
    def nf(self) -> int:
        return len(self.factor_idx)

    def y_ax(self, i):
        return self.nf + i

    def ybar_ax(self, i):
        return self.nf + self.m + i

    def coord(self, ax):
        """Node values of axis ``ax`` shaped to broadcast against the grid."""
        shape = [1] * self.ndim
        shape[ax] = -1
        return self.axes[ax].reshape(shape)

    def state_point(self, spec_x0, y0, ybar0=None) -> np.ndarray:
        y0 = np.broadcast_to(np.asarray(y0, dtype=float), (self.m,))
        pt = [spec_x0[k] for k in self.factor_idx] + list(y0)
        if self.has_cma:
            pt += list(y0 if ybar0 is None else np.broadcast_to(ybar0, (self.m,)))
        return np.asarray(pt, dtype=float)

    @classmethod
    def build(cls, spec: DiffusionSpec, tgrid: TimeGrid, params: ModelParams,
              n_y: int = 21, factors: Optional[Sequence[int]] = None,
              n_factor: int = 31, include_cma: bool = False, width_sd: float = 4.0,
              pilot_paths: int = 400, seed: int = 0) -> "StateGrid":
        """Charge axis on [0, C]; each factor box covers mean +- ``width_sd`` sd of a pilot run.

        By default every non-constant factor of a stochastic spec is gridded and
        a deterministic spec gets no factor axes.
        """
        if factors is None:
            factors = () if spec.deterministic else tuple(
                k for k in range(spec.n) if k not in spec.constant_factors)
        factors = tuple(int(k) for k in factors)
        axes = []
        if factors:
            ens = simulate(spec, tgrid, pilot_paths, seed)
            for k in factors:
                xk = ens.xbar[:, :, k]
                mu, sd = xk.mean(axis=0), xk.std(axis=0)
                lo, hi = float(np.min(mu - width_sd * sd)), float(np.max(mu + width_sd * sd))
                if hi - lo < 1e-9:
                    lo, hi = spec.x0[k] - 0.5, spec.x0[k] + 0.5
                axes.append(np.linspace(lo, hi, n_factor))
        y = np.linspace(0.0, params.C, n_y)
        return cls(factors, tuple(axes), y, params.m, y.copy() if include_cma else None)


@dataclass
class FeedbackPolicy:
    grid: StateGrid
    tgrid: TimeGrid
    controls: np.ndarray  # (N, *grid.shape, m)
    params: ModelParams

    def control_at(self, j: int, points: np.ndarray, mode: str = "linear"):
        """Controls (P, m) at state points (P, ndim); returns ``(u, n_clamped)``."""
        vals = np.moveaxis(self.controls[j], -1, 0)
        out = np.empty((points.shape[0], self.grid.m))
        clamped = 0
        for i in range(self.grid.m):
            out[:, i], clamped = interpolate(vals[i], self.grid.axes, points, mode)
        return out, clamped


@dataclass
class ValueGrid:
    grid: StateGrid
    tgrid: TimeGrid
    eps: float
    values: np.ndarray  # (N + 1, *grid.shape)
    policy: Optional[FeedbackPolicy] = field(default=None, repr=False)
    substeps: int = 1

    def at(self, point, j: int = 0) -> float:
        v, _ = interpolate(self.values[j], self.grid.axes, np.atleast_2d(point))
        return float(v[0])


def interpolate(values, axes, points, mode: str = "linear"):
    """Multilinear (or nearest-node) lookup with clamping to the grid box."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    P, d = points.shape
    idx, wts = [], []
    clamped = np.zeros(P, dtype=bool)
    for k in range(d):
        a = axes[k]
        x = points[:, k]
        out = (x < a[0] - 1e-12) | (x > a[-1] + 1e-12)
        clamped |= out
        x = np.clip(x, a[0], a[-1])
        i0 = np.clip(np.searchsorted(a, x, side="right") - 1, 0, a.size - 2)
        w = (x - a[i0]) / (a[i0 + 1] - a[i0])
        if mode == "nearest":
            w = (w >= 0.5).astype(float)
        idx.append(i0)
        wts.append(w)
    res = np.zeros(P)
    for corner in itertools.product((0, 1), repeat=d):
        w = np.ones(P)
        sel = []
        for k, c in enumerate(corner):
            w = w * (wts[k] if c else 1.0 - wts[k])
            sel.append(idx[k] + c)
        res += w * values[tuple(sel)]
    return res, int(clamped.sum())


class _Problem:
    """Precomputed per-step coefficients for one solve."""

    def __init__(self, spec, sgrid: StateGrid, tgrid: TimeGrid, model: SmoothedModel,
                 substeps: int):
        self.spec, self.g, self.model = spec, sgrid, model
        self.params = model.params
        self.fine = tgrid.refine(substeps)
        self.dt = self.fine.dt
        self.substeps = substeps
        self.t0 = tgrid.t0
        ungridded = [k for k in range(spec.n) if k not in sgrid.factor_idx]
        self._check_ungridded(ungridded)
        self.det_path = deterministic_path(spec, self.fine)
        fshape = tuple(a.size for a in sgrid.factor_axes)
        self.fshape = fshape
        pad = (1,) * (sgrid.ndim - sgrid.nf)
        self.fpad = pad
        self._fmesh = [m.ravel() for m in np.meshgrid(*sgrid.factor_axes, indexing="ij")]
        self.Y = np.stack(np.broadcast_arrays(*[sgrid.coord(sgrid.y_ax(i))
                                                for i in range(sgrid.m)]), axis=-1)
        self.Y = np.broadcast_to(self.Y, sgrid.shape + (sgrid.m,))
        if sgrid.has_cma:
            self.YB = np.stack(np.broadcast_arrays(*[sgrid.coord(sgrid.ybar_ax(i))
                                                     for i in range(sgrid.m)]), axis=-1)
            self.YB = np.broadcast_to(self.YB, sgrid.shape + (sgrid.m,))
        else:
            self.YB = self.Y

    def _check_ungridded(self, ungridded):
        if self.spec.deterministic or not ungridded:
            return
        rng = np.random.default_rng(7)
        x = self.spec.x0 + rng.normal(scale=1.0, size=(8, self.spec.n))
        b = np.asarray(self.spec.diffusion(x, 0.0))
        if np.any(b[:, ungridded, :] != 0.0):
            raise DimensionError(f"factors {ungridded} are stochastic but have no grid axis")

    def factors_at(self, q: int) -> np.ndarray:
        """Full factor vectors on the factor grid at fine step ``q``, shape (Pf, n)."""
        npts = int(np.prod(self.fshape)) if self.fshape else 1
        X = np.repeat(self.det_path[q][None, :], npts, axis=0)
        for k, mesh in zip(self.g.factor_idx, self._fmesh):
            X[:, k] = mesh
        return X

    def market_coeffs(self, q: int):
        """Return ``(p, S, b, a)`` broadcastable to the grid; ``b`` list per factor axis."""
        t = self.fine.times[q]
        X = self.factors_at(q)
        shp = (self.fshape or ()) + self.fpad
        p = np.exp(X[:, 0]).reshape(shp)
        S = np.exp(X[:, 1]).reshape(shp)
        b, a = [], None
        if self.g.nf:
            gvec = np.asarray(self.spec.drift(X, t), dtype=float)
            beta = np.asarray(self.spec.diffusion(X, t), dtype=float)
            fi = list(self.g.factor_idx)
            b = [gvec[:, k].reshape(shp) for k in fi]
            cov = np.einsum("pkl,pjl->pkj", beta, beta)[:, fi][:, :, fi]
            a = [[cov[:, r, c].reshape(shp) for c in range(len(fi))] for r in range(len(fi))]
        return p, S, b, a

    def courant(self, q: int) -> float:
        _, _, b, a = self.market_coeffs(q)
        h = self.g.spacing
        c = 0.0
        if self.g.nf:
            tot = 0.0
            for r in range(self.g.nf):
                tot = tot + np.abs(b[r]) / h[r] + a[r][r] / h[r] ** 2
                for s in range(self.g.nf):
                    if s != r:
                        tot = tot + np.abs(a[r][s]) / (2 * h[r] * h[s])
            c = float(np.max(tot))
        c += self.g.m * self.params.L / h[self.g.y_ax(0)]
        return c * self.dt


def _pad_linear(J, ax):
    lo = 2 * np.take(J, [0], axis=ax) - np.take(J, [1], axis=ax)
    hi = 2 * np.take(J, [-1], axis=ax) - np.take(J, [-2], axis=ax)
    return np.concatenate([lo, J, hi], axis=ax)


def _sl(nd, ax, s):
    out = [slice(None)] * nd
    out[ax] = s
    return tuple(out)


def market_operator(J, b, a, h, nf):
    """Upwind drift plus central diffusion on the first ``nf`` axes (linear ghost nodes)."""
    nd = J.ndim
    out = np.zeros_like(J)
    padded = {}
    for r in range(nf):
        Jp = _pad_linear(J, r)
        padded[r] = Jp
        fwd = (Jp[_sl(nd, r, slice(2, None))] - J) / h[r]
        bwd = (J - Jp[_sl(nd, r, slice(0, -2))]) / h[r]
        out += np.maximum(b[r], 0) * fwd + np.minimum(b[r], 0) * bwd
        d2 = (Jp[_sl(nd, r, slice(2, None))] - 2 * J + Jp[_sl(nd, r, slice(0, -2))]) / h[r] ** 2
        out += 0.5 * a[r][r] * d2
    for r in range(nf):
        for s in range(r + 1, nf):
            if np.all(a[r][s] == 0):
                continue
            Jp = _pad_linear(padded[r], s)
            ip, im = slice(2, None), slice(0, -2)

            def pick(sr, ss):
                sel = [slice(None)] * nd
                sel[r], sel[s] = sr, ss
                return Jp[tuple(sel)]

            cross = (pick(ip, ip) - pick(ip, im) - pick(im, ip) + pick(im, im)) / (4 * h[r] * h[s])
            out += a[r][s] * cross  # a_rs = a_sr, both halves of the trace
    return out


def _transport_cma(J, prob: _Problem, t: float):
    """Move every ybar axis along its exact discrete update (interpolation at the departure point)."""
    g = prob.g
    coef = prob.dt / (t - prob.t0 + prob.dt)
    nd = J.ndim
    for i in range(g.m):
        ax = g.ybar_ax(i)
        ybar = g.coord(ax)
        y = g.coord(g.y_ax(i))
        dep = np.broadcast_to(ybar + coef * (y - ybar), J.shape)
        a = g.ybar_axis
        i0 = np.clip(np.searchsorted(a, dep, side="right") - 1, 0, a.size - 2)
        w = np.clip((dep - a[i0]) / (a[1] - a[0]), 0.0, 1.0)
        J = (1 - w) * np.take_along_axis(J, i0, axis=ax) + w * np.take_along_axis(J, i0 + 1, axis=ax)
    return J


def _charge_diffs(J, prob: _Problem):
    g = prob.g
    nd = J.ndim
    fwd, bwd = [], []
    for i in range(g.m):
        ax = g.y_ax(i)
        h = g.spacing[ax]
        d = np.diff(J, axis=ax) / h
        zero = np.zeros_like(np.take(J, [0], axis=ax))
        fwd.append(np.concatenate([d, zero], axis=ax))  # inert charging at y = C
        bwd.append(np.concatenate([zero, d], axis=ax))  # inert discharging at y = 0
    return fwd, bwd


def _candidate_sets(m, n_controls, controls):
    """Per-battery control meshes as (ncand, m) arrays, either fractions of the box or absolute values."""
    if controls is not None:
        mesh = np.unique(np.asarray(controls, dtype=float))
        return np.array(list(itertools.product(mesh, repeat=m))), "absolute"
    frac = np.linspace(0.0, 1.0, n_controls)
    return np.array(list(itertools.product(frac, repeat=m))), "fraction"


def solve(spec: DiffusionSpec, sgrid: StateGrid, tgrid: TimeGrid, model: SmoothedModel,
          controls: Optional[Sequence[float]] = None, n_controls: int = 21,
          substeps: int = 1, terminal_offset=0.0, refine: Optional[bool] = None):
    """Backward sweep from ``T`` to ``t0``; returns ``(ValueGrid, FeedbackPolicy)``.

    ``controls`` fixes an absolute per-battery mesh (clipped to the node's box
    ``[-L, min(p, L)]``); otherwise ``n_controls`` equispaced points on the box
    plus ``u = 0`` are used, with one local refinement pass when the reward is
    nonlinear in ``u``. Raises :class:`StabilityError` if the explicit step is
    too long.
    """
    if sgrid.m != model.params.m:
        raise ValueError("state grid and model disagree on the battery count")
    if model.crit.needs_cma and not sgrid.has_cma:
        raise ValueError("criterion uses moving averages but the grid has no ybar axes")
    if sgrid.y_axis[-1] != model.params.C:
        raise ValueError("charge axis must end at C")
    prob = _Problem(spec, sgrid, tgrid, model, substeps)
    nsteps = prob.fine.N
    worst = max(prob.courant(q) for q in range(nsteps))
    if worst > 1.0 + 1e-12:
        need = int(math.ceil(worst * substeps - 1e-9))
        raise StabilityError(
            f"explicit step unstable: Courant number {worst:.4g} > 1; "
            f"use substeps >= {need} (dt <= {prob.dt / worst:.4g})", worst, need)
    if refine is None:
        refine = model.crit.use_phi_hat and controls is None

    cands, kind = _candidate_sets(sgrid.m, n_controls, controls)
    shape = sgrid.shape
    values = np.empty((tgrid.N + 1,) + shape)
    pol = np.empty((tgrid.N,) + shape + (sgrid.m,))
    pN, SN, _, _ = prob.market_coeffs(nsteps)
    J = np.broadcast_to(model.terminal(SN, prob.Y), shape) + terminal_offset
    J = np.array(J, dtype=float)
    values[-1] = J
    L = model.params.L
    for q in range(nsteps - 1, -1, -1):
        t = prob.fine.times[q]
        p, S, b, a = prob.market_coeffs(q)
        Jt = _transport_cma(J, prob, t) if sgrid.has_cma else J
        hi = np.broadcast_to(np.minimum(p, L), shape)
        fwd, bwd = _charge_diffs(Jt, prob)
        H, U = _maximise(prob, cands, kind, hi, fwd, bwd, p, S, t)
        if refine:
            H, U = _refine(prob, H, U, hi, fwd, bwd, p, S, t, n_controls)
        M = market_operator(Jt, b, a, sgrid.spacing, sgrid.nf) if sgrid.nf else 0.0
        J = Jt + prob.dt * (M + H)
        if q % substeps == 0:
            values[q // substeps] = J
            pol[q // substeps] = U
    policy = FeedbackPolicy(sgrid, tgrid, pol, model.params)
    vg = ValueGrid(sgrid, tgrid, model.eps, values, policy, substeps)
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("value grid contains non-finite entries")
    return vg, policy


def extract_policy(value: ValueGrid) -> FeedbackPolicy:
    """The argmax controls recorded during :func:`solve`."""
    if value.policy is None:
        raise ValueError("value grid carries no policy")
    return value.policy


def _controls_for(cand, kind, hi, L):
    c = cand.reshape((-1,) + (1,) * hi.ndim)
    if kind == "fraction":
        return -L + c * (hi[None] + L)
    return np.minimum(np.maximum(c, -L), hi[None])


def _hamiltonian(prob, U, fwd, bwd, p, S, t):
    """Hamiltonian for stacked controls ``U`` of shape (k, *grid, m)."""
    model = prob.model
    f = model.drift(prob.Y[None], U)
    conv = 0.0
    for i in range(prob.g.m):
        fi = f[..., i]
        conv = conv + np.maximum(fi, 0) * fwd[i][None] + np.minimum(fi, 0) * bwd[i][None]
    H = conv + model.reward(prob.Y[None], prob.YB[None], U, p, S, t)
    if prob.g.m > 1:
        # selling rate p - sum(u) must stay nonnegative
        H = np.where(U.sum(axis=-1) > p + SELL_TOL * (1.0 + p), -np.inf, H)
    return H


def _blocks(ncand, nnodes):
    step = max(1, CAND_BLOCK // max(nnodes, 1))
    return [(s, min(s + step, ncand)) for s in range(0, ncand, step)]


def _build_U(cands, kind, hi, L):
    return np.stack([_controls_for(cands[:, i], kind, hi, L) for i in range(cands.shape[1])],
                    axis=-1)


def _select(U, H, Hmax):
    """Index-free tie-break inside one candidate block: returns (u, key) of the preferred near-maximiser."""
    ok = H >= Hmax - TIE_TOL * (1.0 + np.abs(Hmax))
    key = np.where(ok, np.abs(U).sum(axis=-1), np.inf)
    tie = ok & (key <= key.min(axis=0) + 1e-12)
    for i in range(U.shape[-1]):
        v = np.where(tie, U[..., i], np.inf)
        tie &= U[..., i] <= v.min(axis=0) + 1e-12
    first = np.argmax(tie, axis=0)
    u = np.take_along_axis(U, first[None, ..., None], axis=0)[0]
    k = np.take_along_axis(key, first[None], axis=0)[0]
    return u, k


def _maximise(prob, cands, kind, hi, fwd, bwd, p, S, t):
    L = prob.params.L
    shape = prob.g.shape
    nnodes = int(np.prod(shape))
    zero = np.zeros((1, prob.g.m))  # u = 0 is always a candidate
    blocks = [(zero, "absolute")] + [(cands[s:e], kind) for s, e in _blocks(len(cands), nnodes)]
    keep = len(cands) * nnodes <= CAND_BLOCK
    cache = []
    Hmax = np.full(shape, -np.inf)
    for c, k in blocks:
        U = _build_U(c, k, hi, L)
        H = _hamiltonian(prob, U, fwd, bwd, p, S, t)
        Hmax = np.maximum(Hmax, H.max(axis=0))
        if keep:
            cache.append((U, H))
    best_u = np.zeros(shape + (prob.g.m,))
    best_key = np.full(shape, np.inf)
    for b, (c, k) in enumerate(blocks):
        if keep:
            U, H = cache[b]
        else:
            U = _build_U(c, k, hi, L)
            H = _hamiltonian(prob, U, fwd, bwd, p, S, t)
        u, key = _select(U, H, Hmax)
        better = key < best_key - 1e-12
        with np.errstate(invalid="ignore"):
            same = np.isfinite(key) & (np.abs(key - best_key) <= 1e-12)
        if np.any(same):
            better |= same & _lex_less(u, best_u)
        best_key = np.where(better, key, best_key)
        best_u = np.where(better[..., None], u, best_u)
    return Hmax, best_u


def _lex_less(a, b):
    less = np.zeros(a.shape[:-1], dtype=bool)
    eq = np.ones(a.shape[:-1], dtype=bool)
    for i in range(a.shape[-1]):
        less |= eq & (a[..., i] < b[..., i] - 1e-12)
        eq &= np.abs(a[..., i] - b[..., i]) <= 1e-12
    return less


def _refine(prob, H, U, hi, fwd, bwd, p, S, t, n_controls):
    L = prob.params.L
    m = prob.g.m
    spacing = (hi + L) / max(n_controls - 1, 1)
    offs = np.linspace(-1.0, 1.0, 21)
    for combo in itertools.product(offs, repeat=m):
        Uc = np.stack([np.clip(U[..., i] + combo[i] * spacing, -L, hi) for i in range(m)],
                      axis=-1)
        Hc = _hamiltonian(prob, Uc[None], fwd, bwd, p, S, t)[0]
        better = Hc > H + TIE_TOL * (1.0 + np.abs(H))
        H = np.where(better, Hc, H)
        U = np.where(better[..., None], Uc, U)
    return H, U


def hamiltonian_residual(value: ValueGrid, spec: DiffusionSpec, model: SmoothedModel,
                         n_controls: int = 21) -> np.ndarray:
    """Max interior residual per time layer of the semi-discrete equation evaluated at the computed layer.

    The explicit scheme satisfies its own update exactly; evaluating the spatial
    operator at ``J_j`` instead of ``J_{j+1}`` measures the time truncation error.
    """
    g, tgrid = value.grid, value.tgrid
    prob = _Problem(spec, g, tgrid, model, 1)
    cands, kind = _candidate_sets(g.m, n_controls, None)
    interior = tuple(slice(1, -1) for _ in range(g.ndim))
    out = np.empty(tgrid.N)
    for j in range(tgrid.N):
        t = tgrid.times[j]
        p, S, b, a = prob.market_coeffs(j)
        J = value.values[j]
        Jt = _transport_cma(J, prob, t) if g.has_cma else J
        hi = np.broadcast_to(np.minimum(p, model.params.L), g.shape)
        fwd, bwd = _charge_diffs(Jt, prob)
        H, _ = _maximise(prob, cands, kind, hi, fwd, bwd, p, S, t)
        M = market_operator(Jt, b, a, g.spacing, g.nf) if g.nf else 0.0
        R = (value.values[j + 1] - J) / tgrid.dt + (Jt - J) / tgrid.dt + M + H
        out[j] = float(np.max(np.abs(R[interior]))) if all(s > 2 for s in g.shape) else float(np.max(np.abs(R)))
    return out


@dataclass
class EpsRefinement:
    eps: np.ndarray
    values: np.ndarray
    diffs: np.ndarray
    limit: float
    observed_ratio: float
    monotone: bool
    warnings: list


def eps_refine(spec: DiffusionSpec, sgrid: StateGrid, tgrid: TimeGrid, params: ModelParams,
               schedule: Sequence[float], y0, crit: RegimeCriterion = RegimeCriterion(),
               mollified: bool = False, **solve_kwargs) -> EpsRefinement:
    """Values ``J_eps(x0, t0)`` along a decreasing schedule and an extrapolated limit.

    The limit assumes first-order convergence in ``eps`` (Richardson with the
    last ratio of the schedule); non-contracting differences are reported.
    """
    eps = np.asarray(schedule, dtype=float)
    if eps.size < 3 or np.any(np.diff(eps) >= 0):
        raise ValueError("need a strictly decreasing schedule with at least 3 entries")
    x0 = sgrid.state_point(spec.x0, y0)
    vals = []
    for e in eps:
        vg, _ = solve(spec, sgrid, tgrid, SmoothedModel(params, float(e), crit, mollified),
                      **solve_kwargs)
        vals.append(vg.at(x0))
    vals = np.asarray(vals)
    diffs = np.diff(vals)
    r = eps[-1] / eps[-2]
    limit = float((vals[-1] - r * vals[-2]) / (1.0 - r))
    warnings = []
    absd = np.abs(diffs)
    monotone = bool(np.all(absd[1:] <= absd[:-1] + 1e-12))
    if not monotone:
        warnings.append("differences do not contract along the schedule")
    ratio = float(absd[-1] / absd[-2]) if absd[-2] > 0 else 0.0
    if ratio > 1.0:
        warnings.append(f"diverging differences (ratio {ratio:.3g})")
    return EpsRefinement(eps, vals, diffs, limit, ratio, monotone, warnings)


@dataclass
class PolicyEvaluation:
    mean: float
    se: float
    per_path: np.ndarray
    controls: np.ndarray  # effective rates (P, N + 1, m)
    n_clamped: int


def _policy_controls(policy: FeedbackPolicy, xbar: np.ndarray, y0, mode: str):
    """Realised rates (P, N + 1, m) of ``policy`` along factor paths ``xbar``."""
    g, tg = policy.grid, policy.tgrid
    P, m, dt = xbar.shape[0], g.m, tg.dt
    C, L = policy.params.C, policy.params.L
    y = np.broadcast_to(np.asarray(y0, dtype=float), (P, m)).copy()
    u = np.zeros((P, tg.N + 1, m))
    csum = np.zeros((P, m))
    clamped = 0
    p = np.exp(xbar[:, :, 0])
    for j in range(tg.N):
        ybar = y if j == 0 else csum / j
        cols = [xbar[:, j, k] for k in g.factor_idx] + [y[:, i] for i in range(m)]
        if g.has_cma:
            cols += [ybar[:, i] for i in range(m)]
        uj, c = policy.control_at(j, np.column_stack(cols), mode)
        clamped += c
        uj = project_rates(uj, p[:, j], L)
        y_next = np.clip(y + uj * dt, 0.0, C)
        # realised rate, zero where a face blocks motion; a blocked discharge can
        # lift the total charge rate above production, so project again
        uj = project_rates((y_next - y) / dt, p[:, j], L)
        y_next = np.clip(y + uj * dt, 0.0, C)
        u[:, j] = uj
        csum += y
        y = y_next
    return u, clamped


def evaluate_policy(policy: FeedbackPolicy, ensemble: PathEnsemble, y0,
                    crit: RegimeCriterion = RegimeCriterion(), mode: str = "linear",
                    threads: int = 1) -> PolicyEvaluation:
    """Monte-Carlo value of a feedback policy under the clipped dynamics.

    The payoff is evaluated on the realised rate ``(y_{j+1} - y_j)/dt``, so a
    control pushing into a face is charged as the inert control it actually is.
    """
    if ensemble.grid != policy.tgrid:
        raise ValueError("ensemble and policy time grids differ")
    P = len(ensemble)
    chunks = [(s, min(s + 1024, P)) for s in range(0, P, 1024)]

    def run(c):
        return _policy_controls(policy, ensemble.xbar[c[0]:c[1]], y0, mode)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    u = np.concatenate([pt[0] for pt in parts])
    clamped = sum(pt[1] for pt in parts)
    vals, _, _ = batch_payoff(ensemble.p, ensemble.S, u, y0, ensemble.grid.dt,
                              policy.params, crit)
    se = float(vals.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    return PolicyEvaluation(float(vals.mean()), se, vals, u, clamped)


def zero_policy(sgrid: StateGrid, tgrid: TimeGrid, params: ModelParams) -> FeedbackPolicy:
    return FeedbackPolicy(sgrid, tgrid, np.zeros((tgrid.N,) + sgrid.shape + (sgrid.m,)), params)


def write_value_csv(path, value: ValueGrid, layers: Optional[Sequence[int]] = None) -> None:
    """Long format: t, axis coordinates, value."""
    g = value.grid
    layers = range(value.tgrid.N + 1) if layers is None else layers
    mesh = [m.ravel() for m in np.meshgrid(*g.axes, indexing="ij")]
    rows = []
    times = value.tgrid.times
    for j in layers:
        flat = value.values[j].ravel()
        for r in range(flat.size):
            rows.append([fmt(times[j])] + [fmt(m[r]) for m in mesh] + [fmt(flat[r])])
    _write_rows(path, ["t"] + g.names + ["value"], rows)


def write_policy_csv(path, policy: FeedbackPolicy, layers: Optional[Sequence[int]] = None) -> None:
    """Long format: t, axis coordinates, u_1..u_m."""
    g = policy.grid
    layers = range(policy.tgrid.N) if layers is None else layers
    mesh = [m.ravel() for m in np.meshgrid(*g.axes, indexing="ij")]
    rows = []
    times = policy.tgrid.times
    for j in layers:
        flat = policy.controls[j].reshape(-1, g.m)
        for r in range(flat.shape[0]):
            rows.append([fmt(times[j])] + [fmt(m[r]) for m in mesh] + [fmt(v) for v in flat[r]])
    _write_rows(path, ["t"] + g.names + [f"u_{i + 1}" for i in range(g.m)], rows)
